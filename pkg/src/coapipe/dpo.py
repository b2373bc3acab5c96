"""Preference-optimization kernel on a bigram toy policy.

The objective compares, per pair, how much more likely the policy makes the
chosen response than the frozen reference does, against the same quantity
for the rejected response:

    margin = beta * ((lp_chosen - ref_chosen) - (lp_rejected - ref_rejected))
    loss   = softplus(-margin)

Sequence log-probabilities come from a first-order (bigram) categorical
policy: a (vocab, vocab) logits table whose rows are next-token
distributions. That is the smallest policy class where sequence-level
ratios are non-trivial while every gradient stays hand-checkable, so the
objective, its analytic gradients and the SFT NLL can all be verified
against central finite differences at double precision.

Sequence log-probs are plain sums over tokens (no length normalization);
a length-normalized mode exists behind a flag for experiments only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    NonFiniteInputError,
    TokenOutOfRangeError,
    ValidationError,
)
from .fileio import atomic_write_text, read_jsonl, write_jsonl

LN2 = math.log(2.0)

Pair = tuple[int, Sequence[int], Sequence[int]]  # (prompt_last, chosen, rejected)


# -- policy ------------------------------------------------------------


@dataclass
class ToyPolicy:
    """Bigram policy: logits[prev, next]; softmax rows give P(next | prev)."""

    logits: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[0] != self.logits.shape[1]:
            raise ValidationError("logits must be a square (vocab, vocab) table")
        if not np.all(np.isfinite(self.logits)):
            raise NonFiniteInputError("logits must be finite")

    @property
    def vocab_size(self) -> int:
        return int(self.logits.shape[0])

    @classmethod
    def uniform(cls, vocab_size: int) -> "ToyPolicy":
        return cls(np.zeros((vocab_size, vocab_size)))

    @classmethod
    def random_init(cls, vocab_size: int, scale: float = 1.0, seed: int = 0) -> "ToyPolicy":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((vocab_size, vocab_size)) * scale)

    def freeze_reference(self) -> "ToyPolicy":
        """Snapshot current logits as the frozen reference."""
        self.reference = self.logits.copy()
        return self

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(
            self.logits.copy(),
            None if self.reference is None else self.reference.copy(),
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def _check_tokens(tokens: Sequence[int], vocab_size: int, what: str) -> None:
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise TokenOutOfRangeError(f"{what} token {t} outside vocab of {vocab_size}")


def token_logprobs(
    policy: ToyPolicy,
    prompt_last_token: int,
    response: Sequence[int],
    use_reference: bool = False,
) -> list[float]:
    """Per-token log-probabilities of a response, chaining from the prompt."""
    if not response:
        raise ValidationError("response must be non-empty")
    _check_tokens([prompt_last_token], policy.vocab_size, "prompt")
    _check_tokens(response, policy.vocab_size, "response")
    table = policy.reference if use_reference else policy.logits
    if table is None:
        raise ValidationError("policy has no frozen reference")
    log_probs = _log_softmax(np.asarray(table, dtype=np.float64))
    out: list[float] = []
    prev = int(prompt_last_token)
    for token in response:
        out.append(float(log_probs[prev, int(token)]))
        prev = int(token)
    return out


def sequence_logprob(
    policy: ToyPolicy,
    prompt_last_token: int,
    response: Sequence[int],
    use_reference: bool = False,
    length_normalized: bool = False,
) -> float:
    """Sum of per-token log-probabilities (exact, fsum).

    The plain sum matches the ratio-of-sequence-probabilities objective and
    is what training and acceptance use; length_normalized (mean per token)
    is an experimentation mode only.
    """
    per_token = token_logprobs(policy, prompt_last_token, response, use_reference)
    total = float(math.fsum(per_token))
    return total / len(per_token) if length_normalized else total


@dataclass(frozen=True)
class TokenLogprobView:
    """Per-token log-probs of one response under the policy and reference."""

    response_token_ids: tuple[int, ...]
    per_token_logprob_policy: tuple[float, ...]
    per_token_logprob_reference: tuple[float, ...]

    def __post_init__(self):
        n = len(self.response_token_ids)
        if n < 1:
            raise ValidationError("view must cover at least one token")
        if (
            len(self.per_token_logprob_policy) != n
            or len(self.per_token_logprob_reference) != n
        ):
            raise ValidationError("per-token lists must share the response length")
        for value in self.per_token_logprob_policy + self.per_token_logprob_reference:
            if not math.isfinite(value):
                raise NonFiniteInputError("per-token logprobs must be finite")
            if value > 0:
                raise ValidationError("logprobs must be <= 0")

    @property
    def policy_total(self) -> float:
        return float(math.fsum(self.per_token_logprob_policy))

    @property
    def reference_total(self) -> float:
        return float(math.fsum(self.per_token_logprob_reference))


def logprob_view(
    policy: ToyPolicy, prompt_last_token: int, response: Sequence[int]
) -> TokenLogprobView:
    if policy.reference is None:
        raise ValidationError("policy has no frozen reference")
    return TokenLogprobView(
        response_token_ids=tuple(int(t) for t in response),
        per_token_logprob_policy=tuple(token_logprobs(policy, prompt_last_token, response)),
        per_token_logprob_reference=tuple(
            token_logprobs(policy, prompt_last_token, response, use_reference=True)
        ),
    )


# -- objective ---------------------------------------------------------


def _softplus(z: float) -> float:
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteInputError(f"{name} is not finite: {value!r}")


def dpo_loss(
    beta: float,
    lp_pos_policy: float,
    lp_pos_ref: float,
    lp_neg_policy: float,
    lp_neg_ref: float,
) -> tuple[float, float]:
    """Pairwise preference loss and margin over sequence log-probs.

    margin = beta*((lp_pos_policy - lp_pos_ref) - (lp_neg_policy - lp_neg_ref)),
    loss = softplus(-margin), stable for |margin| up to at least 1e4.
    With policy == reference (or beta == 0) the loss is exactly ln 2.
    """
    _require_finite(
        beta=beta,
        lp_pos_policy=lp_pos_policy,
        lp_pos_ref=lp_pos_ref,
        lp_neg_policy=lp_neg_policy,
        lp_neg_ref=lp_neg_ref,
    )
    margin = beta * ((lp_pos_policy - lp_pos_ref) - (lp_neg_policy - lp_neg_ref))
    margin += 0.0  # normalizes -0.0
    return _softplus(-margin), margin


def dpo_loss_from_views(
    beta: float, positive: TokenLogprobView, negative: TokenLogprobView
) -> tuple[float, float]:
    return dpo_loss(
        beta,
        positive.policy_total,
        positive.reference_total,
        negative.policy_total,
        negative.reference_total,
    )


def dpo_grad(
    beta: float,
    lp_pos_policy: float,
    lp_pos_ref: float,
    lp_neg_policy: float,
    lp_neg_ref: float,
) -> tuple[float, float]:
    """d loss / d (lp_pos_policy, lp_neg_policy).

    Gradients w.r.t. the reference log-probs are identically zero (the
    reference is frozen), so they are not returned.
    """
    _, margin = dpo_loss(beta, lp_pos_policy, lp_pos_ref, lp_neg_policy, lp_neg_ref)
    slope = _sigmoid(-margin)
    return (-beta * slope + 0.0, beta * slope + 0.0)


# -- SFT NLL -----------------------------------------------------------


def transition_counts(
    prompt_last_token: int, response: Sequence[int], vocab_size: int
) -> np.ndarray:
    """(vocab, vocab) visit counts of (prev, next) cells along a response."""
    if not response:
        raise ValidationError("response must be non-empty")
    _check_tokens([prompt_last_token], vocab_size, "prompt")
    _check_tokens(response, vocab_size, "response")
    counts = np.zeros((vocab_size, vocab_size))
    prev = int(prompt_last_token)
    for token in response:
        counts[prev, int(token)] += 1.0
        prev = int(token)
    return counts


def sft_nll(
    policy: ToyPolicy, batch: Sequence[tuple[int, Sequence[int]]]
) -> tuple[float, np.ndarray]:
    """Mean negative sequence log-prob and its gradient over the logits table.

    The gradient is the usual softmax cross-entropy accumulation: for each
    visited (prev, next) cell, probs(prev) minus a one-hot at next.
    """
    if not batch:
        raise EmptyInputError("batch must be non-empty")
    vocab = policy.vocab_size
    log_probs = _log_softmax(policy.logits)
    probs = np.exp(log_probs)
    grad = np.zeros_like(policy.logits)
    losses: list[float] = []
    for prompt_last, response in batch:
        counts = transition_counts(prompt_last, response, vocab)
        losses.append(-float((counts * log_probs).sum()))
        visits = counts.sum(axis=1)
        grad += visits[:, None] * probs - counts
    n = len(batch)
    return float(math.fsum(losses)) / n, grad / n


# -- training ----------------------------------------------------------


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    learning_rate: float = 1.0e-6
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


@dataclass
class TrainTrace:
    mean_loss: list[float] = field(default_factory=list)
    mean_margin: list[float] = field(default_factory=list)
    preference_accuracy: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mean_loss)


def _pair_tensors(
    pairs: Sequence[Pair], vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    chosen = np.stack(
        [transition_counts(p, c, vocab_size) for p, c, _ in pairs]
    )
    rejected = np.stack(
        [transition_counts(p, _r, vocab_size) for p, _, _r in pairs]
    )
    return chosen, rejected


def train_toy_dpo(
    pairs: Sequence[Pair],
    config: DpoConfig,
    init: ToyPolicy,
) -> tuple[ToyPolicy, TrainTrace]:
    """Full-batch gradient descent on the mean pairwise preference loss.

    The reference is the frozen copy carried by `init` (or a snapshot of
    init taken here). Each epoch's trace row is evaluated before that
    epoch's update, so when init equals the reference the first mean loss
    is exactly ln 2.
    """
    if not pairs:
        raise EmptyInputError("pairs must be non-empty")
    if config.beta <= 0:
        raise ValidationError("training requires beta > 0")
    vocab = init.vocab_size
    reference = init.reference if init.reference is not None else init.logits.copy()
    chosen_counts, rejected_counts = _pair_tensors(pairs, vocab)
    chosen_visits = chosen_counts.sum(axis=2)
    rejected_visits = rejected_counts.sum(axis=2)

    ref_log_probs = _log_softmax(reference)
    ref_lp_chosen = np.einsum("ipq,pq->i", chosen_counts, ref_log_probs)
    ref_lp_rejected = np.einsum("ipq,pq->i", rejected_counts, ref_log_probs)

    logits = init.logits.copy()
    n = len(pairs)
    trace = TrainTrace()
    for _ in range(config.epochs):
        log_probs = _log_softmax(logits)
        probs = np.exp(log_probs)
        lp_chosen = np.einsum("ipq,pq->i", chosen_counts, log_probs)
        lp_rejected = np.einsum("ipq,pq->i", rejected_counts, log_probs)
        margins = config.beta * ((lp_chosen - ref_lp_chosen) - (lp_rejected - ref_lp_rejected))
        margins += 0.0
        exp_term = np.exp(-np.abs(margins))
        losses = np.maximum(-margins, 0.0) + np.log1p(exp_term)
        slopes = np.where(margins >= 0, exp_term / (1 + exp_term), 1 / (1 + exp_term))

        trace.mean_loss.append(float(math.fsum(losses.tolist()) / n))
        trace.mean_margin.append(float(math.fsum(margins.tolist()) / n))
        trace.preference_accuracy.append(float(np.count_nonzero(lp_chosen > lp_rejected) / n))

        # dL/dlp_chosen = -beta*sigmoid(-m); rejected side gets the opposite sign
        coeff = -config.beta * slopes
        count_term = np.einsum("i,ipq->pq", coeff, chosen_counts - rejected_counts)
        visit_term = (coeff[:, None] * (chosen_visits - rejected_visits)).sum(axis=0)
        grad = (count_term - visit_term[:, None] * probs) / n
        logits = logits - config.learning_rate * grad

    return ToyPolicy(logits, reference.copy()), trace


def synth_separable_pairs(
    n_pairs: int,
    vocab_size: int = 4,
    max_len: int = 12,
    seed: int = 0,
) -> list[Pair]:
    """Separable toy pairs: chosen repeats token 1, rejected repeats token 0.

    Both sides share one length per pair so that raw sequence log-probs are
    comparable; a bigram policy can rank every pair correctly.
    """
    rng = np.random.default_rng(seed)
    pairs: list[Pair] = []
    for _ in range(n_pairs):
        prompt_last = int(rng.integers(0, vocab_size))
        length = int(rng.integers(1, max_len + 1))
        pairs.append((prompt_last, [1] * length, [0] * length))
    return pairs


# -- gradient checking -------------------------------------------------


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=1)
    return shift + np.log(np.exp(logits - shift[:, None]).sum(axis=1))


def _margin_term(logits: np.ndarray, delta_counts: np.ndarray) -> float:
    """(lp_chosen - lp_rejected) in factored form.

    Per row: sum_q dC[p,q]*logits[p,q] - dv[p]*logsumexp(row p). The factored
    form makes the value bitwise independent of any cell with dC[p,q] == 0
    on a row with dv[p] == 0, so finite differences vanish exactly where the
    true gradient is exactly zero.
    """
    delta_visits = delta_counts.sum(axis=1)
    row_terms = (delta_counts * logits).sum(axis=1) - delta_visits * _logsumexp_rows(logits)
    return float(row_terms.sum())


def _dpo_pair_loss(
    logits: np.ndarray,
    reference: np.ndarray,
    chosen_counts: np.ndarray,
    rejected_counts: np.ndarray,
    beta: float,
) -> float:
    delta = chosen_counts - rejected_counts
    margin = beta * (_margin_term(logits, delta) - _margin_term(reference, delta))
    margin += 0.0
    return _softplus(-margin)


def _dpo_analytic_grad(
    logits: np.ndarray,
    reference: np.ndarray,
    chosen_counts: np.ndarray,
    rejected_counts: np.ndarray,
    beta: float,
) -> np.ndarray:
    delta = chosen_counts - rejected_counts
    margin = beta * (_margin_term(logits, delta) - _margin_term(reference, delta))
    margin += 0.0
    coeff = -beta * _sigmoid(-margin)  # dL/d lp_chosen
    probs = np.exp(_log_softmax(logits))
    delta_visits = delta.sum(axis=1)
    return coeff * (delta - delta_visits[:, None] * probs)


def _max_rel_err(
    loss_fn, analytic: np.ndarray, logits: np.ndarray, cells, epsilon: float
) -> tuple[float, list[tuple[tuple[int, int], float, float, float]]]:
    rows = []
    worst = 0.0
    for p, q in cells:
        bumped = logits.copy()
        bumped[p, q] += epsilon
        up = loss_fn(bumped)
        bumped[p, q] -= 2 * epsilon
        down = loss_fn(bumped)
        numeric = (up - down) / (2 * epsilon)
        a = float(analytic[p, q])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        rows.append(((p, q), a, numeric, err))
        worst = max(worst, err)
    return worst, rows


def _touched_cells(*count_tables: np.ndarray) -> list[tuple[int, int]]:
    visited_rows = set()
    for counts in count_tables:
        visited_rows.update(int(r) for r in np.nonzero(counts.sum(axis=1))[0])
    vocab = count_tables[0].shape[0]
    return [(p, q) for p in sorted(visited_rows) for q in range(vocab)]


def gradcheck(
    policy: ToyPolicy,
    pair: Pair,
    beta: float,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error of the analytic pair-loss gradient vs central
    finite differences over every logits cell the pair touches."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in [1e-7, 1e-3]")
    prompt_last, chosen, rejected = pair
    vocab = policy.vocab_size
    reference = policy.reference if policy.reference is not None else policy.logits.copy()
    chosen_counts = transition_counts(prompt_last, chosen, vocab)
    rejected_counts = transition_counts(prompt_last, rejected, vocab)
    analytic = _dpo_analytic_grad(
        policy.logits, reference, chosen_counts, rejected_counts, beta
    )
    cells = _touched_cells(chosen_counts, rejected_counts)
    worst, _ = _max_rel_err(
        lambda lg: _dpo_pair_loss(lg, reference, chosen_counts, rejected_counts, beta),
        analytic,
        policy.logits,
        cells,
        epsilon,
    )
    return worst


def gradcheck_sft(
    policy: ToyPolicy,
    batch: Sequence[tuple[int, Sequence[int]]],
    epsilon: float = 1e-5,
) -> float:
    """Finite-difference check of the SFT NLL gradient; max relative error."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in [1e-7, 1e-3]")
    _, analytic = sft_nll(policy, batch)
    tables = [
        transition_counts(p, r, policy.vocab_size) for p, r in batch
    ]
    cells = _touched_cells(*tables)
    worst, _ = _max_rel_err(
        lambda lg: sft_nll(ToyPolicy(lg), batch)[0],
        analytic,
        policy.logits,
        cells,
        epsilon,
    )
    return worst


def gradcheck_report(
    policy: ToyPolicy,
    pair: Pair,
    beta: float,
    epsilon: float = 1e-5,
) -> str:
    """Plain-text table: one row per touched cell, plus the max error."""
    prompt_last, chosen, rejected = pair
    vocab = policy.vocab_size
    reference = policy.reference if policy.reference is not None else policy.logits.copy()
    chosen_counts = transition_counts(prompt_last, chosen, vocab)
    rejected_counts = transition_counts(prompt_last, rejected, vocab)
    analytic = _dpo_analytic_grad(
        policy.logits, reference, chosen_counts, rejected_counts, beta
    )
    cells = _touched_cells(chosen_counts, rejected_counts)
    worst, rows = _max_rel_err(
        lambda lg: _dpo_pair_loss(lg, reference, chosen_counts, rejected_counts, beta),
        analytic,
        policy.logits,
        cells,
        epsilon,
    )
    lines = [f"{'cell':>10}  {'analytic':>24}  {'numeric':>24}  {'rel_err':>12}"]
    for (p, q), a, numeric, err in rows:
        lines.append(f"{f'({p},{q})':>10}  {a:>24.16e}  {numeric:>24.16e}  {err:>12.3e}")
    lines.append(f"max relative error: {worst:.3e} (epsilon={epsilon:g})")
    return "\n".join(lines)


# -- serialization -----------------------------------------------------


def save_toy_pairs(pairs: Sequence[Pair], path: str | Path) -> None:
    write_jsonl(
        path,
        (
            {"prompt_last_token": p, "chosen": list(c), "rejected": list(r)}
            for p, c, r in pairs
        ),
    )


def load_toy_pairs(path: str | Path) -> list[Pair]:
    return [
        (int(rec["prompt_last_token"]), list(rec["chosen"]), list(rec["rejected"]))
        for _, rec in read_jsonl(path)
    ]


def save_trace(trace: TrainTrace, path: str | Path) -> None:
    write_jsonl(
        path,
        (
            {
                "epoch": i + 1,
                "mean_loss": trace.mean_loss[i],
                "mean_margin": trace.mean_margin[i],
                "preference_accuracy": trace.preference_accuracy[i],
            }
            for i in range(len(trace))
        ),
    )


def save_policy(policy: ToyPolicy, path: str | Path) -> None:
    payload = {
        "vocab_size": policy.vocab_size,
        "logits": policy.logits.tolist(),
        "reference": None if policy.reference is None else policy.reference.tolist(),
    }
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_policy(path: str | Path) -> ToyPolicy:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    reference = payload.get("reference")
    return ToyPolicy(
        np.asarray(payload["logits"], dtype=np.float64),
        None if reference is None else np.asarray(reference, dtype=np.float64),
    )
