"""Moderation evaluation: per-category F1, analogy-marker ratio, token cost.

Scoring is one-vs-rest per category. The harmless category is scored like
any other. Because the usual "Average" column is ambiguous, both the macro
(unweighted over non-vacuous categories) and the support-weighted mean are
reported.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .coagen import split_sections
from .corpus import Taxonomy
from .errors import EmptyInputError, LengthMismatchError, UnknownLabelError

DEFAULT_COA_LEXICON = (
    "similar case",
    "reference case",
    "analogous",
    "precedent",
    "example case",
)


@dataclass(frozen=True)
class CategoryCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def gold(self) -> int:
        return self.tp + self.fn

    @property
    def predicted(self) -> int:
        return self.tp + self.fp


@dataclass(frozen=True)
class ConfusionCounts:
    per_category: Mapping[str, CategoryCounts]
    total: int


@dataclass(frozen=True)
class CategoryMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass(frozen=True)
class EvalReport:
    per_category: Mapping[str, CategoryMetrics]
    macro_f1: float
    weighted_f1: float
    n: int


@dataclass(frozen=True)
class CoaStats:
    n_outputs: int
    n_analogical: int

    @property
    def ratio(self) -> float:
        """Percentage of outputs with an analogy marker (0 when empty)."""
        if self.n_outputs == 0:
            return 0.0
        return 100.0 * self.n_analogical / self.n_outputs


@dataclass(frozen=True)
class CostReport:
    mean_extra_tokens: float
    delta_f1_points: float
    tokens_per_f1_point: float | None

    @property
    def defined(self) -> bool:
        return self.tokens_per_f1_point is not None


def confusion(
    preds: Sequence[str], golds: Sequence[str], taxonomy: Taxonomy
) -> ConfusionCounts:
    """One-vs-rest counts per category."""
    if len(preds) != len(golds):
        raise LengthMismatchError(
            f"{len(preds)} predictions vs {len(golds)} gold labels"
        )
    for label in preds:
        if label not in taxonomy:
            raise UnknownLabelError(label, "predictions")
    for label in golds:
        if label not in taxonomy:
            raise UnknownLabelError(label, "gold labels")
    n = len(golds)
    per_category = {}
    for category in taxonomy.categories:
        tp = sum(1 for p, g in zip(preds, golds) if p == category and g == category)
        fp = sum(1 for p, g in zip(preds, golds) if p == category and g != category)
        fn = sum(1 for p, g in zip(preds, golds) if p != category and g == category)
        per_category[category] = CategoryCounts(tp=tp, fp=fp, fn=fn, tn=n - tp - fp - fn)
    return ConfusionCounts(per_category=per_category, total=n)


def f1_report(counts: ConfusionCounts) -> EvalReport:
    """Precision/recall/F1 per category plus macro and weighted aggregates.

    Zero denominators give zero scores. Categories with neither gold nor
    predicted instances are vacuous and excluded from the macro mean.
    """
    per_category = {}
    macro_terms: list[float] = []
    weighted_sum = 0.0
    support_sum = 0
    for category, c in counts.per_category.items():
        precision = c.tp / c.predicted if c.predicted else 0.0
        recall = c.tp / c.gold if c.gold else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_category[category] = CategoryMetrics(
            precision=precision,
            recall=recall,
            f1=f1,
            support=c.gold,
            predicted=c.predicted,
        )
        if c.gold or c.predicted:
            macro_terms.append(f1)
        weighted_sum += c.gold * f1
        support_sum += c.gold
    macro = math.fsum(macro_terms) / len(macro_terms) if macro_terms else 0.0
    weighted = weighted_sum / support_sum if support_sum else 0.0
    return EvalReport(
        per_category=per_category,
        macro_f1=macro,
        weighted_f1=weighted,
        n=counts.total,
    )


def coa_ratio(
    outputs: Sequence[str], lexicon: Sequence[str] = DEFAULT_COA_LEXICON
) -> CoaStats:
    """Count outputs whose Analysis Process section carries an analogy marker.

    Markers are regex patterns matched case-insensitively. Unparseable
    outputs are scanned whole.
    """
    if not lexicon:
        raise EmptyInputError("lexicon must be non-empty")
    patterns = [re.compile(p, re.IGNORECASE) for p in lexicon]
    hits = 0
    for text in outputs:
        sections = split_sections(text)
        haystack = sections["Analysis Process"] if sections else text
        if any(p.search(haystack) for p in patterns):
            hits += 1
    return CoaStats(n_outputs=len(outputs), n_analogical=hits)


def token_cost(
    tokens_variant: Sequence[int],
    tokens_baseline: Sequence[int],
    f1_variant: float,
    f1_baseline: float,
    unit: str = "points",
) -> CostReport:
    """Extra tokens per F1 point of a variant over a baseline.

    `unit` declares how the F1 inputs are expressed: "points" (already on
    the 0..100 scale) or "fraction" (0..1, converted here). A non-positive
    F1 delta leaves the ratio undefined rather than dividing.
    """
    if not tokens_variant or not tokens_baseline:
        raise EmptyInputError("token count lists must be non-empty")
    if unit not in ("points", "fraction"):
        raise EmptyInputError(f"unknown unit {unit!r}")
    mean_extra = math.fsum(tokens_variant) / len(tokens_variant) - math.fsum(
        tokens_baseline
    ) / len(tokens_baseline)
    delta = f1_variant - f1_baseline
    if unit == "fraction":
        delta *= 100.0
    ratio = mean_extra / delta if delta > 0 else None
    return CostReport(
        mean_extra_tokens=mean_extra,
        delta_f1_points=delta,
        tokens_per_f1_point=ratio,
    )


def render_text_report(
    report: EvalReport,
    taxonomy: Taxonomy,
    coa: CoaStats | None = None,
    cost: CostReport | None = None,
) -> str:
    """Fixed-width table, one category per column in taxonomy order."""
    header = [f"{'':<10}"] + [f"{c[:12]:>12}" for c in taxonomy.categories]
    header += [f"{'Macro':>12}", f"{'Weighted':>12}"]
    rows = [
        "".join(header),
        "".join(
            [f"{'F1':<10}"]
            + [f"{report.per_category[c].f1 * 100:>12.1f}" for c in taxonomy.categories]
            + [f"{report.macro_f1 * 100:>12.1f}", f"{report.weighted_f1 * 100:>12.1f}"]
        ),
        "".join(
            [f"{'Precision':<10}"]
            + [
                f"{report.per_category[c].precision * 100:>12.1f}"
                for c in taxonomy.categories
            ]
            + [f"{'':>12}", f"{'':>12}"]
        ),
        "".join(
            [f"{'Recall':<10}"]
            + [
                f"{report.per_category[c].recall * 100:>12.1f}"
                for c in taxonomy.categories
            ]
            + [f"{'':>12}", f"{'':>12}"]
        ),
        "".join(
            [f"{'Support':<10}"]
            + [f"{report.per_category[c].support:>12d}" for c in taxonomy.categories]
            + [f"{report.n:>12d}", f"{'':>12}"]
        ),
    ]
    if coa is not None:
        rows.append(f"CoA ratio: {coa.ratio:.1f}% ({coa.n_analogical}/{coa.n_outputs})")
    if cost is not None:
        if cost.defined:
            rows.append(
                f"Token cost: {cost.mean_extra_tokens:.1f} extra tokens, "
                f"{cost.delta_f1_points:.1f} F1 points, "
                f"{cost.tokens_per_f1_point:.1f} tokens per point"
            )
        else:
            rows.append(
                f"Token cost: {cost.mean_extra_tokens:.1f} extra tokens, "
                "F1 delta not positive, ratio undefined"
            )
    return "\n".join(rows) + "\n"


def report_to_dict(
    report: EvalReport,
    taxonomy: Taxonomy,
    coa: CoaStats | None = None,
    cost: CostReport | None = None,
) -> dict:
    payload: dict = {
        "n": report.n,
        "macro_f1": report.macro_f1,
        "weighted_f1": report.weighted_f1,
        "per_category": {
            c: {
                "precision": report.per_category[c].precision,
                "recall": report.per_category[c].recall,
                "f1": report.per_category[c].f1,
                "support": report.per_category[c].support,
                "predicted": report.per_category[c].predicted,
            }
            for c in taxonomy.categories
        },
    }
    if coa is not None:
        payload["coa"] = {
            "n_outputs": coa.n_outputs,
            "n_analogical": coa.n_analogical,
            "ratio": coa.ratio,
        }
    if cost is not None:
        payload["cost"] = {
            "mean_extra_tokens": cost.mean_extra_tokens,
            "delta_f1_points": cost.delta_f1_points,
            "tokens_per_f1_point": cost.tokens_per_f1_point,
        }
    return payload
