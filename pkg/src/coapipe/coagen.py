"""Analogical chain generation: prompts, response parsing, reflection.

The moderation prompt asks for a three-part response (Analysis Process,
Harmful Content, Classification Result), optionally preceded by a block of
retrieved Example Cases the model is told it may draw analogies from. When
the parsed label of a generated chain disagrees with the gold label, a
reflection round re-prompts the model with its own prior answer, never with
the gold label; chains that stay wrong are dropped.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import ModerationSample, SampleSet, Taxonomy
from .errors import (
    AmbiguousLabelError,
    MalformedChainError,
    PipelineError,
    UnknownLabelError,
    ValidationError,
)
from .gateway import BackendSpec, Gateway, SamplingParams
from .retrieval import RetrievalIndex, RetrievedCase, normalize, query_topk

_TASK = (
    "Task: Assume you are a professional content moderator. Assess the "
    "harmfulness of the following content and classify it into exactly one "
    "of these categories: [{categories}]."
)

_INSTRUCTIONS = (
    "Instructions:\n"
    '1. Provide a detailed "Analysis Process" explaining the reasoning for '
    "classification using chain-of-thought\n"
    '2. Extract the "Harmful Content" from the sentence\n'
    '3. Provide the "Classification Result"'
)

_FORMAT_GENERATION = (
    "Format Requirements:\n"
    "- Response must follow this three-part format: 'Analysis Process', "
    "'Harmful Content', 'Classification Result'\n"
    '- You may reference "Example Cases" if available (note they may not '
    "always be accurate)\n"
    "- Any referenced examples should be reflected in your final response"
)

_FORMAT_REFLECTION = (
    "Format Requirements:\n"
    "- Response must follow three-part format: 'Analysis Process', "
    "'Harmful Content', 'Classification Result'\n"
    '- You may reference "Example Cases" if available (note they may not '
    "always be accurate)\n"
    "- Any referenced examples should be reflected in your final response"
)

_ADDITIONAL_CONTEXT = (
    "Additional Context:\n"
    "- Your original response was: {prior}\n"
    "- Please reflect and provide a final answer\n"
    "- Do not explicitly mention reflection in your final output"
)

SECTION_NAMES = ("Analysis Process", "Harmful Content", "Classification Result")

DEFAULT_HEADER_LEXICON: dict[str, tuple[str, ...]] = {
    "Analysis Process": ("Analysis Process", "分析过程"),
    "Harmful Content": ("Harmful Content", "有害内容"),
    "Classification Result": ("Classification Result", "分类结果"),
}

DEFAULT_LABEL_ALIASES: dict[str, str] = {
    "political harmful": "Politics",
    "politically harmful": "Politics",
    "politics": "Politics",
    "政治": "Politics",
    "色情": "Pornography",
    "暴力": "Violence",
    "偏见": "Bias",
    "歧视": "Bias",
    "赌博": "Gambling",
    "无害": "Harmless",
}

ACCEPTED_FIRST_PASS = "accepted_first_pass"
ACCEPTED_AFTER_REFLECTION = "accepted_after_reflection"
DROPPED = "dropped"


@dataclass(frozen=True)
class PromptBundle:
    """All slots of one rendered moderation prompt.

    prior_response is set only for reflection prompts; the gold label is
    never a slot, so it cannot leak into any prompt by construction.
    """

    task_text: str
    target_text: str
    reference_block: str = ""
    prior_response: str | None = None

    def render(self) -> str:
        blocks = [self.task_text, _INSTRUCTIONS]
        if self.prior_response is None:
            blocks.append(_FORMAT_GENERATION)
        else:
            blocks.append(_ADDITIONAL_CONTEXT.format(prior=self.prior_response))
            blocks.append(_FORMAT_REFLECTION)
        if self.reference_block:
            blocks.append(self.reference_block)
        blocks.append(f"Content: {self.target_text}")
        return "\n\n".join(blocks)

    def messages(self) -> list[tuple[str, str]]:
        return [("user", self.render())]


def _render_references(
    refs: Sequence[RetrievedCase], include_labels: bool
) -> str:
    if not refs:
        return ""
    lines = ["Example Cases:"]
    for rank, case in enumerate(refs, start=1):
        if include_labels:
            lines.append(f"{rank}. [{case.label}] {case.text}")
        else:
            lines.append(f"{rank}. {case.text}")
    return "\n".join(lines)


def build_generation_prompt(
    sample: ModerationSample,
    refs: Sequence[RetrievedCase],
    taxonomy: Taxonomy,
    include_ref_labels: bool = True,
) -> PromptBundle:
    """Moderation prompt over one sample, with refs in retrieval rank order.

    With refs empty this is the plain variant: no Example Cases block at
    all, used both for preference-pair negatives and as the training-time
    prompt (the tuned model sees no retrieved context at inference).
    """
    return PromptBundle(
        task_text=_TASK.format(categories=", ".join(taxonomy.categories)),
        target_text=sample.text,
        reference_block=_render_references(refs, include_ref_labels),
    )


def build_reflection_prompt(
    sample: ModerationSample,
    refs: Sequence[RetrievedCase],
    prior: "ReasoningChain",
    taxonomy: Taxonomy,
    include_ref_labels: bool = True,
) -> PromptBundle:
    """Reflection prompt embedding the prior response verbatim.

    The model is asked to reconsider; the gold label is withheld.
    """
    return PromptBundle(
        task_text=_TASK.format(categories=", ".join(taxonomy.categories)),
        target_text=sample.text,
        reference_block=_render_references(refs, include_ref_labels),
        prior_response=prior.raw_text,
    )


@dataclass(frozen=True)
class ReasoningChain:
    """A parsed three-part model response."""

    analysis_process: str
    harmful_content: str
    classification_result: str
    parsed_label: str
    raw_text: str
    completion_tokens: int = 0


def _find_header(
    text: str, variants: Sequence[str], start: int
) -> tuple[int, int] | None:
    """Earliest case-insensitive occurrence of any variant at or after start.

    Returns (match_start, body_start). Markdown decoration around the header
    token (asterisks, leading hashes) and a trailing colon are part of the
    header, not of the neighbouring bodies.
    """
    pattern = "|".join(re.escape(v) for v in variants)
    match = re.compile(
        f"[#*]*(?:{pattern})\\**[::]?[ \\t]*", re.IGNORECASE
    ).search(text, start)
    if match is None:
        return None
    return match.start(), match.end()


def split_sections(
    text: str,
    header_lexicon: Mapping[str, Sequence[str]] | None = None,
) -> dict[str, str] | None:
    """Split a completion into its three section bodies, or None if malformed."""
    lexicon = header_lexicon or DEFAULT_HEADER_LEXICON
    cursor = 0
    spans: list[tuple[str, int, int]] = []
    for section in SECTION_NAMES:
        hit = _find_header(text, lexicon[section], cursor)
        if hit is None:
            return None
        spans.append((section, hit[0], hit[1]))
        cursor = hit[1]
    bodies: dict[str, str] = {}
    for i, (section, _, body_start) in enumerate(spans):
        body_end = spans[i + 1][1] if i + 1 < len(spans) else len(text)
        bodies[section] = text[body_start:body_end].strip()
    return bodies


def normalize_label(
    text: str,
    taxonomy: Taxonomy,
    aliases: Mapping[str, str] | None = None,
) -> str:
    """Map free-form classification text to a category by longest match.

    Candidate terms are the category names plus any aliases pointing at a
    taxonomy member; matching is case-insensitive substring. Two categories
    matching at the same (maximal) length is ambiguous.
    """
    alias_map = DEFAULT_LABEL_ALIASES if aliases is None else dict(aliases)
    lowered = text.lower()
    best_per_category: dict[str, int] = {}
    for category in taxonomy.categories:
        terms = [category] + [
            alias for alias, target in alias_map.items() if target == category
        ]
        lengths = [len(t) for t in terms if t.lower() in lowered]
        if lengths:
            best_per_category[category] = max(lengths)
    if not best_per_category:
        raise UnknownLabelError(text.strip()[:80], "classification text")
    top = max(best_per_category.values())
    winners = [c for c, n in best_per_category.items() if n == top]
    if len(winners) > 1:
        raise AmbiguousLabelError(winners, text)
    return winners[0]


def parse_chain(
    text: str,
    taxonomy: Taxonomy,
    header_lexicon: Mapping[str, Sequence[str]] | None = None,
    aliases: Mapping[str, str] | None = None,
    completion_tokens: int = 0,
) -> ReasoningChain:
    """Parse a three-part completion and normalize its classification.

    Raises MalformedChainError naming the first missing (or out-of-order)
    section; label errors carry the raw completion for audit.
    """
    lexicon = header_lexicon or DEFAULT_HEADER_LEXICON
    cursor = 0
    spans: list[tuple[int, int]] = []
    for section in SECTION_NAMES:
        hit = _find_header(text, lexicon[section], cursor)
        if hit is None:
            raise MalformedChainError(section, raw_text=text)
        spans.append(hit)
        cursor = hit[1]
    bodies: list[str] = []
    for i, (_, body_start) in enumerate(spans):
        body_end = spans[i + 1][0] if i + 1 < len(spans) else len(text)
        bodies.append(text[body_start:body_end].strip())
    try:
        label = normalize_label(bodies[2], taxonomy, aliases)
    except (UnknownLabelError, AmbiguousLabelError) as exc:
        exc.raw_text = text  # type: ignore[attr-defined]
        raise
    return ReasoningChain(
        analysis_process=bodies[0],
        harmful_content=bodies[1],
        classification_result=bodies[2],
        parsed_label=label,
        raw_text=text,
        completion_tokens=completion_tokens,
    )


def render_chain(chain: ReasoningChain, label: str | None = None) -> str:
    """Canonical three-part rendering; parse_chain(render_chain(c)) round-trips."""
    final = chain.parsed_label if label is None else label
    return (
        f"Analysis Process: {chain.analysis_process}\n"
        f"Harmful Content: {chain.harmful_content}\n"
        f"Classification Result: {final}"
    )


@dataclass(frozen=True)
class AugmentedSample:
    """A sample with its (possibly refined) chain and the gate outcome."""

    sample: ModerationSample
    chain: ReasoningChain
    refinement_rounds: int
    status: str

    @property
    def accepted(self) -> bool:
        return self.status in (ACCEPTED_FIRST_PASS, ACCEPTED_AFTER_REFLECTION)


def generate_chain(
    sample: ModerationSample,
    refs: Sequence[RetrievedCase],
    backend: BackendSpec,
    params: SamplingParams,
    *,
    gateway: Gateway,
    taxonomy: Taxonomy,
    include_ref_labels: bool = True,
    header_lexicon: Mapping[str, Sequence[str]] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> ReasoningChain:
    """Generate one chain for a sample (with or without reference cases)."""
    prompt = build_generation_prompt(sample, refs, taxonomy, include_ref_labels)
    result = gateway.chat_complete(backend, prompt.messages(), params)
    return parse_chain(
        result.text,
        taxonomy,
        header_lexicon=header_lexicon,
        aliases=aliases,
        completion_tokens=result.completion_tokens,
    )


def refine_chain(
    sample: ModerationSample,
    refs: Sequence[RetrievedCase],
    prior: ReasoningChain,
    backend: BackendSpec,
    params: SamplingParams,
    *,
    gateway: Gateway,
    taxonomy: Taxonomy,
    max_rounds: int = 1,
    include_ref_labels: bool = True,
    header_lexicon: Mapping[str, Sequence[str]] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> AugmentedSample:
    """Reflection loop: re-prompt with the prior answer until the parsed
    label matches the gold label or rounds run out (then the sample drops).

    The original references are reused unchanged; a round whose response
    fails to parse counts as a failed round.
    """
    if prior.parsed_label == sample.label:
        raise ValidationError(
            "refine_chain called on an already-correct chain; caller must gate"
        )
    if max_rounds < 1:
        raise ValidationError("max_rounds must be >= 1")
    latest = prior
    for round_number in range(1, max_rounds + 1):
        prompt = build_reflection_prompt(
            sample, refs, latest, taxonomy, include_ref_labels
        )
        result = gateway.chat_complete(backend, prompt.messages(), params)
        try:
            candidate = parse_chain(
                result.text,
                taxonomy,
                header_lexicon=header_lexicon,
                aliases=aliases,
                completion_tokens=result.completion_tokens,
            )
        except (MalformedChainError, UnknownLabelError, AmbiguousLabelError):
            continue  # failed round; prior answer stands for the next prompt
        if candidate.parsed_label == sample.label:
            return AugmentedSample(
                sample=sample,
                chain=candidate,
                refinement_rounds=round_number,
                status=ACCEPTED_AFTER_REFLECTION,
            )
        latest = candidate
    return AugmentedSample(
        sample=sample,
        chain=latest,
        refinement_rounds=max_rounds,
        status=DROPPED,
    )


@dataclass
class AugmentResult:
    samples: list[AugmentedSample] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def augment_dataset(
    train: SampleSet,
    index: RetrievalIndex,
    embeddings: Mapping[str, np.ndarray],
    backend: BackendSpec,
    params: SamplingParams,
    *,
    gateway: Gateway,
    k: int = 32,
    max_rounds: int = 1,
    exclude_self: bool = True,
    include_ref_labels: bool = True,
    same_label_only: bool = False,
    fail_fast: bool = False,
    workers: int = 1,
    header_lexicon: Mapping[str, Sequence[str]] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> AugmentResult:
    """Bootstrap chains for a whole training set.

    Per sample: retrieve k neighbours (self excluded), generate, accept on
    label match, otherwise run the reflection loop. Failures are isolated
    per sample and recorded in the manifest unless fail_fast is set.
    Results come back sorted by sample id regardless of worker count.
    """
    ordered = sorted(train, key=lambda s: s.id)
    statuses: dict[str, str] = {}
    errors: list[dict] = []
    outcomes: dict[str, AugmentedSample] = {}

    def process(sample: ModerationSample) -> AugmentedSample:
        query = normalize(np.asarray(embeddings[sample.id], dtype=np.float64))
        refs = query_topk(
            index,
            query,
            k,
            exclude_id=sample.id if exclude_self else None,
            require_label=sample.label if same_label_only else None,
        )
        chain = generate_chain(
            sample,
            refs,
            backend,
            params,
            gateway=gateway,
            taxonomy=train.taxonomy,
            include_ref_labels=include_ref_labels,
            header_lexicon=header_lexicon,
            aliases=aliases,
        )
        if chain.parsed_label == sample.label:
            return AugmentedSample(sample, chain, 0, ACCEPTED_FIRST_PASS)
        return refine_chain(
            sample,
            refs,
            chain,
            backend,
            params,
            gateway=gateway,
            taxonomy=train.taxonomy,
            max_rounds=max_rounds,
            include_ref_labels=include_ref_labels,
            header_lexicon=header_lexicon,
            aliases=aliases,
        )

    def run_one(sample: ModerationSample) -> tuple[str, AugmentedSample | None, Exception | None]:
        try:
            return sample.id, process(sample), None
        except PipelineError as exc:
            return sample.id, None, exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, ordered))
    else:
        results = [run_one(s) for s in ordered]

    for sample_id, outcome, exc in results:
        if exc is not None:
            if fail_fast:
                raise exc
            statuses[sample_id] = "error"
            errors.append(
                {"id": sample_id, "error": type(exc).__name__, "detail": str(exc)}
            )
            continue
        assert outcome is not None
        outcomes[sample_id] = outcome
        statuses[sample_id] = outcome.status

    samples = [outcomes[sid] for sid in sorted(outcomes)]
    counters = {
        ACCEPTED_FIRST_PASS: sum(1 for s in samples if s.status == ACCEPTED_FIRST_PASS),
        ACCEPTED_AFTER_REFLECTION: sum(
            1 for s in samples if s.status == ACCEPTED_AFTER_REFLECTION
        ),
        DROPPED: sum(1 for s in samples if s.status == DROPPED),
        "errors": len(errors),
    }
    manifest = {
        "counters": counters,
        "statuses": statuses,
        "errors": errors,
        "config": {
            "k": k,
            "max_rounds": max_rounds,
            "exclude_self": exclude_self,
            "include_ref_labels": include_ref_labels,
            "same_label_only": same_label_only,
            "backend": backend.name,
            "sampling": {
                "temperature": params.temperature,
                "top_p": params.top_p,
                "top_k": params.top_k,
                "max_tokens": params.max_tokens,
                "seed": params.seed,
            },
        },
    }
    return AugmentResult(samples=samples, manifest=manifest)
