from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coapipe.coagen import (
    ACCEPTED_AFTER_REFLECTION,
    ACCEPTED_FIRST_PASS,
    DROPPED,
    ReasoningChain,
    augment_dataset,
    build_generation_prompt,
    build_reflection_prompt,
    generate_chain,
    parse_chain,
    refine_chain,
    render_chain,
    split_sections,
)
from coapipe.corpus import DEFAULT_TAXONOMY, ModerationSample, Taxonomy
from coapipe.errors import (
    AmbiguousLabelError,
    MalformedChainError,
    UnknownLabelError,
    ValidationError,
)
from coapipe.gateway import SamplingParams
from coapipe.retrieval import RetrievedCase, build_index

from conftest import chain_text, make_samples, scripted_backend, seq_entry

GOLDEN = Path(__file__).parent / "golden"
PARAMS = SamplingParams()

TARGET = ModerationSample(
    id="t1",
    text="Every Indian person I know dances upon hearing music",
    label="Harmless",
    split="train",
)

REFS = [
    RetrievedCase("r1", "Black people are all lazy", "Bias", 0.91),
    RetrievedCase("r2", "The weather is nice today", "Harmless", 0.88),
]

PRIOR = ReasoningChain(
    analysis_process="The sentence singles out a group by ethnicity.",
    harmful_content="Every Indian person I know dances",
    classification_result="Bias",
    parsed_label="Bias",
    raw_text=(
        "Analysis Process: The sentence singles out a group by ethnicity.\n"
        "Harmful Content: Every Indian person I know dances\n"
        "Classification Result: Bias"
    ),
)


def golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8")


# -- prompt rendering --------------------------------------------------


def test_generation_prompt_matches_golden():
    prompt = build_generation_prompt(TARGET, REFS, DEFAULT_TAXONOMY)
    assert prompt.render() + "\n" == golden("generation_prompt.txt")


def test_plain_prompt_matches_golden():
    prompt = build_generation_prompt(TARGET, [], DEFAULT_TAXONOMY)
    assert prompt.render() + "\n" == golden("generation_prompt_plain.txt")


def test_reflection_prompt_matches_golden():
    prompt = build_reflection_prompt(TARGET, REFS, PRIOR, DEFAULT_TAXONOMY)
    assert prompt.render() + "\n" == golden("reflection_prompt.txt")


def test_plain_prompt_has_no_example_cases_block():
    rendered = build_generation_prompt(TARGET, [], DEFAULT_TAXONOMY).render()
    assert "Example Cases:\n" not in rendered
    assert REFS[0].text not in rendered
    assert REFS[1].text not in rendered


def test_reference_block_rank_order_and_labels():
    rendered = build_generation_prompt(TARGET, REFS, DEFAULT_TAXONOMY).render()
    block_start = rendered.index("Example Cases:")
    assert (
        rendered.index("1. [Bias] Black people are all lazy", block_start)
        < rendered.index("2. [Harmless] The weather is nice today", block_start)
    )


def test_reference_block_can_hide_labels():
    rendered = build_generation_prompt(
        TARGET, REFS, DEFAULT_TAXONOMY, include_ref_labels=False
    ).render()
    assert "1. Black people are all lazy" in rendered
    assert "[Bias]" not in rendered


def test_prompt_enumerates_exactly_the_taxonomy():
    taxonomy = Taxonomy(categories=("Alpha", "Beta", "Gamma"), harmless_label="Gamma")
    sample = ModerationSample(id="x", text="something", label="Gamma")
    rendered = build_generation_prompt(sample, [], taxonomy).render()
    assert "[Alpha, Beta, Gamma]." in rendered
    for absent in DEFAULT_TAXONOMY.categories:
        assert absent not in rendered


def test_prompt_rendering_is_deterministic():
    a = build_generation_prompt(TARGET, REFS, DEFAULT_TAXONOMY).render()
    b = build_generation_prompt(TARGET, REFS, DEFAULT_TAXONOMY).render()
    assert a == b


def test_reflection_embeds_prior_verbatim_and_hides_gold():
    # sentinel category name that cannot occur by accident
    taxonomy = Taxonomy(
        categories=("QZXGOLDQZX", "Other"), harmless_label="Other"
    )
    sample = ModerationSample(id="x", text="text body", label="QZXGOLDQZX")
    prior = ReasoningChain(
        analysis_process="a",
        harmful_content="b",
        classification_result="Other",
        parsed_label="Other",
        raw_text="Analysis Process: a\nHarmful Content: b\nClassification Result: Other",
    )
    rendered = build_reflection_prompt(sample, [], prior, taxonomy).render()
    assert prior.raw_text in rendered
    # the gold label appears exactly once: inside the category enumeration
    assert rendered.count("QZXGOLDQZX") == 1
    assert "[QZXGOLDQZX, Other]." in rendered


def test_reflection_keeps_reference_block_bytes():
    gen = build_generation_prompt(TARGET, REFS, DEFAULT_TAXONOMY)
    refl = build_reflection_prompt(TARGET, REFS, PRIOR, DEFAULT_TAXONOMY)
    assert gen.reference_block == refl.reference_block


def test_refine_requires_mismatched_prior():
    good_prior = ReasoningChain(
        analysis_process="a",
        harmful_content="b",
        classification_result="Harmless",
        parsed_label="Harmless",
        raw_text="...",
    )
    backend = scripted_backend("m", [])
    with pytest.raises(ValidationError):
        refine_chain(
            TARGET,
            [],
            good_prior,
            backend,
            PARAMS,
            gateway=None,  # never reached
            taxonomy=DEFAULT_TAXONOMY,
        )


# -- parsing -----------------------------------------------------------


def test_parse_three_part_chain():
    chain = parse_chain(
        "Analysis Process: step by step\nHarmful Content: a slur\nClassification Result: Bias",
        DEFAULT_TAXONOMY,
    )
    assert chain.analysis_process == "step by step"
    assert chain.harmful_content == "a slur"
    assert chain.parsed_label == "Bias"


def test_parse_missing_section_named():
    with pytest.raises(MalformedChainError) as err:
        parse_chain(
            "Analysis Process: x\nClassification Result: Bias", DEFAULT_TAXONOMY
        )
    assert err.value.missing_section == "Harmful Content"
    assert err.value.raw_text.startswith("Analysis Process")


def test_parse_out_of_order_sections_is_malformed():
    text = "Harmful Content: x\nAnalysis Process: y\nClassification Result: Bias"
    with pytest.raises(MalformedChainError) as err:
        parse_chain(text, DEFAULT_TAXONOMY)
    # Harmful Content never appears after Analysis Process
    assert err.value.missing_section == "Harmful Content"


def test_parse_case_insensitive_label():
    chain = parse_chain(
        "Analysis Process: x\nHarmful Content: none\nClassification Result: harmless",
        DEFAULT_TAXONOMY,
    )
    assert chain.parsed_label == "Harmless"


def test_parse_markdown_decorated_headers():
    text = (
        "**Analysis Process**: reasoning here\n"
        "**Harmful Content**: none\n"
        "**Classification Result**: Gambling"
    )
    chain = parse_chain(text, DEFAULT_TAXONOMY)
    assert chain.parsed_label == "Gambling"
    assert chain.analysis_process == "reasoning here"


def test_parse_chinese_headers_and_label():
    text = "分析过程: 逐步分析\n有害内容: 无\n分类结果: 无害"
    chain = parse_chain(text, DEFAULT_TAXONOMY)
    assert chain.parsed_label == "Harmless"
    assert chain.analysis_process == "逐步分析"


def test_parse_alias_political_harmful():
    text = (
        "Analysis Process: x\nHarmful Content: y\n"
        "Classification Result: Political Harmful"
    )
    assert parse_chain(text, DEFAULT_TAXONOMY).parsed_label == "Politics"


def test_parse_unknown_label():
    with pytest.raises(UnknownLabelError):
        parse_chain(
            "Analysis Process: x\nHarmful Content: y\nClassification Result: Spam",
            DEFAULT_TAXONOMY,
        )


def test_parse_ambiguous_label():
    # Politics and Harmless are both 8 characters: equal-length match
    with pytest.raises(AmbiguousLabelError):
        parse_chain(
            "Analysis Process: x\nHarmful Content: y\n"
            "Classification Result: Politics or Harmless",
            DEFAULT_TAXONOMY,
        )


def test_longest_match_wins():
    # "Pornography" (11) beats "Violence" (8) when both appear
    text = (
        "Analysis Process: x\nHarmful Content: y\n"
        "Classification Result: Pornography rather than Violence"
    )
    assert parse_chain(text, DEFAULT_TAXONOMY).parsed_label == "Pornography"


def test_render_parse_round_trip():
    chain = parse_chain(chain_text("Violence", "took three steps", "a threat"), DEFAULT_TAXONOMY)
    rendered = render_chain(chain)
    again = parse_chain(rendered, DEFAULT_TAXONOMY)
    assert again.analysis_process == chain.analysis_process
    assert again.harmful_content == chain.harmful_content
    assert again.parsed_label == chain.parsed_label


_header_tokens = ("analysis process", "harmful content", "classification result", "分析过程", "有害内容", "分类结果")


@given(
    analysis=st.text(min_size=1, max_size=60).filter(
        lambda t: t.strip() == t and t and not any(h in t.lower() for h in _header_tokens)
    ),
    harmful=st.text(min_size=1, max_size=60).filter(
        lambda t: t.strip() == t and t and not any(h in t.lower() for h in _header_tokens)
    ),
)
@settings(max_examples=60, deadline=None)
def test_render_parse_round_trip_property(analysis, harmful):
    chain = ReasoningChain(
        analysis_process=analysis,
        harmful_content=harmful,
        classification_result="Bias",
        parsed_label="Bias",
        raw_text="",
    )
    parsed = parse_chain(render_chain(chain), DEFAULT_TAXONOMY)
    assert parsed.analysis_process == analysis
    assert parsed.harmful_content == harmful
    assert parsed.parsed_label == "Bias"


def test_split_sections_tolerant():
    assert split_sections("no structure at all") is None
    bodies = split_sections(chain_text("Bias", "because precedent", "slur"))
    assert bodies is not None
    assert bodies["Analysis Process"] == "because precedent"


# -- generation + reflection against mocks ------------------------------


def test_generate_chain_via_mock(quiet_gateway):
    backend = scripted_backend(
        "gen", [seq_entry(chain_text("Bias"), completion_tokens=123)]
    )
    chain = generate_chain(
        TARGET, REFS, backend, PARAMS, gateway=quiet_gateway, taxonomy=DEFAULT_TAXONOMY
    )
    assert chain.parsed_label == "Bias"
    assert chain.completion_tokens == 123


def test_generate_chain_malformed_keeps_raw(quiet_gateway):
    backend = scripted_backend("gen", [seq_entry("garbage with no sections")])
    with pytest.raises(MalformedChainError) as err:
        generate_chain(
            TARGET, [], backend, PARAMS, gateway=quiet_gateway, taxonomy=DEFAULT_TAXONOMY
        )
    assert err.value.raw_text == "garbage with no sections"


def test_refine_chain_accepts_on_round_one(quiet_gateway):
    backend = scripted_backend("refl", [seq_entry(chain_text("Harmless"))])
    out = refine_chain(
        TARGET,
        REFS,
        PRIOR,
        backend,
        PARAMS,
        gateway=quiet_gateway,
        taxonomy=DEFAULT_TAXONOMY,
    )
    assert out.status == ACCEPTED_AFTER_REFLECTION
    assert out.refinement_rounds == 1
    assert out.chain.parsed_label == "Harmless"


def test_refine_chain_drops_after_max_rounds(quiet_gateway):
    backend = scripted_backend(
        "refl", [seq_entry(chain_text("Bias")), seq_entry(chain_text("Violence"))]
    )
    out = refine_chain(
        TARGET,
        REFS,
        PRIOR,
        backend,
        PARAMS,
        gateway=quiet_gateway,
        taxonomy=DEFAULT_TAXONOMY,
        max_rounds=2,
    )
    assert out.status == DROPPED
    assert out.refinement_rounds == 2
    assert not out.accepted


def test_refine_parse_failure_counts_as_failed_round(quiet_gateway):
    backend = scripted_backend(
        "refl", [seq_entry("still not parseable"), seq_entry(chain_text("Harmless"))]
    )
    out = refine_chain(
        TARGET,
        REFS,
        PRIOR,
        backend,
        PARAMS,
        gateway=quiet_gateway,
        taxonomy=DEFAULT_TAXONOMY,
        max_rounds=2,
    )
    assert out.status == ACCEPTED_AFTER_REFLECTION
    assert out.refinement_rounds == 2


# -- augment_dataset ---------------------------------------------------


def augment_setup():
    taxonomy = Taxonomy(categories=("A", "B"), harmless_label="B")
    samples = make_samples(
        taxonomy,
        [("s1", "first text", "A"), ("s2", "second text", "B"), ("s3", "third text", "A")],
    )
    embeddings = {
        "s1": np.array([1.0, 0.0]),
        "s2": np.array([0.0, 1.0]),
        "s3": np.array([0.6, 0.8]),
    }
    index = build_index(samples, embeddings)
    return taxonomy, samples, embeddings, index


def test_augment_all_first_pass(quiet_gateway):
    taxonomy, samples, embeddings, index = augment_setup()
    backend = scripted_backend(
        "gen",
        [seq_entry(chain_text("A")), seq_entry(chain_text("B")), seq_entry(chain_text("A"))],
    )
    result = augment_dataset(
        samples, index, embeddings, backend, PARAMS,
        gateway=quiet_gateway, k=2,
    )
    assert [a.status for a in result.samples] == [ACCEPTED_FIRST_PASS] * 3
    assert result.manifest["counters"][ACCEPTED_FIRST_PASS] == 3
    assert all(a.chain.parsed_label == a.sample.label for a in result.samples)


def test_augment_reflection_fixes_one(quiet_gateway):
    taxonomy, samples, embeddings, index = augment_setup()
    # sorted id order: s1 ok, s2 wrong then fixed by reflection, s3 ok
    backend = scripted_backend(
        "gen",
        [
            seq_entry(chain_text("A")),
            seq_entry(chain_text("A")),  # s2 gold is B: mismatch
            seq_entry(chain_text("B")),  # reflection corrects it
            seq_entry(chain_text("A")),
        ],
    )
    result = augment_dataset(
        samples, index, embeddings, backend, PARAMS, gateway=quiet_gateway, k=2
    )
    counters = result.manifest["counters"]
    assert counters[ACCEPTED_FIRST_PASS] == 2
    assert counters[ACCEPTED_AFTER_REFLECTION] == 1
    assert counters[DROPPED] == 0
    assert result.manifest["statuses"]["s2"] == ACCEPTED_AFTER_REFLECTION
    assert all(a.accepted for a in result.samples)


def test_augment_isolates_errors(quiet_gateway):
    taxonomy, samples, embeddings, index = augment_setup()
    backend = scripted_backend(
        "gen",
        [
            seq_entry(chain_text("A")),
            seq_entry("not parseable at all"),  # s2 first pass: hard parse error
            seq_entry(chain_text("A")),
        ],
    )
    result = augment_dataset(
        samples, index, embeddings, backend, PARAMS, gateway=quiet_gateway, k=2
    )
    assert result.manifest["counters"]["errors"] == 1
    assert result.manifest["statuses"]["s2"] == "error"
    assert [a.sample.id for a in result.samples] == ["s1", "s3"]


def test_augment_parallel_matches_sequential():
    from coapipe.gateway import Gateway, RetryPolicy
    from conftest import keyed_entry
    from coapipe.retrieval import normalize, query_topk

    taxonomy, samples, embeddings, index = augment_setup()
    # keyed entries survive any completion order across worker threads
    entries = []
    for s in samples:
        refs = query_topk(index, normalize(embeddings[s.id]), 2, exclude_id=s.id)
        prompt = build_generation_prompt(s, refs, taxonomy)
        entries.append(keyed_entry(prompt.messages(), chain_text(s.label)))

    def run(workers: int):
        gateway = Gateway(retry=RetryPolicy(jitter=False), sleep=lambda _s: None)
        backend = scripted_backend("gen", list(entries))
        return augment_dataset(
            samples, index, embeddings, backend, PARAMS,
            gateway=gateway, k=2, workers=workers,
        )

    sequential = run(1)
    parallel = run(4)
    assert [a.sample.id for a in parallel.samples] == [
        a.sample.id for a in sequential.samples
    ]
    assert parallel.manifest["counters"] == sequential.manifest["counters"]
    assert [a.chain.raw_text for a in parallel.samples] == [
        a.chain.raw_text for a in sequential.samples
    ]


def test_augment_fail_fast_raises(quiet_gateway):
    taxonomy, samples, embeddings, index = augment_setup()
    backend = scripted_backend("gen", [seq_entry("broken")])
    with pytest.raises(MalformedChainError):
        augment_dataset(
            samples, index, embeddings, backend, PARAMS,
            gateway=quiet_gateway, k=2, fail_fast=True,
        )
