from __future__ import annotations

import json

import numpy as np
import pytest

from coapipe.coagen import (
    ACCEPTED_FIRST_PASS,
    DROPPED,
    AugmentedSample,
    build_generation_prompt,
    parse_chain,
)
from coapipe.corpus import Taxonomy
from coapipe.errors import InvariantViolationError
from coapipe.exporter import (
    build_preference_pairs,
    export_dpo,
    export_sft,
    load_dpo_file,
    load_sft_file,
)
from coapipe.fileio import sha256_file
from coapipe.gateway import SamplingParams
from coapipe.retrieval import build_index

from conftest import chain_text, keyed_entry, make_samples, scripted_backend

TAX = Taxonomy(categories=("A", "B"), harmless_label="B")
PARAMS = SamplingParams()


def accepted(sample_id: str, text: str, label: str) -> AugmentedSample:
    from coapipe.corpus import ModerationSample

    sample = ModerationSample(id=sample_id, text=text, label=label, split="train")
    chain = parse_chain(chain_text(label, f"analysis for {sample_id}"), TAX)
    return AugmentedSample(sample, chain, 0, ACCEPTED_FIRST_PASS)


# -- SFT export --------------------------------------------------------


def test_export_sft_three_records_stable_hash(tmp_path):
    augs = [accepted(f"s{i}", f"text {i}", "A") for i in range(3)]
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    m1 = export_sft(augs, p1, TAX)
    m2 = export_sft(augs, p2, TAX)
    assert m1["records"] == 3
    assert m1["sha256"] == m2["sha256"]
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    assert list(json.loads(lines[0]).keys()) == ["prompt", "completion", "meta"]
    assert p1.read_text(encoding="utf-8").endswith("\n")


def test_export_sft_empty(tmp_path):
    path = tmp_path / "sft.jsonl"
    manifest = export_sft([], path, TAX)
    assert manifest["records"] == 0
    assert path.read_text() == ""


def test_export_sft_rejects_unaccepted(tmp_path):
    aug = accepted("s1", "text", "A")
    bad = AugmentedSample(aug.sample, aug.chain, 1, DROPPED)
    with pytest.raises(InvariantViolationError):
        export_sft([bad], tmp_path / "x.jsonl", TAX)


def test_export_sft_gate_catches_label_mismatch(tmp_path):
    # forced fixture: accepted status but the chain label contradicts gold
    good = accepted("s1", "text", "A")
    lying = AugmentedSample(
        good.sample, parse_chain(chain_text("B"), TAX), 0, ACCEPTED_FIRST_PASS
    )
    with pytest.raises(InvariantViolationError):
        export_sft([lying], tmp_path / "x.jsonl", TAX)


def test_sft_prompt_is_plain_and_completion_parses_back(tmp_path):
    aug = accepted("s1", "the sample text", "A")
    path = tmp_path / "sft.jsonl"
    export_sft([aug], path, TAX)
    [record] = load_sft_file(path)
    assert record.prompt == build_generation_prompt(aug.sample, [], TAX).render()
    assert "Example Cases" not in record.prompt.split("Format Requirements")[0]
    assert parse_chain(record.completion, TAX).parsed_label == "A"


# -- preference pairs --------------------------------------------------


def pair_setup():
    samples = make_samples(
        TAX,
        [("s1", "first text", "A"), ("s2", "second text", "B")],
    )
    embeddings = {"s1": np.array([1.0, 0.0]), "s2": np.array([0.0, 1.0])}
    index = build_index(samples, embeddings)
    return samples, embeddings, index


def scripted_pair_backend(samples, index, embeddings, responses: dict[str, tuple[str, str]]):
    """responses: sample_id -> (with_refs_text, plain_text)."""
    from coapipe.retrieval import query_topk

    entries = []
    for sample in samples:
        refs = query_topk(index, embeddings[sample.id], 32, exclude_id=sample.id)
        with_refs = build_generation_prompt(sample, refs, TAX)
        plain = build_generation_prompt(sample, [], TAX)
        chosen_text, rejected_text = responses[sample.id]
        entries.append(keyed_entry(with_refs.messages(), chosen_text, completion_tokens=50))
        entries.append(keyed_entry(plain.messages(), rejected_text, completion_tokens=30))
    return scripted_backend("sft", entries)


def test_pairs_kept_and_skipped(quiet_gateway):
    samples, embeddings, index = pair_setup()
    backend = scripted_pair_backend(
        samples,
        index,
        embeddings,
        {
            "s1": (chain_text("A", "mirrors a similar case"), chain_text("B")),
            "s2": (chain_text("A"), chain_text("B")),  # chosen wrong for s2 (gold B)
        },
    )
    result = build_preference_pairs(
        samples, index, embeddings, backend, PARAMS, 32, gateway=quiet_gateway
    )
    assert [p.sample_id for p in result.pairs] == ["s1"]
    assert result.manifest["skipped"][0]["id"] == "s2"
    pair = result.pairs[0]
    assert pair.chosen_meta.had_references is True
    assert pair.rejected_meta.had_references is False
    assert pair.chosen_meta.parsed_label == "A"
    assert pair.chosen_meta.completion_tokens == 50
    assert pair.rejected_meta.completion_tokens == 30


def test_pair_prompt_is_reference_free(quiet_gateway):
    samples, embeddings, index = pair_setup()
    backend = scripted_pair_backend(
        samples,
        index,
        embeddings,
        {
            "s1": (chain_text("A"), chain_text("A")),
            "s2": (chain_text("B"), chain_text("A")),
        },
    )
    result = build_preference_pairs(
        samples, index, embeddings, backend, PARAMS, 32, gateway=quiet_gateway
    )
    assert len(result.pairs) == 2
    for pair, sample in zip(result.pairs, samples):
        assert pair.prompt == build_generation_prompt(sample, [], TAX).render()
        # no other sample's text leaked into the conditioning prompt
        for other in samples:
            if other.id != sample.id:
                assert other.text not in pair.prompt


def test_pairs_strict_mode_drops_correct_rejected(quiet_gateway):
    samples, embeddings, index = pair_setup()
    backend = scripted_pair_backend(
        samples,
        index,
        embeddings,
        {
            "s1": (chain_text("A"), chain_text("A")),  # rejected also right
            "s2": (chain_text("B"), chain_text("A")),
        },
    )
    result = build_preference_pairs(
        samples, index, embeddings, backend, PARAMS, 32,
        gateway=quiet_gateway, strict=True,
    )
    assert [p.sample_id for p in result.pairs] == ["s2"]
    assert any("strict" in s["reason"] for s in result.manifest["skipped"])


# -- DPO export --------------------------------------------------------


def test_export_dpo_round_trip(tmp_path, quiet_gateway):
    samples, embeddings, index = pair_setup()
    backend = scripted_pair_backend(
        samples,
        index,
        embeddings,
        {
            "s1": (chain_text("A"), chain_text("B")),
            "s2": (chain_text("B"), chain_text("A")),
        },
    )
    result = build_preference_pairs(
        samples, index, embeddings, backend, PARAMS, 32, gateway=quiet_gateway
    )
    path = tmp_path / "dpo.jsonl"
    manifest = export_dpo(result.pairs, path)
    assert manifest["records"] == 2
    lines = path.read_text(encoding="utf-8").splitlines()
    assert list(json.loads(lines[0]).keys()) == ["prompt", "chosen", "rejected", "meta"]
    reloaded = load_dpo_file(path)
    assert reloaded == result.pairs


def test_export_dpo_empty(tmp_path):
    path = tmp_path / "dpo.jsonl"
    manifest = export_dpo([], path)
    assert manifest["records"] == 0
    assert path.read_text() == ""
    assert manifest["sha256"] == sha256_file(path)


def test_export_dpo_deterministic(tmp_path, quiet_gateway):
    samples, embeddings, index = pair_setup()

    def run(dirname):
        backend = scripted_pair_backend(
            samples,
            index,
            embeddings,
            {
                "s1": (chain_text("A"), chain_text("B")),
                "s2": (chain_text("B"), chain_text("B")),
            },
        )
        result = build_preference_pairs(
            samples, index, embeddings, backend, PARAMS, 32, gateway=quiet_gateway
        )
        path = tmp_path / dirname / "dpo.jsonl"
        return export_dpo(result.pairs, path)["sha256"]

    assert run("one") == run("two")
