from __future__ import annotations

import pytest

from coapipe.corpus import DEFAULT_TAXONOMY, ModerationSample, SampleSet, Taxonomy
from coapipe.gateway import BackendSpec, Gateway, RetryPolicy, request_fingerprint


@pytest.fixture
def taxonomy() -> Taxonomy:
    return DEFAULT_TAXONOMY


@pytest.fixture
def two_cat_taxonomy() -> Taxonomy:
    return Taxonomy(categories=("A", "B"), harmless_label="B")


def make_samples(taxonomy: Taxonomy, spec: list[tuple[str, str, str]]) -> SampleSet:
    """spec rows: (id, text, label)."""
    return SampleSet(
        taxonomy,
        [ModerationSample(id=i, text=t, label=l, split="train") for i, t, l in spec],
    )


def chain_text(label: str, analysis: str = "", harmful: str = "none") -> str:
    body = analysis or f"The content reads as {label.lower()} in tone."
    return (
        f"Analysis Process: {body}\n"
        f"Harmful Content: {harmful}\n"
        f"Classification Result: {label}"
    )


def scripted_backend(name: str, entries: list[dict]) -> BackendSpec:
    return BackendSpec(name=name, kind="mock_chat", script=tuple(entries))


def keyed_entry(messages, text: str, prompt_tokens: int = 10, completion_tokens: int = 20, fail_times: int = 0) -> dict:
    return {
        "key": request_fingerprint(messages),
        "text": text,
        "prompt_tokens": prompt_tokens,
        "completion_tokens": completion_tokens,
        "fail_times": fail_times,
    }


def seq_entry(text: str, prompt_tokens: int = 10, completion_tokens: int = 20, fail_times: int = 0) -> dict:
    return {
        "text": text,
        "prompt_tokens": prompt_tokens,
        "completion_tokens": completion_tokens,
        "fail_times": fail_times,
    }


@pytest.fixture
def quiet_gateway() -> Gateway:
    """Gateway that never really sleeps; deterministic jitter."""
    return Gateway(retry=RetryPolicy(jitter=False), sleep=lambda _s: None)
