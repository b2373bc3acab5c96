from __future__ import annotations

import json
import threading
import time

import numpy as np
import pytest

from coapipe.errors import (
    BadStatusError,
    CountMismatchError,
    DimensionMismatchError,
    MockScriptExhausted,
    TransportError,
    ValidationError,
)
from coapipe.gateway import (
    BackendSpec,
    Gateway,
    RetryPolicy,
    SamplingParams,
    estimate_tokens,
    mock_embedding,
    request_fingerprint,
)

from conftest import keyed_entry, scripted_backend, seq_entry

PARAMS = SamplingParams()
MSGS = [("user", "hello")]


def gw(**kwargs) -> Gateway:
    kwargs.setdefault("sleep", lambda _s: None)
    kwargs.setdefault("retry", RetryPolicy(jitter=False))
    return Gateway(**kwargs)


# -- mock chat ---------------------------------------------------------


def test_mock_scripted_ok():
    backend = scripted_backend("m", [seq_entry("OK", prompt_tokens=3, completion_tokens=1)])
    result = gw().chat_complete(backend, MSGS, PARAMS)
    assert result.text == "OK"
    assert result.attempt_count == 1
    assert result.prompt_tokens == 3
    assert result.completion_tokens == 1
    assert result.backend_id == "m"


def test_mock_fail_twice_then_succeed():
    backend = scripted_backend("m", [seq_entry("eventually", fail_times=2)])
    result = gw().chat_complete(backend, MSGS, PARAMS)
    assert result.text == "eventually"
    assert result.attempt_count == 3


def test_mock_exhausted_retries_raises_transport():
    backend = scripted_backend("m", [seq_entry("never", fail_times=99)])
    with pytest.raises(TransportError):
        gw(retry=RetryPolicy(max_attempts=4, jitter=False)).chat_complete(
            backend, MSGS, PARAMS
        )


def test_mock_script_exhausted():
    backend = scripted_backend("m", [])
    with pytest.raises(MockScriptExhausted):
        gw().chat_complete(backend, MSGS, PARAMS)


def test_mock_keyed_entries_survive_reordering():
    m1 = [("user", "first prompt")]
    m2 = [("user", "second prompt")]
    backend = scripted_backend(
        "m", [keyed_entry(m1, "answer one"), keyed_entry(m2, "answer two")]
    )
    gateway = gw()
    # issue in the opposite order of the script
    assert gateway.chat_complete(backend, m2, PARAMS).text == "answer two"
    assert gateway.chat_complete(backend, m1, PARAMS).text == "answer one"


def test_mock_never_touches_transport():
    def exploding_transport(url, headers, payload, timeout):
        raise AssertionError("network transport called for a mock backend")

    backend = scripted_backend("m", [seq_entry("quiet")])
    gateway = gw(transport=exploding_transport)
    assert gateway.chat_complete(backend, MSGS, PARAMS).text == "quiet"
    embeds = gateway.embed(
        BackendSpec(name="e", kind="mock_embed", seed=1, dim=8), ["a"]
    )
    assert embeds[0].shape == (8,)


def test_usage_accounting_is_additive():
    entries = [
        seq_entry("a", prompt_tokens=10, completion_tokens=5),
        seq_entry("b", prompt_tokens=7, completion_tokens=2),
        seq_entry("c", prompt_tokens=1, completion_tokens=9),
    ]
    backend = scripted_backend("m", entries)
    gateway = gw()
    for _ in range(3):
        gateway.chat_complete(backend, MSGS, PARAMS)
    assert gateway.usage.prompt_tokens == 18
    assert gateway.usage.completion_tokens == 16
    assert gateway.usage.calls == 3
    assert gateway.usage.total_tokens == 34


def test_messages_must_be_non_empty():
    backend = scripted_backend("m", [seq_entry("x")])
    with pytest.raises(ValidationError):
        gw().chat_complete(backend, [], PARAMS)


def test_chat_kind_enforced():
    backend = BackendSpec(name="e", kind="mock_embed")
    with pytest.raises(ValidationError):
        gw().chat_complete(backend, MSGS, PARAMS)


# -- remote chat -------------------------------------------------------


def remote(name="r") -> BackendSpec:
    return BackendSpec(name=name, kind="remote_chat", endpoint="http://x/v1/chat", model="m")


def chat_body(text="hi", usage=True) -> str:
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage:
        body["usage"] = {"prompt_tokens": 11, "completion_tokens": 4}
    return json.dumps(body)


def test_remote_401_no_retry():
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(payload)
        return 401, '{"error": "bad key"}'

    with pytest.raises(BadStatusError) as err:
        gw(transport=transport).chat_complete(remote(), MSGS, PARAMS)
    assert err.value.status == 401
    assert "bad key" in err.value.body_excerpt
    assert len(calls) == 1


def test_remote_retries_5xx_then_succeeds():
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(1)
        if len(calls) < 3:
            return 503, "busy"
        return 200, chat_body("done")

    result = gw(transport=transport).chat_complete(remote(), MSGS, PARAMS)
    assert result.text == "done"
    assert result.attempt_count == 3
    assert result.prompt_tokens == 11


def test_remote_exhausts_retries_on_429():
    calls = []

    def transport(url, headers, payload, timeout):
        calls.append(1)
        return 429, "slow down"

    with pytest.raises(TransportError):
        gw(
            transport=transport, retry=RetryPolicy(max_attempts=5, jitter=False)
        ).chat_complete(remote(), MSGS, PARAMS)
    assert len(calls) == 5


def test_remote_payload_shape_and_params():
    seen = {}

    def transport(url, headers, payload, timeout):
        seen.update(payload=payload, url=url, headers=headers)
        return 200, chat_body()

    params = SamplingParams(temperature=0.8, top_p=0.9, top_k=40, max_tokens=64, seed=5)
    gw(transport=transport).chat_complete(remote(), MSGS, params)
    payload = seen["payload"]
    assert payload["messages"] == [{"role": "user", "content": "hello"}]
    assert payload["temperature"] == 0.8
    assert payload["top_p"] == 0.9
    assert payload["top_k"] == 40
    assert payload["max_tokens"] == 64
    assert payload["seed"] == 5


def test_remote_usage_fallback_estimate():
    def transport(url, headers, payload, timeout):
        return 200, chat_body("four byte text!!", usage=False)

    result = gw(transport=transport).chat_complete(remote(), MSGS, PARAMS)
    assert result.usage_estimated
    assert result.prompt_tokens == estimate_tokens("hello")
    assert result.completion_tokens == estimate_tokens("four byte text!!")


def test_bearer_token_from_env(monkeypatch):
    monkeypatch.setenv("TEST_GW_KEY", "sekrit")
    seen = {}

    def transport(url, headers, payload, timeout):
        seen.update(headers)
        return 200, chat_body()

    backend = BackendSpec(
        name="r", kind="remote_chat", endpoint="http://x", model="m", api_key_env="TEST_GW_KEY"
    )
    gw(transport=transport).chat_complete(backend, MSGS, PARAMS)
    assert seen["Authorization"] == "Bearer sekrit"


def test_bounded_concurrency():
    limit = 3
    in_flight = 0
    peak = 0
    lock = threading.Lock()

    def transport(url, headers, payload, timeout):
        nonlocal in_flight, peak
        with lock:
            in_flight += 1
            peak = max(peak, in_flight)
        time.sleep(0.01)
        with lock:
            in_flight -= 1
        return 200, chat_body()

    gateway = Gateway(max_in_flight=limit, transport=transport)
    threads = [
        threading.Thread(target=gateway.chat_complete, args=(remote(), MSGS, PARAMS))
        for _ in range(12)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak <= limit


# -- embeddings --------------------------------------------------------


def test_mock_embed_deterministic():
    backend = BackendSpec(name="e", kind="mock_embed", seed=13, dim=16)
    gateway = gw()
    a1 = gateway.embed(backend, ["the same text"])[0]
    a2 = gateway.embed(backend, ["the same text"])[0]
    assert np.array_equal(a1, a2)
    assert a1.shape == (16,)
    assert abs(np.linalg.norm(a1) - 1.0) < 1e-9
    b = gateway.embed(backend, ["different text"])[0]
    assert not np.array_equal(a1, b)
    # a different seed gives different vectors for the same text
    other = BackendSpec(name="e2", kind="mock_embed", seed=14, dim=16)
    assert not np.array_equal(a1, gateway.embed(other, ["the same text"])[0])


def test_mock_embed_two_texts_same_dim():
    backend = BackendSpec(name="e", kind="mock_embed", seed=0, dim=8)
    vectors = gw().embed(backend, ["a", "b"])
    assert len(vectors) == 2
    assert vectors[0].shape == vectors[1].shape == (8,)


def test_mock_embedding_function_matches_backend():
    backend = BackendSpec(name="e", kind="mock_embed", seed=3, dim=4)
    via_gateway = gw().embed(backend, ["t"])[0]
    assert np.array_equal(via_gateway, mock_embedding("t", 3, 4))


def test_remote_embed_count_mismatch():
    def transport(url, headers, payload, timeout):
        return 200, json.dumps(
            {"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [0.0, 1.0]}]}
        )

    backend = BackendSpec(name="e", kind="remote_embed", endpoint="http://x", model="m")
    with pytest.raises(CountMismatchError):
        gw(transport=transport).embed(backend, ["a", "b", "c"])


def test_remote_embed_ragged_dims():
    def transport(url, headers, payload, timeout):
        return 200, json.dumps(
            {"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [0.0]}]}
        )

    backend = BackendSpec(name="e", kind="remote_embed", endpoint="http://x", model="m")
    with pytest.raises(DimensionMismatchError):
        gw(transport=transport).embed(backend, ["a", "b"])


def test_remote_embed_orders_by_index():
    def transport(url, headers, payload, timeout):
        return 200, json.dumps(
            {
                "data": [
                    {"index": 1, "embedding": [0.0, 1.0]},
                    {"index": 0, "embedding": [1.0, 0.0]},
                ]
            }
        )

    backend = BackendSpec(name="e", kind="remote_embed", endpoint="http://x", model="m")
    vectors = gw(transport=transport).embed(backend, ["a", "b"])
    assert np.array_equal(vectors[0], [1.0, 0.0])
    assert np.array_equal(vectors[1], [0.0, 1.0])


# -- misc --------------------------------------------------------------


def test_request_fingerprint_stable_and_sensitive():
    assert request_fingerprint(MSGS) == request_fingerprint([("user", "hello")])
    assert request_fingerprint(MSGS) != request_fingerprint([("user", "hello!")])
    assert len(request_fingerprint(MSGS)) == 16


def test_sampling_params_validation():
    with pytest.raises(ValidationError):
        SamplingParams(temperature=-0.1)
    with pytest.raises(ValidationError):
        SamplingParams(top_p=0.0)
    with pytest.raises(ValidationError):
        SamplingParams(max_tokens=0)


def test_estimate_tokens_ceil_bytes_over_four():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("日本語") == 3  # 9 utf-8 bytes -> ceil(9/4)
