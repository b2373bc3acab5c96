"""Declarative pipeline configuration (TOML) with env-var interpolation.

Secrets never live in the file: any "${VAR}" value is resolved from the
environment at load time, and the config echo written next to artifacts is
the raw, uninterpolated document, so echoes stay byte-stable and safe.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import DEFAULT_TAXONOMY, Taxonomy
from .errors import ConfigInvalidError
from .gateway import BackendSpec, SamplingParams
from .metrics import DEFAULT_COA_LEXICON

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value, where: str):
    if isinstance(value, str):

        def sub(match: re.Match) -> str:
            name = match.group(1)
            resolved = os.environ.get(name)
            if resolved is None:
                raise ConfigInvalidError(where, f"environment variable {name!r} is not set")
            return resolved

        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{where}.{k}" if where else k) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, f"{where}[{i}]") for i, v in enumerate(value)]
    return value


@dataclass(frozen=True)
class SplitSpec:
    train_per_cat: int = 1200
    test_per_cat: int = 250
    seed: int = 0


@dataclass(frozen=True)
class DpoSpec:
    beta: float = 0.1
    learning_rate: float = 1.0e-6
    epochs: int = 3
    pairs_path: str = ""
    n_synthetic_pairs: int = 500
    vocab_size: int = 4


@dataclass
class PipelineConfig:
    dataset_path: str
    taxonomy: Taxonomy
    backends: dict[str, BackendSpec]
    sampling: SamplingParams
    split: SplitSpec | None = None
    dedup_threshold: float = 0.92
    retrieval_k: int = 32
    exclude_self: bool = True
    include_ref_labels: bool = True
    same_label_only: bool = False
    max_rounds: int = 1
    dpo: DpoSpec = field(default_factory=DpoSpec)
    sft_trainer: dict = field(default_factory=dict)
    coa_lexicon: tuple[str, ...] = DEFAULT_COA_LEXICON
    seed: int = 0
    output_dir: str = "out"
    max_in_flight: int = 4
    rate_limit_per_s: float = 0.0
    workers: int = 1
    fail_fast: bool = False
    raw: dict = field(default_factory=dict)  # uninterpolated document, for echoes

    def backend(self, role: str) -> BackendSpec:
        spec = self.backends.get(role)
        if spec is None and role == "reflection":
            spec = self.backends.get("generation")
        if spec is None:
            raise ConfigInvalidError(f"backends.{role}", "backend is not configured")
        return spec


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigInvalidError(f"{where}.{key}", "required field is missing")
    return table[key]


def _backend_spec(name: str, table: dict) -> BackendSpec:
    kind = _require(table, "kind", f"backends.{name}")
    inline_script = table.get("script", ())
    if inline_script and not isinstance(inline_script, list):
        raise ConfigInvalidError(f"backends.{name}.script", "must be a list of entries")
    return BackendSpec(
        name=name,
        kind=kind,
        endpoint=table.get("endpoint", ""),
        model=table.get("model", ""),
        api_key_env=table.get("api_key_env", ""),
        script_path=table.get("script_path", ""),
        script=tuple(inline_script),
        seed=int(table.get("seed", 0)),
        dim=int(table.get("dim", 32)),
        timeout=float(table.get("timeout", 60.0)),
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigInvalidError("config", f"file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalidError("config", f"TOML parse error: {exc}") from exc

    doc = _interpolate(raw, "")

    dataset = doc.get("dataset", {})
    dataset_path = _require(dataset, "path", "dataset")
    categories = dataset.get("categories")
    if categories is None:
        taxonomy = DEFAULT_TAXONOMY
    else:
        taxonomy = Taxonomy(
            categories=tuple(categories),
            harmless_label=dataset.get("harmless_label", categories[-1]),
        )

    split_table = doc.get("split")
    split = None
    if split_table is not None:
        split = SplitSpec(
            train_per_cat=int(split_table.get("train_per_cat", 1200)),
            test_per_cat=int(split_table.get("test_per_cat", 250)),
            seed=int(split_table.get("seed", doc.get("run", {}).get("seed", 0))),
        )

    backends = {
        name: _backend_spec(name, table)
        for name, table in doc.get("backends", {}).items()
    }

    sampling_table = doc.get("sampling", {})
    sampling = SamplingParams(
        temperature=float(sampling_table.get("temperature", 0.8)),
        top_p=float(sampling_table.get("top_p", 0.95)),
        top_k=sampling_table.get("top_k"),
        max_tokens=int(sampling_table.get("max_tokens", 1024)),
        seed=sampling_table.get("seed"),
    )

    retrieval_table = doc.get("retrieval", {})
    refinement_table = doc.get("refinement", {})
    dpo_table = doc.get("dpo", {})
    run_table = doc.get("run", {})
    coa_table = doc.get("coa", {})

    return PipelineConfig(
        dataset_path=dataset_path,
        taxonomy=taxonomy,
        backends=backends,
        sampling=sampling,
        split=split,
        dedup_threshold=float(doc.get("dedup", {}).get("threshold", 0.92)),
        retrieval_k=int(retrieval_table.get("k", 32)),
        exclude_self=bool(retrieval_table.get("exclude_self", True)),
        include_ref_labels=bool(retrieval_table.get("include_ref_labels", True)),
        same_label_only=bool(retrieval_table.get("same_label_only", False)),
        max_rounds=int(refinement_table.get("max_rounds", 1)),
        dpo=DpoSpec(
            beta=float(dpo_table.get("beta", 0.1)),
            learning_rate=float(dpo_table.get("learning_rate", 1.0e-6)),
            epochs=int(dpo_table.get("epochs", 3)),
            pairs_path=dpo_table.get("pairs_path", ""),
            n_synthetic_pairs=int(dpo_table.get("n_synthetic_pairs", 500)),
            vocab_size=int(dpo_table.get("vocab_size", 4)),
        ),
        sft_trainer=dict(doc.get("sft_trainer", {})),
        coa_lexicon=tuple(coa_table.get("lexicon", DEFAULT_COA_LEXICON)),
        seed=int(run_table.get("seed", 0)),
        output_dir=run_table.get("output_dir", "out"),
        max_in_flight=int(run_table.get("max_in_flight", 4)),
        rate_limit_per_s=float(run_table.get("rate_limit_per_s", 0.0)),
        workers=int(run_table.get("workers", 1)),
        fail_fast=bool(run_table.get("fail_fast", False)),
        raw=raw,
    )
