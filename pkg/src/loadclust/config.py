"""Pipeline configuration: plain key-value file, CLI overrides, provenance hash.

The config file holds ``key = value`` lines (``#`` starts a comment; lists
are comma-separated).  Every artifact written by the CLI carries a
provenance hash computed over the fields that define the extracted
features, so downstream commands can refuse to combine artifacts that did
not come from the same extraction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import ConfigError

METHODS = ("AC", "PAC", "QC")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    input: str = ""
    out: str = "out"
    # ingest / preprocess
    missing_threshold: float = 0.10
    zero_policy: str = "missing"
    zero_floor: float = 1e-3
    max_gap: int = 3
    period: int = 48
    # features
    k_max: int = 96
    select_k: bool = False
    p_max: int = 96
    qc_lags: tuple[int, ...] = (1,)
    qc_quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    # dissimilarity
    standardize: bool = False
    save_matrix: bool = True
    mmap_threshold: int = 10000
    # clustering
    linkage: str = "complete"
    cut_k_ac: int | None = None
    cut_k_pac: int | None = None
    cut_k_qc: int | None = None
    cut_height_ac: float | None = None
    cut_height_pac: float | None = None
    cut_height_qc: float | None = None
    atypical_fraction: float = 0.01
    # evaluation
    profile_slots: int = 48
    include_atypical: bool = False
    # tree
    tree_max_depth: int = 12
    tree_min_leaf: int = 5
    tree_min_impurity_decrease: float = 1e-4
    importance_mode: str = "impurity"
    cv_folds: int = 10
    # run control
    seed: int = 0
    threads: int = 1

    #: fields that define the extracted features; artifacts derived from the
    #: same extraction share the hash over exactly these
    HASH_FIELDS = (
        "input", "missing_threshold", "zero_policy", "zero_floor", "max_gap",
        "period", "k_max", "select_k", "p_max", "qc_lags", "qc_quantiles",
        "seed",
    )

    def validate(self) -> None:
        if not 0.0 <= self.missing_threshold <= 1.0:
            raise ConfigError("missing_threshold must be in [0, 1]")
        if self.zero_policy not in ("missing", "floor"):
            raise ConfigError(f"unknown zero_policy {self.zero_policy!r}")
        if self.zero_floor <= 0:
            raise ConfigError("zero_floor must be > 0")
        if self.max_gap < 0:
            raise ConfigError("max_gap must be >= 0")
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.p_max < 1:
            raise ConfigError("p_max must be >= 1")
        if not self.qc_lags or any(j < 1 for j in self.qc_lags):
            raise ConfigError("qc_lags must be positive")
        if not self.qc_quantiles or any(not 0 < q < 1 for q in self.qc_quantiles):
            raise ConfigError("qc_quantiles must lie in (0, 1)")
        if self.linkage not in ("single", "complete", "average"):
            raise ConfigError(f"unknown linkage {self.linkage!r}")
        if not 0.0 <= self.atypical_fraction < 1.0:
            raise ConfigError("atypical_fraction must be in [0, 1)")
        if self.profile_slots not in (24, 48):
            raise ConfigError("profile_slots must be 24 or 48")
        if self.importance_mode not in ("impurity", "permutation"):
            raise ConfigError(f"unknown importance_mode {self.importance_mode!r}")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def cut_criterion(self, method: str) -> tuple[int | None, float | None]:
        """(k, height) configured for one of AC/PAC/QC; both may be None."""
        suffix = method.lower()
        return (
            getattr(self, f"cut_k_{suffix}"),
            getattr(self, f"cut_height_{suffix}"),
        )

    def config_hash(self) -> str:
        payload = "\n".join(
            f"{name}={_format_value(getattr(self, name))}"
            for name in self.HASH_FIELDS
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_overrides(self, **overrides) -> "PipelineConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str):
    text = text.strip()
    defaults = PipelineConfig()
    if not hasattr(defaults, name):
        raise ConfigError(f"unknown config key {name!r}")
    if text.lower() == "none":
        return None
    kind = {f.name: f.type for f in fields(PipelineConfig)}[name]
    try:
        if name in ("qc_lags",):
            return tuple(int(v) for v in text.split(","))
        if name in ("qc_quantiles",):
            return tuple(float(v) for v in text.split(","))
        if kind in ("bool",):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if kind in ("int", "int | None"):
            return int(text)
        if kind in ("float", "float | None"):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}")


def config_from_mapping(mapping: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    parsed = {name: _parse_value(name, str(value)) for name, value in mapping.items()}
    cfg = replace(cfg, **parsed)
    cfg.validate()
    return cfg


def read_config(path) -> PipelineConfig:
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping)


def write_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        for f in fields(PipelineConfig):
            fh.write(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n")
