"""Run configuration: built-in defaults < config file < command-line flags.

The config file is flat ``key=value`` text mirroring flag names (dashes or
underscores both accepted); ``#`` starts a comment.  Every command echoes
its effective configuration into its summary output.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

from .errors import DataError


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass
class RunConfig:
    # training
    lr: float = 0.001
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 200
    negatives_per_positive: int = 1
    eval_negatives: int = 100
    # backbone
    backbone: str = "sasrec"
    h: int = 64
    max_seq_len: int = 100
    n_layers: int = 0  # 0 -> backbone default
    n_heads: int = 1
    dropout: float = 0.2
    # retrieval / fusion
    k_neighbors: int = 10
    d_sem: int = 0  # 0 -> taken from the embedding files
    h_hidden: int = 0  # 0 -> 2*h
    head_ratio: float = 0.2
    # preprocessing
    min_user_len: int = 3
    min_item_freq: int = 3
    # encoder & ablations
    encoder: str = "semantic"
    no_attention: bool = False
    no_similar: bool = False
    no_global: bool = False
    softmax_variant: bool = False

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not (0.0 < self.head_ratio < 1.0):
            raise ValueError("head_ratio must be in (0, 1)")
        if self.encoder not in ("semantic", "id"):
            raise ValueError(f"encoder must be 'semantic' or 'id', got {self.encoder!r}")

    def echo(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path) -> dict:
    """Read flat key=value pairs, coercing to the RunConfig field types."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in _FIELD_TYPES:
                raise DataError(f"{path}: line {lineno}: unknown key {key!r}")
            ftype = _FIELD_TYPES[key]
            try:
                if ftype in ("bool", bool):
                    values[key] = _parse_bool(value)
                elif ftype in ("int", int):
                    values[key] = int(value)
                elif ftype in ("float", float):
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return values


def resolve_config(file_values: dict | None, flag_values: dict) -> RunConfig:
    """Merge defaults, config-file values, and explicitly set flags."""
    merged: dict = {}
    if file_values:
        merged.update(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return RunConfig(**merged)
