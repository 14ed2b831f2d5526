"""Flat key=value run configuration with overrides and a content hash."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


_IO_KEYS = ("workdir",)


@dataclass
class RunConfig:
    # data
    data_seed: int = 0
    n_persons: int = 300
    n_cities: int = 100
    n_test_cities: int = 25
    n_train: int = 1600
    n_test: int = 200
    two_hop_fraction: float = 0.5
    hops: int = 0  # 0 = mixed, 1 or 2 = only that hop count
    # reference encoder
    d_ret: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    enc_d_ff: int = 128
    enc_epochs: int = 6
    enc_lr: float = 3e-3
    enc_beta: float = 0.05
    # latent model
    m: int = 4
    n: int = 16
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_context: int = 192
    dropout: float = 0.0
    # objective
    arm: str = "kl"
    beta: float = 0.03
    lambda_ret: float = 1.0
    n_pseudo: int = 16
    # explicit-text warm start and slot initialisation
    warm_epochs: int = 5
    warm_lr: float = 3e-3
    warm_corpus: bool = True
    slot_init: bool = True
    answer_swap: float = 0.5
    # optimisation
    seed: int = 0
    epochs: int = 14
    lr: float = 3e-3
    batch_size: int = 16
    num_bins: int = 8
    grad_clip: float = 1.0
    warmup_steps: int = 50
    final_lr_fraction: float = 0.1
    seq_cap: int = 192
    # agent loop
    k: int = 3
    max_iterations: int = 4
    max_answer_tokens: int = 8
    decode: bool = False
    decode_max_tokens: int = 32
    # io
    workdir: str = "runs/default"

    def __post_init__(self):
        from .agent import ARMS
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.hops not in (0, 1, 2):
            raise ConfigError("hops must be 0, 1 or 2")
        if not 0.0 <= self.answer_swap <= 1.0:
            raise ConfigError("answer_swap must lie in [0, 1]")

    def canonical(self, skip: tuple[str, ...] = ()) -> str:
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n"
                       for f in sorted(fields(self), key=lambda f: f.name) if f.name not in skip)

    def hash(self) -> str:
        """Digest of every result-affecting key (output location excluded)."""
        return hashlib.sha256(self.canonical(_IO_KEYS).encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "desk": {},
    # published-scale schedule values; model sizes stay at desk scale
    "paper": {"num_bins": 200, "seq_cap": 3000, "max_context": 3000, "epochs": 5, "lr": 1e-4,
              "warmup_steps": 0, "final_lr_fraction": 1.0},
}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_pairs(lines, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(path: str | Path | None = None, overrides: list[str] | None = None,
                 preset: str = "desk") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    raw: dict[str, str] = {k: _render(v) for k, v in PRESETS[preset].items()}
    if path is not None:
        raw.update(parse_pairs(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    raw.update(parse_pairs(overrides or [], "--set"))
    types = {f.name: f.type for f in fields(RunConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return RunConfig(**{k: _coerce(k, types[k], v) for k, v in raw.items()})


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.canonical(), encoding="utf-8")
