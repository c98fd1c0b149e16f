"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

SIMILARITIES = ("cosine", "dot", "bhattacharyya")


@dataclass
class ExperimentConfig:
    # corpus
    n_classes: int = 8
    n_unseen: int = 2
    train_scenes: int = 40
    test_scenes: int = 10
    points_per_scene: int = 512
    d_t: int = 32
    semantic_noise: float = 0.0
    word_vectors: str = ""
    corpus_seed: int = 0
    split_seed: int = 0
    # model sizes
    d: int = 32
    h: int = 64
    k: int = 32
    M: int = 16
    h_g: int = 64
    # losses
    tau1: float = 0.5
    tau2: float = 0.2
    lambda1: float = 1.0
    N_c: int = 256
    N_k: int = 0
    bandwidth_multipliers: str = "1,2,4,8,16"
    noise_scale: float = 1.0
    proj_l2: float = 30.0
    # optimisation
    clip_norm: float = 5.0
    lr_pretrain: float = 1e-2
    lr_generator: float = 2e-3
    lr_alignment: float = 5e-3
    epochs_pretrain: int = 25
    pretrain_batch_scenes: int = 8
    iters_generator: int = 200
    iters_alignment: int = 300
    align_points_per_class: int = 256
    # run
    seed: int = 0
    # ablations
    no_lgp_in_generator: bool = False
    no_self_loss: bool = False
    no_alignment: bool = False
    lgp_trainable_step2: bool = True
    similarity_kind: str = "cosine"
    single_z_mode: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def n_k(self) -> int:
        return self.N_k if self.N_k > 0 else (self.N_c + 1) // 2

    @property
    def bandwidths(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.bandwidth_multipliers.split(",") if x.strip())

    def validate(self) -> None:
        for name in ("tau1", "tau2", "lr_pretrain", "lr_generator", "lr_alignment", "clip_norm", "noise_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.proj_l2 < 0:
            raise ConfigError("proj_l2 must be non-negative")
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be non-negative")
        if not 1 <= self.n_unseen < self.n_classes:
            raise ConfigError(f"n_unseen must lie in [1, {self.n_classes - 1}]")
        if self.M < 2 or self.d < 2:
            raise ConfigError("M and d must be at least 2")
        if self.n_k > self.N_c:
            raise ConfigError(f"N_k={self.n_k} exceeds N_c={self.N_c}")
        if self.similarity_kind not in SIMILARITIES:
            raise ConfigError(f"similarity_kind must be one of {SIMILARITIES}")
        try:
            bws = self.bandwidths
        except ValueError:
            raise ConfigError(f"bad bandwidth list {self.bandwidth_multipliers!r}") from None
        if not bws or min(bws) <= 0:
            raise ConfigError("bandwidth multipliers must be a non-empty list of positive reals")
        if self.points_per_scene < self.n_classes * 8:
            raise ConfigError("points_per_scene below class count x 8")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def parse_overrides(pairs) -> dict:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    out = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, known[key], raw)
    return out


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_overrides(parse_config_text(p.read_text())))
    values.update(overrides or {})
    return ExperimentConfig(**values)
