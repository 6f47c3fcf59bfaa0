"""Run configuration files: ``[section]`` headers and ``key = value`` lines.

Sections and keys (defaults in parentheses)::

    [model]   preset (rescnn-tiny; "custom" uses kind/widths), kind (rescnn),
              widths (8,16,32), blocks_per_stage (1), dtype (float32),
              residual_scale (0.1)
    [train]   method (adversarial: standard | adversarial | free), epochs (30),
              batch_size (64), lr (0.005), momentum (0.9), weight_decay (5e-4),
              lr_decay (0.1), lr_interval (50), val_every (5), replay (1), seed (0)
    [attack]  norm (l2), eps (1.0), step_size (empty = default rule), steps (1),
              rand_init (true), restarts (1), target (empty = untargeted)
    [data]    path (empty = generate), val_path (empty = generate), generator (shapes),
              n (2000), val_n (500), classes (10), image_size (10), noise (0.05), seed (0)
    [output]  dir (empty = $ROBUSTKIT_OUTPUT_ROOT/<name>, else runs/<name>), name (run)

Blank lines and lines starting with ``#`` or ``;`` are ignored.  The attack
seed is the train seed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attacks import NORMS, PerturbationSpec
from .models import KINDS, ModelConfig, preset
from .training import TrainConfig

OUTPUT_ROOT_VAR = "ROBUSTKIT_OUTPUT_ROOT"
METHODS = ("standard", "adversarial", "free")
PRESETS = ("rescnn-tiny", "mlp-tiny", "custom")
DTYPE_NAMES = ("float32", "float64")


class ConfigParseError(ValueError):
    pass


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    out = float(v)
    if out != out:
        raise ValueError("nan is not allowed")
    return out


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _optional(conv):
    def parse(v: str):
        return None if v == "" else conv(v)
    return parse


def _choice(*allowed):
    def parse(v: str) -> str:
        if v not in allowed:
            raise ValueError(f"{v!r} is not one of {', '.join(allowed)}")
        return v
    return parse


def _text(v: str) -> str:
    return v


@dataclass(frozen=True)
class ModelOptions:
    preset: str = "rescnn-tiny"
    kind: str = "rescnn"
    widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    dtype: str = "float32"
    residual_scale: float = 0.1

    def build_config(self, input_shape, num_classes: int) -> ModelConfig:
        if self.preset != "custom":
            return preset(self.preset, input_shape, num_classes)
        return ModelConfig(self.kind, tuple(input_shape), self.widths, num_classes, self.blocks_per_stage)


@dataclass(frozen=True)
class TrainOptions:
    method: str = "adversarial"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    lr_interval: int = 50
    val_every: int = 5
    replay: int = 1
    seed: int = 0


@dataclass(frozen=True)
class AttackOptions:
    norm: str = "l2"
    eps: float = 1.0
    step_size: float | None = None
    steps: int = 1
    rand_init: bool = True
    restarts: int = 1
    target: int | None = None


@dataclass(frozen=True)
class DataOptions:
    path: str = ""
    val_path: str = ""
    generator: str = "shapes"
    n: int = 2000
    val_n: int = 500
    classes: int = 10
    image_size: int = 10
    noise: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class OutputOptions:
    dir: str = ""
    name: str = "run"


SCHEMA = {
    "model": (ModelOptions, {"preset": _choice(*PRESETS), "kind": _choice(*KINDS), "widths": _ints,
                             "blocks_per_stage": _int, "dtype": _choice(*DTYPE_NAMES),
                             "residual_scale": _float}),
    "train": (TrainOptions, {"method": _choice(*METHODS), "epochs": _int, "batch_size": _int, "lr": _float,
                             "momentum": _float, "weight_decay": _float, "lr_decay": _float,
                             "lr_interval": _int, "val_every": _int, "replay": _int, "seed": _int}),
    "attack": (AttackOptions, {"norm": _choice(*NORMS), "eps": _float, "step_size": _optional(_float),
                               "steps": _int, "rand_init": _bool, "restarts": _int,
                               "target": _optional(_int)}),
    "data": (DataOptions, {"path": _text, "val_path": _text, "generator": _choice("shapes"), "n": _int,
                           "val_n": _int, "classes": _int, "image_size": _int, "noise": _float,
                           "seed": _int}),
    "output": (OutputOptions, {"dir": _text, "name": _text}),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainOptions = field(default_factory=TrainOptions)
    attack: AttackOptions = field(default_factory=AttackOptions)
    data: DataOptions = field(default_factory=DataOptions)
    output: OutputOptions = field(default_factory=OutputOptions)

    @property
    def seed(self) -> int:
        return self.train.seed

    def attack_spec(self) -> PerturbationSpec | None:
        if self.train.method == "standard":
            return None
        a = self.attack
        return PerturbationSpec(a.norm, a.eps, a.step_size, a.steps, a.rand_init, a.restarts, a.target,
                                self.train.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.batch_size, t.lr, t.momentum, t.weight_decay, t.lr_decay,
                           t.lr_interval, t.val_every, self.attack_spec(), t.seed)

    def output_dir(self) -> Path:
        if self.output.dir:
            return Path(self.output.dir)
        root = os.environ.get(OUTPUT_ROOT_VAR)
        return Path(root) / self.output.name if root else Path("runs") / self.output.name

    def with_overrides(self, seed: int | None = None) -> "RunConfig":
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed))

    def validate(self) -> None:
        """Check referenced paths and every derived config."""
        for label, p in (("data.path", self.data.path), ("data.val_path", self.data.val_path)):
            if p and not Path(p).is_file():
                raise ConfigParseError(f"{label}: file {p!r} does not exist")
        if not self.data.path and not 2 <= self.data.classes <= 10:
            raise ConfigParseError(f"data.classes must lie in [2, 10], got {self.data.classes}")
        if self.train.replay < 1:
            raise ConfigParseError("train.replay must be >= 1")
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigParseError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigParseError(f"{where}: unterminated section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigParseError(f"{where}: unknown section [{section}]; expected one of "
                                       f"{', '.join(SCHEMA)}")
            continue
        if "=" not in line:
            raise ConfigParseError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigParseError(f"{where}: key outside of any section")
        key, value = (p.strip() for p in line.split("=", 1))
        parsers = SCHEMA[section][1]
        if key not in parsers:
            raise ConfigParseError(f"{where}: unknown key {section}.{key}; allowed keys: "
                                   f"{', '.join(parsers)}")
        if key in values[section]:
            raise ConfigParseError(f"{where}: duplicate key {section}.{key}")
        try:
            values[section][key] = parsers[key](value)
        except ValueError as exc:
            raise ConfigParseError(f"{where}: bad value for {section}.{key}: {exc}") from None
    parts = {name: SCHEMA[name][0](**values[name]) for name in SCHEMA}
    return RunConfig(**parts)


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    """Every key written explicitly, so the text reparses to an equal config."""
    lines = []
    for name in SCHEMA:
        part = getattr(config, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format(getattr(part, f.name))}" for f in fields(part)]
        lines.append("")
    return "\n".join(lines)
