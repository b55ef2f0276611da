"""Run configuration: a flat, versioned ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid run or model configuration."""


def _ints(text: str) -> tuple:
    text = text.strip()
    if text in ("", "none"):
        return ()
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # model
    fusion: str = "concat"
    loss: str = "ls"
    levels: tuple = (1, 2, 3, 4)
    factors: tuple = (8, 4, 2, 1)
    sigma: float = 1.0
    alpha: float = 0.5
    eq4_stride: int = 2
    softmax_axis: str = "channel"
    input_mode: str = "both"
    # optimizer
    lr: float = 1e-3
    lr_decay: float = 0.06
    decay_every: int = 2
    epochs: int = 30
    batch_size: int = 16
    # data
    image_size: int = 64
    n_train: int = 500
    n_test: int = 100
    data_seed: int = 0
    augment: bool = True
    aug_noise: float = 0.005
    # run
    seed: int = 0
    repeats: int = 1
    speed_size: int = 1024
    speed_count: int = 4
    speed_passes: int = 5
    out: str = "runs/default"
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.fusion not in ("add", "concat"):
            bad(f"fusion must be add or concat, got {self.fusion!r}")
        if self.loss not in ("lb", "ls"):
            bad(f"loss must be lb (backbone Dice only) or ls (composite), got {self.loss!r}")
        if len(set(self.levels)) != len(self.levels) or any(i not in (1, 2, 3, 4) for i in self.levels):
            bad(f"levels must be distinct values from 1..4, got {self.levels}")
        if len(self.factors) != 4:
            bad(f"factors needs 4 entries, got {self.factors}")
        for s in self.factors:
            if s < 1 or s & (s - 1):
                bad(f"down-sampling factor {s} is not 1 or a power of two")
        if self.sigma <= 0:
            bad("sigma must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            bad(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.loss == "ls" and not self.levels:
            bad("loss ls needs at least one graph level")
        if self.eq4_stride not in (1, 2):
            bad("eq4_stride must be 1 or 2")
        if self.softmax_axis not in ("channel", "node"):
            bad("softmax_axis must be channel or node")
        if self.input_mode not in ("rgb", "residual", "both"):
            bad(f"input_mode must be rgb, residual or both, got {self.input_mode!r}")
        if self.aug_noise < 0:
            bad("aug_noise must be non-negative")
        if self.lr <= 0 or not 0.0 <= self.lr_decay < 1.0 or self.decay_every < 1:
            bad("invalid learning-rate schedule")
        if self.epochs < 1 or self.batch_size < 1 or self.n_train < 1 or self.n_test < 1:
            bad("epochs, batch_size, n_train and n_test must be positive")
        for name in ("image_size", "speed_size"):
            v = getattr(self, name)
            if v < 32 or v % 32:
                bad(f"{name} must be a positive multiple of 32, got {v}")
        # every factor has to divide its pyramid level (strides 4, 8, 16, 32)
        for i, s in enumerate(self.factors):
            side = self.image_size // (4 * 2 ** i)
            if side % s:
                bad(f"factor {s} does not divide level {i + 1} side {side}")
        if self.repeats < 1:
            bad("repeats must be >= 1")
        if self.speed_passes < 1 or self.speed_count < 1:
            bad("speed_passes and speed_count must be >= 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def seeds(self) -> tuple:
        """Model seeds used by the multi-run protocols."""
        return tuple(range(self.seed, self.seed + self.repeats))

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * (1.0 - self.lr_decay) ** (epoch // self.decay_every)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "extra"}


def _convert(name: str, text: str):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, tuple):
        return _ints(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values, version = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "format_version":
            version = int(value)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if version is None:
        raise ConfigError("config is missing format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version}")
    return (base or RunConfig()).replace(**values)


def format_config(cfg: RunConfig) -> str:
    lines = [f"format_version = {FORMAT_VERSION}"]
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v) if v else "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
