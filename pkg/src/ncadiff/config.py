"""Line-oriented `key = value` run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .models import VARIANTS


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # model
    variant: str = "basic"
    c: int = 64
    hidden: int = 512
    n_steps: int = 10
    fire_rate: float = 0.5
    n_kernels: int = 2
    downsample_factor: int = 4
    cbam_reduction: int = 4
    # diffusion
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training
    batch_size: int = 8
    total_steps: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    rgb_loss: bool = True
    timing: bool = False
    # data
    data: str = "synthetic"
    image_dir: str = ""
    mask_dir: str = ""
    synth_n: int = 8
    height: int = 256
    width: int = 256
    split: str = ""  # path to a file of sample ids, one per line; empty = all
    # inference / misc
    runs: int = 10
    out_dir: str = "out"
    threads: int = 1

    @property
    def levels(self) -> int:
        return 2 if self.variant in ("multi", "multi_cbam") else 1

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.c < 7:
            raise ConfigError(f"c must be at least 7, got {self.c}")
        if self.variant in ("cbam", "multi_cbam") and self.c % self.cbam_reduction:
            raise ConfigError(f"c={self.c} not divisible by cbam_reduction={self.cbam_reduction}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ConfigError(f"fire_rate must be in (0,1], got {self.fire_rate}")
        if self.levels == 2 and (self.height % self.downsample_factor or self.width % self.downsample_factor):
            raise ConfigError(f"size {self.height}x{self.width} not divisible by "
                              f"downsample_factor={self.downsample_factor}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, value: str):
    ftype = _FIELDS[key]
    try:
        if ftype == "bool":
            return _parse_bool(value)
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return value
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {value!r}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys rejected."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, value))
    return cfg.validate()


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        setattr(cfg, key, _convert(key, value))
    return cfg.validate()


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
