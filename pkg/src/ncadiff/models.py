"""The four noise-predictor architectures and their parameter accounting.

Variants: basic (single-level NCA), cbam (attention before perception),
multi (two-level pyramid, x4 downsample by default), multi_cbam (both).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as tc
from .cbam import CbamParams, cbam_apply
from .nca import (CellGrid, NcaRule, XT_CH, init_grid, read_noise,
                  read_rgb, rollout)
from .rng import RngStream
from .tensor import Tensor

VARIANTS = ("basic", "cbam", "multi", "multi_cbam")


@dataclass
class ModelConfig:
    variant: str = "basic"
    c: int = 64
    hidden: int = 512
    n_steps: int = 10
    fire_rate: float = 0.5
    n_kernels: int = 2
    downsample_factor: int = 4
    cbam_reduction: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    @property
    def levels(self) -> int:
        return 2 if self.variant in ("multi", "multi_cbam") else 1

    @property
    def with_cbam(self) -> bool:
        return self.variant in ("cbam", "multi_cbam")


class ModelParams:
    """Per-level rules (and attention weights) with a flat named registry."""

    def __init__(self, config: ModelConfig, seed: int | RngStream = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, RngStream) else RngStream(seed)
        streams = rng.split(2 * config.levels)
        self.rules: list[NcaRule] = []
        self.cbams: list[Optional[CbamParams]] = []
        for lvl in range(config.levels):
            self.rules.append(NcaRule(config.c, config.hidden, config.n_kernels,
                                      config.fire_rate, rng=streams[2 * lvl], dtype=dtype))
            if config.with_cbam:
                self.cbams.append(CbamParams(config.c, config.cbam_reduction,
                                             rng=streams[2 * lvl + 1], dtype=dtype))
            else:
                self.cbams.append(None)

    def registry(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lvl in range(self.config.levels):
            for name, t in self.rules[lvl].parameters().items():
                out[f"level{lvl}.rule.{name}"] = t
            if self.cbams[lvl] is not None:
                for name, t in self.cbams[lvl].parameters().items():
                    out[f"level{lvl}.cbam.{name}"] = t
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.registry().values())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def set_force_unit_gates(self, flag: bool) -> None:
        for cb in self.cbams:
            if cb is not None:
                cb.force_unit = flag

    def _transform(self, lvl: int) -> Optional[Callable[[Tensor], Tensor]]:
        cb = self.cbams[lvl]
        if cb is None:
            return None
        return lambda s: cbam_apply(s, cb)


def _downsample(x: np.ndarray, f: int) -> np.ndarray:
    c, H, W = x.shape
    if H % f or W % f:
        raise ValueError(f"spatial size {H}x{W} not divisible by factor {f}")
    return x.reshape(c, H // f, f, W // f, f).mean(axis=(2, 4)).astype(x.dtype, copy=False)


def predict_noise(params: ModelParams, image: np.ndarray, x_t: np.ndarray,
                  t: int, T: int, rng: RngStream) -> tuple[Tensor, Tensor]:
    """Run the configured variant; returns (eps_hat [1,H,W], rgb_out [3,H,W])."""
    cfg = params.config
    if cfg.levels == 1:
        grid = init_grid(image, x_t, t, T, cfg.c, dtype=params.dtype)
        grid = rollout(grid, params.rules[0], cfg.n_steps, rng,
                       transform=params._transform(0))
        return read_noise(grid), read_rgb(grid)

    f = cfg.downsample_factor
    lo_grid = init_grid(_downsample(image, f), _downsample(x_t, f), t, T, cfg.c,
                        dtype=params.dtype)
    lo_grid = rollout(lo_grid, params.rules[0], cfg.n_steps, rng,
                      transform=params._transform(0))
    up = tc.resample(lo_grid.state, f, "bilinear-up")
    # re-seed conditioning at full resolution; keep noise + hidden channels
    _, H, W = image.shape
    tplane = np.full((1, H, W), t / T, dtype=params.dtype)
    state = tc.concat([
        tc.channel_slice(up, 0, 1),
        Tensor(image, dtype=params.dtype),
        Tensor(x_t, dtype=params.dtype),
        tc.channel_slice(up, XT_CH + 1, cfg.c - 1),
        Tensor(tplane, dtype=params.dtype),
    ], axis=0)
    hi_grid = rollout(CellGrid(state), params.rules[1], cfg.n_steps, rng,
                      transform=params._transform(1))
    return read_noise(hi_grid), read_rgb(hi_grid)


def make_predictor(params: ModelParams, image: np.ndarray, T: int,
                   rng: RngStream) -> Callable[[np.ndarray, int], np.ndarray]:
    """Inference-time wrapper: fresh tape per call, numpy in/out."""

    def predictor(x_t: np.ndarray, t: int) -> np.ndarray:
        with tc.Tape():
            eps_hat, _ = predict_noise(params, image, x_t, t, T, rng)
        return eps_hat.data

    return predictor


# ---------------------------------------------------------------------------
# closed-form parameter accounting

def rule_param_count(c: int, hidden: int, n_kernels: int = 2) -> int:
    p = n_kernels + 1
    return n_kernels * c * 9 + (p * c) * hidden + hidden + hidden * c


def cbam_param_count(c: int, reduction: int = 4) -> int:
    return 2 * c * (c // reduction) + (7 * 7 * 2 + 1)


def parameter_count(config: ModelConfig) -> int:
    per_level = rule_param_count(config.c, config.hidden, config.n_kernels)
    if config.with_cbam:
        per_level += cbam_param_count(config.c, config.cbam_reduction)
    return config.levels * per_level


def parameter_breakdown(config: ModelConfig) -> dict[str, int]:
    rule = rule_param_count(config.c, config.hidden, config.n_kernels)
    out = {"rule_per_level": rule}
    if config.with_cbam:
        out["cbam_per_level"] = cbam_param_count(config.c, config.cbam_reduction)
    out["levels"] = config.levels
    out["total"] = parameter_count(config)
    return out
