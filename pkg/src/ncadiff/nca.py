"""Shared-rule cellular automaton: state layout, perception, stochastic update.

Channel layout of the c-channel cell state:
  0        predicted-noise output
  1..3     RGB of the conditional image
  4        noisy segmentation map x_t
  5..c-2   hidden channels
  c-1      diffusion step encoding, a constant t/T plane
All channels (RGB and x_t included) evolve under the residual update; the
RGB channels after rollout feed the RGB loss.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as tc
from .rng import RngStream
from .tensor import Tensor

NOISE_CH = 0
RGB_CH = slice(1, 4)
XT_CH = 4
TIME_CH = -1  # last channel
MIN_CHANNELS = 7


class CellGrid:
    def __init__(self, state: Tensor):
        self.state = state

    @property
    def channels(self) -> int:
        return self.state.shape[0]


class NcaRule:
    """Perception kernels plus the per-cell two-layer update network.

    Perception is identity + k learned depthwise 3x3 kernels (p = k+1
    blocks). fc1 maps p*c -> hidden with bias and ReLU; fc2 maps
    hidden -> c without bias and starts at zero so a fresh rule is the
    identity map.
    """

    def __init__(self, c: int, hidden: int, n_kernels: int = 2,
                 fire_rate: float = 0.5, rng: Optional[RngStream] = None,
                 dtype=np.float32):
        if not 0.0 < fire_rate <= 1.0:
            raise ValueError(f"fire_rate must be in (0,1], got {fire_rate}")
        self.c = c
        self.hidden = hidden
        self.n_kernels = n_kernels
        self.fire_rate = fire_rate
        p = n_kernels + 1
        rng = rng or RngStream(0)

        def u(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return ((rng.uniform(shape) * 2 - 1) * a).astype(dtype)

        self.kernels = [Tensor(u((c, 3, 3), 9), requires_grad=True, dtype=dtype)
                        for _ in range(n_kernels)]
        self.fc1_w = Tensor(u((p * c, hidden), p * c), requires_grad=True, dtype=dtype)
        self.fc1_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True, dtype=dtype)
        self.fc2_w = Tensor(np.zeros((hidden, c), dtype=dtype), requires_grad=True, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"perception.{i}": k for i, k in enumerate(self.kernels)}
        out.update({"fc1.w": self.fc1_w, "fc1.b": self.fc1_b, "fc2.w": self.fc2_w})
        return out

    def parameter_count(self) -> int:
        p = self.n_kernels + 1
        return self.n_kernels * self.c * 9 + (p * self.c) * self.hidden + self.hidden + self.hidden * self.c


def init_grid(image: np.ndarray, x_t: np.ndarray, t: int, T: int, c: int,
              dtype=None) -> CellGrid:
    """Seed a fresh grid: zeros everywhere except RGB, x_t and time channels."""
    if c < MIN_CHANNELS:
        raise ValueError(f"need at least {MIN_CHANNELS} channels, got {c}")
    if not 1 <= t <= T:
        raise ValueError(f"step {t} out of range [1, {T}]")
    if image.shape[0] != 3 or x_t.shape[0] != 1 or image.shape[1:] != x_t.shape[1:]:
        raise ValueError(f"incompatible image {image.shape} / x_t {x_t.shape}")
    dtype = dtype or image.dtype
    _, H, W = image.shape
    state = np.zeros((c, H, W), dtype=dtype)
    state[RGB_CH] = image
    state[XT_CH] = x_t[0]
    state[TIME_CH] = t / T
    return CellGrid(Tensor(state, dtype=dtype))


def perceive(grid: CellGrid, rule: NcaRule, padding: str = "replicate") -> Tensor:
    """Identity block followed by each learned depthwise conv block."""
    parts = [grid.state]
    parts += [tc.conv2d(grid.state, k, mode="depthwise", padding=padding)
              for k in rule.kernels]
    return tc.concat(parts, axis=0)


def nca_step(grid: CellGrid, rule: NcaRule, fire_mask: np.ndarray,
             transform: Optional[Callable[[Tensor], Tensor]] = None) -> CellGrid:
    """One synchronous-read update: state + mask * fc2(relu(fc1(perception))).

    transform, if given, is applied to the state before perception only
    (attention hook); the residual is still added to the raw state.
    """
    c, H, W = grid.state.shape
    if fire_mask.shape != (1, H, W):
        raise tc.ShapeError(f"fire mask shape {fire_mask.shape}, expected {(1, H, W)}")
    src = grid if transform is None else CellGrid(transform(grid.state))
    percep = perceive(src, rule)
    m = tc.to_pixel_matrix(percep)
    h1 = tc.relu(tc.affine(m, rule.fc1_w, rule.fc1_b))
    delta = tc.to_image(tc.affine(h1, rule.fc2_w), H, W)
    mask = Tensor(fire_mask, dtype=grid.state.dtype)
    return CellGrid(tc.add(grid.state, tc.mul(delta, mask)))


def rollout(grid: CellGrid, rule: NcaRule, n: int, rng: RngStream,
            transform: Optional[Callable[[Tensor], Tensor]] = None) -> CellGrid:
    """n stochastic update steps, one fresh Bernoulli(fire_rate) mask each.

    Fully differentiable through all steps (backprop through time).
    """
    if n < 1:
        raise ValueError(f"rollout needs n >= 1, got {n}")
    _, H, W = grid.state.shape
    for _ in range(n):
        mask = rng.bernoulli((1, H, W), rule.fire_rate, dtype=np.float64)
        grid = nca_step(grid, rule, mask, transform=transform)
    return grid


def read_noise(grid: CellGrid) -> Tensor:
    """Channel 0, shape [1,H,W]."""
    return tc.channel_slice(grid.state, NOISE_CH, NOISE_CH + 1)


def read_rgb(grid: CellGrid) -> Tensor:
    """Channels 1..3, shape [3,H,W]."""
    return tc.channel_slice(grid.state, RGB_CH.start, RGB_CH.stop)
