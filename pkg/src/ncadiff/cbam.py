"""Convolutional block attention: channel gate then spatial gate.

Channel attention pools the state globally (avg and max), runs both
through a shared two-layer MLP and sigmoids the sum. Spatial attention
stacks the channel-mean and channel-max planes and pushes them through a
7x7 conv. Applied to the cell state before perception.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as tc
from .rng import RngStream
from .tensor import Tensor


class CbamParams:
    """Shared-MLP channel gate (no biases) + 7x7 spatial conv (with bias).

    MLP weights start small random, the spatial conv starts at zero, so a
    fresh module gates uniformly at 0.25 and keeps the zero-update
    identity of a fresh NCA rule intact.

    force_unit, when set, bypasses both gates (the +inf pre-sigmoid
    limit); used by the reduction checks.
    """

    def __init__(self, c: int, reduction: int = 4, rng: Optional[RngStream] = None,
                 dtype=np.float32):
        if c % reduction:
            raise ValueError(f"channels {c} not divisible by reduction {reduction}")
        self.c = c
        self.reduction = reduction
        self.force_unit = False
        rng = rng or RngStream(0)
        cr = c // reduction

        def u(shape):
            return ((rng.uniform(shape) * 2 - 1) * 0.05).astype(dtype)

        self.mlp_w0 = Tensor(u((c, cr)), requires_grad=True, dtype=dtype)
        self.mlp_w1 = Tensor(u((cr, c)), requires_grad=True, dtype=dtype)
        self.spatial_w = Tensor(np.zeros((1, 2, 7, 7), dtype=dtype), requires_grad=True, dtype=dtype)
        self.spatial_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"mlp.w0": self.mlp_w0, "mlp.w1": self.mlp_w1,
                "spatial.w": self.spatial_w, "spatial.b": self.spatial_b}

    def parameter_count(self) -> int:
        cr = self.c // self.reduction
        return 2 * self.c * cr + (7 * 7 * 2 + 1)


def _mlp(p: CbamParams, v: Tensor) -> Tensor:
    # v is [c]; run as a 1-row matrix through the shared MLP
    row = tc.to_matrix_row(v)
    out = tc.affine(tc.relu(tc.affine(row, p.mlp_w0)), p.mlp_w1)
    return tc.from_matrix_row(out)


def channel_attention(x: Tensor, p: CbamParams) -> Tensor:
    """Per-channel gate in (0,1), shape [c]."""
    avg = tc.pool(x, "global-avg")
    mx = tc.pool(x, "global-max")
    return tc.sigmoid(tc.add(_mlp(p, avg), _mlp(p, mx)))


def spatial_attention(x: Tensor, p: CbamParams) -> Tensor:
    """Per-pixel gate in (0,1), shape [1,H,W]; replicate-padded 7x7 conv."""
    planes = tc.concat([tc.pool(x, "channel-avg"), tc.pool(x, "channel-max")], axis=0)
    return tc.sigmoid(tc.conv2d(planes, p.spatial_w, mode="dense",
                                padding="replicate", bias=p.spatial_b))


def cbam_apply(x: Tensor, p: CbamParams) -> Tensor:
    """Channel gate first, then spatial gate on the channel-gated state."""
    if p.force_unit:
        return x
    gated = tc.mul(x, channel_attention(x, p))
    return tc.mul(gated, spatial_attention(gated, p))
