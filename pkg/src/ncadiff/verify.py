"""Finite-difference verification of the full training gradient.

Runs the combined loss through a small 64-bit model configuration and
compares every parameter's analytic gradient against central finite
differences. The fire masks are re-drawn from a fixed seed on every
forward pass, so the perturbed evaluations see the same stochastic path.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .diffusion import make_schedule, q_sample
from .models import ModelConfig, ModelParams, predict_noise
from .rng import RngStream
from .training import loss_total

GRAD_TOL = 1e-3
FD_STEP = 1e-4
# gradients below this magnitude are compared with a floored denominator
REL_FLOOR = 1e-3
# offset for the probe-data stream: keeps ReLU/max pre-activations away
# from their kinks at the default seed, where central differences at
# FD_STEP would straddle a nondifferentiable point
DATA_SEED_OFFSET = 5


def small_config(variant: str) -> ModelConfig:
    return ModelConfig(variant=variant, c=8, hidden=16, n_steps=2,
                       fire_rate=0.5, downsample_factor=2, cbam_reduction=4)


def gradcheck_model(variant: str, seed: int = 0, spatial: int = 8,
                    corrupt: bool = False) -> dict:
    """Check d(loss_total)/d(theta) for one variant at desk scale (64-bit).

    corrupt deliberately biases one analytic gradient; it exists so the
    harness can prove it would catch a broken backward pass.
    """
    cfg = small_config(variant)
    base = seed + DATA_SEED_OFFSET
    params = ModelParams(cfg, seed=base, dtype=np.float64)
    data_rng = RngStream(base + 1)
    # zero-initialized tensors would hide missing gradient paths; give
    # every parameter a small random value
    for t in params.registry().values():
        t.data = data_rng.normal(t.data.shape, dtype=np.float64) * 0.1

    H = W = spatial
    image = np.clip(data_rng.normal((3, H, W), dtype=np.float64) * 0.5, -1, 1)
    x0 = np.where(data_rng.normal((1, H, W), dtype=np.float64) > 0, 1.0, -1.0)
    eps = data_rng.normal((1, H, W), dtype=np.float64)
    sched = make_schedule(8)
    t_step = 5
    x_t = q_sample(x0, t_step, eps, sched)
    mask_seed = base + 2

    def forward() -> float:
        with tc.Tape():
            eps_hat, rgb_out = predict_noise(params, image, x_t, t_step, sched.T,
                                             RngStream(mask_seed))
            return loss_total(eps_hat, eps, rgb_out, x0).item()

    with tc.Tape():
        eps_hat, rgb_out = predict_noise(params, image, x_t, t_step, sched.T,
                                         RngStream(mask_seed))
        loss = loss_total(eps_hat, eps, rgb_out, x0)
        params.zero_grad()
        tc.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.registry().items()}
    if corrupt:
        first = next(iter(analytic))
        analytic[first].flat[0] += 0.05

    errors: dict[str, float] = {}
    for name, t in params.registry().items():
        worst = 0.0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            hi = forward()
            flat[i] = orig - FD_STEP
            lo = forward()
            flat[i] = orig
            fd = (hi - lo) / (2 * FD_STEP)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            worst = max(worst, rel)
        errors[name] = worst
    max_err = max(errors.values())
    return {"variant": variant, "max_rel_err": max_err,
            "per_tensor": errors, "passed": max_err < GRAD_TOL}
