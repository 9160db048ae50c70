"""Losses, AdamW, the train step, and binary checkpoint persistence."""

from __future__ import annotations

import struct
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .diffusion import NoiseSchedule, q_sample
from .models import ModelConfig, ModelParams, predict_noise
from .rng import RngStream
from .tensor import Tensor

MAGIC = b"NCADIFF1"
VERSION = 1


# ---------------------------------------------------------------------------
# losses

def loss_noise(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error between predicted and injected noise."""
    return tc.mse(eps_hat, Tensor(np.asarray(eps), dtype=eps_hat.dtype))


def loss_rgb(rgb_out: Tensor, x0: np.ndarray) -> Tensor:
    """Sum over R,G,B of the per-channel MSE against the mask encoding."""
    target = Tensor(np.asarray(x0), dtype=rgb_out.dtype)
    terms = [tc.mse(tc.channel_slice(rgb_out, ch, ch + 1), target) for ch in range(3)]
    return tc.add(tc.add(terms[0], terms[1]), terms[2])


def loss_total(eps_hat: Tensor, eps: np.ndarray, rgb_out: Tensor, x0: np.ndarray) -> Tensor:
    return tc.add(loss_noise(eps_hat, eps), loss_rgb(rgb_out, x0))


# ---------------------------------------------------------------------------
# optimizer

class MissingGradientError(RuntimeError):
    pass


class AdamW:
    """Decoupled weight decay (applied before the moment update term)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            g = p.grad
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# training step

def train_step(params: ModelParams, batch: Sequence, sched: NoiseSchedule,
               opt: AdamW, rng: RngStream, use_rgb_loss: bool = True) -> dict:
    """One optimizer update over a batch of samples.

    Per sample: draw t and eps, noise the mask, run the predictor and
    accumulate the combined loss; losses are averaged in batch order.
    """
    if not batch:
        raise ValueError("empty batch")
    T = sched.T
    t_drawn = []
    n_sum = rgb_sum = 0.0
    with tc.Tape():
        total: Optional[Tensor] = None
        for sample in batch:
            t = rng.randint(1, T)
            t_drawn.append(t)
            eps = rng.normal(sample.mask.shape, dtype=params.dtype)
            x_t = q_sample(sample.mask.astype(params.dtype), t, eps, sched)
            eps_hat, rgb_out = predict_noise(params, sample.image, x_t, t, T, rng)
            ln = loss_noise(eps_hat, eps)
            n_sum += ln.item()
            loss = ln
            if use_rgb_loss:
                lr_ = loss_rgb(rgb_out, sample.mask)
                rgb_sum += lr_.item()
                loss = tc.add(ln, lr_)
            total = loss if total is None else tc.add(total, loss)
        total = tc.scale(total, 1.0 / len(batch))
        params.zero_grad()
        tc.backward(total)
        total_val = total.item()
    opt.step()
    return {
        "loss_total": total_val,
        "loss_n": n_sum / len(batch),
        "loss_rgb": rgb_sum / len(batch),
        "t_drawn": t_drawn,
    }


# ---------------------------------------------------------------------------
# checkpoint format

class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class NameSetError(CheckpointError):
    pass


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(params: ModelParams, opt: Optional[AdamW],
                    config_text: dict[str, str], path) -> None:
    """magic, version u32, length-prefixed key=value text, tensor records.

    Each record: u32 name length, name bytes, u32 rank, u64 dims, raw
    little-endian float32 data. Optimizer moments are stored under
    opt.m.* / opt.v.* names.
    """
    cfg = dict(config_text)
    if opt is not None:
        cfg["opt.step"] = str(opt.step_count)
        cfg["opt.lr"] = repr(opt.lr)
        cfg["opt.beta1"] = repr(opt.beta1)
        cfg["opt.beta2"] = repr(opt.beta2)
        cfg["opt.eps"] = repr(opt.eps)
        cfg["opt.weight_decay"] = repr(opt.weight_decay)
    text = "".join(f"{k} = {v}\n" for k, v in cfg.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, t in params.registry().items():
            _write_tensor(fh, name, t.data)
        if opt is not None:
            for name in params.registry():
                _write_tensor(fh, f"opt.m.{name}", opt.m[name])
                _write_tensor(fh, f"opt.v.{name}", opt.v[name])


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw load: returns (config key/value text, name -> float32 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise BadVersionError(f"unsupported checkpoint version {version}")
        (tlen,) = struct.unpack("<I", _read_exact(fh, 4))
        text = _read_exact(fh, tlen).decode("utf-8")
        config: dict[str, str] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            config[key] = value
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise TruncatedError("checkpoint truncated inside a record header")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * count)
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return config, tensors


def model_config_text(config: ModelConfig) -> dict[str, str]:
    return {
        "variant": config.variant,
        "c": str(config.c),
        "hidden": str(config.hidden),
        "n_steps": str(config.n_steps),
        "fire_rate": repr(config.fire_rate),
        "n_kernels": str(config.n_kernels),
        "downsample_factor": str(config.downsample_factor),
        "cbam_reduction": str(config.cbam_reduction),
    }


def model_config_from_text(config: dict[str, str]) -> ModelConfig:
    return ModelConfig(
        variant=config["variant"],
        c=int(config["c"]),
        hidden=int(config["hidden"]),
        n_steps=int(config["n_steps"]),
        fire_rate=float(config["fire_rate"]),
        n_kernels=int(config["n_kernels"]),
        downsample_factor=int(config["downsample_factor"]),
        cbam_reduction=int(config["cbam_reduction"]),
    )


def restore_model(path, dtype=np.float32) -> tuple[ModelParams, Optional[AdamW], dict[str, str]]:
    """Rebuild ModelParams (and optimizer, if saved) from a checkpoint."""
    config, tensors = load_checkpoint(path)
    params = ModelParams(model_config_from_text(config), seed=0, dtype=dtype)
    expected = set(params.registry())
    stored = {n for n in tensors if not n.startswith("opt.")}
    if stored != expected:
        missing = sorted(expected - stored)
        extra = sorted(stored - expected)
        raise NameSetError(f"parameter name-set mismatch: missing {missing}, unexpected {extra}")
    for name, t in params.registry().items():
        if tensors[name].shape != t.data.shape:
            raise NameSetError(f"tensor {name!r} shape {tensors[name].shape} != expected {t.data.shape}")
        t.data = tensors[name].astype(dtype)
    opt = None
    if "opt.step" in config:
        opt = AdamW(params.registry(), lr=float(config["opt.lr"]),
                    beta1=float(config["opt.beta1"]), beta2=float(config["opt.beta2"]),
                    eps=float(config["opt.eps"]), weight_decay=float(config["opt.weight_decay"]))
        opt.step_count = int(config["opt.step"])
        for name in params.registry():
            opt.m[name] = tensors[f"opt.m.{name}"].astype(dtype)
            opt.v[name] = tensors[f"opt.v.{name}"].astype(dtype)
    return params, opt, config
