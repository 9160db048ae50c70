"""Dataset ingestion, synthetic data, Dice/IoU, and ensembled inference.

Internal encodings: images are [3,H,W] in [-1,1]; masks are [1,H,W] in
{-1,+1} so the diffusion chain's Gaussian noise is symmetric around the
decision boundary. Thresholding the continuous estimate at 0 recovers
the binary mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from .diffusion import NoiseSchedule, reverse_chain
from .rng import RngStream


class DataError(RuntimeError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # [3,H,W] float32 in [-1,1]
    mask: np.ndarray   # [1,H,W] float32 in {-1,+1}
    id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.image)):
            raise DataError(f"sample {self.id!r}: non-finite image values")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (-1.0, 1.0))):
            raise DataError(f"sample {self.id!r}: mask values {vals} are not in {{-1,+1}}")


# ---------------------------------------------------------------------------
# loading

def _to_rgb_array(img: Image.Image) -> np.ndarray:
    return np.asarray(img.convert("RGB"), dtype=np.float32)


def load_sample(image_path: Path, mask_path: Path, target_size: tuple[int, int]) -> SegSample:
    H, W = target_size
    try:
        img = Image.open(image_path)
        msk = Image.open(mask_path)
    except Exception as exc:
        raise DataError(f"cannot decode {image_path} / {mask_path}: {exc}") from exc
    img = img.convert("RGB").resize((W, H), Image.BILINEAR)
    msk = msk.convert("L").resize((W, H), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    image = arr / 127.5 - 1.0
    m = np.asarray(msk, dtype=np.float32)
    thresh = 0.5 * m.max() if m.max() > 0 else 0.5
    mask = np.where(m >= thresh, 1.0, -1.0).astype(np.float32)[None]
    return SegSample(image=image, mask=mask, id=image_path.stem)


def load_image(path, target_size: tuple[int, int]) -> np.ndarray:
    """Load one conditional image as [3,H,W] in [-1,1]."""
    H, W = target_size
    try:
        img = Image.open(path)
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    img = img.convert("RGB").resize((W, H), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def load_dataset(image_dir, mask_dir, target_size: tuple[int, int],
                 ids: Optional[Sequence[str]] = None) -> list[SegSample]:
    """Pair image and mask files by stem; every image must have a mask."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    if not mask_dir.is_dir():
        raise DataError(f"mask directory not found: {mask_dir}")
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.is_file()}
    samples = []
    for p in sorted(image_dir.iterdir()):
        if not p.is_file():
            continue
        if ids is not None and p.stem not in ids:
            continue
        if p.stem not in masks:
            raise DataError(f"image {p.name} has no matching mask in {mask_dir}")
        samples.append(load_sample(p, masks[p.stem], target_size))
    if ids is not None:
        found = {s.id for s in samples}
        missing = [i for i in ids if i not in found]
        if missing:
            raise DataError(f"split ids without images: {missing}")
    return samples


# ---------------------------------------------------------------------------
# synthetic desk-scale data

def _render_sample(rng: RngStream, size: tuple[int, int], index: int) -> SegSample:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(64):
        n_blobs = rng.randint(1, 2)
        mask = np.zeros((H, W), dtype=bool)
        for _b in range(n_blobs):
            cy = rng.uniform(()) * 0.6 * H + 0.2 * H
            cx = rng.uniform(()) * 0.6 * W + 0.2 * W
            ry = (0.10 + 0.22 * rng.uniform(())) * H
            rx = (0.10 + 0.22 * rng.uniform(())) * W
            theta = rng.uniform(()) * np.pi
            ct, st = np.cos(theta), np.sin(theta)
            u = (xx - cx) * ct + (yy - cy) * st
            v = -(xx - cx) * st + (yy - cy) * ct
            mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    else:
        raise DataError("synthetic generator failed to produce a mask in bounds")
    base = 0.35 + 0.15 * rng.normal((3, 1, 1), dtype=np.float64)
    img = np.broadcast_to(base, (3, H, W)) + 0.08 * rng.normal((3, H, W), dtype=np.float64)
    lesion = -0.45 + 0.10 * rng.normal((3, 1, 1), dtype=np.float64)
    texture = 0.10 * rng.normal((1, H, W), dtype=np.float64)
    img = np.where(mask[None], lesion + texture, img)
    image = np.clip(img, -1.0, 1.0).astype(np.float32)
    m = np.where(mask, 1.0, -1.0).astype(np.float32)[None]
    return SegSample(image=image, mask=m, id=f"synth_{index:04d}")


def synth_dataset(n: int, size: tuple[int, int], seed: int) -> list[SegSample]:
    """Deterministic toy lesions: 1-2 darker textured ellipses on noise."""
    if n and (size[0] < 16 or size[1] < 16):
        raise DataError(f"synthetic size must be at least 16x16, got {size}")
    streams = RngStream(seed).split(n) if n else []
    return [_render_sample(s, size, i) for i, s in enumerate(streams)]


# ---------------------------------------------------------------------------
# metrics

def dice_iou(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Overlap metrics on {-1,+1} (or boolean) masks; both-empty -> (1,1)."""
    if pred.shape != truth.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {truth.shape}")
    a = np.asarray(pred) > 0
    b = np.asarray(truth) > 0
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    sa, sb = a.sum(), b.sum()
    if sa == 0 and sb == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (sa + sb)
    iou = inter / union if union else 0.0
    return float(dice), float(iou)


# ---------------------------------------------------------------------------
# inference

def ensemble_infer(predictor_for_run: Callable[[RngStream], Callable],
                   shape: tuple, sched: NoiseSchedule, runs: int,
                   seed_stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Average `runs` independent reverse chains; threshold the mean at 0.

    predictor_for_run(model_stream) builds a fresh predictor whose own
    randomness (fire masks) comes from model_stream. Each run gets a
    split (chain, model) stream pair, so run k is identical no matter
    how many runs are requested.

    Returns (mask in {-1,+1}, mean_map in [-1,1]).
    """
    if runs < 1:
        raise ValueError("need at least one ensemble run")
    run_streams = seed_stream.split(runs)
    acc = np.zeros(shape, dtype=np.float64)
    for rs in run_streams:
        chain_rng, model_rng = rs.split(2)
        predictor = predictor_for_run(model_rng)
        x0 = reverse_chain(predictor, shape, sched, chain_rng)
        acc += np.clip(x0, -1.0, 1.0)
    mean_map = (acc / runs).astype(np.float32)
    mask = np.where(mean_map > 0, 1.0, -1.0).astype(np.float32)
    return mask, mean_map


def evaluate(samples: Sequence[SegSample], infer_one: Callable[[SegSample], np.ndarray]) -> dict:
    """Macro-averaged Dice/IoU report with per-sample rows."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    rows = []
    for s in samples:
        pred = infer_one(s)
        d, i = dice_iou(pred, s.mask)
        rows.append({"id": s.id, "dice": d, "iou": i})
    mean_dice = sum(r["dice"] for r in rows) / len(rows)
    mean_iou = sum(r["iou"] for r in rows) / len(rows)
    return {"rows": rows, "mean_dice": mean_dice, "mean_iou": mean_iou}


# ---------------------------------------------------------------------------
# image output

def save_mask_png(mask: np.ndarray, path) -> None:
    """{-1,+1} -> 0/255 grayscale PNG."""
    arr = np.where(np.asarray(mask)[0] > 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_map_png(mean_map: np.ndarray, path) -> None:
    """[-1,1] -> 0..255 grayscale PNG (round-half-away rescaling)."""
    arr = np.asarray(mean_map)[0]
    scaled = np.clip((arr + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(scaled).astype(np.uint8), mode="L").save(path, format="PNG")
