"""High-level entry points behind the CLI subcommands."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .config import RunConfig, serialize_config
from .data import (DataError, SegSample, dice_iou, ensemble_infer, load_dataset,
                   load_image, save_map_png, save_mask_png, synth_dataset)
from .diffusion import make_schedule, predict_x0, reverse_chain
from .models import ModelConfig, ModelParams, make_predictor, parameter_breakdown
from .rng import RngStream
from .training import (AdamW, model_config_text, restore_model, save_checkpoint,
                       train_step)

# published reference counts for the default-size variants; the closed-form
# counts of this implementation's perception/attention design differ
REFERENCE_COUNTS = {"basic": 139_000, "cbam": 206_000, "multi": 410_000,
                    "multi_cbam": 412_000}


def model_config_from_run(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(variant=cfg.variant, c=cfg.c, hidden=cfg.hidden,
                       n_steps=cfg.n_steps, fire_rate=cfg.fire_rate,
                       n_kernels=cfg.n_kernels,
                       downsample_factor=cfg.downsample_factor,
                       cbam_reduction=cfg.cbam_reduction)


def build_dataset(cfg: RunConfig) -> list[SegSample]:
    size = (cfg.height, cfg.width)
    if cfg.data == "synthetic":
        return synth_dataset(cfg.synth_n, size, cfg.seed)
    ids = None
    if cfg.split:
        split_path = Path(cfg.split)
        if not split_path.is_file():
            raise DataError(f"split file not found: {split_path}")
        ids = [ln.strip() for ln in split_path.read_text().splitlines() if ln.strip()]
    return load_dataset(cfg.image_dir, cfg.mask_dir, size, ids=ids)


def checkpoint_config_text(cfg: RunConfig) -> dict[str, str]:
    text = model_config_text(model_config_from_run(cfg))
    text.update({"T": str(cfg.T), "beta_start": repr(cfg.beta_start),
                 "beta_end": repr(cfg.beta_end),
                 "height": str(cfg.height), "width": str(cfg.width)})
    return text


def _fmt_row(values) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def run_training(cfg: RunConfig, out_dir, dataset: Optional[Sequence[SegSample]] = None,
                 log=print) -> dict:
    """Train per the config; writes metrics.csv, loss_curves.png, checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = build_dataset(cfg)
    if not dataset:
        raise DataError("training dataset is empty")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    root = RngStream(cfg.seed)
    init_rng, train_rng = root.split(2)
    params = ModelParams(model_config_from_run(cfg), seed=init_rng)
    opt = AdamW(params.registry(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    ckpt_text = checkpoint_config_text(cfg)

    rows = []
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("step,loss_total,loss_n,loss_rgb,wall_ms\n")
        for step in range(1, cfg.total_steps + 1):
            t0 = time.perf_counter()
            batch = [dataset[train_rng.randint(0, len(dataset) - 1)]
                     for _ in range(cfg.batch_size)]
            metrics = train_step(params, batch, sched, opt, train_rng,
                                 use_rgb_loss=cfg.rgb_loss)
            # wall time is reported only when asked for: a timing column
            # would break byte-identical reruns
            wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
            row = {"step": step, "loss_total": metrics["loss_total"],
                   "loss_n": metrics["loss_n"], "loss_rgb": metrics["loss_rgb"],
                   "wall_ms": wall}
            rows.append(row)
            fh.write(_fmt_row([step, row["loss_total"], row["loss_n"],
                               row["loss_rgb"], wall]) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(params, opt, ckpt_text,
                                out_dir / f"checkpoint_{step:06d}.ckpt")
    final_path = out_dir / "checkpoint_final.ckpt"
    save_checkpoint(params, opt, ckpt_text, final_path)
    (out_dir / "run_config.txt").write_text(serialize_config(cfg))
    report.save_loss_curves(rows, out_dir / "loss_curves.png")
    log(f"trained {cfg.total_steps} steps; final loss_total "
        f"{rows[-1]['loss_total']:.6f} -> {final_path}")
    return {"params": params, "opt": opt, "rows": rows, "dataset": dataset,
            "sched": sched, "checkpoint": final_path}


def infer_sample(params: ModelParams, image: np.ndarray, sched, runs: int,
                 stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    def factory(model_rng):
        return make_predictor(params, image, sched.T, model_rng)

    shape = (1, image.shape[1], image.shape[2])
    return ensemble_infer(factory, shape, sched, runs, stream)


def _sched_from_ckpt(config: dict[str, str]):
    return make_schedule(int(config["T"]), float(config["beta_start"]),
                         float(config["beta_end"]))


def run_infer(checkpoint, image_path, out_dir, runs: int, seed: int, log=print) -> dict:
    params, _, config = restore_model(checkpoint)
    sched = _sched_from_ckpt(config)
    size = (int(config["height"]), int(config["width"]))
    image = load_image(image_path, size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask, mean_map = infer_sample(params, image, sched, runs, RngStream(seed))
    save_mask_png(mask, out_dir / "mask.png")
    save_map_png(mean_map, out_dir / "mean_map.png")
    log(f"wrote {out_dir / 'mask.png'} and {out_dir / 'mean_map.png'}")
    return {"mask": mask, "mean_map": mean_map}


def run_eval(cfg: RunConfig, checkpoint, out_dir, log=print) -> dict:
    params, _, config = restore_model(checkpoint)
    sched = _sched_from_ckpt(config)
    dataset = build_dataset(cfg)
    if not dataset:
        raise DataError("evaluation split is empty")
    streams = RngStream(cfg.seed).split(len(dataset))

    def one(args):
        sample, stream = args
        mask, _ = infer_sample(params, sample.image, sched, cfg.runs, stream)
        return dice_iou(mask, sample.mask)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, zip(dataset, streams)))
    else:
        results = [one(a) for a in zip(dataset, streams)]
    rows = [{"id": s.id, "dice": d, "iou": i}
            for s, (d, i) in zip(dataset, results)]
    mean_dice = sum(r["dice"] for r in rows) / len(rows)
    mean_iou = sum(r["iou"] for r in rows) / len(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="\n") as fh:
        fh.write("id,dice,iou\n")
        for r in rows:
            fh.write(_fmt_row([r["id"], r["dice"], r["iou"]]) + "\n")
    report.save_eval_figure(rows, mean_dice, mean_iou, out_dir / "report.png")
    log(f"mean dice {mean_dice!r}  mean iou {mean_iou!r}  ({len(rows)} samples)")
    return {"rows": rows, "mean_dice": mean_dice, "mean_iou": mean_iou}


def run_frames(checkpoint, image_path, out_dir, seed: int, log=print) -> int:
    """One reverse chain; one PNG of the running x0 estimate per step."""
    params, _, config = restore_model(checkpoint)
    sched = _sched_from_ckpt(config)
    size = (int(config["height"]), int(config["width"]))
    image = load_image(image_path, size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # same stream layout as a runs=1 ensemble so the final frame matches infer
    chain_rng, model_rng = RngStream(seed).split(1)[0].split(2)
    predictor = make_predictor(params, image, sched.T, model_rng)
    count = 0

    def on_step(t, x_t, eps_hat):
        nonlocal count
        est = np.clip(predict_x0(x_t, t, eps_hat, sched), -1.0, 1.0)
        save_map_png(est, out_dir / f"step_{sched.T - t:04d}.png")
        count += 1

    shape = (1, size[0], size[1])
    reverse_chain(predictor, shape, sched, chain_rng, on_step=on_step)
    log(f"wrote {count} frames to {out_dir}")
    return count


def format_params_report(cfg: RunConfig) -> str:
    mc = model_config_from_run(cfg)
    bd = parameter_breakdown(mc)
    lines = [f"variant: {mc.variant}"]
    lines.append(f"per-level rule parameters: {bd['rule_per_level']}"
                 f"  ({mc.n_kernels}*{mc.c}*9 kernels"
                 f" + {mc.n_kernels + 1}*{mc.c}*{mc.hidden} fc1"
                 f" + {mc.hidden} fc1 bias + {mc.hidden}*{mc.c} fc2)")
    if mc.with_cbam:
        lines.append(f"per-level attention parameters: {bd['cbam_per_level']}"
                     f"  (2*{mc.c}*{mc.c // mc.cbam_reduction} mlp + 99 spatial conv)")
    lines.append(f"levels: {bd['levels']}")
    lines.append(f"total: {bd['total']}")
    ref = REFERENCE_COUNTS.get(mc.variant)
    if ref is not None and mc.c == 64 and mc.hidden == 512:
        lines.append(f"note: published reference count for this variant is ~{ref:,}; "
                     "the closed-form count above reflects this implementation's "
                     "perception and attention design")
    return "\n".join(lines)
