"""AdamW training loop and the HR metric suite.

The recipe follows the training setup the network was designed around:
AdamW with lr 9e-3 and zero weight decay, batch size 4, 30 epochs, and the
dynamic hybrid loss whose frequency-domain weight beta grows with the epoch
schedule.  Desk-scale runs shrink the clip count and epochs, never the
formulas.

Evaluation runs each clip through the eval-mode network, the zero-phase
Butterworth band-pass, and Welch PSD peak extraction, then aggregates
MAE / RMSE / MAPE / Pearson rho over (ground truth, predicted) HR pairs.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from pulseforge import dsp
from pulseforge import losses as LS
from pulseforge import model as M
from pulseforge import synth
from pulseforge import tensor as T
from pulseforge.tensor import NumericError

__all__ = [
    "TrainConfig",
    "PostConfig",
    "AdamWState",
    "adamw_step",
    "train",
    "TrainResult",
    "evaluate",
    "EvalReport",
    "aggregate_metrics",
    "write_report",
]


@dataclass
class TrainConfig:
    lr: float = 9e-3
    weight_decay: float = 0.0
    batch_size: int = 4
    epochs: int = 30
    lambda_: float = 1.0
    theta: float = 1.5
    alpha_time: float = 1.0
    hr_sigma: float = LS.DEFAULT_HR_SIGMA
    grad_clip: float = 1.0  # global-norm cap; 0 disables
    lr_schedule: str = "constant"  # constant | cosine
    val_every: int = 1
    seed: int = 0
    nfft: int = 2048

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("weight_decay and grad_clip must be >= 0")


@dataclass
class PostConfig:
    """Post-processing chain: filter band, Welch settings, HR search band."""

    filter_lo: float = 0.75
    filter_hi: float = 2.5
    band: LS.BandConfig = field(default_factory=LS.BandConfig)
    welch: dsp.WelchConfig = field(default_factory=dsp.WelchConfig)


# -- optimizer -------------------------------------------------------------------


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(
    weights: list[tuple[str, T.DiffTensor]],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    With weight_decay 0 this is exactly the Adam update with bias-corrected
    moments.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in weights:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _global_grad_norm(names_params, grads) -> float:
    total = 0.0
    for name, _ in names_params:
        g = grads[name]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoint: str
    log_file: str
    best_val_mae: float
    epochs_run: int


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    return cfg.lr


def train(
    cfg: TrainConfig,
    arch: M.ArchConfig,
    dataset_dir: str,
    out_dir: str,
    train_split: str = "train",
    val_split: str = "val",
) -> TrainResult:
    """Full training run; deterministic per (cfg, arch, dataset) on one thread.

    Writes ``log.csv`` (epoch, l_time, l_ce, l_hr, beta, total, val_mae),
    ``best.ckpt`` (lowest validation MAE) and ``final.ckpt`` under
    ``out_dir``.
    """
    cfg.validate()
    arch.validate()
    os.makedirs(out_dir, exist_ok=True)
    index = synth.load_dataset(dataset_dir)
    scen = index.scenario
    if (scen.frames, scen.height, scen.width) != (arch.frames, arch.height, arch.width):
        raise ValueError(
            f"dataset geometry {(scen.frames, scen.height, scen.width)} does not match "
            f"arch {(arch.frames, arch.height, arch.width)}"
        )
    train_recs = index.split(train_split)
    val_recs = index.split(val_split)
    if not train_recs:
        raise ValueError(f"dataset has no {train_split!r} records")

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, dropout_ss = ss.spawn(3)
    weights = M.init_weights(arch, seed=int(init_ss.generate_state(1)[0]), dtype=np.float32)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    clips = {r.clip_id: index.load_clip(r) for r in index.records}
    named = weights.named_parameters()
    state = AdamWState()
    band = LS.BandConfig()
    post = PostConfig(band=band)

    log_path = os.path.join(out_dir, "log.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    final_path = os.path.join(out_dir, "final.ckpt")
    best_mae = math.inf
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_time", "l_ce", "l_hr", "beta", "total", "val_mae"])

        for epoch in range(1, cfg.epochs + 1):
            sched = LS.LossSchedule(
                lambda_=cfg.lambda_,
                theta=cfg.theta,
                epoch_current=epoch,
                epoch_total=cfg.epochs,
                alpha_time=cfg.alpha_time,
            )
            beta = LS.beta_schedule(sched)
            lr = _epoch_lr(cfg, epoch)
            order = [train_recs[i] for i in shuffle_rng.permutation(len(train_recs))]
            sums = {"time": 0.0, "ce": 0.0, "hr": 0.0, "total": 0.0}
            n_samples = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                stack = np.stack([clips[r.clip_id].clip for r in batch])
                try:
                    waves = M.forward(stack, weights, mode="train", rng=dropout_rng)
                    terms = []
                    for i, rec in enumerate(batch):
                        vc = clips[rec.clip_id]
                        br = LS.overall_loss(
                            T.take_row(waves, i),
                            vc.gt_bvp.samples.astype(np.float32),
                            rec.gt_hr,
                            scen.fps,
                            sched,
                            band,
                            nfft=cfg.nfft,
                        )
                        terms.append(br)
                    total = terms[0].total
                    for br in terms[1:]:
                        total = T.add(total, br.total)
                    total = T.scale(total, 1.0 / len(batch))
                    total.backward()
                except NumericError as err:
                    raise NumericError(
                        f"NaN during epoch {epoch}, batch starting at sample {start}: {err}"
                    ) from err
                grads = {name: p.grad for name, p in named}
                if cfg.grad_clip > 0:
                    norm = _global_grad_norm(named, grads)
                    if norm > cfg.grad_clip:
                        scale = cfg.grad_clip / norm
                        for g in grads.values():
                            g *= scale
                adamw_step(named, grads, state, lr, cfg.weight_decay)
                weights.zero_grads()
                for br in terms:
                    sums["time"] += br.time
                    sums["ce"] += br.ce
                    sums["hr"] += br.hr
                    sums["total"] += br.time * sched.alpha_time + beta * (br.ce + br.hr)
                n_samples += len(batch)

            val_mae = float("nan")
            if val_recs and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
                report = evaluate(weights, index, split=val_split, post=post)
                val_mae = report.mae
                if val_mae < best_mae:
                    best_mae = val_mae
                    M.save_checkpoint(best_path, weights, seed=cfg.seed, epoch=epoch)
            writer.writerow(
                [
                    epoch,
                    f"{sums['time'] / n_samples:.8f}",
                    f"{sums['ce'] / n_samples:.8f}",
                    f"{sums['hr'] / n_samples:.8f}",
                    f"{beta:.8f}",
                    f"{sums['total'] / n_samples:.8f}",
                    f"{val_mae:.6f}" if not math.isnan(val_mae) else "",
                ]
            )
            fh.flush()

    M.save_checkpoint(final_path, weights, seed=cfg.seed, epoch=cfg.epochs)
    if math.isinf(best_mae):
        M.save_checkpoint(best_path, weights, seed=cfg.seed, epoch=cfg.epochs)
    return TrainResult(
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        log_file=log_path,
        best_val_mae=best_mae,
        epochs_run=cfg.epochs,
    )


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]
    mae: float
    rmse: float
    mape: float
    rho: float | None
    fingerprint: dict = field(default_factory=dict)


def aggregate_metrics(rows: list[dict]) -> tuple[float, float, float, float | None]:
    """MAE, RMSE, MAPE (percent), and Pearson rho over per-clip HR pairs."""
    if not rows:
        raise ValueError("no rows to aggregate")
    gt = np.array([r["gt_hr"] for r in rows], dtype=np.float64)
    pred = np.array([r["pred_hr"] for r in rows], dtype=np.float64)
    err = pred - gt
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mape = float(np.mean(np.abs(err) / gt) * 100.0)
    rho = dsp.pearson_corr(gt, pred) if gt.size >= 2 else None
    return mae, rmse, mape, rho


def predict_hr(weights: M.ModelWeights, clip: np.ndarray, fps: float, post: PostConfig) -> tuple[float, np.ndarray]:
    """Eval-mode forward plus the DSP chain; returns (bpm, filtered waveform)."""
    wave = M.forward(clip, weights, mode="eval").numpy().astype(np.float64)
    spec = dsp.design_bandpass(post.filter_lo, post.filter_hi, fps)
    filtered = dsp.butterworth_bandpass(wave, spec)
    welch_cfg = post.welch
    if welch_cfg.segment > filtered.size:
        welch_cfg = dsp.WelchConfig(
            segment=filtered.size,
            overlap=welch_cfg.overlap,
            window=welch_cfg.window,
            nfft=welch_cfg.nfft,
            detrend=welch_cfg.detrend,
        )
    psd = dsp.welch_psd(filtered, fps, welch_cfg)
    hr = dsp.estimate_hr(psd, post.band.f_lo, post.band.f_hi)
    return hr, filtered


def evaluate(
    weights: M.ModelWeights,
    index: synth.DatasetIndex,
    split: str = "val",
    post: PostConfig | None = None,
) -> EvalReport:
    """Per-clip HR prediction and aggregate metrics on one dataset split.

    Clips are processed in clip-id order, so the report is invariant to the
    manifest's record ordering.
    """
    post = post or PostConfig()
    recs = sorted(index.split(split), key=lambda r: r.clip_id)
    if not recs:
        raise ValueError(f"dataset has no {split!r} records")
    rows = []
    for rec in recs:
        vc = index.load_clip(rec)
        hr, _ = predict_hr(weights, vc.clip, vc.fps, post)
        rows.append({"clip_id": rec.clip_id, "gt_hr": rec.gt_hr, "pred_hr": hr})
    mae, rmse, mape, rho = aggregate_metrics(rows)
    fingerprint = {
        "split": split,
        "n_clips": len(rows),
        "filter_lo": post.filter_lo,
        "filter_hi": post.filter_hi,
        "band_lo": post.band.f_lo,
        "band_hi": post.band.f_hi,
        "arch": weights.arch.to_dict(),
    }
    return EvalReport(rows=rows, mae=mae, rmse=rmse, mape=mape, rho=rho, fingerprint=fingerprint)


def write_report(report: EvalReport, out_dir: str, stem: str = "eval") -> dict[str, str]:
    """Persist a report: JSON summary, per-clip CSV, and a pred-vs-gt file."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "json": os.path.join(out_dir, f"{stem}_report.json"),
        "csv": os.path.join(out_dir, f"{stem}_per_clip.csv"),
        "pairs": os.path.join(out_dir, f"{stem}_pred_vs_gt.txt"),
    }
    doc = {
        "mae": report.mae,
        "rmse": report.rmse,
        "mape": report.mape,
        "rho": report.rho,
        "fingerprint": report.fingerprint,
        "rows": report.rows,
    }
    with open(paths["json"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["clip_id", "gt_hr", "pred_hr"])
        writer.writeheader()
        writer.writerows(report.rows)
    with open(paths["pairs"], "w") as fh:
        fh.write("# gt_hr pred_hr\n")
        for r in report.rows:
            fh.write(f"{r['gt_hr']:.6f} {r['pred_hr']:.6f}\n")
    return paths
