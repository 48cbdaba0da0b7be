"""Training loop, sliding-window inference and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses
from .checkpoint import TrainState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config
from .data import VolumeSample, extract_patches, grid_origins, load_split, normalize_hu, stitch_patches
from .losses import AdaptiveWeights, LossReport
from .metrics import METRIC_NAMES, ConfusionCounts, aggregate, binarize, confusion, metrics_from_confusion
from .optim import AdamState, LrSchedule, adam_step, lr_update
from .unet import Model, build_unet3d, init_params

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "epoch", "lr", "w_tversky", "w_bce",
    "train_l_tversky", "train_l_bce", "train_l_total",
    "val_dsc", "val_f2", "val_sens", "val_spec", "val_prec",
)
EVAL_COLUMNS = ("id", "dsc", "f2", "spec", "sens", "prec", "tp", "tn", "fp", "fn")
TVERSKY_ONLY = AdaptiveWeights(1.0, 0.0, 0)


class TrainingError(RuntimeError):
    pass


@dataclass
class PreparedVolume:
    id: str
    image: np.ndarray  # windowed to [0, 1]
    label: np.ndarray

    @classmethod
    def from_sample(cls, s: VolumeSample, cfg: ExperimentConfig) -> "PreparedVolume":
        return cls(s.id, normalize_hu(s, cfg.data.window_lo, cfg.data.window_hi), s.label.astype(np.uint8))


def load_volumes(cfg: ExperimentConfig, split: str) -> list[PreparedVolume]:
    return [PreparedVolume.from_sample(s, cfg) for s in load_split(cfg.data.dir, split)]


def build_model(cfg: ExperimentConfig) -> Model:
    return init_params(build_unet3d(cfg.model), cfg.seed)


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(x)


def _csv_line(values) -> str:
    return ",".join(_fmt(v) for v in values)


def write_metrics_csv(history: list[str], path) -> None:
    text = ",".join(CSV_COLUMNS) + "\n" + "".join(line + "\n" for line in history)
    Path(path).write_text(text, encoding="utf-8")


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- inference -------------------------------------------------------------------


def predict_volume(model: Model, image: np.ndarray, patch: int, batch_size: int = 4) -> np.ndarray:
    """Grid-tiled inference; returns stitched (2, D, H, W) probabilities."""
    origins = grid_origins(image.shape, patch)
    outs = []
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        x = np.stack([image[z:z + patch, y:y + patch, w:w + patch] for z, y, w in chunk])[:, None]
        outs.extend(model.forward(x).data)
    model.graph = None
    return stitch_patches(outs, origins, image.shape)


@dataclass
class VolumeResult:
    id: str
    counts: ConfusionCounts
    l_tversky: float
    l_bce: float


def evaluate_predictions(probs: list[np.ndarray], volumes, params=losses.TverskyParams()) -> list[VolumeResult]:
    """Score (2, D, H, W) probability maps against their volumes' labels."""
    results = []
    for p, v in zip(probs, volumes):
        field = p[None]
        label = v.label[None]
        counts = confusion(binarize(field)[0], v.label)
        results.append(VolumeResult(
            v.id, counts, losses.tversky_loss(field, label, params), losses.bce_loss(field[:, 0], label)
        ))
    return results


def evaluate_model(model: Model, volumes, patch: int, params, batch_size: int = 4) -> list[VolumeResult]:
    probs = [predict_volume(model, v.image, patch, batch_size) for v in volumes]
    return evaluate_predictions(probs, volumes, params)


# -- training --------------------------------------------------------------------


def _fresh_state(cfg: ExperimentConfig, model: Model) -> TrainState:
    o = cfg.optim
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(
        config_text=cfg.to_text(),
        epoch=-1,
        params=model.state(),
        adam=AdamState(o.beta1, o.beta2, o.eps),
        schedule=LrSchedule.start(o.lr, o.decay_factor, o.patience, o.floor_lr),
        weights=AdaptiveWeights.initial() if cfg.loss.mode == "adaptive_tverskyce" else TVERSKY_ONLY,
        rng_state=rng.bit_generator.state,
    )


def _epoch_batches(cfg, train_vols, rng):
    order = rng.permutation(len(train_vols))
    patches = []
    for i in order:
        v = train_vols[i]
        patches.extend(extract_patches(v.image, v.label, cfg.data.patch, "random_balanced",
                                       cfg.data.patches_per_volume, rng))
    bs = cfg.optim.batch_size
    for start in range(0, len(patches), bs):
        chunk = patches[start:start + bs]
        yield (np.stack([p.image for p in chunk])[:, None],
               np.stack([p.label for p in chunk]))


def train_one_epoch(model, state: TrainState, cfg, train_vols, rng):
    weights = state.weights
    params = cfg.loss.params
    lt, lb = [], []
    arrays = model.state()
    for b, (x, g) in enumerate(_epoch_batches(cfg, train_vols, rng)):
        probs = model.forward(x)
        try:
            report = losses.total_loss(probs.data, g, weights, params)
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {state.epoch + 1}, batch {b}: {exc}") from exc
        grads = model.backward(losses.total_loss_grad(probs.data, g, weights, params))
        adam_step(arrays, grads, state.adam, state.schedule.current_lr)
        lt.append(report.l_tversky)
        lb.append(report.l_bce)
    model.graph = None
    mean_lt, mean_lb = float(np.mean(lt)), float(np.mean(lb))
    return LossReport(mean_lt, mean_lb, weights.w_tversky * mean_lt + weights.w_bce * mean_lb, weights)


def _next_weights(cfg, report: LossReport) -> AdaptiveWeights:
    if cfg.loss.mode == "tversky":
        return AdaptiveWeights(1.0, 0.0, report.weights.epoch + 1)
    return losses.adaptive_weights(report)


@dataclass
class TrainResult:
    out_dir: Path
    history: list[dict[str, float]]
    best_val_dsc: float
    test: dict[str, dict] | None = None


def train(cfg: ExperimentConfig, resume=None, evaluate_test: bool = True, figures: bool = True) -> TrainResult:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    if not Path(cfg.data.dir).is_dir():
        raise FileNotFoundError(f"data directory {cfg.data.dir} does not exist")
    train_vols = load_volumes(cfg, "train")
    val_vols = load_volumes(cfg, "val")
    if not train_vols:
        raise TrainingError("training split is empty")
    model = build_model(cfg)
    model.check_input((1, 1) + (cfg.data.patch,) * 3)

    if resume is not None:
        state = load_checkpoint(resume)
        model.load_state(state.params)
        state.params = model.state()
        log.info("resumed from %s after epoch %d", resume, state.epoch)
    else:
        state = _fresh_state(cfg, model)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    for epoch in range(state.epoch + 1, cfg.optim.epochs):
        lr = state.schedule.current_lr
        report = train_one_epoch(model, state, cfg, train_vols, rng)
        val = evaluate_model(model, val_vols, cfg.data.patch, cfg.loss.params, cfg.optim.batch_size)
        if val:
            val_metrics = aggregate([r.counts for r in val])["mean"]
            val_loss = float(np.mean([r.l_tversky + r.l_bce for r in val]))
        else:
            val_metrics = {k: math.nan for k in METRIC_NAMES}
            val_loss = report.l_tversky + report.l_bce
        w = report.weights
        state.history.append(_csv_line([
            epoch, lr, w.w_tversky, w.w_bce, report.l_tversky, report.l_bce, report.l_total,
            *(val_metrics[k] for k in METRIC_NAMES),
        ]))
        state.schedule = lr_update(state.schedule, val_loss)
        state.weights = _next_weights(cfg, report)
        state.epoch = epoch
        state.rng_state = rng.bit_generator.state
        log.info("epoch %d lr %.3g w_t %.4f L_T %.4f L_BCE %.4f val DSC %.4f",
                 epoch, lr, w.w_tversky, report.l_tversky, report.l_bce, val_metrics["dsc"])

        write_metrics_csv(state.history, out / "metrics.csv")
        if val and val_metrics["dsc"] > state.best_val_dsc:
            state.best_val_dsc = val_metrics["dsc"]
            save_checkpoint(state, out / "best.ckpt")
        save_checkpoint(state, out / "last.ckpt")
        k = cfg.run.checkpoint_every
        if k and (epoch + 1) % k == 0:
            save_checkpoint(state, out / f"epoch_{epoch:04d}.ckpt")

    history = read_metrics_csv(out / "metrics.csv")
    result = TrainResult(out, history, state.best_val_dsc)
    if figures:
        from .plotting import plot_training

        plot_training(history, out / "training_curves.png")
    if evaluate_test:
        result.test = {}
        for tag in ("best", "last"):
            ckpt = out / f"{tag}.ckpt"
            if ckpt.exists():
                result.test[tag] = evaluate_checkpoint(ckpt, "test", out, figures=figures, tag=tag)
    return result


# -- evaluation -------------------------------------------------------------------


def model_from_state(state: TrainState) -> tuple[Model, ExperimentConfig]:
    cfg = parse_config(state.config_text)
    model = build_unet3d(cfg.model)
    model.load_state(state.params)
    return model, cfg


def eval_report(results: list[VolumeResult]) -> dict:
    rows = []
    for r in results:
        m = metrics_from_confusion(r.counts)
        rows.append({"id": r.id, **m, "tp": r.counts.tp, "tn": r.counts.tn,
                     "fp": r.counts.fp, "fn": r.counts.fn})
    agg = aggregate([r.counts for r in results])
    return {"volumes": rows, **agg}


def write_eval_csv(report: dict, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_COLUMNS)
    for row in report["volumes"]:
        writer.writerow([row["id"]] + [_fmt(row[k]) for k in EVAL_COLUMNS[1:]])
    for tag in ("mean", "pooled"):
        writer.writerow([tag] + [_fmt(report[tag][k]) for k in EVAL_COLUMNS[1:6]] + [""] * 4)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def format_table(report: dict) -> str:
    head = f"{'volume':<14}{'DSC':>8}{'F2':>8}{'Spec.':>8}{'Sens.':>8}{'Prec.':>8}"
    lines = [head, "-" * len(head)]
    for row in report["volumes"] + [{"id": t, **report[t]} for t in ("mean", "pooled")]:
        lines.append(f"{row['id']:<14}" + "".join(f"{100 * row[k]:8.2f}" for k in ("dsc", "f2", "spec", "sens", "prec")))
    return "\n".join(lines)


def evaluate_checkpoint(ckpt, split: str, out_dir=None, figures: bool = True, tag: str | None = None) -> dict:
    state = load_checkpoint(ckpt)
    model, cfg = model_from_state(state)
    vols = load_volumes(cfg, split)
    if not vols:
        raise TrainingError(f"split {split!r} is empty")
    model.check_input((1, 1) + (cfg.data.patch,) * 3)
    probs = [predict_volume(model, v.image, cfg.data.patch, cfg.optim.batch_size) for v in vols]
    report = eval_report(evaluate_predictions(probs, vols, cfg.loss.params))
    out = Path(out_dir if out_dir is not None else cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{split}" + (f"_{tag}" if tag else "")
    write_eval_csv(report, out / f"{stem}.csv")
    if figures:
        from .plotting import plot_eval

        plot_eval(report, vols, probs, out / f"{stem}.png")
    report["epoch"] = state.epoch
    return report
