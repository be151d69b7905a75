"""Optimization loop, metrics and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import WindowSet
from .losses import LossBreakdown, total_objective
from .model import Hiest

logger = logging.getLogger(__name__)

STEP_LOG_FIELDS = ["step", "l_pre", "l_rec_ro", "l_rec_gr", "l_ort", "total"]
EPOCH_LOG_FIELDS = ["epoch", "val_mae", "val_mape", "val_rmse"]
HORIZONS = (3, 6, 12)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


class Adam:
    """Adam with decoupled weight decay and global-norm gradient clipping.

    ``step()`` reads each parameter's ``grad`` (missing means zero), clips,
    updates in place, then clears the gradients.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip_norm: float = 5.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        grads = {}
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            grads[name] = g
        grads, norm = clip_by_global_norm(grads, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        ad.zero_grad(self.params.values())
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v.{k}": v.copy() for k, v in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]
        self.t = int(state["t"][0])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
@dataclass
class Metrics:
    mae: Optional[float]
    mape: Optional[float]
    rmse: Optional[float]


def compute_metrics(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Metrics:
    """Masked MAE, MAPE (%) and RMSE.  MAPE also skips zero targets; empty selections give ``None``."""
    keep = np.ones(target.shape, dtype=bool) if mask is None else np.asarray(mask) > 0
    err = (pred - target)[keep]
    if err.size == 0:
        return Metrics(None, None, None)
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    nz = keep & (target != 0)
    mape = float(np.mean(np.abs((pred - target)[nz]) / np.abs(target[nz])) * 100.0) if nz.any() else None
    return Metrics(mae, mape, rmse)


@dataclass
class MetricReport:
    horizons: dict[int, Metrics]
    overall: Metrics

    def rows(self) -> list[dict]:
        out = [{"horizon": h, **vars(m)} for h, m in self.horizons.items()]
        out.append({"horizon": "all", **vars(self.overall)})
        return out

    def table(self) -> str:
        def fmt(x):
            return "n/a" if x is None else f"{x:.4f}"

        lines = [f"{'horizon':>8} {'MAE':>10} {'MAPE(%)':>10} {'RMSE':>10}"]
        for r in self.rows():
            lines.append(f"{str(r['horizon']):>8} {fmt(r['mae']):>10} {fmt(r['mape']):>10} {fmt(r['rmse']):>10}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["horizon", "mae", "mape", "rmse"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def metric_report(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray],
                  horizons: Sequence[int] = HORIZONS) -> MetricReport:
    per = {}
    for h in horizons:
        if h <= pred.shape[1]:
            m = None if mask is None else mask[:, h - 1]
            per[h] = compute_metrics(pred[:, h - 1], target[:, h - 1], m)
    return MetricReport(per, compute_metrics(pred, target, mask))


def predict(model: Hiest, data: WindowSet, batch_size: int = 64) -> np.ndarray:
    """De-standardized predictions for every window of ``data``."""
    outs = []
    std, mean = float(data.norm_std[0]), float(data.norm_mean[0])
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.batch(np.arange(start, min(start + batch_size, len(data))))
            outs.append(model.forward(b.x).data * std + mean)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.config.horizon, model.hierarchy.num_nodes, 1))


def evaluate(model: Hiest, data: WindowSet, batch_size: int = 64, horizons: Sequence[int] = HORIZONS) -> MetricReport:
    pred = predict(model, data, batch_size)
    full = data.all()
    return metric_report(pred, full.y, full.mask, horizons)


def persistence_forecast(data: WindowSet) -> np.ndarray:
    """Repeat the last observed (raw-unit) value across the whole horizon."""
    idx = np.arange(len(data))
    last = data.targets[idx + data.history - 1]  # (W, N, 1)
    return np.repeat(last[:, None], data.horizon, axis=1)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    clip_norm: float = 5.0
    seed: int = 0
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: Adam
    epoch: int = 0
    step: int = 0
    best_val_mae: float = math.inf
    best_epoch: int = -1
    seed: int = 0


@dataclass
class TrainResult:
    state: TrainState
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def train_loss_by_epoch(self) -> list[float]:
        return [e["train_l_pre"] for e in self.epoch_log]


def objective(model: Hiest, batch, weights=None) -> LossBreakdown:
    pred, state = model.forward(batch.x, return_state=True)
    pred = ad.add_scalar(ad.scale(pred, float(batch.norm_std[0])), float(batch.norm_mean[0]))
    return total_objective(pred, batch.y, state, model.m_or, model.hierarchy.graph.adjacency,
                           model.hierarchy.a_r, mask=batch.mask, weights=weights)


def _write_rows(path: Optional[Path], fields: list[str], rows: list[dict], append: bool) -> None:
    if path is None:
        return
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerows(rows)


def train(
    model: Hiest,
    train_set: WindowSet,
    val_set: WindowSet,
    config: TrainConfig = TrainConfig(),
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Minimize the full objective with early stopping on validation MAE.

    When ``out_dir`` is given, writes ``train_log.csv``, ``epochs.csv`` and
    ``best.ckpt`` (only when validation MAE improves) plus ``last.ckpt``.
    The model ends up holding the best parameters.
    """
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    state = TrainState(model.params, opt, seed=config.seed)
    result = TrainResult(state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step_path = out / "train_log.csv" if out else None
    epoch_path = out / "epochs.csv" if out else None
    meta = dict(extra_meta or {})
    meta.update(norm_mean=train_set.norm_mean.tolist(), norm_std=train_set.norm_std.tolist())

    if resume is not None:
        _, arrays, extra, optim = load_checkpoint(resume)
        model.load_arrays(arrays)
        if optim:
            opt.load_state_dict(optim)
        state.epoch = int(extra.get("epoch", 0))
        state.step = int(extra.get("step", 0))
        state.best_val_mae = float(extra.get("best_val_mae", math.inf))
        state.best_epoch = int(extra.get("best_epoch", -1))
        logger.info("resumed from %s at epoch %d", resume, state.epoch)
    result.best_params = model.state_arrays()
    appending = resume is not None

    since_best = 0
    while state.epoch < config.max_epochs:
        epoch = state.epoch
        if model.config.ag_refresh == "epoch":
            model.refresh_global_adjacency()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_set))
        rows, pre_sum, n_batches = [], 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = train_set.batch(order[start:start + config.batch_size])
            losses = objective(model, batch, config.loss_weights)
            vals = losses.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingError(f"non-finite loss at step {state.step}: {vals}")
            losses.total.backward()
            opt.step()
            state.step += 1
            rows.append({"step": state.step, **vals})
            pre_sum += vals["l_pre"]
            n_batches += 1
        _write_rows(step_path, STEP_LOG_FIELDS, rows, append=appending or epoch > 0)
        result.step_log.extend(rows)

        report = evaluate(model, val_set, config.batch_size)
        val = report.overall
        erow = {"epoch": epoch, "val_mae": val.mae, "val_mape": val.mape, "val_rmse": val.rmse,
                "train_l_pre": pre_sum / max(n_batches, 1)}
        result.epoch_log.append(erow)
        _write_rows(epoch_path, EPOCH_LOG_FIELDS, [erow], append=appending or epoch > 0)
        state.epoch += 1
        logger.info("epoch %d train_l_pre=%.4f val_mae=%.4f", epoch, erow["train_l_pre"], val.mae or float("nan"))

        improved = val.mae is not None and val.mae < state.best_val_mae
        if improved:
            state.best_val_mae = val.mae
            state.best_epoch = epoch
            result.best_params = model.state_arrays()
            since_best = 0
        else:
            since_best += 1
        if out is not None:
            info = dict(meta, epoch=state.epoch, step=state.step, best_val_mae=state.best_val_mae,
                        best_epoch=state.best_epoch)
            if improved:
                save_checkpoint(out / "best.ckpt", model.config, result.best_params, info)
            save_checkpoint(out / "last.ckpt", model.config, model.state_arrays(), info, opt.state_dict())
        if since_best >= config.patience:
            logger.info("early stop after epoch %d (best %d)", epoch, state.best_epoch)
            break

    model.load_arrays(result.best_params)
    return result
