"""Normalization, the masked variance-normalized loss, and the training loop.

Training is self-supervised: for each batch a decision time t_c is drawn, the
encoder sees observations up to t_c, the model forecasts the remaining record
under the factual recorded treatments, and the masked loss drives Adam. The
parameters with the best validation loss are returned.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .errors import ConfigError, DataError, NumericError
from .model import (EncodedState, History, ObsNodeConfig, ObsNodeParams,
                    encode, forecast, save_model)
from .odeint import ControlPath, IntegrationConfig


@dataclass
class NormStats:
    mean: np.ndarray  # (d_y,)
    std: np.ndarray   # (d_y,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)


def zscore_fit(trajs) -> NormStats:
    """Per-component mean/std over observed entries of the given (train) split."""
    ys = np.concatenate([tr.y for tr in trajs])
    ms = np.concatenate([tr.mask for tr in trajs])
    counts = ms.sum(0)
    if np.any(counts < 2):
        bad = int(np.argmin(counts))
        raise DataError(f"component {bad}: fewer than 2 observations")
    mean = (ys * ms).sum(0) / counts
    var = (((ys - mean) ** 2) * ms).sum(0) / counts
    if np.any(var <= 0):
        bad = int(np.argmin(var))
        raise DataError(f"component {bad} has zero variance on the train split")
    return NormStats(mean=mean, std=np.sqrt(var))


def zscore_apply(trajs, stats: NormStats):
    """Normalize observed outcome entries; treatments are left untouched."""
    out = []
    for tr in trajs:
        y = np.where(tr.mask > 0, (tr.y - stats.mean) / stats.std, tr.y)
        out.append(type(tr)(unit_id=tr.unit_id, times=tr.times.copy(), y=y,
                            mask=tr.mask.copy(), a=tr.a.copy(),
                            latents=tr.latents, confounders=tr.confounders))
    return out


def zscore_invert(y, stats: NormStats):
    return np.asarray(y) * stats.std + stats.mean


def stack_units(trajs):
    """(times, y, mask, a) arrays with a shared time grid across units;
    shapes (T,), (T, n, d_y), (T, n, d_y), (T, n, d_a)."""
    times = trajs[0].times
    for tr in trajs[1:]:
        if tr.times.shape != times.shape or np.any(tr.times != times):
            raise DataError("stack_units: units must share one time grid")
    y = np.stack([tr.y for tr in trajs], axis=1)
    mask = np.stack([tr.mask for tr in trajs], axis=1)
    a = np.stack([tr.a for tr in trajs], axis=1)
    return times, y, mask, a


def masked_loss(pred, y, mask, sigma2):
    """Variance-normalized masked squared error.

    pred: Tensor (T, n, d_y); y, mask: arrays of the same shape; sigma2: per
    component variances (d_y,). Each (unit, component) pair is averaged over
    its own observed count, scaled by 1/(n sigma_j^2), and pairs with no
    observations contribute zero.
    """
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if pred.data.shape != y.shape or y.shape != mask.shape:
        raise DataError(f"masked_loss: shapes {pred.data.shape}, {y.shape}, "
                        f"{mask.shape} disagree")
    T, n, d_y = y.shape
    counts = mask.sum(axis=0)  # (n, d_y)
    denom = n * sigma2 * np.where(counts > 0, counts, 1.0)
    weights = mask / denom
    err = ad.sub(pred, Tensor(y))
    return ad.tsum(ad.hadamard(ad.square(err), Tensor(weights)))


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 20
    decision_time_grid: list = field(default_factory=list)
    decision_sampling: str = "uniform_random"
    t_f: float = 0.0
    seed: int = 0
    max_grad_norm: float | None = None
    int_method: str = "rk4"
    int_step: float | None = None  # default: a quarter of the grid spacing
    val_decision_times: list | None = None
    max_horizon: float | None = None  # None: forecast to the record end

    def __post_init__(self):
        if self.max_horizon is not None and self.max_horizon <= 0:
            raise ConfigError("max_horizon must be positive")
        if self.decision_sampling not in ("uniform_random", "fixed_grid"):
            raise ConfigError(f"unknown decision_sampling {self.decision_sampling!r}")
        if not self.decision_time_grid:
            raise ConfigError("decision_time_grid must be nonempty")
        if any(t >= self.t_f for t in self.decision_time_grid):
            raise ConfigError("decision times must be < t_f")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, learning_rate >= 0")


def _int_config(times, tc: TrainConfig):
    step = tc.int_step
    if step is None:
        step = float(np.min(np.diff(times))) / 4.0
    return IntegrationConfig(method=tc.int_method, step_size=step)


def _batch_loss(times, y, mask, a, t_c, params, sigma2, int_cfg,
                max_horizon=None):
    """Forward pass on one batch: encode up to t_c, forecast the observed
    times in (t_c, t_f] under the factual treatments, and score."""
    past = times <= t_c + 1e-9
    fut = ~past
    if max_horizon is not None:
        fut = fut & (times <= t_c + max_horizon + 1e-9)
        if not fut.any():
            return None
    if not past.any() or not fut.any():
        return None
    hist = History(times[past], y[past], mask[past], a[past])
    state = encode(hist, params)
    qts = times[fut]
    knots = np.concatenate([[times[past][-1]], qts[:-1]]) if qts.size else times[past][-1:]
    ctrl = ControlPath(knots, np.concatenate([a[past][-1:], a[fut][:-1]])
                       if qts.size > 1 else a[past][-1:])
    preds = forecast(state, ctrl, list(qts), params, int_cfg,
                     history=hist if params.cfg.rollout_mode == "recursive" else None)
    pred = ad.concat([ad.reshape(p, (1,) + p.data.shape) for p in preds], axis=0)
    return masked_loss(pred, y[fut], mask[fut], sigma2)


def evaluate_loss(trajs, params, sigma2, decision_times, tcfg: TrainConfig):
    """Mean masked loss over a fixed grid of decision times (no gradients)."""
    times, y, mask, a = stack_units(trajs)
    int_cfg = _int_config(times, tcfg)
    vals = []
    for t_c in decision_times:
        loss = _batch_loss(times, y, mask, a, t_c, params, sigma2, int_cfg,
                           max_horizon=tcfg.max_horizon)
        if loss is not None:
            vals.append(float(loss.data))
    return float(np.mean(vals)) if vals else np.nan


def train(model_cfg: ObsNodeConfig, splits, tcfg: TrainConfig, run_dir=None,
          stats: NormStats | None = None, log=None, init_state=None):
    """Fit the model on normalized splits {"train": [...], "val": [...]}.

    Returns (params, history) where history rows are dicts with epoch,
    train_loss, val_loss. The returned parameters are the checkpoint with the
    lowest validation loss. `init_state` (name -> array) warm-starts the
    parameters, e.g. to resume from a checkpoint.
    """
    rng = np.random.default_rng(tcfg.seed)
    params = ObsNodeParams(model_cfg, rng)
    if init_state is not None:
        params.load_state(init_state)
    opt = Adam(params.tensors(), lr=tcfg.learning_rate)
    times, y, mask, a = stack_units(splits["train"])
    n = y.shape[1]
    int_cfg = _int_config(times, tcfg)
    sigma2 = np.ones(model_cfg.d_y)
    val_times = tcfg.val_decision_times or list(tcfg.decision_time_grid)

    history = []
    best = (np.inf, {name: t.data.copy() for name, t in params.named_parameters()})
    grid = list(tcfg.decision_time_grid)
    n_batches = max(1, int(np.ceil(n / tcfg.batch_size)))

    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        epoch_losses, skipped = [], 0
        for bi in range(n_batches):
            idx = np.sort(order[bi * tcfg.batch_size:(bi + 1) * tcfg.batch_size])
            if idx.size == 0:
                continue
            if tcfg.decision_sampling == "uniform_random":
                t_c = grid[int(rng.integers(len(grid)))]
            else:
                t_c = grid[(epoch * n_batches + bi) % len(grid)]
            yb, mb, ab = y[:, idx], mask[:, idx], a[:, idx]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = _batch_loss(times, yb, mb, ab, t_c, params, sigma2,
                                       int_cfg, max_horizon=tcfg.max_horizon)
                    if loss is None:
                        continue
                    tape.backward(loss)
            except NumericError:
                skipped += 1
                continue
            opt.step(max_grad_norm=tcfg.max_grad_norm)
            epoch_losses.append(float(loss.data))
        if skipped > 0.1 * n_batches:
            raise DataError(f"epoch {epoch}: {skipped}/{n_batches} batches "
                            "diverged; aborting")
        val = evaluate_loss(splits["val"], params, sigma2, val_times, tcfg)
        row = {"epoch": epoch,
               "train_loss": float(np.mean(epoch_losses)) if epoch_losses else np.nan,
               "val_loss": val}
        history.append(row)
        if log is not None:
            log(row)
        if val < best[0]:
            best = (val, {name: t.data.copy() for name, t in params.named_parameters()})

    params.load_state(best[1])
    if run_dir is not None:
        _write_run(run_dir, model_cfg, tcfg, history, params, stats)
    return params, history


def _write_run(run_dir, model_cfg, tcfg, history, params, stats):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump({"model": asdict(model_cfg), "train": asdict(tcfg)}, fh, indent=1)
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        wr.writeheader()
        wr.writerows(history)
    save_model(run_dir / "checkpoint.json", params, norm_stats=stats)
