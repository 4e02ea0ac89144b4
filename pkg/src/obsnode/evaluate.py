"""Held-out evaluation: scaled RMSE over assimilation times and horizons.

The grid protocol: encode each test unit's history up to an assimilation time
t_c, forecast under the factual recorded treatments, and report RMSE per
horizon bin and component, divided by the per-component test-set standard
deviation. A separate routine scores interventional forecasts against
noise-free re-simulations under an alternative dose path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import History, encode, forecast
from .odeint import ControlPath, IntegrationConfig
from .simulate import (CancerSimConfig, _patient_rngs, sample_patient_params,
                       simulate_cancer_patient)
from .train import NormStats, stack_units, zscore_apply, zscore_invert


@dataclass
class RmseGrid:
    assimilation_times: np.ndarray   # (n_tc,)
    horizons: np.ndarray             # (n_s,)
    values: np.ndarray               # (n_tc, n_s, d_y); NaN marks absent bins
    counts: np.ndarray               # (n_tc, n_s, d_y) observed points per bin
    scale: np.ndarray | None = None  # (d_y,) per-component test sd
    clipped: bool = False

    def __post_init__(self):
        self.assimilation_times = np.asarray(self.assimilation_times, dtype=np.float64)
        self.horizons = np.asarray(self.horizons, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        expect = (self.assimilation_times.size, self.horizons.size)
        if self.values.shape[:2] != expect or self.counts.shape != self.values.shape:
            raise DataError("RmseGrid: inconsistent dimensions")
        if np.any(self.horizons <= 0) or np.any(np.diff(self.horizons) <= 0):
            raise DataError("RmseGrid: horizons must be sorted and positive")
        if np.nanmin(self.values, initial=0.0) < 0:
            raise DataError("RmseGrid: negative value")

    def component_mean(self):
        """Mean over components per cell, ignoring absent entries."""
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.values, axis=2)


def model_predictor(params, stats: NormStats | None, int_cfg: IntegrationConfig):
    """Default predictor: encode the normalized history, roll the model
    forward under the factual treatments, and invert the normalization."""

    def predict(times, y, mask, a, t_c, query_times):
        if stats is not None:
            y = np.where(mask > 0, (y - stats.mean) / stats.std, y)
        past = times <= t_c + 1e-9
        hist = History(times[past], y[past], mask[past], a[past])
        state = encode(hist, params)
        fut_t = np.asarray(query_times)
        fut_a = a[np.isin(times, fut_t)]
        knots = np.concatenate([[times[past][-1]], fut_t[:-1]])
        vals = np.concatenate([a[past][-1:], fut_a[:-1]]) if fut_t.size > 1 \
            else a[past][-1:]
        ctrl = ControlPath(knots, vals)
        preds = forecast(state, ctrl, list(fut_t), params, int_cfg,
                         history=hist if params.cfg.rollout_mode == "recursive"
                         else None)
        out = np.stack([p.data for p in preds])
        return zscore_invert(out, stats) if stats is not None else out

    return predict


def _bin_edges(t_c, horizons):
    lo = np.concatenate([[0.0], horizons[:-1]])
    return t_c + lo, t_c + horizons


def rmse_grid(test_trajs, t_c_grid, horizons, predict=None, params=None,
              stats=None, int_cfg=None) -> RmseGrid:
    """Scaled RMSE per (assimilation time, horizon bin, component).

    `predict(times, y, mask, a, t_c, query_times) -> (len(q), n, d_y)` in raw
    units may be supplied directly; otherwise it is built from `params` (and
    `stats`). The horizon bin for s_k collects observed points in
    (t_c + s_{k-1}, t_c + s_k].
    """
    horizons = np.sort(np.asarray(horizons, dtype=np.float64))
    t_c_grid = np.sort(np.asarray(t_c_grid, dtype=np.float64))
    if predict is None:
        if params is None:
            raise DataError("rmse_grid: need predict or params")
        if int_cfg is None:
            times0 = test_trajs[0].times
            int_cfg = IntegrationConfig(step_size=float(np.min(np.diff(times0))) / 4.0)
        predict = model_predictor(params, stats, int_cfg)

    times, y, mask, a = stack_units(test_trajs)
    d_y = y.shape[2]
    scale = np.sqrt(((y - (y * mask).sum((0, 1)) / mask.sum((0, 1))) ** 2
                     * mask).sum((0, 1)) / mask.sum((0, 1)))

    values = np.full((t_c_grid.size, horizons.size, d_y), np.nan)
    counts = np.zeros((t_c_grid.size, horizons.size, d_y), dtype=int)
    for i, t_c in enumerate(t_c_grid):
        end = t_c + horizons[-1]
        fut = (times > t_c + 1e-9) & (times <= end + 1e-9)
        if not fut.any() or not (times <= t_c + 1e-9).any():
            continue
        qts = times[fut]
        preds = predict(times, y, mask, a, float(t_c), qts)
        err2 = (preds - y[fut]) ** 2 * mask[fut]
        lo, hi = _bin_edges(t_c, horizons)
        for k in range(horizons.size):
            in_bin = (qts > lo[k] + 1e-9) & (qts <= hi[k] + 1e-9)
            m = mask[fut][in_bin]
            c = m.sum(axis=(0, 1))
            counts[i, k] = c
            for j in range(d_y):
                if c[j] > 0:
                    values[i, k, j] = np.sqrt(err2[in_bin][:, :, j].sum() / c[j]) / scale[j]
    return RmseGrid(t_c_grid, horizons, values, counts, scale=scale)


def clip_for_display(grid: RmseGrid, cap: float = 1.0) -> RmseGrid:
    """Copy of the grid with values capped (display only; raw grid untouched)."""
    if cap <= 0:
        raise ValueError("clip_for_display: cap must be positive")
    return RmseGrid(grid.assimilation_times.copy(), grid.horizons.copy(),
                    np.minimum(grid.values, cap), grid.counts.copy(),
                    scale=None if grid.scale is None else grid.scale.copy(),
                    clipped=True)


def write_grid_csv(grid: RmseGrid, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_c", "horizon", "component", "rmse", "n_points"])
        for i, t_c in enumerate(grid.assimilation_times):
            for k, s in enumerate(grid.horizons):
                for j in range(grid.values.shape[2]):
                    v = grid.values[i, k, j]
                    wr.writerow([repr(float(t_c)), repr(float(s)), j,
                                 "" if np.isnan(v) else repr(float(v)),
                                 int(grid.counts[i, k, j])])


def read_grid_csv(path) -> RmseGrid:
    rows = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["t_c", "horizon", "component", "rmse", "n_points"]:
            raise DataError(f"unexpected grid header: {header}")
        for row in rd:
            rows.append((float(row[0]), float(row[1]), int(row[2]),
                         np.nan if row[3] == "" else float(row[3]), int(row[4])))
    tcs = sorted({r[0] for r in rows})
    hs = sorted({r[1] for r in rows})
    d_y = max(r[2] for r in rows) + 1
    values = np.full((len(tcs), len(hs), d_y), np.nan)
    counts = np.zeros((len(tcs), len(hs), d_y), dtype=int)
    for tc, s, j, v, c in rows:
        values[tcs.index(tc), hs.index(s), j] = v
        counts[tcs.index(tc), hs.index(s), j] = c
    return RmseGrid(np.array(tcs), np.array(hs), values, counts)


def write_grid_pgm(grid: RmseGrid, path, component=0, cap: float = 1.0):
    """ASCII PGM heatmap: rows are horizons from largest (top) to smallest,
    columns are assimilation times ascending; white = RMSE 0, black = >= cap,
    absent bins black."""
    vals = (grid.component_mean() if component is None
            else grid.values[:, :, component])
    img = np.clip(vals / cap, 0.0, 1.0)
    img = np.where(np.isnan(img), 1.0, img)
    pix = np.round(255 * (1.0 - img)).astype(int).T[::-1]
    with open(path, "w") as fh:
        fh.write(f"P2\n{pix.shape[1]} {pix.shape[0]}\n255\n")
        for row in pix:
            fh.write(" ".join(str(v) for v in row) + "\n")


def counterfactual_rmse(params, stats, sim_config: CancerSimConfig, unit_ids,
                        schedule_fn, t_c, horizons, int_cfg=None) -> RmseGrid:
    """Interventional check against the simulator.

    For each patient: simulate the factual noisy record, derive an
    alternative dose schedule via `schedule_fn(factual_schedule)`, re-simulate
    with noise off under that schedule for the ground truth, and score the
    model forecast (encoded from the factual history up to t_c, rolled out
    under the alternative doses).
    """
    horizons = np.sort(np.asarray(horizons, dtype=np.float64))
    facts, truths, scheds = [], [], []
    cf_cfg = CancerSimConfig(**{**_cfg_dict(sim_config), "noise": False})
    for uid in unit_ids:
        prng, nrng = _patient_rngs(sim_config.seed, uid)
        pat = sample_patient_params(prng, sim_config)
        fact = simulate_cancer_patient(pat, sim_config, nrng, unit_id=uid)
        sched = np.asarray(schedule_fn(fact.latents.copy()), dtype=np.float64)
        truth = simulate_cancer_patient(pat, cf_cfg, np.random.default_rng(0),
                                        unit_id=uid, dose_schedule=sched)
        facts.append(fact)
        truths.append(truth)
        scheds.append(sched)

    times, y, mask, a = stack_units(facts)
    _, y_true, mask_true, _ = stack_units(truths)
    if int_cfg is None:
        int_cfg = IntegrationConfig(step_size=float(np.min(np.diff(times))) / 4.0)

    past = times <= t_c + 1e-9
    end = t_c + horizons[-1]
    fut = (times > t_c + 1e-9) & (times <= end + 1e-9)
    qts = times[fut]
    y_in = np.where(mask > 0, (y - stats.mean) / stats.std, y) if stats else y
    hist = History(times[past], y_in[past], mask[past], a[past])
    state = encode(hist, params)
    cycle_starts = np.arange(sim_config.n_cycles) * sim_config.cycle_days
    ctrl = ControlPath(cycle_starts, np.stack(scheds, axis=1))
    preds = forecast(state, ctrl, list(qts), params, int_cfg,
                     history=hist if params.cfg.rollout_mode == "recursive"
                     else None)
    pred = np.stack([p.data for p in preds])
    if stats:
        pred = zscore_invert(pred, stats)

    d_y = y.shape[2]
    scale = np.sqrt(((y - (y * mask).sum((0, 1)) / mask.sum((0, 1))) ** 2
                     * mask).sum((0, 1)) / mask.sum((0, 1)))
    err2 = (pred - y_true[fut]) ** 2 * mask_true[fut]
    values = np.full((1, horizons.size, d_y), np.nan)
    counts = np.zeros((1, horizons.size, d_y), dtype=int)
    lo, hi = _bin_edges(t_c, horizons)
    for k in range(horizons.size):
        in_bin = (qts > lo[k] + 1e-9) & (qts <= hi[k] + 1e-9)
        c = mask_true[fut][in_bin].sum(axis=(0, 1))
        counts[0, k] = c
        for j in range(d_y):
            if c[j] > 0:
                values[0, k, j] = np.sqrt(err2[in_bin][:, :, j].sum() / c[j]) / scale[j]
    return RmseGrid(np.array([t_c]), horizons, values, counts, scale=scale)


def _cfg_dict(cfg):
    from dataclasses import asdict
    return asdict(cfg)
