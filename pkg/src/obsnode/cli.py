"""Command-line entry point.

Subcommands cover the full workflow: simulate datasets, train, evaluate RMSE
grids, forecast a single unit under a hypothetical treatment path, verify the
identification theory on finite instances, and run the gradient checker.
Commands are pure functions of their config and input files; reruns produce
byte-identical outputs. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .errors import ConfigError, DataError, NumericError
from .evaluate import (clip_for_display, rmse_grid, write_grid_csv,
                       write_grid_pgm)
from .identify import (adjustment_estimate, interventional_truth,
                       linear_gaussian_refinement, nonidentifiability_witness,
                       random_observable_scm, random_query)
from .model import History, ObsNodeConfig, encode, forecast, load_model
from .odeint import ControlPath, IntegrationConfig
from .simulate import (CancerSimConfig, SemiSynthConfig,
                       generate_cancer_dataset, generate_semi_synthetic,
                       read_dataset, write_dataset)
from .train import (TrainConfig, train, zscore_apply, zscore_fit,
                    zscore_invert)

FORMAT_VERSION = 1


def _threads():
    raw = os.environ.get("OBSNODE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OBSNODE_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("OBSNODE_THREADS must be >= 1")
    return n


def load_json_config(path, allowed_keys, required_keys):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, "
                          f"column {e.colno}: {e.msg}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if cfg.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: format_version must be {FORMAT_VERSION}")
    unknown = set(cfg) - set(allowed_keys) - {"format_version"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(required_keys) - set(cfg)
    if missing:
        raise ConfigError(f"{path}: missing keys {sorted(missing)}")
    return cfg


def _build(cls, section, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    section = {k: (tuple(v) if isinstance(v, list) and
                   k in ("gamma_A", "gamma_eps", "bias") else v)
               for k, v in section.items()}
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}")


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_json_config(args.config, {"kind", "output_dir", "params"},
                           {"kind", "output_dir", "params"})
    kind = cfg["kind"]
    if kind == "cancer":
        gen_cfg = _build(CancerSimConfig, cfg["params"], "params")
        splits = generate_cancer_dataset(gen_cfg)
    elif kind == "semi_synthetic":
        gen_cfg = _build(SemiSynthConfig, cfg["params"], "params")
        splits = generate_semi_synthetic(gen_cfg)
    else:
        raise ConfigError(f"unknown dataset kind {cfg['kind']!r}")
    write_dataset(cfg["output_dir"], splits, gen_cfg, gen_cfg.seed)

    trajs = [tr for s in splits.values() for tr in s]
    n_obs = int(sum(tr.mask.sum() for tr in trajs))
    a_all = np.concatenate([tr.a for tr in trajs])
    y_all = np.concatenate([tr.y for tr in trajs])
    corr = float(np.corrcoef(a_all[:, 0], y_all[:, 0])[0, 1])
    print(f"units: {len(trajs)}")
    print(f"observations: {n_obs}")
    print(f"treatment_frequency: {_fmt(np.mean(a_all > 0))}")
    print(f"treatment_outcome_correlation: {_fmt(corr)}")
    return 0


def cmd_train(args):
    cfg = load_json_config(args.config,
                           {"dataset_dir", "run_dir", "model", "train",
                            "init_checkpoint"},
                           {"dataset_dir", "run_dir", "model", "train"})
    ds_dir = Path(cfg["dataset_dir"])
    if not ds_dir.exists():
        raise ConfigError(f"dataset directory not found: {ds_dir}")
    splits, _ = read_dataset(ds_dir)
    model_cfg = _build(ObsNodeConfig, cfg["model"], "model")
    tcfg = _build(TrainConfig, cfg["train"], "train")
    stats = zscore_fit(splits["train"])
    normed = {s: zscore_apply(splits[s], stats) for s in ("train", "val")}
    init_state = None
    if "init_checkpoint" in cfg:
        arrays, _ = ad.load_checkpoint(cfg["init_checkpoint"])
        init_state = arrays
    params, history = train(model_cfg, normed, tcfg, run_dir=cfg["run_dir"],
                            stats=stats, init_state=init_state)
    if history:
        print(f"epochs: {len(history)}")
        print(f"best_val_loss: {_fmt(min(h['val_loss'] for h in history))}")
    print(f"run_dir: {cfg['run_dir']}")
    return 0


def cmd_evaluate(args):
    cfg = load_json_config(args.config,
                           {"dataset_dir", "checkpoint", "output_dir",
                            "split", "t_c_grid", "horizons", "heatmap"},
                           {"dataset_dir", "checkpoint", "output_dir",
                            "t_c_grid", "horizons"})
    splits, _ = read_dataset(cfg["dataset_dir"])
    split = cfg.get("split", "test")
    if split not in splits:
        raise ConfigError(f"split {split!r} not present in the dataset")
    params, _, stats = load_model(cfg["checkpoint"])
    grid = rmse_grid(splits[split], cfg["t_c_grid"], cfg["horizons"],
                     params=params, stats=stats)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(grid, out / "rmse_grid.csv")
    mean = grid.component_mean()
    with open(out / "rmse_grid_mean.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_c", "horizon", "rmse"])
        for i, t_c in enumerate(grid.assimilation_times):
            for k, s in enumerate(grid.horizons):
                v = mean[i, k]
                wr.writerow([_fmt(t_c), _fmt(s), "" if np.isnan(v) else _fmt(v)])
    if cfg.get("heatmap", False):
        clipped = clip_for_display(grid)
        for j in range(grid.values.shape[2]):
            write_grid_pgm(clipped, out / f"rmse_component_{j}.pgm", component=j)
    print(f"grid: {out / 'rmse_grid.csv'}")
    print(f"max_rmse: {_fmt(np.nanmax(grid.values))}")
    return 0


def read_treatment_csv(path, d_a):
    """Piecewise-constant treatment path: rows start_time,component_1,..."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"treatment file not found: {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        expect = ["start_time"] + [f"component_{i + 1}" for i in range(d_a)]
        if header != expect:
            raise DataError(f"{path}: expected header {','.join(expect)}")
        try:
            rows = [[float(v) for v in row] for row in rd if row]
        except ValueError as e:
            raise DataError(f"{path}: {e}")
    if not rows:
        raise DataError(f"{path}: no treatment rows")
    arr = np.array(rows)
    return ControlPath(arr[:, 0], arr[:, 1:])


def cmd_forecast(args):
    params, model_cfg, stats = load_model(args.checkpoint)
    splits, _ = read_dataset(args.dataset)
    pool = [tr for s in splits.values() for tr in s]
    unit = next((tr for tr in pool if tr.unit_id == args.unit_id), None)
    if unit is None:
        raise DataError(f"unit {args.unit_id} not found in the dataset")
    control = read_treatment_csv(args.treatments, model_cfg.d_a)
    t_c = args.t_c
    past = unit.times <= t_c + 1e-9
    if not past.any():
        raise DataError(f"no observations at or before t_c={t_c}")
    qts = unit.times[unit.times > t_c + 1e-9]
    if args.horizon is not None:
        qts = qts[qts <= t_c + args.horizon + 1e-9]
    if qts.size == 0:
        raise DataError("no forecast times beyond t_c")

    y = unit.y
    if stats is not None:
        y = np.where(unit.mask > 0, (y - stats.mean) / stats.std, y)
    hist = History(unit.times[past], y[past][:, None, :],
                   unit.mask[past][:, None, :], unit.a[past][:, None, :])
    state = encode(hist, params)
    int_cfg = IntegrationConfig(
        step_size=float(np.min(np.diff(unit.times))) / 4.0)
    preds = forecast(state, control, list(qts), params, int_cfg,
                     history=hist if model_cfg.rollout_mode == "recursive"
                     else None)
    pred = np.stack([p.data[0] for p in preds])
    if stats is not None:
        pred = zscore_invert(pred, stats)

    writer = csv.writer(open(args.output, "w", newline="")) if args.output \
        else csv.writer(sys.stdout)
    writer.writerow(["time"] + [f"component_{j + 1}"
                                for j in range(model_cfg.d_y)])
    for t, row in zip(qts, pred):
        writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
    return 0


def cmd_verify_identification(args):
    cfg = load_json_config(args.config,
                           {"n_instances", "seed", "tolerance", "output"},
                           set())
    n = int(cfg.get("n_instances", 200))
    tol = float(cfg.get("tolerance", 1e-10))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    deviations = []
    for _ in range(n):
        scm = random_observable_scm(rng)
        q = random_query(rng, scm)
        dev = float(np.max(np.abs(adjustment_estimate(scm, q)
                                  - interventional_truth(scm, q))))
        deviations.append(dev)
    _, _, _, witness = nonidentifiability_witness()
    refinement = linear_gaussian_refinement()
    report = {
        "format_version": FORMAT_VERSION,
        "n_instances": n,
        "max_deviation": max(deviations),
        "deviations": deviations,
        "witness": witness,
        "refinement_deviations": refinement,
        "pass": bool(max(deviations) < tol
                     and witness["observational_tv"] < 1e-12
                     and witness["interventional_tv"] >= 0.05
                     and witness["collapsed_adjustment_error"] < 1e-10
                     and refinement[0] > refinement[-1]),
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    if cfg.get("output"):
        Path(cfg["output"]).write_text(text + "\n")
    else:
        print(text)
    print(f"max_deviation: {report['max_deviation']:.3e}")
    print("PASS" if report["pass"] else "FAIL")
    return 0 if report["pass"] else 4


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for trial in range(args.n):
        widths = ([int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))]
                  + [1])
        wrng = np.random.default_rng(trial)
        weights = [Tensor(wrng.normal(0, 1 / np.sqrt(a), size=(a, b)))
                   for a, b in zip(widths[:-1], widths[1:])]
        biases = [Tensor(wrng.normal(0, 0.1, size=(1, b))) for b in widths[1:]]

        def f(x):
            h = x
            for i, (W, b) in enumerate(zip(weights, biases)):
                h = ad.add(ad.matmul(h, W),
                           ad.expand(b, (h.data.shape[0], W.data.shape[1])))
                if i < len(weights) - 1:
                    h = ad.tanh(h)
            return ad.tmean(h)

        x = Tensor(rng.normal(size=(2, widths[0])))
        worst = max(worst, grad_check(f, x))
    print(f"networks: {args.n}")
    print(f"max_relative_error: {worst:.3e}")
    ok = worst < args.tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 4


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="obsnode",
                                description="Causal forecasting lab: "
                                "simulators, training, evaluation, and "
                                "identification checks.")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn in (("simulate", cmd_simulate), ("train", cmd_train),
                     ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("forecast")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--unit-id", type=int, required=True)
    sp.add_argument("--treatments", required=True)
    sp.add_argument("--t-c", type=float, required=True)
    sp.add_argument("--horizon", type=float, default=None)
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=cmd_forecast)

    sp = sub.add_parser("verify-identification")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_verify_identification)

    sp = sub.add_parser("gradcheck")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads()
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
