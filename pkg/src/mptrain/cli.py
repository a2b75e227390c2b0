"""Experiment orchestration: generate, train, eval, compare.

Run directory layout:
    config.resolved.yaml
    dataset.ref              (path + payload CRC of the dataset used)
    checkpoints/latest.mpck
    logs/train.csv
    metrics/*.csv
    figures/*.png

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import zlib

import numpy as np

from .config import ConfigError, load_config, save_config
from .systems import (
    SystemSpec, generate_dataset, save_dataset, load_dataset, DatasetIOError)
from .systems.lorenz import IntegrationBlowupError
from .systems.kolmogorov import CFLViolationError
from .systems.dataset import GenerationBlowupError
from .surrogates import (
    MLPConfig, MLPSurrogate, SpectralLayerConfig, FNOLiteSurrogate,
    IntegratorSurrogate, load_checkpoint, CheckpointError)
from .training import (
    LossConfig, CurriculumSchedule, OptimizerConfig, AdamState,
    DiscontinuityBank, NonFiniteLossError, train, write_log_csv)
from . import evaluation as ev
from . import plots

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _system_spec(cfg):
    sc = cfg["system"]
    return SystemSpec(
        kind=sc["kind"],
        parameters=dict(sc["parameters"]),
        integrator_dt=sc["integrator_dt"],
        subsample_factor=int(sc["subsample_factor"]),
        spinup_steps=int(sc["spinup_steps"]),
    )


def _build_surrogate(cfg, dataset, seed):
    sc = cfg["surrogate"]
    shape = dataset.state_shape
    if sc["arch"] == "mlp":
        if len(shape) != 1:
            raise ConfigError(
                f"mlp surrogate needs a vector state, dataset has {shape}")
        return MLPSurrogate(
            shape[0],
            MLPConfig(width=int(sc["width"]), depth=int(sc["depth"]),
                      activation=sc["activation"]),
            dataset.normalization, seed=seed)
    if sc["arch"] == "fno_lite":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ConfigError(
                f"fno_lite surrogate needs a square field state, dataset has {shape}")
        return FNOLiteSurrogate(
            shape[0],
            SpectralLayerConfig(modes=int(sc["modes"]), width=int(sc["width"]),
                                n_layers=int(sc["n_layers"]),
                                activation=sc["activation"]),
            dataset.normalization, seed=seed)
    raise ConfigError(f"unknown surrogate arch {sc['arch']!r}")


def _loss_config(cfg):
    lc = cfg["loss"]
    return LossConfig(mode=lc["mode"], n_rollouts=int(lc["n_rollouts"]),
                      lambda_decay=lc["lambda_decay"],
                      pushforward=lc["pushforward"], norm=lc["norm"])


def _schedule(cfg):
    cc = cfg["curriculum"]
    return CurriculumSchedule(
        mu_init=cc["mu_init"], mu_growth=cc["mu_growth"],
        mu_update_every=int(cc["mu_update_every"]), mu_max=cc["mu_max"],
        r_schedule=[tuple(x) for x in cc["r_schedule"]],
        s_schedule=[tuple(x) for x in cc["s_schedule"]],
        penalty_norm=cc["penalty_norm"])


def _opt_config(cfg):
    oc = cfg["optimizer"]
    return OptimizerConfig(lr=oc["lr"], beta1=oc["beta1"], beta2=oc["beta2"],
                           eps=oc["eps"], clip=oc["clip"])


def _write_dataset_ref(run_dir, dataset_path):
    with open(dataset_path, "rb") as f:
        crc = zlib.crc32(f.read())
    with open(os.path.join(run_dir, "dataset.ref"), "w") as f:
        f.write(f"{os.path.abspath(dataset_path)}\ncrc32={crc:08x}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = args.out or cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    dataset_path = os.path.join(out_dir, "dataset.mpds")
    if os.path.exists(dataset_path) and not args.force:
        print(f"refusing to overwrite {dataset_path} (use --force)",
              file=sys.stderr)
        return EXIT_IO
    spec = _system_spec(cfg)
    sc = cfg["system"]
    n_steps = int(sc["n_steps"])
    if int(sc["n_raw_steps"]) > 0:
        n_steps = int(sc["n_raw_steps"]) // int(sc["subsample_factor"])
    ds = generate_dataset(spec, int(sc["n_traj"]), n_steps, int(cfg["seed"]))
    save_dataset(ds, dataset_path)
    save_config(cfg, os.path.join(out_dir, "config.resolved.yaml"))
    counts = {s: ds.splits.count(s) for s in ("train", "val", "test")}
    print(f"dataset: {dataset_path}")
    print(f"shape: {ds.states.shape}  dt_effective: {ds.dt_effective}")
    print(f"n_steps: {n_steps}  splits: {counts}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    dataset = load_dataset(args.dataset)
    run_dir = args.out or cfg["out_dir"]
    for sub in ("checkpoints", "logs", "figures"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    seed = int(cfg["seed"])
    surrogate = _build_surrogate(cfg, dataset, seed)
    loss_cfg = _loss_config(cfg)
    schedule = _schedule(cfg) if loss_cfg.mode == "mp" else None
    opt_cfg = _opt_config(cfg)
    ckpt_path = os.path.join(run_dir, "checkpoints", "latest.mpck")
    log_path = os.path.join(run_dir, "logs", "train.csv")

    start_epoch, bank, opt, log_rows = 0, DiscontinuityBank(), None, []
    if args.resume:
        loaded, step, cur_state, state = load_checkpoint(
            args.resume, expect_arch=surrogate.arch_tag)
        if loaded.config_dict() != surrogate.config_dict():
            raise CheckpointError("checkpoint configuration does not match config file")
        for name, t in surrogate.params.items():
            t.data[...] = loaded.params[name].data
        start_epoch = step
        if cur_state and cur_state.get("schedule"):
            schedule = CurriculumSchedule.from_dict(cur_state["schedule"])
        if state:
            opt = AdamState(opt_cfg)
            opt.load_state_dict({k: v for k, v in state.items()
                                 if not k.startswith("bank/")})
            bank.load_state_dict({k[len("bank/"):]: v for k, v in state.items()
                                  if k.startswith("bank/")})
        if os.path.exists(log_path):
            log_rows = _read_log_rows(log_path, before_epoch=start_epoch)

    save_config(cfg, os.path.join(run_dir, "config.resolved.yaml"))
    _write_dataset_ref(run_dir, args.dataset)

    def flush(epoch, row):
        write_log_csv(log_path, log_rows)

    try:
        train(dataset, surrogate, loss_cfg, opt_cfg, mp_schedule=schedule,
              seed=seed, epochs=int(cfg["training"]["epochs"]), bank=bank,
              opt=opt, start_epoch=start_epoch, checkpoint_path=ckpt_path,
              log_rows=log_rows, deterministic_timing=args.deterministic,
              on_epoch_end=flush)
    except NonFiniteLossError as e:
        write_log_csv(log_path, log_rows)
        print(f"training aborted: {e} (last checkpoint retained)",
              file=sys.stderr)
        return EXIT_NUMERICAL
    write_log_csv(log_path, log_rows)
    plots.plot_training_log(log_rows, os.path.join(run_dir, "figures",
                                                   "training.png"))
    print(f"trained {len(log_rows)} epochs; checkpoint: {ckpt_path}")
    return EXIT_OK


def _read_log_rows(path, before_epoch=None):
    from .training import LOG_COLUMNS
    rows = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        for line in f:
            vals = line.strip().split(",")
            row = {}
            for col, v in zip(header, vals):
                if col in ("epoch", "r", "s", "n_or_sr"):
                    row[col] = int(v)
                elif col == "mode":
                    row[col] = v
                else:
                    row[col] = float(v)
            if before_epoch is None or row["epoch"] < before_epoch:
                rows.append(row)
    return rows


def _initial_conditions(dataset, horizon, n_ic):
    """Non-overlapping (trajectory, start) pairs from the test split."""
    test = dataset.trajectories("test")
    if test.shape[0] == 0:  # tiny datasets have no test split
        test = dataset.trajectories("train")
    ics = []
    for ti in range(test.shape[0]):
        start = 0
        while start + horizon <= test.shape[1] and len(ics) < n_ic:
            ics.append(test[ti, start:start + horizon])
            start += horizon
        if len(ics) >= n_ic:
            break
    return ics


def _velocity_fn(spec):
    from .systems.kolmogorov import KolmogorovSolver
    p = spec.parameters
    solver = KolmogorovSolver(n=int(p["n"]), re=p["re"], k_f=p["k_f"])

    def vel(w):
        u, v = solver.velocity(np.fft.fft2(w))
        return np.stack([u, v])

    return vel


def _nanpad(values, length):
    out = np.full(length, np.nan)
    out[:len(values)] = values
    return out


def cmd_eval(args):
    cfg = load_config(args.config)
    dataset = load_dataset(args.dataset)
    ec = cfg["evaluation"]
    horizon = int(ec["horizon"])
    run_dir = args.out or cfg["out_dir"]
    metrics_dir = os.path.join(run_dir, "metrics")
    figures_dir = os.path.join(run_dir, "figures")
    os.makedirs(metrics_dir, exist_ok=True)
    os.makedirs(figures_dir, exist_ok=True)

    if args.checkpoint == "oracle":
        surrogate = IntegratorSurrogate(dataset.spec)
    else:
        surrogate, _, _, _ = load_checkpoint(args.checkpoint)
        if tuple(surrogate.state_shape) != tuple(dataset.state_shape):
            print(f"checkpoint state shape {surrogate.state_shape} does not "
                  f"match dataset {dataset.state_shape}", file=sys.stderr)
            return EXIT_CONFIG

    train_states = dataset.trajectories("train")
    bound = float(ec["stability_factor"]) * np.abs(train_states).max()
    climatology = train_states.reshape(-1, *dataset.state_shape).mean(axis=0)

    ics = _initial_conditions(dataset, horizon, int(ec["n_initial_conditions"]))
    if not ics:
        print("no evaluation windows available at this horizon", file=sys.stderr)
        return EXIT_CONFIG

    all_rmse, all_corr, all_pers, vpts, blowups = [], [], [], [], []
    results = []
    for i, truth in enumerate(ics):
        res = ev.rollout(surrogate, truth[0], horizon, truth=truth,
                         dt_effective=dataset.dt_effective,
                         stability_bound=bound)
        results.append(res)
        rmse = ev.rmse_curve(res)
        corr = ev.correlation_curve(res, climatology)
        pers = ev.persistence_baseline(truth[0], truth, dataset.dt_effective)
        vpts.append(ev.valid_prediction_time(corr, ec["correlation_threshold"]))
        blowups.append(res.blow_up_step is not None)
        for name, curve in (("rmse", rmse), ("correlation", corr),
                            ("persistence", pers)):
            ev.write_curve_csv(
                os.path.join(metrics_dir, f"ic{i:03d}_{name}.csv"), curve)
        all_rmse.append(_nanpad(rmse.values, horizon))
        all_corr.append(_nanpad(corr.values, horizon))
        all_pers.append(_nanpad(pers.values, horizon))

    avg = {}
    for name, stack in (("rmse", all_rmse), ("correlation", all_corr),
                        ("persistence", all_pers)):
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(np.stack(stack), axis=0)
        avg[name] = ev.MetricCurve(name, mean, dataset.dt_effective)
        ev.write_curve_csv(os.path.join(metrics_dir, f"avg_{name}.csv"),
                           avg[name])

    with open(os.path.join(metrics_dir, "vpt.csv"), "w") as f:
        f.write("ic,vpt\n")
        for i, v in enumerate(vpts):
            f.write(f"{i},{v:.17g}\n")

    summary = {
        "n_ic": float(len(ics)),
        "horizon": float(horizon),
        "vpt_median": float(np.median(vpts)),
        "rmse_final": _last_finite(avg["rmse"].values),
        "persistence_rmse_final": _last_finite(avg["persistence"].values),
        "blow_up_rate": float(np.mean(blowups)),
    }

    spectrum_times = [int(t) for t in ec["spectrum_times"]]
    if len(dataset.state_shape) == 2 and spectrum_times:
        vel = _velocity_fn(dataset.spec)
        lo, hi = (int(x) for x in ec["spectrum_band"])
        rel_errs = []
        for t in spectrum_times:
            t = min(t, horizon - 1)
            pred_spectra, true_spectra = [], []
            for res in results:
                if res.predicted.shape[0] > t:
                    pred_spectra.append(ev.energy_spectrum(
                        vel(res.predicted[t])).values)
                    true_spectra.append(ev.energy_spectrum(
                        vel(res.truth[t])).values)
            if not pred_spectra:
                continue
            e_pred = np.mean(pred_spectra, axis=0)
            e_true = np.mean(true_spectra, axis=0)
            pc = ev.MetricCurve("spectrum_pred", e_pred, 1.0)
            tc = ev.MetricCurve("spectrum_truth", e_true, 1.0)
            ev.write_curve_csv(
                os.path.join(metrics_dir, f"spectrum_pred_t{t}.csv"), pc)
            ev.write_curve_csv(
                os.path.join(metrics_dir, f"spectrum_truth_t{t}.csv"), tc)
            ks = np.arange(lo, min(hi, len(e_true) - 1) + 1)
            rel_errs.append(float(np.mean(
                np.abs(e_pred[ks] - e_true[ks]) / np.maximum(e_true[ks], 1e-300))))
            plots.plot_spectra({"prediction": pc, "reference": tc},
                               os.path.join(figures_dir, f"spectrum_t{t}.png"),
                               title=f"energy spectrum at step {t}")
        if rel_errs:
            summary["spectrum_rel_err"] = float(np.mean(rel_errs))

    with open(os.path.join(metrics_dir, "summary.csv"), "w") as f:
        f.write("metric,value\n")
        for k in sorted(summary):
            f.write(f"{k},{summary[k]:.17g}\n")

    plots.plot_curves({"model": avg["rmse"], "persistence": avg["persistence"]},
                      os.path.join(figures_dir, "rmse.png"), "RMSE")
    plots.plot_curves({"model": avg["correlation"]},
                      os.path.join(figures_dir, "correlation.png"),
                      "correlation")
    print(f"metrics written to {metrics_dir}")
    return EXIT_OK


def _last_finite(values):
    finite = values[np.isfinite(values)]
    return float(finite[-1]) if len(finite) else float("nan")


def _read_summary(run_dir):
    path = os.path.join(run_dir, "metrics", "summary.csv")
    out = {}
    with open(path) as f:
        f.readline()
        for line in f:
            k, v = line.strip().split(",")
            out[k] = float(v)
    return out


def _read_curve(path):
    ts, vs = [], []
    with open(path) as f:
        f.readline()
        for line in f:
            _, t, v = line.strip().split(",")
            ts.append(float(t))
            vs.append(float(v))
    return np.array(ts), np.array(vs)


def cmd_compare(args):
    import yaml
    run_dirs = args.runs
    configs = []
    for d in run_dirs:
        with open(os.path.join(d, "config.resolved.yaml")) as f:
            configs.append(yaml.safe_load(f))
    base_sys = configs[0]["system"]
    for d, c in zip(run_dirs[1:], configs[1:]):
        if c["system"] != base_sys:
            print(f"incompatible system specs: {run_dirs[0]} vs {d}",
                  file=sys.stderr)
            return EXIT_CONFIG

    out_path = args.out or "comparison.csv"
    labels = [os.path.basename(os.path.normpath(d)) for d in run_dirs]
    summaries = [_read_summary(d) for d in run_dirs]
    metrics = sorted({m for s in summaries for m in s})
    with open(out_path, "w") as f:
        f.write("label,metric,value,delta_vs_first\n")
        for label, summ in zip(labels, summaries):
            for m in metrics:
                if m not in summ:
                    continue
                delta = summ[m] - summaries[0].get(m, float("nan"))
                f.write(f"{label},{m},{summ[m]:.17g},{delta:.17g}\n")

    # overlay averaged RMSE curves, truncated to the shortest horizon
    curves = {}
    for label, d in zip(labels, run_dirs):
        path = os.path.join(d, "metrics", "avg_rmse.csv")
        if os.path.exists(path):
            ts, vs = _read_curve(path)
            curves[label] = ev.MetricCurve(label, vs, ts[1] - ts[0]
                                           if len(ts) > 1 else 1.0)
    if curves:
        n = min(len(c.values) for c in curves.values())
        if any(len(c.values) != n for c in curves.values()):
            print(f"warning: mismatched horizons; truncating curves to {n} steps",
                  file=sys.stderr)
        for label in curves:
            c = curves[label]
            curves[label] = ev.MetricCurve(label, c.values[:n], c.dt_effective)
        fig_path = os.path.splitext(out_path)[0] + "_rmse.png"
        plots.plot_curves(curves, fig_path, "RMSE")
    print(f"comparison written to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mptrain",
                                description="Chaotic-surrogate training and "
                                            "evaluation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--deterministic", action="store_true",
                        help="float64 sequential mode with timing zeroed")

    g = sub.add_parser("generate", help="integrate and store a dataset")
    common(g)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a surrogate")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="roll out and score a checkpoint")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'oracle' for the reference integrator")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="tabulate metrics across run dirs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, IntegrationBlowupError, CFLViolationError,
            GenerationBlowupError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetIOError, CheckpointError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
