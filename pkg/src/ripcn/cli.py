"""Command-line entry point: ``ripcn <command> [--config PATH] [--seed N] [--out DIR] [--set k=v]``."""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import pipeline as pl
from . import tensor as tk
from .data import save_csv
from .errors import ConfigError, DataError, DependencyError, RipcnError
from .inference import SampleCoefficients, build_samples, predict, summarize
from .model import Ablation
from .training import HISTORY_COLUMNS, Trainer

log = logging.getLogger("ripcn")

ABLATION_FLAGS = {name: "--" + name.replace("_", "-") for name in Ablation.names()}


def _resolve(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for name in Ablation.names():
        if getattr(args, name, False):
            overrides.append(f"{name}=true")
    return pl.RunConfig.from_file(args.config, overrides)


def _out(args, name):
    return os.path.join(args.out, name)


def _require(args, *names):
    for name in names:
        if not os.path.exists(_out(args, name)):
            cmd = pl.ARTIFACTS.get(name, "train")
            raise DependencyError(f"{_out(args, name)} is missing; run `ripcn {cmd}` first")


def _write_config(args, cfg, command):
    with open(_out(args, f"{command}.config.txt"), "w") as fh:
        fh.write(cfg.dump())


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def _prepare(args, cfg):
    ds, _ = pl.load_dataset(cfg)
    prep = pl.prepare(cfg, ds)
    return prep


def _mean_predictor(args, cfg, prep):
    path = _out(args, "mean.ckpt")
    if os.path.exists(path):
        return pl.load_mean_predictor(cfg, prep, path)
    if cfg.mean_predictor == "learned":
        raise DependencyError(f"{path} is missing; run `ripcn pretrain-mean` first")
    return pl.build_mean_predictor(cfg, prep)


def _write_prep(args, prep):
    prep.segments.to_csv(_out(args, "features.csv"))
    _write_json(_out(args, "normalizer.json"), prep.normalizer.to_dict())


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def _save_coeffs(path, coeffs):
    _write_json(path, {"t": [float(x) for x in coeffs.t], "t_max": coeffs.t_max, "tol": coeffs.tol})


def _load_coeffs(path):
    with open(path) as fh:
        raw = json.load(fh)
    return SampleCoefficients(np.array(raw["t"]), raw["t_max"], raw["tol"])


# -- commands ---------------------------------------------------------------------


def cmd_synth(args, cfg):
    ds, truth = pl.load_dataset(cfg)
    save_csv(
        ds, _out(args, "flow.csv"), _out(args, "adjacency.csv"), _out(args, "speed.csv"), _out(args, "occupancy.csv")
    )
    if truth is not None:
        truth.to_json(_out(args, "truth.json"))
    _write_config(args, cfg, "synth")
    print(f"wrote {ds.steps} steps x {ds.n} segments to {args.out}")


def cmd_pretrain_mean(args, cfg):
    prep = _prepare(args, cfg)
    mp = pl.build_mean_predictor(cfg, prep)
    pl.save_mean_predictor(cfg, mp, prep.dataset.n, _out(args, "mean.ckpt"))
    _write_prep(args, prep)
    _write_config(args, cfg, "pretrain-mean")
    print(f"mean predictor ({mp.kind}) checksum {mp.checksum()}")


def _train(args, cfg, out_dir=None):
    out_dir = out_dir or args.out
    prep = _prepare(args, cfg)
    mp = _mean_predictor(args, cfg, prep)
    model = pl.build_model(cfg, prep, mp)
    trainer = Trainer(model, prep.splits, cfg.train_config(), cfg.seed)
    state = os.path.join(out_dir, "train_state.ckpt")
    if getattr(args, "resume", False):
        if not os.path.exists(state):
            raise DependencyError(f"{state} is missing; run `ripcn train` first")
        trainer.load_state(state)
    trainer.run()
    trainer.save_state(state)
    trainer.finalize()
    pl.save_model(cfg, model, out_dir)
    _write_history(os.path.join(out_dir, "loss_history.csv"), trainer.history)
    coeffs = pl.calibrate(cfg, model, prep)
    _save_coeffs(os.path.join(out_dir, "t_coeffs.json"), coeffs)
    return prep, model, coeffs, trainer


def cmd_train(args, cfg):
    prep, model, coeffs, trainer = _train(args, cfg)
    _write_prep(args, prep)
    _write_config(args, cfg, "train")
    print(f"trained {trainer.epoch} epochs; t = {np.round(coeffs.t, 4).tolist()}")


def _load(args, cfg):
    _require(args, "evo.ckpt", "pc.ckpt")
    prep = _prepare(args, cfg)
    mp = _mean_predictor(args, cfg, prep)
    return prep, pl.load_model(cfg, prep, mp, args.out)


def cmd_calibrate(args, cfg):
    prep, model = _load(args, cfg)
    coeffs = pl.calibrate(cfg, model, prep)
    _save_coeffs(_out(args, "t_coeffs.json"), coeffs)
    _write_config(args, cfg, "calibrate")
    print(f"t = {np.round(coeffs.t, 4).tolist()}")


def _evaluate(args, cfg, prep, model, coeffs, out_dir):
    ev = pl.evaluate_model(cfg, model, prep, coeffs)
    ev.report.to_json(os.path.join(out_dir, "eval_report.json"))
    ev.report.to_csv(os.path.join(out_dir, "eval_report.csv"))
    ev.distribution.to_csv(os.path.join(out_dir, "forecast.csv"), ev.truth)
    return ev


def cmd_eval(args, cfg):
    prep, model = _load(args, cfg)
    _require(args, "t_coeffs.json")
    ev = _evaluate(args, cfg, prep, model, _load_coeffs(_out(args, "t_coeffs.json")), args.out)
    _write_config(args, cfg, "eval")
    r = ev.report
    print(f"MAE {r.mae:.4f} (mean predictor {r.mean_predictor_mae:.4f})  CRPS {r.crps:.5f}  MIS {r.mis:.4f}")


def cmd_ablate(args, cfg):
    variants = ["full"] + (args.variants.split(",") if args.variants else Ablation.names())
    rows = []
    for name in variants:
        if name != "full" and name not in Ablation.names():
            raise ConfigError(f"unknown ablation variant {name!r}")
        vcfg = dataclasses.replace(cfg, **{flag: flag == name for flag in Ablation.names()})
        sub = _out(args, name)
        os.makedirs(sub, exist_ok=True)
        prep, model, coeffs, _ = _train(args, vcfg, sub)
        ev = _evaluate(args, vcfg, prep, model, coeffs, sub)
        rows.append({"variant": name, **ev.report.csv_row()})
        print(f"{name:14s} MAE {ev.report.mae:.4f}  CRPS {ev.report.crps:.5f}  MIS {ev.report.mis:.4f}")
    with open(_out(args, "ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: v if k == "variant" else repr(float(v)) for k, v in row.items()})
    _write_config(args, cfg, "ablate")


def cmd_emit_plots(args, cfg):
    _require(args, "t_coeffs.json")
    prep, model = _load(args, cfg)
    coeffs = _load_coeffs(_out(args, "t_coeffs.json"))
    test = prep.splits.test
    if len(test) == 0:
        raise DataError("test split is empty")
    pred = predict(model, test)
    resid = test.fut - pred.mean
    n = prep.dataset.n

    # impedance over history and horizon of the first test window
    hist, fut = test.hist[:1], test.fut[:1]
    flows = np.concatenate([hist, fut], axis=1)[0]
    imp = prep.segments.window_impedance(flows[None], hist, model.bpr, cfg.fixed_window_stats)[0]
    with tk.no_grad():
        out = model.forward(hist)
    predicted = None if out.r_pred is None else out.r_pred.data[0]
    with open(_out(args, "impedance_series.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "segment", "flow", "impedance", "predicted"])
        for t, a in np.ndindex(flows.shape):
            p = ""
            if predicted is not None and t >= cfg.tau:
                p = repr(float(predicted[t - cfg.tau, a]))
            w.writerow([t, a, repr(float(flows[t, a])), repr(float(imp[t, a])), p])

    flat = resid.reshape(len(resid), -1)
    eig = np.sort(np.linalg.eigvalsh(flat.T @ flat / len(flat)))[::-1]
    eig = np.clip(eig, 0.0, None)
    share = eig / eig.sum() if eig.sum() > 0 else np.zeros_like(eig)
    with open(_out(args, "eigen_spectrum.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "eigenvalue", "share", "cumulative_share"])
        for i, (e, s, c) in enumerate(zip(eig, share, np.cumsum(share)), start=1):
            w.writerow([i, repr(float(e)), repr(float(s)), repr(float(c))])

    samples = build_samples(pred, coeffs, cfg.mode, cfg.num_samples, cfg.seed)
    dist = summarize(samples, cfg.coverage)
    with open(_out(args, "forecast_intervals.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "t", "segment", "mean", "lower", "upper", "truth"])
        for i, t, a in np.ndindex(dist.mean.shape):
            vals = (dist.mean, dist.lower, dist.upper, test.fut)
            w.writerow([i, t, a] + [repr(float(v[i, t, a])) for v in vals])

    with open(_out(args, "pc_fields.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "segment", "value", "sigma"])
        for k, t, a in np.ndindex(pred.components.shape[1:]):
            w.writerow([k + 1, t, a, repr(float(pred.components[0, k, t, a])), repr(float(pred.sigma[0, k]))])

    proj = np.einsum("wktn,wtn->wk", pred.components, resid)
    with open(_out(args, "variance_comparison.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "predicted_variance", "empirical_variance"])
        for k in range(pred.K):
            w.writerow([k + 1, repr(float((pred.sigma[:, k] ** 2).mean())), repr(float((proj[:, k] ** 2).mean()))])
    _write_config(args, cfg, "emit-plots")
    print(f"wrote 5 plot series for {len(test)} test windows x {n} segments to {args.out}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-mean": cmd_pretrain_mean,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "emit-plots": cmd_emit_plots,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ripcn", description="Probabilistic traffic forecasting with RIPCN.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".", help="existing output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag_name, flag in ABLATION_FLAGS.items():
            p.add_argument(flag, dest=flag_name, action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from train_state.ckpt")
        if name == "ablate":
            p.add_argument("--variants", help="comma-separated subset of " + ",".join(Ablation.names()))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if not os.path.isdir(args.out):
            raise FileNotFoundError(2, "output directory does not exist", args.out)
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except RipcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
