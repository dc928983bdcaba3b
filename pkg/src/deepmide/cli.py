"""``deepmide`` command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data, model or
numerical errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import DataError, DeepMIDEError

log = logging.getLogger("deepmide")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sites_path(args, cfg=None):
    if getattr(args, "sites", None):
        return Path(args.sites)
    if cfg is not None and "sites" in cfg.paths:
        return Path(cfg.paths["sites"])
    return Path(args.obs).with_name("sites.csv")


def _load_inputs(args, cfg=None):
    from .io import read_observations, read_sites
    from .maps import WeatherMapStream

    sites = read_sites(_sites_path(args, cfg))
    panel = read_observations(args.obs, sites)
    maps = WeatherMapStream.read(args.maps) if getattr(args, "maps", None) else None
    return panel, maps


def _config(args, check_paths=True):
    from .config import RunConfig, load_config

    cfg = load_config(args.config, check_paths) if getattr(args, "config", None) else RunConfig()
    return cfg.with_seed(getattr(args, "seed", None))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simulate import simulate_process, write_fixture

    cfg = _config(args)
    truth = simulate_process(cfg.simulate)
    digest = write_fixture(truth, args.out)
    print(f"wrote {len(digest)} files to {args.out} (T={cfg.simulate.T}, seed={cfg.simulate.seed})")
    return 0


def cmd_diagnose(args) -> int:
    from .plotting import line_plot
    from .preprocess import BoxCoxParam, DiurnalDetrender, asymmetry, fit_box_cox
    from .train import transform_panel

    cfg = _config(args)
    panel, _ = _load_inputs(args, cfg)
    lam = cfg.model.box_cox_lambda
    bc = fit_box_cox(panel, cfg.model.box_cox_offset) if lam is None else BoxCoxParam(lam, cfg.model.box_cox_offset)
    W = transform_panel(panel, bc)
    resid = DiurnalDetrender().fit(W, panel.times).transform(W, panel.times)
    step_h = panel.step_seconds / 3600.0
    lags = range(0, args.max_lag + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    ids = panel.sites.ids
    _, m, G = resid.shape
    for g, hgt in enumerate(panel.heights.heights):
        curves = {}
        for regime in ("all", "weak", "strong"):
            for i in range(m):
                for j in range(i + 1, m):
                    vals = []
                    for u in lags:
                        try:
                            a = asymmetry(resid, g, i, j, u, None if regime == "all" else regime,
                                          panel.values).value
                        except DeepMIDEError:
                            a = float("nan")
                        vals.append(a)
                        rows.append([f"{hgt:g}", regime, f"{ids[i]}-{ids[j]}", repr(u * step_h),
                                     "" if not np.isfinite(a) else repr(a)])
                    curves[f"{regime} {ids[i]}-{ids[j]}"] = vals
        line_plot(out / f"asymmetry_{hgt:g}m.svg", np.array(list(lags)) * step_h, curves,
                  "lag (h)", "asymmetry", f"Space-time asymmetry at {hgt:g} m")
    with (out / "asymmetry.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["height", "regime", "pair", "lag_hours", "asymmetry"])
        w.writerows(rows)
    print(f"Box-Cox lambda {bc.lmbda:g}; wrote {len(rows)} asymmetry rows to {out}")
    return 0


def cmd_fit(args) -> int:
    from .io import save_model, write_training_log
    from .train import offline_fit

    cfg = _config(args)
    panel, maps = _load_inputs(args, cfg)
    T_off = cfg.protocol.split(len(panel))
    offline = panel.slice(0, T_off)

    def report(model, row):
        log.info("epoch %d train_nll %.5f val_nll %.5f lr %.3g",
                 row["epoch"], row["train_nll"], row["val_nll"], row["lr"])

    model = offline_fit(offline, maps, cfg.model, cfg.extractor, cfg.training, callback=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    write_training_log(log_path, model.log)
    om = ", ".join(f"{k}={v:.4g}" for k, v in model.omega.items())
    print(f"fitted on {T_off} steps, {len(model.log)} epochs; {om}")
    print(f"model written to {out}; training log {log_path}")
    return 0


def cmd_forecast(args) -> int:
    from .estimator import forecast_panel
    from .io import load_model
    from .maps import iso, parse_iso

    model = load_model(args.model)
    panel, maps = _load_inputs(args)
    end = len(panel)
    if args.issue_time:
        t = parse_iso(args.issue_time)
        hits = np.flatnonzero(panel.times == t)
        if hits.size == 0:
            raise DeepMIDEError(f"issue time {args.issue_time} is not on the observation grid")
        end = int(hits[0]) + 1
    hist = panel.slice(max(end - args.history, 0), end)
    fc = forecast_panel(model, hist, maps, args.horizon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["issue_time", "horizon_steps", "site_id", "height_m", "mean_mps", "lo95_mps", "hi95_mps"])
        for h in range(args.horizon):
            for i, sid in enumerate(model.sites.ids):
                for g, hgt in enumerate(model.heights.heights):
                    w.writerow([iso(fc.issue_time), h + 1, sid, f"{hgt:g}", repr(float(fc.mean_mps[h, i, g])),
                                repr(float(fc.lo_mps[h, i, g])), repr(float(fc.hi_mps[h, i, g]))])
    if args.dump_kernel:
        with Path(args.dump_kernel).open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["horizon_steps", "row", "col", "value"])
            for h, K in enumerate(fc.propagators):
                for r in range(K.shape[0]):
                    for c in range(K.shape[1]):
                        w.writerow([h + 1, r, c, repr(float(K[r, c]))])
    print(f"forecast issued at {iso(fc.issue_time)} for {args.horizon} steps written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .config import RunConfig, load_config
    from .evaluate import run_protocol
    from .io import load_model

    cfg = load_config(args.protocol, check_paths=False) if args.protocol else RunConfig()
    model = load_model(args.model)
    panel, maps = _load_inputs(args, cfg)
    proto = cfg.protocol
    if args.no_online:
        proto.online_update = False
    table = run_protocol(model, panel, maps, proto, cfg.training)
    table.write(args.out, plots=not args.no_plots, dump_advection=args.dump_advection)
    print(f"{table.n_rolls} rolls, {table.instances} forecast instances")
    for bench in table.methods[1:]:
        imp = table.improvement_over("DeepMIDE", bench, "mps")
        print(f"IMP(DeepMIDE, {bench}) = {imp:.2f}% (m/s, all horizons)")
    cov = table.coverage()
    if cov is not None:
        print(f"95% interval coverage {cov:.3f}")
    return 0


def cmd_power(args) -> int:
    from .evaluate import fit_power_curve, read_power_csv, speed_to_power, synthetic_power_data

    if args.make_training:
        v, s, p = synthetic_power_data(args.rows, args.seed)
        with Path(args.make_training).open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["hub_speed_mps", "shear_above", "power"])
            w.writerows([[repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(v, s, p)])
        print(f"wrote {args.rows} synthetic power-curve rows to {args.make_training}")
        if not args.train:
            return 0
    if not (args.train and args.forecast and args.out):
        raise UsageError("power: --train, --forecast and --out are required")
    curve = fit_power_curve(*read_power_csv(args.train))
    with Path(args.forecast).open(newline="") as f:
        rows = list(csv.DictReader(f))
    # accepts both `forecast` output and the evaluate forecasts table
    col = next((c for c in ("mean_mps", "DeepMIDE_mps") if rows and c in rows[0]), None)
    if col is None:
        raise DataError(f"{args.forecast}: expected a mean_mps or DeepMIDE_mps column")
    key = {}
    for r in rows:
        key[(r["issue_time"], r["horizon_steps"], r["site_id"], float(r["height_m"]))] = float(r[col])
    out_rows = []
    for (it, h, sid, hgt), v in key.items():
        if hgt != args.hub_height:
            continue
        up = key.get((it, h, sid, args.upper_height))
        if up is None:
            raise DeepMIDEError(f"no {args.upper_height:g} m forecast for {sid} at {it}+{h}")
        shear = float(np.log(max(up, 1e-6) / max(v, 1e-6)) / np.log(args.upper_height / args.hub_height))
        # the lower-layer exponent is reported only; the curve uses the upper one
        low = key.get((it, h, sid, args.lower_height))
        below = "" if low is None else repr(float(np.log(max(v, 1e-6) / max(low, 1e-6))
                                                  / np.log(args.hub_height / args.lower_height)))
        pw = float(speed_to_power(curve, v, up, args.hub_height, args.upper_height))
        out_rows.append([it, h, sid, repr(v), repr(shear), below, repr(pw)])
    with Path(args.out).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["issue_time", "horizon_steps", "site_id", "hub_speed_mps", "shear_above", "shear_below",
                    "power"])
        w.writerows(out_rows)
    print(f"power curve a={curve.a:.4g} b={curve.b:.4g} width={curve.width:.4g}; {len(out_rows)} rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .train import composite_gradient_check

    ok = True
    worst = 0.0
    for k in range(args.instances):
        rep = composite_gradient_check(args.seed + k, n_coords=args.coords, tol=args.tol)
        for line in rep.lines()[:-1]:
            print(f"[instance {k}] {line}")
        worst = max(worst, rep.max_rel_error)
        ok &= rep.passed
    print(f"max relative gradient error {worst:.3e}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepmide", description="Multi-height advection state-space wind forecasting.")
    p.add_argument("--version", action="store_true", help="print build identity and exit")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic fixture")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("diagnose", help="space-time asymmetry curves")
    s.add_argument("--obs", required=True)
    s.add_argument("--sites")
    s.add_argument("--config")
    s.add_argument("--max-lag", type=int, default=36, help="largest lag in steps")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("fit", help="offline joint training")
    s.add_argument("--obs", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--sites")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.add_argument("--log", help="training log CSV (default: beside the model)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("forecast", help="probabilistic forecast from the end of the observations")
    s.add_argument("--model", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--sites")
    s.add_argument("--horizon", type=int, default=144)
    s.add_argument("--history", type=int, default=1008)
    s.add_argument("--issue-time")
    s.add_argument("--dump-kernel")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", help="rolling-origin evaluation against benchmarks")
    s.add_argument("--model", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--maps", required=True)
    s.add_argument("--sites")
    s.add_argument("--protocol", help="config file with protocol.* / training.* keys")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-advection", action="store_true")
    s.add_argument("--no-online", action="store_true", help="skip the per-roll online update")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("power", help="fit a power curve and convert speed forecasts")
    s.add_argument("--train")
    s.add_argument("--forecast")
    s.add_argument("--out")
    s.add_argument("--hub-height", type=float, default=140.0)
    s.add_argument("--upper-height", type=float, default=180.0)
    s.add_argument("--lower-height", type=float, default=100.0)
    s.add_argument("--make-training", help="write synthetic curve training data to this path")
    s.add_argument("--rows", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_power)

    s = sub.add_parser("gradcheck", help="finite-difference check of the composite gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--coords", type=int, default=60)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def version_string() -> str:
    return f"deepmide {__version__} (python {platform.python_version()}, numpy {np.__version__})"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.version:
        print(version_string())
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("deepmide: error: --threads must be >= 1", file=sys.stderr)
            return 1
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DeepMIDEError, OSError) as exc:
        print(f"deepmide: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
