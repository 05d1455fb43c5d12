"""Command-line front end.

Exit codes: 0 success, 1 failed check or domain error, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .averaging import averaged_model
from .chain import invariant_measure
from .config import RunConfig
from .errors import InsufficientSignal, SlowFastError, UnknownModel
from .model import builtin_model, check_centering, validate_generator
from .poisson import CENTERING_TOL
from .sde import (
    SimConfig,
    analytic_example_error,
    fit_order,
    run_replicas,
    simulate_averaged,
    simulate_slow_fast,
    test_function,
    weak_error_study,
)
from .stats import Moments

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_table(path_stem, fmt, header, rows):
    rows = [list(r) for r in rows]
    if fmt == "csv":
        path = path_stem.with_suffix(".csv")
        write_csv(path, header, rows)
    else:
        path = path_stem.with_suffix(".json")
        path.write_text(
            json.dumps([dict(zip(header, map(float, r))) for r in rows], indent=2)
        )
    return path


def load_config(path, overrides=None):
    try:
        raw = json.loads(Path(path).read_text()) if path else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def _model(cfg):
    try:
        return builtin_model(cfg.model.name, cfg.model.params)
    except UnknownModel as exc:
        raise ConfigError(str(exc)) from exc


def _x0(cfg, model):
    x0 = np.zeros(model.n) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    if x0.shape != (model.n,):
        raise ConfigError(f"x0 must have {model.n} components")
    if not 0 <= cfg.alpha0 < model.m0:
        raise ConfigError(f"alpha0 must lie in 0..{model.m0 - 1}")
    return x0


def _sim_config(cfg, eps=None):
    s = cfg.sim
    return SimConfig(
        eps=s.eps if eps is None else eps,
        T=s.T,
        h_slow=s.h_slow,
        step_rule=s.step_rule.kind,
        step_c=s.step_rule.c,
        M=s.M,
        seed=s.seed,
        t_grid=tuple(s.t_grid),
    )


def cmd_validate(cfg, out, threads, log=print):
    model = _model(cfg)
    x0 = _x0(cfg, model)
    rng = np.random.default_rng(cfg.sim.seed)
    points = [x0] + list(rng.normal(scale=2.0, size=(20, model.n)))
    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok &= passed
        log(f"{'PASS' if passed else 'FAIL'} {name}{': ' + detail if detail else ''}")

    for k, x in enumerate(points):
        where = f"x[{k}]={np.array2string(np.asarray(x), precision=4)}"
        gens_ok = True
        for label, G in (("Q", model.Q_at(x)), ("Qtilde", model.Qtilde_at(x))):
            try:
                validate_generator(G)
                report(f"generator {label} at {where}", True)
            except SlowFastError as exc:
                gens_ok = False
                report(f"generator {label} at {where}", False,
                       f"{type(exc).__name__}: {exc}")
        if not gens_ok:
            continue
        try:
            invariant_measure(model.Q_at(x))
            report(f"irreducible at {where}", True)
        except SlowFastError as exc:
            report(f"irreducible at {where}", False, f"{type(exc).__name__}: {exc}")
            continue
        rep = check_centering(model, x, tol=CENTERING_TOL)
        if rep.ok:
            report(f"centering at {where}", True)
        else:
            l = int(np.argmax(np.abs(rep.value)))
            report(f"centering at {where}", False,
                   f"NotCentered: column {l} has mu-average {float(rep.value[l])!r}")
    return EXIT_OK if ok else EXIT_FAIL


def _grid(cfg, n):
    a = cfg.average
    lo = np.broadcast_to(np.asarray(a.lo, dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(a.hi, dtype=float), (n,))
    axes = [np.linspace(lo[k], hi[k], a.num) for k in range(n)]
    return np.array(list(itertools.product(*axes)))


def cmd_average(cfg, out, threads, log=print):
    model = _model(cfg)
    avg = averaged_model(model)
    n = model.n
    iu = np.triu_indices(n)
    header = (
        [f"x{k}" for k in range(n)]
        + [f"Bbar{k}" for k in range(n)]
        + [f"SigmaBar{i}{j}" for i, j in zip(*iu)]
        + [f"S{i}{j}" for i, j in zip(*iu)]
    )
    rows = []
    for x in _grid(cfg, n):
        c = avg.at(x)
        rows.append(np.concatenate([x, c.Bbar, c.SigmaBar[iu], c.S[iu]]))
    path = write_table(out / "average_grid", cfg.output.format, header, rows)
    log(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(cfg, out, threads, log=print):
    model = _model(cfg)
    x0 = _x0(cfg, model)
    sc = _sim_config(cfg)
    times = np.asarray(sc.t_grid, dtype=float)
    n = model.n
    avg = averaged_model(model)

    def reduce(sample):
        return Moments.of(sample.X.reshape(sample.X.shape[0], -1))

    def sim(rng, P):
        return simulate_slow_fast(model, x0, cfg.alpha0, sc, rng, P)

    def sim_avg(rng, P):
        return simulate_averaged(avg, x0, sc.T, min(sc.h_slow, sc.T), rng, P, sc.t_grid)

    slow = run_replicas(sim, reduce, sc.M, sc.seed, key=(1,), threads=threads)
    lim = run_replicas(sim_avg, reduce, sc.M, sc.seed, key=(0,), threads=threads)
    header = ["t"]
    for l in range(n):
        header += [f"mean_x{l}", f"se_x{l}", f"avg_mean_x{l}", f"avg_se_x{l}"]
    rows = []
    for k, t in enumerate(times):
        row = [t]
        for l in range(n):
            j = k * n + l
            row += [slow.mean[j], slow.std_err[j], lim.mean[j], lim.std_err[j]]
        rows.append(row)
    path = write_table(out / "simulate", cfg.output.format, header, rows)
    log(f"wrote {path}")
    return EXIT_OK


def _run_study(cfg, model, out, threads, log):
    x0 = _x0(cfg, model)
    s = cfg.sim
    t_grid = cfg.study.t_grid or s.t_grid
    started = datetime.now(timezone.utc)
    tic = time.perf_counter()
    study = weak_error_study(
        model,
        test_function(cfg.study.phi),
        eps_grid=cfg.study.eps_grid,
        T=s.T,
        t_grid=t_grid,
        M=s.M,
        seed=s.seed,
        x0=x0,
        alpha0=cfg.alpha0,
        h_slow=s.h_slow,
        step_rule=s.step_rule.kind,
        step_c=s.step_rule.c,
        threads=threads,
    )
    wall = time.perf_counter() - tic
    analytic = None
    if model.name == "paper_example" and not model.params and cfg.study.phi == "coordinate(0)":
        analytic = analytic_example_error(study.eps_grid, s.T)
    fit, fit_error, code = None, None, EXIT_OK
    try:
        fit = fit_order(study)
    except InsufficientSignal as exc:
        fit_error = {"error": "InsufficientSignal", "eps": exc.eps_list, "message": str(exc)}
        code = EXIT_FAIL

    header = ["eps", "error", "std_err"] + (["analytic_ref"] if analytic is not None else [])
    rows = []
    for k, e in enumerate(study.eps_grid):
        row = [e, study.error[k], study.std_err[k]]
        if analytic is not None:
            row.append(analytic[k])
        rows.append(row)
    write_csv(out / "study.csv", header, rows)

    report = {
        "config": cfg.model_dump(mode="json"),
        "study": {
            "eps_grid": study.eps_grid.tolist(),
            "error": study.error.tolist(),
            "std_err": study.std_err.tolist(),
            "t_at_max": study.t_at_max.tolist(),
            "t_grid": study.t_grid.tolist(),
            "slow_mean": study.slow_mean.tolist(),
            "slow_se": study.slow_se.tolist(),
            "avg_mean": study.avg_mean.tolist(),
            "avg_se": study.avg_se.tolist(),
            "sup_sq_mean": study.sup_sq_mean.tolist(),
            "sup_sq_se": study.sup_sq_se.tolist(),
            "metadata": study.metadata,
        },
        "fit": None if fit is None else fit.__dict__,
        "fit_error": fit_error,
        "analytic_ref": None if analytic is None else analytic.tolist(),
        "run": {
            "started_at": started.isoformat(),
            "wall_clock_seconds": wall,
            "threads": threads,
        },
    }
    (out / "study.json").write_text(json.dumps(report, indent=2))
    if fit is not None:
        log(f"slope={fit.slope:.4f} intercept={fit.intercept:.4f} r2={fit.r_squared:.5f}")
    else:
        log(f"InsufficientSignal: {fit_error['message']}")
    log(f"wrote {out / 'study.csv'} and {out / 'study.json'}")
    return code, study


def cmd_study(cfg, out, threads, log=print):
    return _run_study(cfg, _model(cfg), out, threads, log)[0]


def cmd_example(cfg, out, threads, log=print):
    if cfg.model.name != "paper_example" or cfg.model.params:
        raise ConfigError("the example command runs the unmodified paper_example model")
    eps = np.asarray(cfg.study.eps_grid, dtype=float)
    T = cfg.sim.T
    analytic = analytic_example_error(eps, T) if T > 0 else np.zeros_like(eps)
    write_csv(out / "example_analytic.csv", ["eps", "analytic"], zip(eps, analytic))
    log(f"wrote {out / 'example_analytic.csv'}")
    if T == 0:
        return EXIT_OK
    code, _ = _run_study(cfg, _model(cfg), out, threads, log)
    return code


COMMANDS = {
    "validate": cmd_validate,
    "average": cmd_average,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "example": cmd_example,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="slowfast",
        description="Slow-fast switching diffusions: averaging and weak-error studies.",
    )
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS),
                   help="overrides the command named in the config")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides sim.seed")
    p.add_argument("--out", help="overrides output.directory")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; never changes results")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    overrides = {}
    if args.command:
        overrides["command"] = args.command
    if args.seed is not None:
        overrides["sim.seed"] = args.seed
    if args.out:
        overrides["output.directory"] = args.out
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, overrides)
        out = Path(cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SlowFastError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
