"""Command-line interface: ``rer estimate | simulate | verify-theorem``.

Exit codes: 0 success, 2 malformed input, 3 infeasible covariance,
4 solver non-convergence, 5 failed relative-entropy-rate check.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gamma import InfeasibleCovariance, ProjectionError
from .lti import StateSpace, build_filterbank
from .rer import ConvergenceError, SolverOptions
from .sim import ExperimentConfig, estimate_spectrum, parse_poles, run_experiment
from .spectra import (FactorDensity, GridDensity, circle_grid, grid_to_csv, rer_time_domain,
                      sample_on_grid, spectral_rer_partition)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_NOCONV = 4
EXIT_THEOREM = 5

DEFAULT_N_LIST = (8, 16, 32, 64, 128, 256, 512, 1024)

log = logging.getLogger("rerspec")


class InputError(Exception):
    pass


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path}: {exc}")
    if not isinstance(obj, dict):
        raise InputError(f"{path}: expected a JSON object")
    return obj


def read_data_csv(path: str) -> np.ndarray:
    """One row per time step, one column per channel; an optional header row."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except FileNotFoundError:
        raise InputError(f"file not found: {path}")
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise InputError(f"{path}: no data rows")
    try:
        data = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})")
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise InputError(f"{path}: rows must have equal length and finite values")
    return data


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _solver_options(cfg: dict, args) -> SolverOptions:
    opts = dict(SolverOptions().to_dict())
    opts.update(cfg.get("solver", {}))
    if getattr(args, "tol", None) is not None:
        opts["tol"] = args.tol
    if getattr(args, "max_iter", None) is not None:
        opts["max_iter"] = args.max_iter
    if getattr(args, "grid", None) is not None:
        opts["grid_size"] = args.grid
    try:
        return SolverOptions(**opts)
    except TypeError as exc:
        raise InputError(f"bad solver options: {exc}")


def _load_system(spec, base: Path) -> StateSpace:
    if isinstance(spec, str):
        spec = _read_json(str(base / spec))
    try:
        return StateSpace.from_dict(spec)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad state-space description: {exc}")


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_estimate(args) -> int:
    if not args.config or not args.data:
        raise InputError("estimate needs --config and --data")
    cfg = _read_json(args.config)
    data = read_data_csv(args.data)
    base = Path(args.config).parent
    try:
        bank_cfg = cfg["bank"]
        poles = parse_poles(bank_cfg["poles"])
        m = int(bank_cfg.get("m", data.shape[1]))
        bank = build_filterbank(poles, m=m, B=bank_cfg.get("B"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad bank description: {exc}")
    if bank.n_inputs != data.shape[1]:
        raise InputError(f"data has {data.shape[1]} channels, bank expects {bank.n_inputs}")
    prior = dict(cfg.get("prior", {"type": "constant"}))
    if prior.get("type") == "factor":
        prior["system"] = _load_system(prior.pop("file", prior.get("system")), base).to_dict()
    opts = _solver_options(cfg, args)
    grid = int(args.grid or cfg.get("grid", 2048))
    try:
        est = estimate_spectrum(data, bank, prior, opts)
    except ValueError as exc:
        if isinstance(exc, InfeasibleCovariance):
            raise
        raise InputError(str(exc))
    sol = est.solution
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    spectrum = sample_on_grid(sol.spectrum, grid)
    (out / "spectrum.csv").write_text(grid_to_csv(spectrum))
    echo = {"bank": {"poles": bank_cfg["poles"], "m": m}, "prior": prior, "grid": grid}
    # wall time stays out of the manifest so reruns are byte-identical
    result = {k: v for k, v in sol.summary().items() if k != "wall_time"}
    if bank_cfg.get("B") is not None:
        echo["bank"]["B"] = bank_cfg["B"]
    manifest = {
        "command": "estimate", "version": __version__, "config": echo,
        "solver": opts.to_dict(), "data": {"sha256": _sha256(args.data),
                                           "samples": int(data.shape[0]),
                                           "channels": int(data.shape[1])},
        "result": result, "lambda": sol.lam.tolist(),
        "factor": sol.spectrum.W.to_dict(),
    }
    _write_manifest(out, manifest)
    print(f"converged in {sol.iterations} iterations, relative residual "
          f"{sol.relative_residual:.3e}, degree {sol.degree.degree} (bound {sol.degree.bound}), "
          f"{sol.wall_time:.2f} s")
    return EXIT_OK


def cmd_simulate(args) -> int:
    overrides = _read_json(args.config)
    try:
        cfg = ExperimentConfig.preset(args.experiment)
        d = cfg.to_dict()
        d.update(overrides)
        if args.seed is not None:
            d["seed"] = args.seed
        if args.runs is not None:
            d["runs"] = args.runs
        if args.grid is not None:
            d["grid"] = args.grid
        solver = dict(d["solver"])
        if args.tol is not None:
            solver["tol"] = args.tol
        if args.max_iter is not None:
            solver["max_iter"] = args.max_iter
        d["solver"] = solver
        cfg = ExperimentConfig.from_dict(d)
        cfg.options()
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad experiment configuration: {exc}")
    res = run_experiment(cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    theta = res.theta
    for r in res.runs:
        if r.converged:
            (out / f"run_{r.run:03d}.csv").write_text(grid_to_csv(GridDensity(theta, r.estimate)))
    if res.error_curve is not None:
        lines = ["theta,error,prior_error"]
        lines += [f"{t!r},{e!r},{p!r}" for t, e, p in
                  zip(theta.tolist(), res.error_curve.tolist(), res.prior_error_curve.tolist())]
        (out / "error_curve.csv").write_text("\n".join(lines) + "\n")
    manifest = {
        "command": "simulate", "experiment": args.experiment, "version": __version__,
        "config": cfg.to_dict(), "seeds": [[cfg.seed, r.run] for r in res.runs],
        "converged": res.converged, "runs": [r.summary() for r in res.runs],
    }
    _write_manifest(out, manifest)
    print(f"{args.experiment}: {res.converged}/{cfg.runs} runs converged")
    return EXIT_OK if res.converged else EXIT_NOCONV


def default_theorem_pair() -> tuple[FactorDensity, FactorDensity]:
    """ARMA(1,1) versus AR(1), both scalar."""
    y = StateSpace([[0.8]], [[1.0]], [[0.65]], [[0.5]])
    z = StateSpace([[-0.5]], [[1.0]], [[0.3]], [[1.0]])
    return FactorDensity(y), FactorDensity(z)


def theorem_table(phi_y, phi_z, n_list) -> list[dict]:
    exact = rer_time_domain(phi_y, phi_z)
    rows = []
    for n in n_list:
        part = spectral_rer_partition(phi_y, phi_z, int(n))
        rows.append({"n": int(n), "partition": part, "time_domain": exact,
                     "gap": abs(part - exact)})
    return rows


def theorem_check(rows: list[dict], final_tol: float = 1e-3, slack: float = 1e-12) -> bool:
    """Gap non-increasing over the trailing half of the list and small at the end."""
    gaps = [r["gap"] for r in rows]
    tail = gaps[len(gaps) // 2:] if len(gaps) > 1 else gaps
    mono = all(b <= a + slack for a, b in zip(tail, tail[1:]))
    return bool(mono and gaps[-1] <= final_tol)


def cmd_verify_theorem(args) -> int:
    cfg = _read_json(args.config)
    base = Path(args.config).parent if args.config else Path(".")
    if "phi_y" in cfg or "phi_z" in cfg:
        try:
            phi_y = FactorDensity(_load_system(cfg["phi_y"], base))
            phi_z = FactorDensity(_load_system(cfg["phi_z"], base))
        except KeyError as exc:
            raise InputError(f"config needs both phi_y and phi_z ({exc})")
        except ValueError as exc:
            raise InputError(str(exc))
    else:
        phi_y, phi_z = default_theorem_pair()
    n_list = args.n or cfg.get("n", list(DEFAULT_N_LIST))
    if not n_list or any(int(n) < 1 for n in n_list):
        raise InputError("n values must be positive integers")
    rows = theorem_table(phi_y, phi_z, n_list)
    print(f"{'n':>6} {'partition':>22} {'time domain':>22} {'gap':>12}")
    for r in rows:
        print(f"{r['n']:>6} {r['partition']:>22.15g} {r['time_domain']:>22.15g} {r['gap']:>12.3e}")
    ok = theorem_check(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["n,partition,time_domain,gap"]
        lines += [f"{r['n']},{r['partition']!r},{r['time_domain']!r},{r['gap']!r}" for r in rows]
        (out / "theorem.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(out, {"command": "verify-theorem", "version": __version__,
                              "phi_y": phi_y.W.to_dict(), "phi_z": phi_z.W.to_dict(),
                              "n": [int(n) for n in n_list], "passed": ok})
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_THEOREM


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rer", description="Relative-entropy-rate spectral estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--grid", type=int, help="number of output grid points")
        p.add_argument("--tol", type=float, help="gradient tolerance")
        p.add_argument("--max-iter", type=int, dest="max_iter", help="Newton iteration cap")

    p = sub.add_parser("estimate", help="estimate a spectrum from data")
    common(p)
    p.add_argument("--data", help="CSV with one row per time step")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    p.add_argument("experiment", choices=["lines", "lines-close", "shaping"])
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-theorem", help="partition versus time-domain relative entropy rate")
    p.add_argument("--config", help="JSON with phi_y, phi_z factor realizations and n list")
    p.add_argument("--out", help="output directory for the table")
    p.add_argument("--n", type=int, nargs="+", help="partition sizes")
    p.set_defaults(func=cmd_verify_theorem)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InfeasibleCovariance, ProjectionError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
