"""Command-line front end.

Every command writes into ``--out-dir`` and stamps each output with a hash of
its effective configuration.  Exit codes: 0 success, 1 solver failure (a stage
dump is written when a field is available), 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import io
from .core import AtomicMeasure, DomainError, GridSpec, ScalarGrid, SolverError, exponents
from .dyadic import CERT_COLUMNS, assemble_local, build_tree
from .optimize import SWEEP_COLUMNS, Schedule, gamma_sweep, minimize_constrained, mollify, profile_c0
from .profile import marginal_error, solve_profile, standard_kernel
from .transport import SUITE_COLUMNS, bound_suite, gilbert_steiner_oracle

logger = logging.getLogger("branchflow")


class UsageError(Exception):
    pass


RUN_KEYS = {
    "alpha": 0.75,
    "L": 3.0,
    "n": 256,
    "eps": [0.2, 0.1, 0.05, 0.025, 0.0125],
    "steps_per_eps": 1500,
    "penalty": 1.0,
    "penalty_end": 1000.0,
    "tol": 1e-6,
    "check_every": 10,
    "seed": 0,
    "atoms_x": [],
    "atoms_y": [],
    "atoms_mass": [],
    "density": "",
    "snapshots": False,
}


# ---------------------------------------------------------------------------
# helpers


def _out(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _announce(paths: Sequence[str]) -> None:
    for p in paths:
        print(p)


def _override(cfg: Dict, sets: Optional[List[str]]) -> Dict:
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.update(io.parse_config(item))
    return cfg


def _run_config(args) -> Dict:
    try:
        raw = io.read_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    raw = _override(raw, args.set)
    unknown = sorted(set(raw) - set(RUN_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(RUN_KEYS)
    cfg.update(raw)
    if isinstance(cfg["eps"], (int, float)):
        cfg["eps"] = [cfg["eps"]]
    if args.snapshots:
        cfg["snapshots"] = True
    return cfg


def _density_path(args, cfg: Dict) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(args.config)), cfg["density"])


def _schedule(cfg: Dict) -> Schedule:
    return Schedule(
        tuple(float(e) for e in cfg["eps"]),
        steps_per_eps=int(cfg["steps_per_eps"]),
        tol=float(cfg["tol"]),
        penalty=float(cfg["penalty"]),
        penalty_end=float(cfg["penalty_end"]),
        check_every=int(cfg["check_every"]),
        seed=int(cfg["seed"]),
    )


def _atoms(cfg: Dict) -> AtomicMeasure:
    xs, ys, ms = (cfg[k] for k in ("atoms_x", "atoms_y", "atoms_mass"))
    if not (len(xs) == len(ys) == len(ms)) or not xs:
        raise UsageError("atoms_x, atoms_y and atoms_mass must be nonempty lists of equal length")
    return AtomicMeasure(np.column_stack([xs, ys]).astype(float), np.asarray(ms, dtype=float))


def read_instance(path: str) -> AtomicMeasure:
    """Signed atoms from a CSV with columns ``x, y, mass`` (an optional header row is skipped)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.reader(fh):
            rec = [c.strip() for c in rec if c.strip()]
            if not rec or rec[0].startswith("#"):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                if rows:
                    raise DomainError(f"{path}: non-numeric row {rec}") from None
                continue  # header
    if not rows or any(len(r) != 3 for r in rows):
        raise DomainError(f"{path}: expected rows of x, y, mass")
    a = np.asarray(rows)
    return AtomicMeasure(a[:, :2], a[:, 2])


def _snapshotter(args, cfg, chash, written):
    if not cfg["snapshots"]:
        return None
    counter = [0]

    def save(eps, u):
        path = _out(args, f"stage_{counter[0]:02d}.bgrid")
        counter[0] += 1
        written.append(io.write_bgrid(path, u, chash))

    return save


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args) -> List[str]:
    cfg = {"command": "profile", "beta": args.beta, "n": args.n}
    chash = io.config_hash(cfg)
    p = solve_profile(args.beta, n_grid=args.n)
    rows = ({"x": x, "w": w, "dw": d} for x, w, d in zip(p.x, p.w, p.dw))
    return [
        io.write_csv(_out(args, "profile.csv"), ("x", "w", "dw"), rows, chash),
        io.write_json(
            _out(args, "c0.json"),
            {"beta": p.beta, "c0": p.c0, "lambda": p.lam, "support": p.R_supp, "mass": p.mass()},
            chash,
        ),
    ]


def cmd_kernel(args) -> List[str]:
    cfg = {"command": "kernel", "beta": args.beta, "check_n": args.check_n}
    chash = io.config_hash(cfg)
    p = solve_profile(args.beta)
    k = standard_kernel(args.beta)
    err = marginal_error(p, k, args.check_n)
    rows = ({"r": r, "rho": v} for r, v in zip(k.r, k.rho))
    return [
        io.write_csv(_out(args, "kernel.csv"), ("r", "rho"), rows, chash),
        io.write_json(
            _out(args, "kernel_check.json"),
            {"beta": args.beta, "mass": k.mass(), "support": k.R_supp, "marginal_l1": err, "grid": args.check_n},
            chash,
        ),
    ]


def cmd_dyadic(args) -> List[str]:
    try:
        f = io.read_density(args.density, args.L)
    except OSError as exc:
        raise UsageError(f"cannot read density: {exc}") from None
    cfg = {"command": "dyadic", "density": os.path.basename(args.density), "eps": args.eps, "alpha": args.alpha, "L": args.L,
           "data": io.config_hash({"v": f.values.tolist()})}
    chash = io.config_hash(cfg)
    ep = exponents(args.alpha, 2)
    kernel = standard_kernel(ep.beta)
    tree = build_tree(f, args.eps, ep, kernel)
    u, cert = assemble_local(f, args.eps, ep, kernel)
    return [
        io.write_json(_out(args, "tree.json"), {"tree": tree.to_json()}, chash),
        io.write_csv(_out(args, "certificate.csv"), CERT_COLUMNS, [cert.as_row()], chash),
        io.write_bgrid(_out(args, "field.bgrid"), u, chash),
    ]


def cmd_minimize(args) -> List[str]:
    cfg = _run_config(args)
    chash = io.config_hash(dict(cfg, command="minimize"))
    ep = exponents(float(cfg["alpha"]), 2)
    kernel = standard_kernel(ep.beta)
    n, L = int(cfg["n"]), float(cfg["L"])
    spec = GridSpec(n, n, L, L)
    sched = _schedule(cfg)
    written: List[str] = []
    ref = None
    if cfg["density"]:
        try:
            f = io.read_density(_density_path(args, cfg), L)
        except OSError as exc:
            raise UsageError(f"cannot read density: {exc}") from None
        if f.spec != spec:
            raise UsageError(f"density grid {f.spec.nx}x{f.spec.ny} does not match n = {n}")
        f = ScalarGrid(spec, f.values - f.values.mean())
        data = None
    else:
        mu = _atoms(cfg)
        if len(mu.masses) <= 4:
            src, snk = mu.merged().positive(), mu.merged().negative()
            ref = profile_c0(ep.beta) * gilbert_steiner_oracle(src, snk, ep.alpha)[0]
        f = mollify(mu, sched.eps_list[0], ep, kernel, spec)

        def data(e):
            return mollify(mu, e, ep, kernel, spec)

    args._dump = chash
    u, rows = minimize_constrained(
        f, ep, sched, reference=ref, data_for_eps=data, on_stage=_snapshotter(args, cfg, chash, written)
    )
    written.insert(0, io.write_csv(_out(args, "sweep.csv"), SWEEP_COLUMNS, [r.as_row() for r in rows], chash))
    written.append(io.write_bgrid(_out(args, "final.bgrid"), u, chash))
    return written


def cmd_sweep(args) -> List[str]:
    cfg = _run_config(args)
    if cfg["density"]:
        raise UsageError("sweep needs atomic data (atoms_x, atoms_y, atoms_mass)")
    chash = io.config_hash(dict(cfg, command="sweep"))
    ep = exponents(float(cfg["alpha"]), 2)
    kernel = standard_kernel(ep.beta)
    n, L = int(cfg["n"]), float(cfg["L"])
    spec = GridSpec(n, n, L, L)
    sched = _schedule(cfg)
    written: List[str] = []
    args._dump = chash
    rows, summary, u = gamma_sweep(
        _atoms(cfg), spec, ep.alpha, sched.eps_list, kernel, schedule=sched,
        on_stage=_snapshotter(args, cfg, chash, written),
    )
    g = summary.graph
    info = {
        "oracle_energy": summary.oracle_energy,
        "c0": summary.c0,
        "reference": summary.reference,
        "final_ratio": summary.final_ratio,
        "within_band": summary.within,
        "trending": summary.trending,
        "graph": {"vertices": g.vertices.tolist(), "edges": [list(e) for e in g.edges]},
    }
    return [
        io.write_csv(_out(args, "sweep.csv"), SWEEP_COLUMNS, [r.as_row() for r in rows], chash),
        io.write_json(_out(args, "summary.json"), info, chash),
        io.write_bgrid(_out(args, "final.bgrid"), u, chash),
    ] + written


def cmd_oracle(args) -> List[str]:
    try:
        mu = read_instance(args.instance)
    except OSError as exc:
        raise UsageError(f"cannot read instance: {exc}") from None
    cfg = {"command": "oracle", "alpha": args.alpha, "points": mu.points.tolist(), "masses": mu.masses.tolist()}
    chash = io.config_hash(cfg)
    m = mu.merged()
    energy, g = gilbert_steiner_oracle(m.positive(), m.negative(), args.alpha)
    out = {
        "alpha": args.alpha,
        "dalpha": energy,
        "graph": {"vertices": g.vertices.tolist(), "edges": [list(e) for e in g.edges]},
    }
    return [io.write_json(_out(args, "oracle.json"), out, chash)]


def cmd_bounds(args) -> List[str]:
    files = sorted(glob.glob(os.path.join(args.suite, "*.csv")))
    if not files:
        raise UsageError(f"no instance CSV files in {args.suite}")
    instances = []
    for path in files:
        m = read_instance(path).merged()
        instances.append((m.positive(), m.negative()))
    cfg = {"command": "bounds", "alpha": args.alpha, "eps": args.eps, "n": args.n,
           "instances": [os.path.basename(p) for p in files],
           "data": io.config_hash({"i": [(a.points.tolist(), a.masses.tolist(), b.points.tolist(), b.masses.tolist())
                                         for a, b in instances]})}
    chash = io.config_hash(cfg)
    kw = {}
    if args.eps is not None:
        ep = exponents(args.alpha, 2)
        kw = dict(ep=ep, eps=args.eps, kernel=standard_kernel(ep.beta), spec=GridSpec(args.n, args.n, 1.0, 1.0))
    rep = bound_suite(instances, args.alpha, **kw)
    rows = []
    for path, r in zip(files, rep.rows):
        row = r.as_row()
        row["instance"] = os.path.basename(path)
        rows.append(row)
    return [
        io.write_csv(_out(args, "bounds.csv"), SUITE_COLUMNS, rows, chash),
        io.write_json(
            _out(args, "bounds.json"),
            {"alpha": rep.alpha, "C_fit": rep.C_fit, "spread": rep.spread, "passed": rep.passed, "n_instances": len(rows)},
            chash,
        ),
    ]


def cmd_render(args) -> List[str]:
    try:
        u = io.read_bgrid(args.field)
    except OSError as exc:
        raise UsageError(f"cannot read field: {exc}") from None
    return [io.write_pgm(_out(args, args.out), u, io.bgrid_hash(args.field))]


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="branchflow", description="Phase-field branched transport toolkit.")
    ap.add_argument("--out-dir", default=".", help="root directory for all outputs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="optimal 1D profile and its constant")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--n", type=int, default=4096, help="profile grid size")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("kernel", help="radial kernel and its marginal check")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--check-n", type=int, default=512)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("dyadic", help="dyadic tree, certificate and field for a density")
    p.add_argument("--density", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--L", type=float, default=1.0, help="side of the square")
    p.set_defaults(func=cmd_dyadic)

    for name, func, helptext in (
        ("minimize", cmd_minimize, "constrained minimisation with continuation"),
        ("sweep", cmd_sweep, "convergence table against the Steiner oracle"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--snapshots", action="store_true", help="write the field after every stage")
        p.set_defaults(func=func)

    p = sub.add_parser("oracle", help="optimal tree cost for a small atomic instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--alpha", type=float, default=0.75)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bounds", help="Wasserstein comparison suite over a directory of instances")
    p.add_argument("--suite", required=True)
    p.add_argument("--alpha", type=float, default=0.75)
    p.add_argument("--eps", type=float, default=None, help="also run the smoothed checks at this eps")
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("render", help="grayscale |u| image")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args._dump = None
    try:
        _announce(args.func(args))
    except (UsageError, DomainError) as exc:
        print(f"branchflow {args.command}: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        msg = f"branchflow {args.command}: solver failure: {exc}"
        u = getattr(exc, "stage_field", None)
        if u is not None:
            chash = args._dump or ""
            msg += f"; stage dump: {io.write_bgrid(_out(args, 'stage_dump.bgrid'), u, chash)}"
        print(msg, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
