"""
Command-line driver.

    rbvd train --config run.ini
    rbvd evaluate --config run.ini
    rbvd effectivity --config run.ini
    rbvd oracle-check --config run.ini
    rbvd decay --config run.ini

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 failed oracle or effectivity check.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .control import control_norm
from .fem import EXACT_CONSTANTS_MAX_DIM, SingularOperatorError
from .io import SolutionCache, read_basis, read_csv, write_basis, write_csv
from .rb import (GreedyConfig, RBSpace, effectivity_check, evaluate_on_test_set,
                 fill_distance, greedy)
from .solver import SolverError, projected_gradient_oracle, sample_control, solve_full

log = logging.getLogger("rbvd")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
ORACLE_TOL = 1e-5


class CheckFailed(RuntimeError):
    pass


def _mu_cols(k):
    return [f"mu{i + 1}" for i in range(k)]


def _sort_rows(rows):
    return sorted(rows, key=lambda r: (r["N"], tuple(r["mu"])))


# -- artifacts ---------------------------------------------------------------

def save_space(out, rb):
    write_basis(out / "basis.bin", rb.basis)
    k = rb.ocp.num_params
    write_csv(out / "samples.csv", ["index", "columns"] + _mu_cols(k),
              [[i + 1, c] + list(m) for i, (m, c) in enumerate(zip(rb.mus, rb.counts))])


def load_space(out, ocp):
    out = Path(out)
    if not (out / "basis.bin").exists():
        raise ConfigError(f"no trained basis in {out}; run 'train' first")
    basis = read_basis(out / "basis.bin")
    rows = read_csv(out / "samples.csv")
    k = ocp.num_params
    mus = [np.array([float(r[c]) for c in _mu_cols(k)]) for r in rows]
    counts = [int(r["columns"]) for r in rows]
    if basis.shape[0] != ocp.n:
        raise ConfigError(f"basis in {out} has {basis.shape[0]} rows but the mesh has {ocp.n} dofs")
    return RBSpace(ocp, basis, mus, counts)


def _setup(args):
    cfg = load_config(args.config)
    if args.out:
        cfg.out_dir = Path(args.out)
        cfg.cache_dir = cfg.out_dir / "cache"
    if getattr(args, "estimator", None):
        cfg.estimator = args.estimator
    ocp = cfg.build_problem()
    cache = SolutionCache(cfg.cache_dir, ocp, cfg.problem_kwargs(), cfg.solver)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, ocp, cache


# -- commands ----------------------------------------------------------------

def cmd_train(args):
    cfg, ocp, cache = _setup(args)
    gcfg = GreedyConfig(cfg.train, cfg.tol, cfg.n_max, cfg.estimator, cfg.dependence_threshold,
                        cfg.mu1, args.exact_constants, cfg.solver)
    rb, hist = greedy(ocp, gcfg, jobs=args.jobs, full_solver=cache)
    save_space(cfg.out_dir, rb)
    k = ocp.num_params
    write_csv(cfg.out_dir / "history.csv",
              ["N"] + _mu_cols(k) + ["max_estimator"] + [f"argmax_{c}" for c in _mu_cols(k)]
              + ["dim", "ortho_error", "seconds", "termination"],
              [[r.N] + list(r.mu) + [r.max_estimator] + list(r.argmax)
               + [r.dim, r.ortho_error, r.seconds, hist.termination] for r in hist.records])
    print(f"train: {len(hist)} iterations, dim {rb.N}, termination {hist.termination}")
    return EXIT_OK


RESULT_COLUMNS = ["rel_error", "rel_bound", "delta_u", "delta_uyp", "delta_lower", "ry_norm",
                  "rp_norm", "proviso_ok"]


def run_evaluation(cfg, ocp, cache, rb, jobs=1, exact=False):
    rows, summary = evaluate_on_test_set(ocp, rb, cfg.test, opts=cfg.solver, full_solver=cache,
                                         jobs=jobs, exact=exact)
    rows = _sort_rows(rows)
    k = ocp.num_params
    write_csv(cfg.out_dir / "results.csv", ["N"] + _mu_cols(k) + RESULT_COLUMNS + ["violation"],
              [[r["N"]] + list(r["mu"]) + [r[c] for c in RESULT_COLUMNS]
               + [r["proviso_ok"] and r["rel_error"] > r["rel_bound"]] for r in rows])
    cols = ["N", "dim", "max_rel_error", "max_rel_bound", "max_delta_uyp", "violations"]
    write_csv(cfg.out_dir / "summary.csv", cols, [[s[c] for c in cols] for s in summary])
    return rows, summary


def spot_check_cache(cfg, ocp, cache, rng, count=3, rtol=1e-8):
    """Compare cached solutions with fresh solves at a few test parameters."""
    worst = 0.0
    for i in rng.choice(len(cfg.test), size=min(count, len(cfg.test)), replace=False):
        mu = cfg.test[i]
        cached = cache(mu)
        fresh = solve_full(ocp, mu, cfg.solver)
        scale = max(ocp.K_Y.norm(fresh.y), 1e-300)
        worst = max(worst, ocp.K_Y.norm(cached.y - fresh.y) / scale)
    if worst > rtol:
        raise CheckFailed(f"cache disagrees with fresh solves (relative {worst:.3e})")
    return worst


def cmd_evaluate(args):
    cfg, ocp, cache = _setup(args)
    rb = load_space(cfg.out_dir, ocp)
    rows, summary = run_evaluation(cfg, ocp, cache, rb, args.jobs, args.exact_constants)
    spot_check_cache(cfg, ocp, cache, np.random.default_rng(cfg.seed))
    bad = sum(s["violations"] for s in summary)
    for s in summary:
        print(f"N={s['N']:3d} dim={s['dim']:3d} max rel error {s['max_rel_error']:.3e} "
              f"max bound {s['max_rel_bound']:.3e}")
    if bad:
        print(f"WARNING: {bad} test points where the error exceeds a valid bound",
              file=sys.stderr)
    return EXIT_OK


EFFECTIVITY_COLUMNS = ["err_u", "err_y", "err_p", "err_total", "delta_uyp", "delta_lower",
                       "beta", "gamma", "kappa", "ratio_y_yaux", "ratio_p_paux",
                       "ratio_yN_yaux", "ratio_pN_paux"]


def effectivity_pairs(ocp, rb, count, rng):
    pairs = []
    for _ in range(count):
        N = int(rng.integers(1, len(rb.mus) + 1))
        mu = np.array([rng.uniform(lo, hi) for lo, hi in ocp.box])
        pairs.append((N, mu))
    return pairs


def cmd_effectivity(args):
    cfg, ocp, cache = _setup(args)
    if ocp.n > EXACT_CONSTANTS_MAX_DIM:
        raise ConfigError(f"effectivity needs dim(Y) <= {EXACT_CONSTANTS_MAX_DIM} for the dense "
                          f"eigen oracle, this mesh has {ocp.n}")
    try:
        rb = load_space(cfg.out_dir, ocp)
    except ConfigError:
        cmd_train(args)
        rb = load_space(cfg.out_dir, ocp)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for N, mu in effectivity_pairs(ocp, rb, cfg.effectivity_pairs, rng):
        rows.append(effectivity_check(ocp, rb, N, mu, cfg.solver, full=cache(mu)))
    rows = _sort_rows(rows)
    checks = list(rows[0]["checks"]) if rows else []
    write_csv(cfg.out_dir / "effectivity.csv",
              ["N"] + _mu_cols(ocp.num_params) + EFFECTIVITY_COLUMNS + checks + ["ok"],
              [[r["N"]] + list(r["mu"]) + [r[c] for c in EFFECTIVITY_COLUMNS]
               + [r["checks"][c] for c in checks] + [r["ok"]] for r in rows])
    failed = [r for r in rows if not r["ok"]]
    print(f"effectivity: {len(rows) - len(failed)}/{len(rows)} pairs pass")
    if failed:
        raise CheckFailed(f"{len(failed)} effectivity pairs fail")
    return EXIT_OK


def oracle_compare(ocp, mu, opts):
    """Relative U-distance between the active set and gradient projection controls."""
    full = solve_full(ocp, mu, opts)
    pg = projected_gradient_oracle(ocp, mu, opts=opts)
    mine = sample_control(full.u, pg.u.bary, pg.u.weights)
    weights = ocp.triangle_weights(mu)
    areas = ocp.mesh.areas
    diff = type(pg.u)(mine.values - pg.u.values, pg.u.bary, pg.u.weights)
    return diff.norm(areas, weights) / control_norm(full.u, weights), pg


def cmd_oracle_check(args):
    cfg, ocp, _ = _setup(args)
    rows = []
    for mu in cfg.oracle_params:
        err, pg = oracle_compare(ocp, mu, cfg.solver)
        rows.append([*mu, err, pg.iterations, pg.converged])
        print(f"mu={np.asarray(mu).tolist()} relative difference {err:.3e}")
    write_csv(cfg.out_dir / "oracle.csv",
              _mu_cols(ocp.num_params) + ["rel_difference", "pg_iterations", "pg_converged"], rows)
    worst = max(r[-3] for r in rows)
    if worst > ORACLE_TOL:
        raise CheckFailed(f"oracle disagreement {worst:.3e} exceeds {ORACLE_TOL:g}")
    return EXIT_OK


def cmd_decay(args):
    cfg, ocp, cache = _setup(args)
    rb = load_space(cfg.out_dir, ocp)
    path = cfg.out_dir / "summary.csv"
    if path.exists():
        summary = {int(r["N"]): float(r["max_rel_error"]) for r in read_csv(path)}
    else:
        _, s = run_evaluation(cfg, ocp, cache, rb, args.jobs)
        summary = {r["N"]: r["max_rel_error"] for r in s}
    rows = []
    for N in range(1, len(rb.mus) + 1):
        h = fill_distance(ocp.box, np.array(rb.mus[:N]))
        rows.append([N, h, np.sqrt(h), summary.get(N, float("nan"))])
    write_csv(cfg.out_dir / "decay.csv", ["N", "fill_distance", "sqrt_fill_distance",
                                          "max_rel_error"], rows)
    for r in rows:
        print(f"N={r[0]:3d} h_N={r[1]:.4e} max rel error {r[3]:.3e}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "effectivity": cmd_effectivity,
    "oracle-check": cmd_oracle_check,
    "decay": cmd_decay,
}


def build_parser():
    p = argparse.ArgumentParser(prog="rbvd", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--out", help="output directory (overrides [output] dir)")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        s.add_argument("--estimator", choices=("relative", "uyp"))
        s.add_argument("--exact-constants", action="store_true",
                       help="use eigen-computed stability constants (small meshes)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SingularOperatorError, RuntimeError) as exc:
        if isinstance(exc, CheckFailed):
            print(f"check failed: {exc}", file=sys.stderr)
            return EXIT_CHECK
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
