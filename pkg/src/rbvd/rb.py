"""
Reduced basis spaces, residual-based error estimators and greedy sampling.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .control import control_error, control_norm, integrate_control
from .fem import Factorization, StabilityConstants, exact_constants, riesz_dual_norm
from .solver import SolverOptions, solve_full, solve_reduced

__all__ = [
    "RBSpace",
    "Residuals",
    "EstimatorReport",
    "GreedyConfig",
    "GreedyRecord",
    "GreedyHistory",
    "extend_orthonormal",
    "compute_residuals",
    "estimate",
    "greedy",
    "evaluate_on_test_set",
    "effectivity_check",
    "fill_distance",
    "orthonormality_error",
]

log = logging.getLogger(__name__)


class RBSpace:
    """
    Y-orthonormal reduced basis with the parameters that produced it.

    ``counts[k]`` is the number of columns contributed by ``mus[k]`` (at
    most two: state then adjoint), so prefixes by greedy iteration are
    recoverable.
    """

    def __init__(self, ocp, basis=None, mus=(), counts=()):
        self.ocp = ocp
        self.K = ocp.K_Y
        n = ocp.n
        self.basis = np.zeros((n, 0)) if basis is None else np.asarray(basis, dtype=float)
        self.mus = [np.atleast_1d(np.asarray(m, dtype=float)) for m in mus]
        self.counts = list(counts)
        if self.basis.shape[0] != n:
            raise ValueError(f"basis rows {self.basis.shape[0]} != dim(Y) {n}")
        if sum(self.counts) != self.basis.shape[1] or len(self.counts) != len(self.mus):
            raise ValueError("counts do not match basis columns / parameters")
        self._ext = None

    @property
    def N(self):
        return self.basis.shape[1]

    @property
    def basis_ext(self):
        if self._ext is None:
            self._ext = self.ocp.extend(self.basis)
        return self._ext

    def prefix(self, iterations):
        """Space spanned by the snapshots of the first `iterations` parameters."""
        cols = sum(self.counts[:iterations])
        return RBSpace(self.ocp, self.basis[:, :cols], self.mus[:iterations],
                       self.counts[:iterations])

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_ext"] = None
        return state


def orthonormality_error(rb):
    if rb.N == 0:
        return 0.0
    G = rb.basis.T @ (rb.K.matrix @ rb.basis)
    return float(np.abs(G - np.eye(rb.N)).max())


def extend_orthonormal(rb, snapshots, threshold=1e-10, mu=None):
    """
    Append snapshots by modified Gram-Schmidt in the Y inner product.

    Each snapshot is orthogonalized twice; it is rejected when the norm left
    after projection is below ``threshold`` times its original norm.
    Returns ``(new_space, accepted_count)``.
    """
    K = rb.K.matrix
    cols = [rb.basis[:, j] for j in range(rb.N)]
    kcols = [K @ c for c in cols]
    accepted = 0
    for v in snapshots:
        v = np.array(v, dtype=float)
        if v.shape != (rb.ocp.n,):
            raise ValueError(f"snapshot has shape {v.shape}, expected ({rb.ocp.n},)")
        pre = np.sqrt(max(v @ (K @ v), 0.0))
        if pre == 0.0:
            continue
        for _ in range(2):
            for c, kc in zip(cols, kcols):
                v -= (kc @ v) * c
        post = np.sqrt(max(v @ (K @ v), 0.0))
        if post < threshold * pre:
            continue
        v /= post
        cols.append(v)
        kcols.append(K @ v)
        accepted += 1
    basis = np.column_stack(cols) if cols else np.zeros((rb.ocp.n, 0))
    mus, counts = list(rb.mus), list(rb.counts)
    if accepted:
        mus.append(np.atleast_1d(mu) if mu is not None else np.full(rb.ocp.num_params, np.nan))
        counts.append(accepted)
    return RBSpace(rb.ocp, basis, mus, counts), accepted


@dataclass(frozen=True)
class Residuals:
    r_y_norm: float
    r_p_norm: float
    rhs_y_norm: float = float("nan")
    rhs_p_norm: float = float("nan")


def _residual_vectors(ocp, forms, y, p, u):
    Bu = integrate_control(u, forms.weights)[ocp.free]
    rhs_y = Bu + forms.f
    rhs_p = forms.M0 @ y - forms.g_z
    r_y = rhs_y - forms.A @ y
    r_p = rhs_p - forms.A.T @ p
    return r_y, r_p, rhs_y, rhs_p


def compute_residuals(ocp, mu, sol, forms=None):
    """Dual norms of the state and adjoint residuals of a reduced solution."""
    forms = forms or ocp.forms(mu)
    r_y, r_p, rhs_y, rhs_p = _residual_vectors(ocp, forms, sol.y, sol.p, sol.u)
    K = ocp.K_Y
    return Residuals(riesz_dual_norm(K, r_y)[1], riesz_dual_norm(K, r_p)[1],
                     riesz_dual_norm(K, rhs_y)[1], riesz_dual_norm(K, rhs_p)[1])


@dataclass(frozen=True)
class EstimatorReport:
    residuals: Residuals
    delta_u: float
    delta_uyp: float
    delta_lower: float          # nan unless gamma is known
    constants: StabilityConstants
    rho1: float
    alpha: float
    c: tuple                    # (c1, c2, c3, c4)
    norm_uN: float
    relative_bound: float       # 2 delta_u / ||u_N||, nan if ||u_N|| = 0

    @property
    def proviso_ok(self):
        return bool(np.isfinite(self.relative_bound) and self.relative_bound <= 1.0)


def estimator_constants(rho1, alpha, beta, kappa, gamma=float("nan")):
    """c1..c4 of the error equivalence."""
    sa = np.sqrt(alpha)
    c1 = (1.0 / beta) * (1.0 / (rho1 * sa)
                         + (1.0 + 1.0 / (rho1**2 * beta)) * (kappa / (beta * rho1 * sa) + 1.0))
    c2 = (1.0 / beta) * (kappa / alpha + kappa**2 / (beta * alpha)
                         + kappa**2 / (rho1**2 * beta**2 * alpha) + 1.0)
    c3 = 1.0 / (2.0 * gamma) / max(kappa / beta, 1.0)
    c4 = 1.0 / (2.0 * gamma) / max(1.0 / (rho1**2 * beta), 1.0)
    return c1, c2, c3, c4


def estimate(ocp, mu, res, norm_uN, constants):
    """Upper and lower error bounds from residual dual norms."""
    beta, kappa, gamma = constants.beta, constants.kappa, constants.gamma
    if not (beta > 0 and kappa >= 0):
        raise ValueError(f"invalid stability constants {constants}")
    rho1, alpha = ocp.rho1, ocp.alpha
    c1, c2, c3, c4 = estimator_constants(rho1, alpha, beta, kappa, gamma)
    ry, rp = res.r_y_norm, res.r_p_norm
    delta_u = ry / (rho1 * np.sqrt(alpha) * beta) + kappa * rp / (alpha * beta)
    delta_uyp = c1 * ry + c2 * rp
    lower = c3 * ry + c4 * rp if np.isfinite(gamma) else float("nan")
    rel = 2.0 * delta_u / norm_uN if norm_uN > 0 else float("nan")
    return EstimatorReport(res, float(delta_u), float(delta_uyp), float(lower), constants,
                           rho1, alpha, (c1, c2, c3, c4), float(norm_uN), float(rel))


def _constants(ocp, mu, exact):
    if not exact:
        return ocp.surrogate_constants(mu)
    F = ocp.forms(mu)
    return exact_constants(F.A, ocp.K_Y, F.B, F.M_U)


def reduced_estimate(ocp, rb, mu, opts=None, exact=False):
    """Reduced solve, residuals and estimator at one parameter."""
    mu = ocp.check_mu(mu)
    forms = ocp.forms(mu)
    sol = solve_reduced(ocp, rb, mu, opts)
    res = compute_residuals(ocp, mu, sol, forms)
    constants = _constants(ocp, mu, exact)
    rep = estimate(ocp, mu, res, control_norm(sol.u, forms.weights), constants)
    return sol, rep


# -- greedy ------------------------------------------------------------------

ESTIMATORS = ("relative", "uyp")


@dataclass
class GreedyConfig:
    train: list
    tol: float = 1e-8
    n_max: int = 30
    estimator: str = "relative"
    dependence_threshold: float = 1e-10
    mu1: object = None
    exact_constants: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.train = [np.atleast_1d(np.asarray(m, dtype=float)) for m in self.train]
        if not self.train:
            raise ValueError("training set is empty")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.mu1 is None:
            self.mu1 = self.train[0]
        self.mu1 = np.atleast_1d(np.asarray(self.mu1, dtype=float))

    def validate(self, ocp):
        for m in self.train:
            ocp.check_mu(m)
        ocp.check_mu(self.mu1)


@dataclass
class GreedyRecord:
    N: int
    mu: np.ndarray              # parameter whose snapshots entered at this N
    max_estimator: float        # max over the training set with Y_N
    argmax: np.ndarray
    argmax_index: int
    dim: int
    seconds: float
    ortho_error: float


@dataclass
class GreedyHistory:
    records: list = field(default_factory=list)
    termination: str = None

    def __len__(self):
        return len(self.records)

    @property
    def max_estimators(self):
        return [r.max_estimator for r in self.records]


def _estimator_value(ocp, rb, mu, estimator, opts, exact=False):
    _, rep = reduced_estimate(ocp, rb, mu, opts, exact)
    if estimator == "relative":
        return rep.relative_bound if np.isfinite(rep.relative_bound) else np.inf
    return rep.delta_uyp


def sweep(fn, items, jobs=1):
    """Map `fn` over `items`, in order, optionally in worker processes."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


def greedy(ocp, cfg, jobs=1, full_solver=None, progress=None):
    """
    Greedy basis construction.

    Starts from the state/adjoint snapshots at ``cfg.mu1`` and repeatedly
    adds those at the arg max (first occurrence) of the estimator over the
    training set. Stops when the maximum is below ``cfg.tol``, when
    ``cfg.n_max`` parameters have been added, or when a new pair is
    entirely linearly dependent on the basis.
    """
    cfg.validate(ocp)
    opts = cfg.solver
    full_solver = full_solver or (lambda m: solve_full(ocp, m, opts))
    history = GreedyHistory()
    t0 = time.perf_counter()

    def snapshot(mu):
        sol = full_solver(mu)
        if not sol.converged:
            raise RuntimeError(f"full solve did not converge at mu={np.asarray(mu).tolist()}")
        return sol.y, sol.p

    rb, accepted = extend_orthonormal(RBSpace(ocp), snapshot(cfg.mu1),
                                      cfg.dependence_threshold, cfg.mu1)
    if accepted == 0:
        raise RuntimeError("initial snapshots are zero")
    mu_current = cfg.mu1
    N = 1
    while True:
        values = sweep(partial(_estimator_value, ocp, rb, estimator=cfg.estimator, opts=opts,
                               exact=cfg.exact_constants),
                       cfg.train, jobs)
        values = np.asarray(values, dtype=float)
        k = int(np.argmax(values))
        rec = GreedyRecord(N, mu_current, float(values[k]), cfg.train[k], k, rb.N,
                           time.perf_counter() - t0, orthonormality_error(rb))
        history.records.append(rec)
        if progress:
            progress(rec)
        log.info("N=%d dim=%d max estimator %.3e at mu=%s", N, rb.N, rec.max_estimator,
                 rec.argmax.tolist())
        if rec.max_estimator <= cfg.tol:
            history.termination = "tolerance"
            break
        if N >= cfg.n_max:
            history.termination = "N_max"
            break
        new_rb, accepted = extend_orthonormal(rb, snapshot(cfg.train[k]),
                                              cfg.dependence_threshold, cfg.train[k])
        if accepted == 0:
            history.termination = "linear_dependence"
            break
        rb, mu_current = new_rb, cfg.train[k]
        N += 1
    return rb, history


# -- evaluation --------------------------------------------------------------

def _rel(a, b):
    return a / b if b > 0 else float("nan")


def evaluate_on_test_set(ocp, rb, test_set, n_values=None, opts=None, full_solver=None,
                         jobs=1, exact=False):
    """
    True relative control errors and bounds for every prefix of `rb`.

    Returns ``(rows, summary)``: one dict per (N, mu) and one per N holding
    the maxima over the test set.
    """
    opts = opts or SolverOptions()
    full_solver = full_solver or (lambda m: solve_full(ocp, m, opts))
    n_values = list(n_values or range(1, len(rb.mus) + 1))
    truth = [full_solver(m) for m in test_set]
    rows = []
    for N in n_values:
        sub = rb.prefix(N)
        items = [(np.atleast_1d(m), t.u) for m, t in zip(test_set, truth)]
        rows.extend(sweep(partial(_evaluate_point, ocp, sub, N, opts, exact), items, jobs))
    summary = []
    for N in n_values:
        sel = [r for r in rows if r["N"] == N]
        summary.append({
            "N": N,
            "dim": sub_dim(rb, N),
            "max_rel_error": max(r["rel_error"] for r in sel),
            "max_rel_bound": max(r["rel_bound"] for r in sel),
            "max_delta_uyp": max(r["delta_uyp"] for r in sel),
            "violations": sum(r["proviso_ok"] and r["rel_error"] > r["rel_bound"] for r in sel),
        })
    return rows, summary


def sub_dim(rb, N):
    return int(sum(rb.counts[:N]))


def _evaluate_point(ocp, rb, N, opts, exact, item):
    mu, u_true = item
    weights = ocp.triangle_weights(mu)
    sol, rep = reduced_estimate(ocp, rb, mu, opts, exact)
    err = control_error(u_true, sol.u, weights)
    return {
        "N": N,
        "mu": mu,
        "rel_error": _rel(err, control_norm(u_true, weights)),
        "rel_bound": rep.relative_bound,
        "delta_u": rep.delta_u,
        "delta_uyp": rep.delta_uyp,
        "delta_lower": rep.delta_lower,
        "ry_norm": rep.residuals.r_y_norm,
        "rp_norm": rep.residuals.r_p_norm,
        "proviso_ok": rep.proviso_ok,
    }


# -- effectivity with exact constants ---------------------------------------

def _leq(a, b, scale, rtol=1e-8, atol=1e-10):
    return bool(a <= b * (1.0 + rtol) + atol * scale)


def effectivity_check(ocp, rb, N, mu, opts=None, full=None):
    """
    Error equivalence and the four auxiliary-solution bounds at (N, mu).

    Uses exact stability constants from the dense eigenvalue oracle.
    Comparisons allow a relative slack of 1e-8 plus 1e-10 times the size
    of the full solution, which absorbs round-off at sampled parameters.
    """
    opts = opts or SolverOptions()
    mu = ocp.check_mu(mu)
    F = ocp.forms(mu)
    sub = rb.prefix(N)
    full = full or solve_full(ocp, mu, opts)
    red = solve_reduced(ocp, sub, mu, opts)
    const = exact_constants(F.A, ocp.K_Y, F.B, F.M_U)
    res = compute_residuals(ocp, mu, red, F)
    rep = estimate(ocp, mu, res, control_norm(red.u, F.weights), const)

    K = ocp.K_Y
    e_u = control_error(full.u, red.u, F.weights)
    e_y = K.norm(full.y - red.y)
    e_p = K.norm(full.p - red.p)
    total = e_u + e_y + e_p

    lu = Factorization(F.A)
    luT = Factorization(F.A.T.tocsr())
    y_aux = lu.solve(integrate_control(red.u, F.weights)[ocp.free] + F.f)
    p_aux = luT.solve(F.M0 @ red.y - F.g_z)
    d_yaux = K.norm(full.y - y_aux)
    d_paux = K.norm(full.p - p_aux)
    d_yN = K.norm(y_aux - red.y)
    d_pN = K.norm(p_aux - red.p)

    b, g, k, r1 = const.beta, const.gamma, const.kappa, ocp.rho1
    ry, rp = res.r_y_norm, res.r_p_norm
    scale = control_norm(full.u, F.weights) + K.norm(full.y) + K.norm(full.p)
    checks = {
        "lower": _leq(rep.delta_lower, total, scale),
        "upper": _leq(total, rep.delta_uyp, scale),
        "y_yaux": _leq(d_yaux, k / b * e_u, scale),
        "p_paux": _leq(d_paux, e_y / (r1**2 * b), scale),
        "yN_yaux_lower": _leq(ry / g, d_yN, scale),
        "yN_yaux_upper": _leq(d_yN, ry / b, scale),
        "pN_paux_lower": _leq(rp / g, d_pN, scale),
        "pN_paux_upper": _leq(d_pN, rp / b, scale),
    }
    return {
        "N": N, "mu": mu, "err_u": e_u, "err_y": e_y, "err_p": e_p, "err_total": total,
        "delta_uyp": rep.delta_uyp, "delta_lower": rep.delta_lower,
        "beta": b, "gamma": g, "kappa": k,
        "ratio_y_yaux": _rel(d_yaux, k / b * e_u),
        "ratio_p_paux": _rel(d_paux, e_y / (r1**2 * b)),
        "ratio_yN_yaux": _rel(d_yN * b, ry),
        "ratio_pN_paux": _rel(d_pN * b, rp),
        "checks": checks,
        "ok": all(checks.values()),
    }


# -- fill distance -----------------------------------------------------------

def fill_distance(box, samples, resolution=201):
    """
    Largest distance from a point of the box to its nearest sample.

    Exact for one-dimensional boxes; evaluated on a tensor grid with
    `resolution` points per direction otherwise.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 1 and len(box) > 1 and samples.shape[1] != len(box):
        samples = samples.T
    if len(box) == 1:
        lo, hi = box[0]
        s = np.sort(samples[:, 0])
        gaps = np.diff(s) / 2.0
        return float(max(s[0] - lo, hi - s[-1], gaps.max() if gaps.size else 0.0))
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(box))
    d = np.min(np.linalg.norm(grid[:, None, :] - samples[None, :, :], axis=-1), axis=1)
    return float(d.max())
