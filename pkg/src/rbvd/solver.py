"""
Optimality-system solvers.

`solve_full` and `solve_reduced` run the primal-dual active set method,
which here coincides with semismooth Newton applied to
``p -> b(max(u_a, -p/alpha), .)``: with the kink geometry frozen at the
current adjoint, the control on the inactive region is ``-p/alpha`` and
the coupled state/adjoint system becomes linear.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .control import active_measure, control_from_adjoint, inactive_mass
from .fem import Factorization, SingularOperatorError

__all__ = [
    "SolverOptions",
    "OCPSolution",
    "ReducedSolution",
    "SampledControl",
    "SolverError",
    "solve_full",
    "solve_reduced",
    "projected_gradient_oracle",
    "subdivision_rule",
    "sample_control",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-11
    max_newton_iters: int = 50
    # steps below this are treated as round-off once the active set repeats
    stagnation_tol: float = 1e-9
    oracle_step: float = None
    oracle_tol: float = 1e-13
    oracle_max_iters: int = 2000
    oracle_subdivisions: int = 64


@dataclass(eq=False)
class OCPSolution:
    y: np.ndarray
    p: np.ndarray
    u: object
    iterations: int
    final_active_measure: float
    converged: bool
    steps: list = field(default_factory=list)
    classifications: list = field(default_factory=list)


@dataclass(eq=False)
class ReducedSolution:
    y_N: np.ndarray
    p_N: np.ndarray
    y: np.ndarray
    p: np.ndarray
    u: object
    iterations: int
    converged: bool
    steps: list = field(default_factory=list)


def _step_norm(ocp, M_U, dp_ext):
    return float(np.sqrt(max(dp_ext @ (M_U @ dp_ext), 0.0))) / ocp.alpha


def _stagnated(steps, codes, opts):
    """Round-off floor: the step stopped shrinking and the active set repeats."""
    if len(steps) < 2 or len(codes) < 2:
        return False
    return (steps[-1] <= opts.stagnation_tol and steps[-1] >= 0.5 * steps[-2]
            and np.array_equal(codes[-1], codes[-2]))


def solve_full(ocp, mu, opts=None, p0=None):
    """
    Full-order optimality system at `mu`.

    Stops when ``||p_k - p_{k+1}||_U / alpha <= newton_tol``. Returns
    ``converged=False`` if `max_newton_iters` is exceeded.
    """
    opts = opts or SolverOptions()
    mu = ocp.check_mu(mu)
    F = ocp.forms(mu)
    free, alpha = ocp.free, ocp.alpha
    ua = ocp.u_a_vertex
    Bua = (F.M_U @ ua)[free]
    p = np.zeros(ocp.n) if p0 is None else np.asarray(p0, dtype=float).copy()
    u = control_from_adjoint(ocp, mu, p)
    steps, codes = [], [u.code]
    y = np.zeros(ocp.n)
    AT = F.A.T.tocsr()
    converged = False
    for it in range(1, opts.max_newton_iters + 1):
        MI = inactive_mass(u, F.weights)
        MI_ff = MI[free][:, free]
        K = sp.bmat([[F.A, MI_ff / alpha], [-F.M0, AT]], format="csc")
        rhs = np.concatenate([F.f + Bua - (MI @ ua)[free], -F.g_z])
        try:
            sol = Factorization(K).solve(rhs)
        except SingularOperatorError as exc:
            raise SolverError(f"singular optimality system at mu={mu.tolist()}: {exc}") from exc
        y, p_new = sol[:ocp.n], sol[ocp.n:]
        steps.append(_step_norm(ocp, F.M_U, ocp.extend(p_new - p)))
        p = p_new
        u = control_from_adjoint(ocp, mu, p)
        codes.append(u.code)
        if steps[-1] <= opts.newton_tol or _stagnated(steps, codes, opts):
            converged = True
            break
    if not converged:
        log.warning("full solve at mu=%s not converged after %d iterations (last step %.3e)",
                    mu.tolist(), opts.max_newton_iters, steps[-1])
    return OCPSolution(y, p, u, it, active_measure(u, F.weights), converged, steps, codes)


def solve_reduced(ocp, rb, mu, opts=None):
    """
    Reduced optimality system on the span of ``rb.basis``.

    The control term is integrated against full FE test functions and then
    projected; no offline/online splitting is attempted.
    """
    opts = opts or SolverOptions()
    if rb.N == 0:
        raise ValueError("reduced basis is empty")
    mu = ocp.check_mu(mu)
    F = ocp.forms(mu)
    alpha = ocp.alpha
    Phi, Phi_e = rb.basis, rb.basis_ext
    N = Phi.shape[1]
    ua = ocp.u_a_vertex
    Ar = Phi.T @ (F.A @ Phi)
    M0r = Phi.T @ (F.M0 @ Phi)
    MUr = Phi_e.T @ (F.M_U @ Phi_e)
    fr = Phi.T @ F.f
    gr = Phi.T @ F.g_z
    Buar = Phi_e.T @ (F.M_U @ ua)

    pN = np.zeros(N)
    yN = np.zeros(N)
    u = control_from_adjoint(ocp, mu, np.zeros(ocp.mesh.num_vertices))
    steps, codes = [], [u.code]
    converged = False
    for it in range(1, opts.max_newton_iters + 1):
        MI = inactive_mass(u, F.weights)
        MIr = Phi_e.T @ (MI @ Phi_e)
        K = np.block([[Ar, MIr / alpha], [-M0r, Ar.T]])
        rhs = np.concatenate([fr + Buar - Phi_e.T @ (MI @ ua), -gr])
        try:
            sol = la.solve(K, rhs)
        except la.LinAlgError as exc:
            raise SolverError(f"singular reduced system at mu={mu.tolist()}: {exc}") from exc
        yN, pN_new = sol[:N], sol[N:]
        dp = pN_new - pN
        steps.append(float(np.sqrt(max(dp @ (MUr @ dp), 0.0))) / alpha)
        pN = pN_new
        u = control_from_adjoint(ocp, mu, Phi_e @ pN)
        codes.append(u.code)
        if steps[-1] <= opts.newton_tol or _stagnated(steps, codes, opts):
            converged = True
            break
    if not converged:
        log.warning("reduced solve at mu=%s not converged after %d iterations",
                    mu.tolist(), opts.max_newton_iters)
    return ReducedSolution(yN, pN, Phi @ yN, Phi @ pN, u, it, converged, steps)


# -- projected gradient oracle ----------------------------------------------

def subdivision_rule(m):
    """
    Composite edge-midpoint rule on the reference triangle split into m^2
    congruent pieces. Returns barycentric points (3 m^2, 3) and weights
    summing to one.
    """
    pts, wts = [], []
    h = 1.0 / m
    for i in range(m):
        for j in range(m - i):
            # upward piece with corners (i, j), (i+1, j), (i, j+1) in (x, y) grid units
            corners = [np.array([i, j]) * h, np.array([i + 1, j]) * h, np.array([i, j + 1]) * h]
            pieces = [corners]
            if i + j < m - 1:
                pieces.append([np.array([i + 1, j]) * h, np.array([i + 1, j + 1]) * h,
                               np.array([i, j + 1]) * h])
            for c in pieces:
                for a, b in ((0, 1), (1, 2), (2, 0)):
                    xy = 0.5 * (c[a] + c[b])
                    pts.append([1.0 - xy[0] - xy[1], xy[0], xy[1]])
                    wts.append(1.0 / (3 * m * m))
    return np.array(pts), np.array(wts)


@dataclass(eq=False)
class SampledControl:
    """Control given by its values at fixed quadrature points of every triangle."""

    values: np.ndarray      # (nt, q)
    bary: np.ndarray        # (q, 3)
    weights: np.ndarray     # (q,), summing to one per triangle

    def norm(self, areas, tri_weights):
        return float(np.sqrt(np.sum(areas * tri_weights * (self.values**2 @ self.weights))))


def projected_gradient_oracle(ocp, mu, step=None, max_iters=None, tol=None, opts=None):
    """
    Gradient projection for the reduced control functional.

    The control is a free function on a fine point set (a composite rule on
    each triangle subdivided `oracle_subdivisions`^2 times); state and
    adjoint stay P1. Iterates ``u <- max(u_a, u - s (alpha u + p(u)))``
    until the relative change in U-norm drops below `tol`.
    """
    opts = opts or SolverOptions()
    step = opts.oracle_step if step is None else step
    max_iters = opts.oracle_max_iters if max_iters is None else max_iters
    tol = opts.oracle_tol if tol is None else tol
    mu = ocp.check_mu(mu)
    F = ocp.forms(mu)
    mesh = ocp.mesh
    tri = mesh.triangles
    bary, qw = subdivision_rule(opts.oracle_subdivisions)
    areas = mesh.areas
    wtri = F.weights
    scale = (areas * wtri)[:, None] * qw[None, :]
    ua = ocp.u_a_vertex[tri] @ bary.T
    lu = Factorization(F.A)

    def load(values):
        local = (values * scale) @ bary
        return np.bincount(tri.ravel(), weights=local.ravel(), minlength=mesh.num_vertices)[ocp.free]

    luT = Factorization(F.A.T.tocsr())

    def state_adjoint(values):
        y = lu.solve(load(values) + F.f)
        p = luT.solve(F.M0 @ y - F.g_z)
        return y, p

    def at_points(v_free):
        return ocp.extend(v_free)[tri] @ bary.T

    def inner(a, b):
        return float(np.sum(scale * a * b))

    if step is None:
        # power iteration for the largest eigenvalue of the linear part of u -> p(u)
        g = np.ones_like(ua)
        y0, p0 = state_adjoint(np.zeros_like(ua))
        lam = 0.0
        for _ in range(30):
            g /= np.sqrt(inner(g, g))
            _, pg = state_adjoint(g)
            h = at_points(pg - p0)
            lam = inner(g, h)
            g = h
        step = 1.0 / (ocp.alpha + abs(lam))

    u = np.maximum(ua, 0.0)
    converged = False
    for it in range(1, max_iters + 1):
        y, p = state_adjoint(u)
        u_new = np.maximum(ua, u - step * (ocp.alpha * u + at_points(p)))
        change = np.sqrt(inner(u_new - u, u_new - u))
        u = u_new
        if change <= tol * max(np.sqrt(inner(u, u)), 1e-300):
            converged = True
            break
    if not converged:
        log.warning("projected gradient oracle not converged at mu=%s", mu.tolist())
    y, p = state_adjoint(u)
    sampled = SampledControl(u, bary, qw)
    measure = float(np.sum(scale * (u <= ua)))
    return OCPSolution(y, p, sampled, it, measure, converged)


def sample_control(u, bary, qw):
    """Evaluate a ControlFunction at the oracle's quadrature points."""
    tri = u.mesh.triangles
    c = u.candidate[tri] @ bary.T
    l = u.lower[tri] @ bary.T
    return SampledControl(np.maximum(c, l), bary, qw)
