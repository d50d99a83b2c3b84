"""
Affine-parametric elliptic control problems.

Two benchmarks are provided: the two-block thermal problem on the unit
square and the Graetz convection-diffusion problem, the latter pulled back
to the reference channel (0, 2.5) x (0, 1).
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .fem import (
    Component,
    GramMatrix,
    StabilityConstants,
    apply_dirichlet,
    assemble_component,
    build_rect_mesh,
)

__all__ = [
    "AffineForm",
    "AdmissibleSet",
    "ParametricOCP",
    "ParametrizedForms",
    "ParameterError",
    "StabilityConstants",
    "thermal_block",
    "graetz_flow",
    "evaluate_forms",
    "get_problem",
    "PROBLEMS",
]


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffineForm:
    """
    ``sum_q theta_q(mu) * components[q]``.

    `theta` must be a module-level callable (so problems pickle) returning
    one coefficient per component.
    """

    components: tuple
    theta: object
    symmetric: bool = False

    def __post_init__(self):
        shapes = {np.shape(c) for c in self.components}
        if len(shapes) > 1:
            raise ValueError(f"components disagree in shape: {shapes}")

    def coefficients(self, mu):
        coef = np.asarray(self.theta(mu), dtype=float)
        if coef.shape != (len(self.components),):
            raise ValueError("theta returned the wrong number of coefficients")
        if not np.all(np.isfinite(coef)):
            raise ParameterError(f"non-finite affine coefficient at mu={mu}")
        return coef

    def __call__(self, mu):
        coef = self.coefficients(mu)
        out = coef[0] * self.components[0]
        for c, comp in zip(coef[1:], self.components[1:]):
            out = out + c * comp
        return sp.csr_matrix(out) if sp.issparse(out) else out


@dataclass(frozen=True)
class AdmissibleSet:
    """Lower bound ``u_a(x) = a0 + a1 * x1 + a2 * x2``; no upper bound."""

    a0: float
    a1: float = 0.0
    a2: float = 0.0

    def __call__(self, x1, x2):
        return self.a0 + self.a1 * np.asarray(x1) + self.a2 * np.asarray(x2)


@dataclass(frozen=True)
class ParametrizedForms:
    """Operators of one parameter value, restricted to the free dofs."""

    A: sp.csr_matrix        # a(y, v): rows test v, columns trial y
    B: sp.csr_matrix        # b(u, v): rows free test v, columns all vertices
    f: np.ndarray
    M_U: sp.csr_matrix      # U inner product on all vertices
    M0: sp.csr_matrix       # observation mass on free dofs
    g_z: np.ndarray         # v -> (z, v)_{L2(Omega0)} on free dofs
    weights: np.ndarray     # per-triangle U weight
    symmetric: bool


@dataclass(eq=False)
class ParametricOCP:
    """
    Full description of one affine-parametric control problem.

    The state lives on the free (non-Dirichlet) vertices. Controls are
    functions on the whole mesh; ``b`` and the U inner product are the
    L2 pairing weighted per triangle by ``sum_q theta_q(mu) 1_{tags_q}``,
    which is the structure of both benchmarks.
    """

    name: str
    mesh: object
    free: np.ndarray
    box: tuple
    a: AffineForm
    u_weight_tags: tuple
    u_weight_theta: object
    f: AffineForm
    M0: AffineForm
    g_z: AffineForm
    alpha: float
    K_Y: GramMatrix
    rho1: float
    rho2: float
    beta_tilde: object
    kappa_tilde: object
    u_a: AdmissibleSet
    bounds: dict = field(default_factory=dict)
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.box = tuple((float(lo), float(hi)) for lo, hi in self.box)

    @property
    def n(self):
        return len(self.free)

    @property
    def num_params(self):
        return len(self.box)

    def check_mu(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape != (self.num_params,):
            raise ParameterError(f"{self.name} expects {self.num_params} parameters, got {mu.shape}")
        for k, (lo, hi) in enumerate(self.box):
            tol = 1e-12 * max(1.0, abs(hi))
            if not (lo - tol <= mu[k] <= hi + tol):
                raise ParameterError(f"mu[{k}]={mu[k]} outside [{lo}, {hi}]")
        return mu

    def triangle_weights(self, mu):
        coef = np.asarray(self.u_weight_theta(mu), dtype=float)
        w = np.zeros(self.mesh.num_triangles)
        for tags, c in zip(self.u_weight_tags, coef):
            w[self.mesh.tag_mask(tags)] += c
        return w

    @cached_property
    def _u_weight_masses(self):
        return tuple(assemble_component(self.mesh, Component("mass", tags))
                     for tags in self.u_weight_tags)

    def M_U(self, mu):
        coef = np.asarray(self.u_weight_theta(mu), dtype=float)
        return sp.csr_matrix(sum(c * M for c, M in zip(coef, self._u_weight_masses)))

    @cached_property
    def H1(self):
        """Gram matrix of the full H1 norm on the free dofs."""
        K = assemble_component(self.mesh, Component("diffusion"))
        M = assemble_component(self.mesh, Component("mass"))
        return GramMatrix(apply_dirichlet(K + M, None, self.dirichlet)[0])

    @cached_property
    def L2(self):
        """L2 Gram matrix (unweighted) on all vertices."""
        return assemble_component(self.mesh, Component("mass"))

    @property
    def dirichlet(self):
        return np.setdiff1d(np.arange(self.mesh.num_vertices), self.free)

    @cached_property
    def u_a_vertex(self):
        v = self.mesh.vertices
        return np.asarray(self.u_a(v[:, 0], v[:, 1]), dtype=float) * np.ones(len(v))

    def extend(self, x):
        """Zero-extend free-dof vector(s) to all vertices."""
        x = np.asarray(x)
        out = np.zeros((self.mesh.num_vertices,) + x.shape[1:])
        out[self.free] = x
        return out

    def surrogate_constants(self, mu):
        mu = np.atleast_1d(mu)
        # gamma has no surrogate; reported as nan
        return StabilityConstants(float(self.beta_tilde(mu)), float("nan"),
                                  float(self.kappa_tilde(mu)), "surrogate")

    def forms(self, mu):
        return evaluate_forms(self, mu)


def evaluate_forms(ocp, mu):
    """All operators of `ocp` at parameter `mu` (sums of theta_q * component)."""
    mu = ocp.check_mu(mu)
    M_U = ocp.M_U(mu)
    return ParametrizedForms(
        A=ocp.a(mu),
        B=sp.csr_matrix(M_U[ocp.free]),
        f=np.asarray(ocp.f(mu), dtype=float),
        M_U=M_U,
        M0=ocp.M0(mu),
        g_z=np.asarray(ocp.g_z(mu), dtype=float),
        weights=ocp.triangle_weights(mu),
        symmetric=ocp.a.symmetric,
    )


def _restrict(M, free):
    return sp.csr_matrix(M)[free][:, free]


# -- thermal block -----------------------------------------------------------

# Poincare constant of the unit square with homogeneous Dirichlet data
TB_CP = 1.0 / (np.sqrt(2.0) * np.pi)


def _tb_theta_a(mu):
    return (mu[0], 1.0)


def _one(mu):
    return (1.0,)


def _tb_beta_tilde(mu):
    return min(mu[0], 1.0)


def _tb_kappa_tilde(mu):
    return TB_CP


def thermal_block(nx=64, ny=None, alpha=1e-2, box=((0.5, 3.0),)):
    """
    Two-block heat conduction problem on the unit square.

    Diffusion mu on (0, 0.5) x (0, 1) and 1 on (0.5, 1) x (0, 1),
    distributed control, homogeneous Dirichlet data, target z = 1 on the
    whole domain and lower bound u_a = 2 + 2 (x1 - 0.5).
    """
    ny = nx if ny is None else ny
    if nx % 2:
        raise ValueError(f"nx must be even so that x1 = 0.5 is a grid line, got {nx}")
    mesh = build_rect_mesh((0.0, 1.0, 0.0, 1.0), nx, ny, x_splits=(0.5,))
    dirichlet = mesh.boundary_vertices()
    free = np.setdiff1d(np.arange(mesh.num_vertices), dirichlet)

    K1 = assemble_component(mesh, Component("diffusion", (1,)))
    K2 = assemble_component(mesh, Component("diffusion", (2,)))
    M = assemble_component(mesh, Component("mass"))
    a = AffineForm((_restrict(K1, free), _restrict(K2, free)), _tb_theta_a, symmetric=True)
    z = np.ones(mesh.num_vertices)
    f = AffineForm((np.zeros(len(free)),), _one)
    M0 = AffineForm((_restrict(M, free),), _one, symmetric=True)
    g_z = AffineForm(((M @ z)[free],), _one)
    K_Y = GramMatrix(_restrict(K1 + K2, free))

    rho1 = 1.0 / np.sqrt(TB_CP**2 + 1.0)
    return ParametricOCP(
        name="thermal-block",
        mesh=mesh,
        free=free,
        box=box,
        a=a,
        u_weight_tags=(None,),
        u_weight_theta=_one,
        f=f,
        M0=M0,
        g_z=g_z,
        alpha=alpha,
        K_Y=K_Y,
        rho1=rho1,
        rho2=1.0,
        beta_tilde=_tb_beta_tilde,
        kappa_tilde=_tb_kappa_tilde,
        u_a=AdmissibleSet(1.0, 2.0, 0.0),
        bounds={"beta0": min(box[0][0], 1.0), "gamma0": max(box[0][1], 1.0),
                "kappa0": TB_CP, "sigma0": 0.0},
        description={"nx": nx, "ny": ny, "cp": TB_CP},
    )


# -- Graetz flow -------------------------------------------------------------

GRAETZ_MU_REF = (5.0, 1.0)
# Poincare constant (squared form) of the channel with Dirichlet walls x2 = 0, 1
GRAETZ_CP = 1.0 / np.pi**2

# triangle tags: left block, right block, left/right observation regions
G_LEFT, G_RIGHT, G_OBS_LEFT, G_OBS_RIGHT = 1, 2, 3, 4
G_LEFT_ALL = (G_LEFT, G_OBS_LEFT)
G_RIGHT_ALL = (G_RIGHT, G_OBS_RIGHT)
# boundary tags of build_rect_mesh: bottom, outflow, top, inlet
G_DIRICHLET = (1, 3, 4)


def graetz_velocity(x1, x2):
    return x2 * (1.0 - x2), np.zeros_like(x2)


def _graetz_tags(cx, cy):
    left = cx < 1.0
    band = (cy > 0.3) & (cy < 0.7)
    obs_left = left & band & (cx > 0.2) & (cx < 0.8)
    obs_right = ~left & band & (cx > 1.2)
    tags = np.where(left, G_LEFT, G_RIGHT)
    tags = np.where(obs_left, G_OBS_LEFT, tags)
    return np.where(obs_right, G_OBS_RIGHT, tags)


def _gf_theta_a(mu):
    mu1, s = mu[0], mu[1]
    return (1.0 / (mu1 * s), s / mu1, 1.0 / mu1, 1.0)


def _gf_theta_u(mu):
    return (mu[1], 1.0)


def _gf_beta_tilde(mu):
    mu1, mu2 = mu[0], mu[1]
    ref = GRAETZ_MU_REF[0]
    return min(ref * min(1.0 / (mu1 * mu2), mu2 / mu1, 1.0 / mu1), 1.0)


def _gf_rho1():
    return max(GRAETZ_MU_REF[0] * (1.0 + GRAETZ_CP), 1.0) ** -2


def _gf_kappa_tilde(mu):
    return (np.sqrt(mu[1]) + 1.0) / _gf_rho1()


def graetz_flow(nx=100, ny=50, alpha=1e-2, box=((5.0, 18.0), (0.8, 1.2))):
    """
    Graetz flow on the reference channel (0, 2.5) x (0, 1).

    The physical channel is (0, 1.5 + mu2) x (0, 1); its left block
    (0, mu2) x (0, 1) is stretched onto (0, 1) x (0, 1) and its right block
    translated onto (1, 2.5) x (0, 1). The state is written as 1 + y0 with
    y0 = 0 on the inlet and the walls; the outflow is a Neumann boundary.
    """
    mesh = build_rect_mesh((0.0, 2.5, 0.0, 1.0), nx, ny,
                           x_splits=(0.2, 0.8, 1.0, 1.2), y_splits=(0.3, 0.7),
                           subdomain=_graetz_tags)
    dirichlet = mesh.boundary_vertices(G_DIRICHLET)
    free = np.setdiff1d(np.arange(mesh.num_vertices), dirichlet)

    Dx_l = assemble_component(mesh, Component("diffusion_x", G_LEFT_ALL))
    Dy_l = assemble_component(mesh, Component("diffusion_y", G_LEFT_ALL))
    D_r = assemble_component(mesh, Component("diffusion", G_RIGHT_ALL))
    C = assemble_component(mesh, Component("convection", None, graetz_velocity))
    a = AffineForm(tuple(_restrict(X, free) for X in (Dx_l, Dy_l, D_r, C)), _gf_theta_a)

    M_ol = assemble_component(mesh, Component("mass", (G_OBS_LEFT,)))
    M_or = assemble_component(mesh, Component("mass", (G_OBS_RIGHT,)))
    M0 = AffineForm((_restrict(M_ol, free), _restrict(M_or, free)), _gf_theta_u, symmetric=True)
    # lifted target z - 1 on the two observation regions
    ones = np.ones(mesh.num_vertices)
    g_z = AffineForm(((-0.5 * (M_ol @ ones))[free], (1.0 * (M_or @ ones))[free]), _gf_theta_u)
    f = AffineForm((np.zeros(len(free)),), _one)

    K = assemble_component(mesh, Component("diffusion"))
    K_Y = GramMatrix(_restrict(K / GRAETZ_MU_REF[0] + 0.5 * (C + C.T), free))

    rho1 = _gf_rho1()
    return ParametricOCP(
        name="graetz",
        mesh=mesh,
        free=free,
        box=box,
        a=a,
        u_weight_tags=(G_LEFT_ALL, G_RIGHT_ALL),
        u_weight_theta=_gf_theta_u,
        f=f,
        M0=M0,
        g_z=g_z,
        alpha=alpha,
        K_Y=K_Y,
        rho1=rho1,
        # trace of the outflow bounded by the H1 norm since y0 vanishes at the inlet
        rho2=float(np.sqrt(1.0 / GRAETZ_MU_REF[0] + 1.0 / 8.0)),
        beta_tilde=_gf_beta_tilde,
        kappa_tilde=_gf_kappa_tilde,
        u_a=AdmissibleSet(-0.5),
        bounds={"beta0": min(_gf_beta_tilde((box[0][1], m2)) for m2 in box[1]),
                "kappa0": (np.sqrt(box[1][1]) + 1.0) / rho1, "sigma0": 0.0},
        description={"nx": nx, "ny": ny, "cp": GRAETZ_CP, "mu_ref": GRAETZ_MU_REF},
    )


PROBLEMS = {"thermal-block": thermal_block, "graetz": graetz_flow}


def get_problem(name, **kwargs):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)
