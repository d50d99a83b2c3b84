"""
P1 finite elements on tagged rectangle triangulations.

Meshing, assembly of parameter-independent operator components, Dirichlet
elimination, sparse direct solves, Riesz representatives and the dense
eigenvalue oracle for stability constants.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Mesh",
    "Component",
    "Factorization",
    "GramMatrix",
    "StabilityConstants",
    "MeshError",
    "SingularOperatorError",
    "build_rect_mesh",
    "assemble_component",
    "assemble_load",
    "apply_dirichlet",
    "factorize",
    "riesz_dual_norm",
    "exact_constants",
    "is_symmetric",
    "EXACT_CONSTANTS_MAX_DIM",
]

# largest dimension accepted by the dense eigenvalue oracle
EXACT_CONSTANTS_MAX_DIM = 2000


class MeshError(ValueError):
    pass


class SingularOperatorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Triangulation of an axis-aligned rectangle.

    Attributes
    ----------
    vertices : (nv, 2) array
    triangles : (nt, 3) int array, counter-clockwise
    subdomain : (nt,) int array of per-triangle tags
    edges : (ne, 2) int array of boundary edges
    boundary : (ne,) int array of per-edge tags
    h : float
        largest cell diagonal
    """

    vertices: np.ndarray
    triangles: np.ndarray
    subdomain: np.ndarray
    edges: np.ndarray
    boundary: np.ndarray
    h: float
    rect: tuple = field(default=(0.0, 1.0, 0.0, 1.0))

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def areas(self):
        return _signed_areas(self.vertices, self.triangles)

    @property
    def tags(self):
        return tuple(int(t) for t in np.unique(self.subdomain))

    def boundary_vertices(self, tags=None):
        """Vertex indices on boundary edges carrying one of `tags` (all if None)."""
        mask = np.ones(len(self.edges), dtype=bool)
        if tags is not None:
            mask = np.isin(self.boundary, np.atleast_1d(tags))
        return np.unique(self.edges[mask].ravel())

    def tag_mask(self, tags):
        if tags is None:
            return np.ones(self.num_triangles, dtype=bool)
        tags = np.atleast_1d(tags)
        missing = set(tags.tolist()) - set(self.tags)
        if missing:
            raise MeshError(f"tags {sorted(missing)} not present in mesh")
        return np.isin(self.subdomain, tags)


def _signed_areas(vertices, triangles):
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _grid_index(value, lo, hi, n, axis):
    t = (value - lo) / (hi - lo) * n
    k = int(round(t))
    if not (0 < k < n) or abs(t - k) > 1e-9:
        raise MeshError(
            f"split line {axis}={value} does not lie on an interior grid line "
            f"of {n} cells over [{lo}, {hi}]; choose n{axis} so that "
            f"(value - {lo}) * n{axis} / {hi - lo} is an integer"
        )
    return k


def build_rect_mesh(rect, nx, ny, x_splits=(), y_splits=(), subdomain=None,
                    boundary=None):
    """
    Uniform triangulation of a rectangle, two triangles per grid cell.

    Parameters
    ----------
    rect : (x0, x1, y0, y1)
    nx, ny : int
        number of cells per direction
    x_splits, y_splits : sequence of float
        interior lines that must coincide with grid lines
    subdomain : callable, optional
        ``subdomain(cx, cy) -> int array`` evaluated at triangle centroids.
        Default numbers the blocks cut out by the split lines row by row,
        starting at 1.
    boundary : callable, optional
        ``boundary(mx, my) -> int array`` evaluated at boundary edge
        midpoints. Default: 1 bottom, 2 right, 3 top, 4 left.
    """
    x0, x1, y0, y1 = map(float, rect)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate rectangle")
    for xs in x_splits:
        _grid_index(xs, x0, x1, nx, "x")
    for ys in y_splits:
        _grid_index(ys, y0, y1, ny, "y")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])

    centroids = vertices[triangles].mean(axis=1)
    if subdomain is None:
        bx = np.searchsorted(np.sort(np.asarray(x_splits, float)), centroids[:, 0])
        by = np.searchsorted(np.sort(np.asarray(y_splits, float)), centroids[:, 1])
        tags = 1 + by * (len(x_splits) + 1) + bx
    else:
        tags = np.asarray(subdomain(centroids[:, 0], centroids[:, 1]), dtype=np.int64)
        tags = np.broadcast_to(tags, (len(triangles),)).copy()

    b = np.arange(nx + 1)
    l = np.arange(ny + 1)
    bottom = np.column_stack([b[:-1], b[1:]])
    top = np.column_stack([b[1:], b[:-1]]) + ny * (nx + 1)
    right = np.column_stack([l[:-1], l[1:]]) * (nx + 1) + nx
    left = np.column_stack([l[1:], l[:-1]]) * (nx + 1)
    edges = np.vstack([bottom, right, top, left])
    if boundary is None:
        btags = np.repeat([1, 2, 3, 4], [nx, ny, nx, ny])
    else:
        mid = vertices[edges].mean(axis=1)
        btags = np.asarray(boundary(mid[:, 0], mid[:, 1]), dtype=np.int64)
        btags = np.broadcast_to(btags, (len(edges),)).copy()

    h = float(np.hypot((x1 - x0) / nx, (y1 - y0) / ny))
    return Mesh(vertices, triangles, tags, edges, btags, h, (x0, x1, y0, y1))


@dataclass(frozen=True)
class Component:
    """
    Descriptor of one parameter-independent bilinear form.

    kind is one of ``"diffusion"`` (grad . grad), ``"diffusion_x"``,
    ``"diffusion_y"`` (single partial derivatives), ``"convection"``
    (``(velocity . grad u) v``) or ``"mass"``. ``tags`` restricts the
    integral to triangles with those subdomain tags (None means all).
    """

    kind: str
    tags: tuple = None
    velocity: object = None


_KINDS = ("diffusion", "diffusion_x", "diffusion_y", "convection", "mass")

# Strang-Fix 7-point rule, exact for polynomials of degree 5
_S7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [0.059715871789770, 0.470142064105115, 0.470142064105115],
    [0.470142064105115, 0.059715871789770, 0.470142064105115],
    [0.470142064105115, 0.470142064105115, 0.059715871789770],
    [0.797426985353087, 0.101286507323456, 0.101286507323456],
    [0.101286507323456, 0.797426985353087, 0.101286507323456],
    [0.101286507323456, 0.101286507323456, 0.797426985353087],
])
_S7_W = np.array([0.225, 0.132394152788506, 0.132394152788506,
                  0.132394152788506, 0.125939180544827, 0.125939180544827,
                  0.125939180544827])
# refine the tabulated rule to full double precision
_a1 = (6 - np.sqrt(15)) / 21
_a2 = (6 + np.sqrt(15)) / 21
_S7_BARY[1:4] = [[1 - 2 * _a1, _a1, _a1], [_a1, 1 - 2 * _a1, _a1], [_a1, _a1, 1 - 2 * _a1]]
_S7_BARY[4:7] = [[1 - 2 * _a2, _a2, _a2], [_a2, 1 - 2 * _a2, _a2], [_a2, _a2, 1 - 2 * _a2]]
_S7_W[1:4] = (155 - np.sqrt(15)) / 1200
_S7_W[4:7] = (155 + np.sqrt(15)) / 1200


def _p1_gradients(mesh, idx):
    """Barycentric gradients (nt, 3, 2) and areas of the selected triangles."""
    p = mesh.vertices[mesh.triangles[idx]]
    area = _signed_areas(mesh.vertices, mesh.triangles[idx])
    # grad lambda_k is the rotated opposite edge over 2|T|
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area)[:, None, None]
    return grads, area


def _local_matrices(mesh, comp, idx):
    grads, area = _p1_gradients(mesh, idx)
    if comp.kind == "mass":
        base = (np.ones((3, 3)) + np.eye(3)) / 12
        return area[:, None, None] * base
    if comp.kind == "diffusion":
        return area[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    if comp.kind in ("diffusion_x", "diffusion_y"):
        d = 0 if comp.kind == "diffusion_x" else 1
        g = grads[..., d]
        return area[:, None, None] * g[:, :, None] * g[:, None, :]
    if comp.kind == "convection":
        if comp.velocity is None:
            raise ValueError("convection component needs a velocity field")
        p = mesh.vertices[mesh.triangles[idx]]
        qx = np.einsum("qk,tkd->tqd", _S7_BARY, p)
        vel = np.stack(comp.velocity(qx[..., 0], qx[..., 1]), axis=-1)
        vel = np.broadcast_to(vel, qx.shape)
        # (beta . grad phi_j)(x_q) * phi_i(x_q), summed with weights
        bgrad = np.einsum("tqd,tjd->tqj", vel, grads)
        return area[:, None, None] * np.einsum("q,qi,tqj->tij", _S7_W, _S7_BARY, bgrad)
    raise ValueError(f"unknown component kind {comp.kind!r}; expected one of {_KINDS}")


def assemble_component(mesh, comp):
    """
    Assemble one component over all mesh vertices (no boundary conditions).

    Returns a CSR matrix of size ``(nv, nv)``; row i is the test function.
    """
    if comp.kind not in _KINDS:
        raise ValueError(f"unknown component kind {comp.kind!r}; expected one of {_KINDS}")
    idx = np.flatnonzero(mesh.tag_mask(comp.tags))
    local = _local_matrices(mesh, comp, idx)
    tri = mesh.triangles[idx]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.num_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_load(mesh, density, tags=None):
    """Load vector ``v -> int density * v`` for a P1 density given at vertices."""
    M = assemble_component(mesh, Component("mass", tags))
    return M @ np.broadcast_to(np.asarray(density, float), (mesh.num_vertices,))


def apply_dirichlet(op, rhs, dofs):
    """
    Symmetric elimination of homogeneous Dirichlet dofs.

    Returns ``(reduced_op, reduced_rhs, free)`` where `free` maps reduced
    indices to full ones.
    """
    n = op.shape[0]
    dofs = np.unique(np.asarray(dofs, dtype=np.int64))
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise IndexError(f"Dirichlet dof out of range [0, {n})")
    free = np.setdiff1d(np.arange(n), dofs)
    op = sp.csr_matrix(op)
    reduced = op[free][:, free]
    rhs = None if rhs is None else np.asarray(rhs)[free]
    return reduced, rhs, free


def is_symmetric(op, tol=1e-14):
    op = sp.csr_matrix(op)
    diff = abs(op - op.T)
    scale = max(abs(op).max(), 1.0) if op.nnz else 1.0
    return diff.nnz == 0 or diff.max() <= tol * scale


class Factorization:
    """Sparse direct factorization; reusable for any number of solves."""

    # relative residual above which a solve is treated as garbage
    GARBAGE_TOL = 1e-6

    def __init__(self, op, symmetric=False):
        op = sp.csc_matrix(op)
        if op.shape[0] != op.shape[1]:
            raise ValueError(f"operator must be square, got {op.shape}")
        self.op = op
        self.symmetric = symmetric
        self.n = op.shape[0]
        if self.n == 0:
            self._lu = None
            return
        try:
            if symmetric:
                # symmetric ordering without off-diagonal pivoting (LDL^T on SPD input)
                self._lu = spla.splu(op, permc_spec="MMD_AT_PLUS_A",
                                     diag_pivot_thresh=0.0,
                                     options={"SymmetricMode": True})
            else:
                self._lu = spla.splu(op)
        except RuntimeError as exc:
            raise SingularOperatorError(f"factorization failed: {exc}") from exc
        if not np.all(np.isfinite(self._lu.U.diagonal())) or np.any(self._lu.U.diagonal() == 0):
            raise SingularOperatorError("operator is singular")

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.n == 0:
            return np.zeros_like(rhs)
        x = self._lu.solve(rhs)
        res = self.op @ x - rhs
        nrm = np.linalg.norm(rhs)
        inaccurate = nrm > 0 and np.linalg.norm(res) > self.GARBAGE_TOL * nrm
        if inaccurate or not np.all(np.isfinite(x)):
            raise SingularOperatorError("solve produced a non-finite or inaccurate result")
        return x


def factorize(op, symmetric=None):
    if symmetric is None:
        symmetric = is_symmetric(op)
    return Factorization(op, symmetric)


class GramMatrix:
    """SPD matrix defining an inner product, with a cached factorization."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix)
        self._fact = None

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def factorization(self):
        if self._fact is None:
            self._fact = Factorization(self.matrix, symmetric=True)
        return self._fact

    def solve(self, rhs):
        return self.factorization.solve(rhs)

    def inner(self, x, y):
        return float(x @ (self.matrix @ y))

    def norm(self, x):
        return float(np.sqrt(max(self.inner(x, x), 0.0)))

    def __getstate__(self):
        # SuperLU objects do not pickle; refactor lazily after transfer
        return {"matrix": self.matrix, "_fact": None}


def riesz_dual_norm(K, r):
    """Riesz representative of the functional `r` and its dual norm."""
    r = np.asarray(r, dtype=float)
    if r.shape[0] != K.n:
        raise ValueError(f"functional has length {r.shape[0]}, Gram dimension is {K.n}")
    if not np.any(r):
        return np.zeros_like(r), 0.0
    v = K.solve(r)
    return v, float(np.sqrt(max(r @ v, 0.0)))


@dataclass(frozen=True)
class StabilityConstants:
    """Coercivity `beta`, continuity `gamma` of a and continuity `kappa` of b."""

    beta: float
    gamma: float
    kappa: float
    provenance: str = "surrogate"

    def __post_init__(self):
        if self.provenance not in ("surrogate", "exact-eigen"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def exact_constants(A, K, B=None, M_U=None, max_dim=EXACT_CONSTANTS_MAX_DIM):
    """
    Stability constants of ``a`` and ``b`` by dense generalized eigenproblems.

    Parameters
    ----------
    A : (n, n) operator of a(., .; mu) on the free dofs, rows = test
    K : GramMatrix or (n, n) matrix of the Y inner product
    B : (n, m) operator of b(., .; mu), rows = Y test, columns = U coefficients
    M_U : (m, m) Gram matrix of the U inner product

    beta is the smallest eigenvalue of sym(A) relative to K, gamma the
    largest singular value of A in K geometry and kappa the largest
    singular value of B between (U, M_U) and (Y, K). Only meant as an
    oracle on small meshes.
    """
    Kd = _dense(K.matrix if isinstance(K, GramMatrix) else K)
    n = Kd.shape[0]
    if n > max_dim:
        raise ValueError(f"dimension {n} exceeds the dense eigen oracle limit {max_dim}")
    Ad = _dense(A)
    L = la.cholesky(Kd, lower=True)
    beta = float(la.eigh(0.5 * (Ad + Ad.T), Kd, eigvals_only=True)[0])
    # K^{-1/2} A K^{-T/2} with the Cholesky factor
    At = la.solve_triangular(L, la.solve_triangular(L, Ad, lower=True).T, lower=True).T
    gamma = float(la.svdvals(At)[0])
    kappa = float("nan")
    if B is not None:
        Bd = _dense(B)
        Md = _dense(M_U) if M_U is not None else np.eye(Bd.shape[1])
        S = Bd @ la.solve(Md, Bd.T, assume_a="pos")
        kappa = float(np.sqrt(max(la.eigh(0.5 * (S + S.T), Kd, eigvals_only=True)[-1], 0.0)))
    return StabilityConstants(beta, gamma, kappa, "exact-eigen")
