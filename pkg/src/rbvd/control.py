"""
Variationally discretized controls.

The control is never expanded in a basis: it is the pointwise projection
``u = max(u_a, -p / alpha)`` of the P1 adjoint. On every triangle the
difference ``d = -p / alpha - u_a`` is affine, so the kink ``d = 0`` is a
straight segment. Integrals involving ``u`` are evaluated exactly by
clipping triangles along kinks and applying a rule exact for quadratics on
the resulting convex pieces.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ACTIVE",
    "INACTIVE",
    "SPLIT",
    "ControlFunction",
    "TriangleData",
    "control_from_adjoint",
    "integrate_control",
    "inactive_mass",
    "control_norm",
    "control_error",
    "active_measure",
    "clip_polygons",
    "integrate_on_polygons",
]

INACTIVE, ACTIVE, SPLIT = 0, 1, 2

# pieces smaller than this fraction of their triangle are dropped
DEGENERATE_AREA = 1e-14


class TriangleData:
    """Per-mesh geometry reused by every control evaluation."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.triangles = mesh.triangles
        self.nv = mesh.num_vertices
        self.nt = mesh.num_triangles
        self.areas = mesh.areas
        tri = self.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        # CSR pattern of the P1 mass matrix; entries ordered by (row, col)
        keys = np.unique(rows * self.nv + cols)
        self.indices = keys % self.nv
        self.indptr = np.searchsorted(keys // self.nv, np.arange(self.nv + 1))
        self.slot = np.searchsorted(keys, rows * self.nv + cols).reshape(self.nt, 9)

    def assemble(self, local):
        """Sum (nt, 3, 3) element matrices into the fixed CSR pattern."""
        data = np.bincount(self.slot.ravel(), weights=local.ravel(),
                           minlength=self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.nv, self.nv))


def triangle_data(mesh):
    cached = getattr(mesh, "_triangle_data", None)
    if cached is None:
        cached = TriangleData(mesh)
        object.__setattr__(mesh, "_triangle_data", cached)
    return cached


def clip_polygons(poly, count, g):
    """
    Clip convex polygons to the half-plane ``g >= 0``.

    Polygons are given by barycentric coordinates of their vertices with
    respect to a parent triangle, ``poly`` of shape (m, V, 3) with the first
    ``count[i]`` rows valid. ``g`` holds the values of an affine function at
    the parent's vertices, shape (m, 3). Returns arrays of capacity V + 1.
    """
    m, V, _ = poly.shape
    vals = np.einsum("mvk,mk->mv", poly, g)
    out = np.zeros((m, V + 1, 3))
    ocount = np.zeros(m, dtype=np.int64)
    rows = np.arange(m)
    for k in range(V):
        valid = k < count
        nxt = np.where(k + 1 < count, k + 1, 0)
        gc = vals[:, k]
        gn = vals[rows, nxt]
        inc = gc >= 0
        inn = gn >= 0
        r = rows[valid & inc]
        out[r, ocount[r]] = poly[r, k]
        ocount[r] += 1
        r = rows[valid & (inc != inn)]
        if r.size:
            t = gc[r] / (gc[r] - gn[r])
            out[r, ocount[r]] = poly[r, k] + t[:, None] * (poly[r, nxt[r]] - poly[r, k])
            ocount[r] += 1
    return out, ocount


def _full_triangles(m):
    poly = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    return poly, np.full(m, 3, dtype=np.int64)


# edge-midpoint rule on a sub-triangle, exact for quadratics
_MID = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def integrate_on_polygons(poly, count, area, integrand):
    """
    Integrate over fan-triangulated convex polygons.

    ``integrand(bary)`` receives barycentric points of shape (m, q, 3) and
    returns values of shape (m, q, ...). Exact when the integrand is a
    polynomial of degree two on every piece. ``area`` is the parent
    triangle area, shape (m,).
    """
    m, V, _ = poly.shape
    total = None
    for j in range(1, V - 1):
        use = j + 1 < count
        b0, b1, b2 = poly[:, 0], poly[:, j], poly[:, j + 1]
        rel = np.abs(np.linalg.det(np.stack([b0, b1, b2], axis=1)))
        rel = np.where(use & (rel > DEGENERATE_AREA), rel, 0.0)
        corners = np.stack([b0, b1, b2], axis=1)
        pts = np.einsum("qk,mkc->mqc", _MID, corners)
        vals = integrand(pts)
        w = (rel * area / 3.0).reshape((m, 1) + (1,) * (vals.ndim - 2))
        contrib = (w * vals).sum(axis=1)
        total = contrib if total is None else total + contrib
    return total


@dataclass(frozen=True, eq=False)
class ControlFunction:
    """
    ``u = max(u_a, candidate)`` on a P1 mesh.

    Attributes
    ----------
    candidate, lower : (nv,) vertex values of the two affine pieces
    code : (nt,) per-triangle class (INACTIVE, ACTIVE or SPLIT)
    kinks : (nsplit, 2, 2) endpoints of the kink segment of split triangles
    """

    mesh: object
    candidate: np.ndarray
    lower: np.ndarray
    code: np.ndarray
    kinks: np.ndarray

    @property
    def diff(self):
        return self.candidate - self.lower

    @property
    def split(self):
        return np.flatnonzero(self.code == SPLIT)

    def evaluate(self, tri, bary):
        """Values at barycentric points ``bary`` (k, 3) of triangles ``tri`` (k,)."""
        verts = self.mesh.triangles[tri]
        c = np.einsum("kj,kj->k", bary, self.candidate[verts])
        l = np.einsum("kj,kj->k", bary, self.lower[verts])
        return np.maximum(c, l)

    def classification(self):
        return self.code.copy()


def classify(d_tri):
    """Triangle classes from vertex values of candidate - lower, shape (nt, 3)."""
    dmax = d_tri.max(axis=1)
    dmin = d_tri.min(axis=1)
    code = np.full(len(d_tri), SPLIT, dtype=np.int8)
    code[dmax <= 0] = ACTIVE
    code[(dmin >= 0) & (dmax > 0)] = INACTIVE
    return code


def _kink_segments(mesh, tri_idx, d_tri):
    """Endpoints of d = 0 inside split triangles (exactly two per triangle)."""
    p = mesh.vertices[mesh.triangles[tri_idx]]
    seg = np.zeros((len(tri_idx), 2, 2))
    found = np.zeros(len(tri_idx), dtype=np.int64)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        da, db = d_tri[:, a], d_tri[:, b]
        cross = da * db < 0
        t = da / np.where(cross, da - db, 1.0)
        crossing = p[:, a] + t[:, None] * (p[:, b] - p[:, a])
        for mask, pt in ((da == 0, p[:, a]), (cross, crossing)):
            r = np.flatnonzero(mask & (found < 2))
            seg[r, found[r]] = pt[r]
            found[r] += 1
    return seg


def control_from_adjoint(ocp, mu, p):
    """
    Control ``max(u_a, -p / alpha)`` for a free-dof adjoint vector ``p``.

    The weights of b and of the U inner product coincide per triangle in
    both benchmarks, so the weight cancels from the projection formula.
    """
    p = np.asarray(p, dtype=float)
    if p.shape[0] == ocp.n:
        p = ocp.extend(p)
    elif p.shape[0] != ocp.mesh.num_vertices:
        raise ValueError(f"adjoint has length {p.shape[0]}, expected {ocp.n}")
    return control_from_candidate(ocp.mesh, -p / ocp.alpha, ocp.u_a_vertex)


def control_from_candidate(mesh, candidate, lower):
    d_tri = (candidate - lower)[mesh.triangles]
    code = classify(d_tri)
    split = np.flatnonzero(code == SPLIT)
    kinks = _kink_segments(mesh, split, d_tri[split])
    return ControlFunction(mesh, candidate, lower, code, kinks)


def _affine_product_integral(area, f, g):
    """Exact integral of the product of two affine functions given at vertices."""
    return area / 12.0 * ((f * g).sum(axis=-1) + f.sum(axis=-1) * g.sum(axis=-1))


def _local_mass(area):
    return area[:, None, None] * ((np.ones((3, 3)) + np.eye(3)) / 12.0)


def integrate_control(u, weights=None):
    """
    Load vector ``v -> int w u v`` over all vertices, integrated exactly.

    ``weights`` is the per-triangle weight of b (1 if None).
    """
    td = triangle_data(u.mesh)
    w = np.ones(td.nt) if weights is None else np.asarray(weights, dtype=float)
    tri = td.triangles
    lower = u.lower[tri]
    d = u.diff[tri]
    area = td.areas * w
    # u = u_a + max(d, 0): the bound part is a plain mass product
    local = np.einsum("tij,tj->ti", _local_mass(area), lower)
    inact = u.code == INACTIVE
    local[inact] += np.einsum("tij,tj->ti", _local_mass(area[inact]), d[inact])
    s = u.split
    if s.size:
        poly, cnt = clip_polygons(*_full_triangles(s.size), d[s])
        ds = d[s]
        local[s] += integrate_on_polygons(
            poly, cnt, area[s],
            lambda b: np.einsum("mqk,mk->mq", b, ds)[..., None] * b)
    return np.bincount(tri.ravel(), weights=local.ravel(), minlength=td.nv)


def inactive_mass(u, weights=None):
    """Mass matrix ``int_{u > u_a} w phi_i phi_j`` over all vertices."""
    td = triangle_data(u.mesh)
    w = np.ones(td.nt) if weights is None else np.asarray(weights, dtype=float)
    area = td.areas * w
    local = np.zeros((td.nt, 3, 3))
    inact = u.code == INACTIVE
    local[inact] = _local_mass(area[inact])
    s = u.split
    if s.size:
        d = u.diff[td.triangles[s]]
        poly, cnt = clip_polygons(*_full_triangles(s.size), d)
        local[s] = integrate_on_polygons(
            poly, cnt, area[s], lambda b: b[..., :, None] * b[..., None, :])
    return td.assemble(local)


def active_measure(u, weights=None):
    """Weighted area of the set where the bound is active."""
    td = triangle_data(u.mesh)
    w = np.ones(td.nt) if weights is None else np.asarray(weights, dtype=float)
    area = td.areas * w
    total = area[u.code == ACTIVE].sum()
    s = u.split
    if s.size:
        d = u.diff[td.triangles[s]]
        poly, cnt = clip_polygons(*_full_triangles(s.size), -d)
        total += integrate_on_polygons(poly, cnt, area[s],
                                       lambda b: np.ones(b.shape[:2])).sum()
    return float(total)


def control_norm(u, weights=None):
    """``||u||_U`` with per-triangle weights, integrated exactly."""
    return float(np.sqrt(max(_squared_difference(u, None, weights), 0.0)))


def control_error(u1, u2, weights=None):
    """``||u1 - u2||_U``; both controls must live on the same mesh."""
    if u1.mesh.triangles.shape != u2.mesh.triangles.shape:
        raise ValueError("controls live on different meshes")
    return float(np.sqrt(max(_squared_difference(u1, u2, weights), 0.0)))


def _sides(u, tri, nt):
    """
    The two (selector, piece) pairs of a control on every triangle.

    On a split triangle the candidate holds where ``d >= 0`` and the bound
    where ``-d >= 0``; elsewhere the whole triangle carries one affine piece
    and the second selector is empty.
    """
    if u is None:
        zero = np.zeros((nt, 3))
        return (np.ones((nt, 3)), zero), (-np.ones((nt, 3)), zero)
    d = u.diff[tri]
    whole = np.where((u.code == INACTIVE)[:, None], u.candidate[tri], u.lower[tri])
    split = (u.code == SPLIT)[:, None]
    first = (np.where(split, d, 1.0), np.where(split, u.candidate[tri], whole))
    second = (np.where(split, -d, -1.0), np.where(split, u.lower[tri], whole))
    return first, second


def _squared_difference(u1, u2, weights):
    """``int w (u1 - u2)^2`` (``u2 = 0`` if None), splitting along both kinks."""
    td = triangle_data(u1.mesh)
    tri = td.triangles
    w = np.ones(td.nt) if weights is None else np.asarray(weights, dtype=float)
    area = td.areas * w
    s1 = _sides(u1, tri, td.nt)
    s2 = _sides(u2, tri, td.nt)

    split = u1.code == SPLIT
    if u2 is not None:
        split = split | (u2.code == SPLIT)
    whole = ~split
    h = s1[0][1][whole] - s2[0][1][whole]
    total = _affine_product_integral(area[whole], h, h).sum()

    idx = np.flatnonzero(split)
    if idx.size:
        for g1, f1 in s1:
            for g2, f2 in s2:
                poly, cnt = clip_polygons(*_full_triangles(idx.size), g1[idx])
                poly, cnt = clip_polygons(poly, cnt, g2[idx])
                h = f1[idx] - f2[idx]
                total += integrate_on_polygons(
                    poly, cnt, area[idx],
                    lambda b: np.einsum("mqk,mk->mq", b, h) ** 2).sum()
    return float(total)
