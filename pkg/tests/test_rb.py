import numpy as np
import pytest
import scipy.sparse as sp

from rbvd.control import control_error, control_norm, integrate_control
from rbvd.fem import GramMatrix, StabilityConstants, exact_constants
from rbvd.rb import (
    GreedyConfig,
    RBSpace,
    Residuals,
    compute_residuals,
    effectivity_check,
    estimate,
    estimator_constants,
    evaluate_on_test_set,
    extend_orthonormal,
    fill_distance,
    greedy,
    orthonormality_error,
    reduced_estimate,
)
from rbvd.solver import solve_full, solve_reduced


class _Toy:
    """Minimal stand-in exposing what RBSpace needs."""

    def __init__(self, K):
        self.K_Y = GramMatrix(sp.csr_matrix(K))
        self.n = K.shape[0]
        self.num_params = 1

    def extend(self, x):
        return x


def _spd(rng, n):
    X = rng.standard_normal((n, n))
    return X @ X.T + n * np.eye(n)


# -- orthonormalization ------------------------------------------------------

def test_extend_single_and_copy(rng):
    toy = _Toy(_spd(rng, 10))
    v = rng.standard_normal(10)
    rb, acc = extend_orthonormal(RBSpace(toy), [v], mu=[1.0])
    assert acc == 1 and rb.N == 1
    assert toy.K_Y.norm(rb.basis[:, 0]) == pytest.approx(1.0, rel=1e-14)
    rb2, acc2 = extend_orthonormal(rb, [rb.basis[:, 0].copy(), 3.0 * v], mu=[2.0])
    assert acc2 == 0 and rb2.N == 1 and len(rb2.mus) == 1


def test_zero_snapshot_rejected(rng):
    toy = _Toy(_spd(rng, 6))
    rb, acc = extend_orthonormal(RBSpace(toy), [np.zeros(6), np.ones(6)], mu=[1.0])
    assert acc == 1 and rb.counts == [1]
    with pytest.raises(ValueError):
        extend_orthonormal(rb, [np.ones(5)])


def test_extend_against_dense_qr_oracle(rng):
    n = 50
    K = _spd(rng, n)
    toy = _Toy(K)
    snaps = rng.standard_normal((n, 5))
    rb = RBSpace(toy)
    for j in range(5):
        rb, _ = extend_orthonormal(rb, [snaps[:, j]], mu=[float(j)])
    assert orthonormality_error(rb) <= 1e-12
    # oracle: QR of L^T S gives K-orthonormal Q' = L^{-T} Q with the same flag
    L = np.linalg.cholesky(K)
    Q, R = np.linalg.qr(L.T @ snaps)
    ref = np.linalg.solve(L.T, Q)
    signs = np.sign(np.diag(R))
    assert np.allclose(rb.basis, ref * signs, atol=1e-10)


def test_extend_rejects_nearly_dependent(rng):
    toy = _Toy(_spd(rng, 20))
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    rb, _ = extend_orthonormal(RBSpace(toy), [a, b], mu=[0.0])
    tiny = 1e-12 * rng.standard_normal(20)
    _, acc = extend_orthonormal(rb, [2 * a - b + tiny * np.linalg.norm(a)], mu=[1.0])
    assert acc == 0
    _, acc = extend_orthonormal(rb, [2 * a - b + 1e-6 * rng.standard_normal(20)], mu=[1.0])
    assert acc == 1


def test_prefix_recovers_iterations(rng):
    toy = _Toy(_spd(rng, 12))
    rb = RBSpace(toy)
    for k in range(3):
        rb, _ = extend_orthonormal(rb, list(rng.standard_normal((2, 12))), mu=[float(k)])
    assert rb.counts == [2, 2, 2]
    sub = rb.prefix(2)
    assert sub.N == 4 and np.array_equal(sub.basis, rb.basis[:, :4])
    assert [m[0] for m in sub.mus] == [0.0, 1.0]


# -- estimator formulas ------------------------------------------------------

class _Unit:
    rho1 = 1.0
    alpha = 1.0


def test_constants_hand_example():
    c1, c2, c3, c4 = estimator_constants(1.0, 1.0, 1.0, 1.0, 1.0)
    assert (c1, c2, c3, c4) == (5.0, 4.0, 0.5, 0.5)


def test_constants_hand_example_general():
    rho1, alpha, beta, kappa, gamma = 0.5, 0.25, 2.0, 3.0, 4.0
    # written out term by term
    sa = 0.5
    c1 = 0.5 * (1 / (0.5 * sa) + (1 + 1 / (0.25 * 2.0)) * (3.0 / (2.0 * 0.5 * sa) + 1))
    c2 = 0.5 * (3 / 0.25 + 9 / (2 * 0.25) + 9 / (0.25 * 4 * 0.25) + 1)
    c3 = 1 / 8 / max(1.5, 1)
    c4 = 1 / 8 / max(1 / (0.25 * 2), 1)
    got = estimator_constants(rho1, alpha, beta, kappa, gamma)
    assert np.allclose(got, (c1, c2, c3, c4), rtol=1e-15)


def test_zero_residual_gives_zero_bounds():
    rep = estimate(_Unit, None, Residuals(0.0, 0.0), 1.0,
                   StabilityConstants(1.0, 1.0, 1.0, "exact-eigen"))
    assert rep.delta_u == rep.delta_uyp == rep.delta_lower == 0.0
    assert rep.proviso_ok


def test_relative_bound_undefined_for_zero_control():
    rep = estimate(_Unit, None, Residuals(1.0, 1.0), 0.0, StabilityConstants(1, np.nan, 1))
    assert np.isnan(rep.relative_bound) and not rep.proviso_ok
    assert np.isnan(rep.delta_lower) and rep.delta_uyp > 0


def test_thermal_block_delta_u_coefficients(tb8):
    cp = 1 / (np.sqrt(2) * np.pi)
    rho1 = 1 / np.sqrt(cp**2 + 1)
    rep_y = estimate(tb8, [0.5], Residuals(1.0, 0.0), 1.0, tb8.surrogate_constants([0.5]))
    rep_p = estimate(tb8, [0.5], Residuals(0.0, 1.0), 1.0, tb8.surrogate_constants([0.5]))
    assert rep_y.delta_u == pytest.approx(1 / (rho1 * 0.1 * 0.5), rel=1e-14)
    assert rep_p.delta_u == pytest.approx(cp / (0.01 * 0.5), rel=1e-14)
    assert rep_y.relative_bound == pytest.approx(2 * rep_y.delta_u)


def test_lower_below_upper_with_exact_constants(tb8, rng):
    for mu in rng.uniform(0.5, 3, 5):
        F = tb8.forms([mu])
        c = exact_constants(F.A, tb8.K_Y, F.B, F.M_U)
        res = Residuals(*rng.uniform(0, 1, 2))
        rep = estimate(tb8, [mu], res, 1.0, c)
        assert rep.delta_lower <= rep.delta_uyp
        assert rep.c[2] <= rep.c[0] and rep.c[3] <= rep.c[1]
        # surrogate constants can only enlarge the bound
        sur = estimate(tb8, [mu], res, 1.0, tb8.surrogate_constants([mu]))
        assert sur.delta_u >= rep.delta_u * (1 - 1e-12)


# -- residuals and reduced solves on the thermal block -------------------------

@pytest.fixture(scope="module")
def tb_basis(tb16):
    sols = {m: solve_full(tb16, [m]) for m in (0.5, 3.0, 1.2)}
    rb = RBSpace(tb16)
    for m, s in sols.items():
        rb, _ = extend_orthonormal(rb, [s.y, s.p], mu=[m])
    return rb, sols


def test_residuals_vanish_at_sampled_parameters(tb16, tb_basis):
    rb, sols = tb_basis
    for m, full in sols.items():
        red = solve_reduced(tb16, rb, [m])
        res = compute_residuals(tb16, [m], red)
        assert res.r_y_norm <= 1e-9 * res.rhs_y_norm
        assert res.r_p_norm <= 1e-9 * res.rhs_p_norm
        w = tb16.triangle_weights([m])
        assert control_error(full.u, red.u, w) <= 1e-9 * control_norm(full.u, w)


def test_residual_dense_path(tb16, tb_basis):
    rb, sols = tb_basis
    one = rb.prefix(1)                      # snapshots at mu = 0.5
    red = solve_reduced(tb16, one, [3.0])
    res = compute_residuals(tb16, [3.0], red)
    # dense recomputation from scratch
    F = tb16.forms([3.0])
    A = F.A.toarray()
    Bu = integrate_control(red.u)[tb16.free]
    ry = Bu - A @ red.y
    rp = F.M0.toarray() @ red.y - F.g_z - A.T @ red.p
    Kd = tb16.K_Y.matrix.toarray()
    ny, npn = (np.sqrt(r @ np.linalg.solve(Kd, r)) for r in (ry, rp))
    assert res.r_y_norm > 0 and res.r_p_norm > 0
    assert res.r_y_norm == pytest.approx(ny, rel=1e-10)
    assert res.r_p_norm == pytest.approx(npn, rel=1e-10)


def test_bound_holds_along_prefixes(tb16, tb_basis):
    rb, _ = tb_basis
    for N in (1, 2, 3):
        for m in (0.7, 1.9, 2.6):
            sol, rep = reduced_estimate(tb16, rb.prefix(N), [m])
            full = solve_full(tb16, [m])
            w = tb16.triangle_weights([m])
            rel = control_error(full.u, sol.u, w) / control_norm(full.u, w)
            if rep.proviso_ok:
                assert rel <= rep.relative_bound


@pytest.mark.parametrize("N, mu", [(1, 0.9), (2, 2.4), (3, 0.55), (2, 1.2)])
def test_effectivity_sandwich_and_auxiliary_bounds(tb8, N, mu):
    sols = [solve_full(tb8, [m]) for m in (0.5, 3.0, 1.5)]
    rb = RBSpace(tb8)
    for m, s in zip((0.5, 3.0, 1.5), sols):
        rb, _ = extend_orthonormal(rb, [s.y, s.p], mu=[m])
    out = effectivity_check(tb8, rb, N, [mu])
    assert out["ok"], out["checks"]
    assert out["delta_lower"] <= out["err_total"] <= out["delta_uyp"]


# -- greedy ------------------------------------------------------------------

def test_greedy_singleton_training(tb8):
    rb, hist = greedy(tb8, GreedyConfig([[1.3]], tol=1e-8, n_max=5))
    assert len(hist) == 1
    assert hist.records[0].max_estimator <= 1e-9
    assert hist.termination == "tolerance"


def test_greedy_tie_breaks_to_first(tb8):
    rb, hist = greedy(tb8, GreedyConfig([[0.5], [2.0], [2.0]], tol=1e-14, n_max=2))
    assert hist.records[0].argmax_index == 1
    assert len(rb.mus) == 2


def test_greedy_small_run_invariants(tb8):
    train = [[v] for v in np.geomspace(0.5, 3.0, 12)]
    rb, hist = greedy(tb8, GreedyConfig(train, tol=1e-8, n_max=6))
    assert hist.termination in ("tolerance", "N_max", "linear_dependence")
    assert len(hist) <= 6
    for r in hist.records:
        assert r.ortho_error <= 1e-9
    mus = [m[0] for m in rb.mus]
    assert len(set(mus)) == len(mus)
    # the selected parameter's true error respects its bound
    for rec in hist.records[:-1]:
        N = rec.N
        sol, rep = reduced_estimate(tb8, rb.prefix(N), rec.argmax)
        full = solve_full(tb8, rec.argmax)
        w = tb8.triangle_weights(rec.argmax)
        rel = control_error(full.u, sol.u, w) / control_norm(full.u, w)
        if rep.proviso_ok:
            assert rel <= rep.relative_bound


def test_greedy_config_validation(tb8):
    with pytest.raises(ValueError):
        GreedyConfig([])
    with pytest.raises(ValueError):
        GreedyConfig([[1.0]], tol=0)
    with pytest.raises(ValueError):
        GreedyConfig([[1.0]], n_max=0)
    with pytest.raises(ValueError):
        GreedyConfig([[1.0]], estimator="exact")
    with pytest.raises(ValueError):
        greedy(tb8, GreedyConfig([[7.0]]))


def test_evaluate_on_test_set_shapes(tb8):
    train = [[v] for v in np.geomspace(0.5, 3.0, 6)]
    rb, hist = greedy(tb8, GreedyConfig(train, tol=1e-8, n_max=3))
    rows, summary = evaluate_on_test_set(tb8, rb, [[0.6], [2.5]])
    assert len(rows) == 2 * len(rb.mus)
    assert [s["N"] for s in summary] == list(range(1, len(rb.mus) + 1))
    assert all(s["violations"] == 0 for s in summary)
    assert summary[-1]["max_rel_error"] <= summary[0]["max_rel_error"]


def test_uyp_estimator_greedy(tb8):
    train = [[v] for v in np.geomspace(0.5, 3.0, 6)]
    rb, hist = greedy(tb8, GreedyConfig(train, tol=1e-8, n_max=3, estimator="uyp"))
    assert len(hist) >= 2


# -- fill distance -----------------------------------------------------------

def test_fill_distance_interval():
    box = ((0.5, 3.0),)
    assert fill_distance(box, [[0.5]]) == pytest.approx(2.5)
    assert fill_distance(box, [[1.0]]) == pytest.approx(2.0)
    assert fill_distance(box, [[0.5], [3.0]]) == pytest.approx(1.25)
    seq = [0.5, 3.0, 1.3, 0.7, 2.2]
    h = [fill_distance(box, [[s] for s in seq[:k]]) for k in range(1, 6)]
    assert all(a >= b for a, b in zip(h, h[1:]))


def test_fill_distance_box_brute_force(rng):
    box = ((5.0, 18.0), (0.8, 1.2))
    pts = np.column_stack([rng.uniform(5, 18, 4), rng.uniform(0.8, 1.2, 4)])
    h = fill_distance(box, pts, resolution=101)
    # corners of the box are candidates; the value can only be larger than any of them
    corners = np.array([[a, b] for a in box[0] for b in box[1]])
    far = max(np.min(np.linalg.norm(pts - c, axis=1)) for c in corners)
    assert h >= far - 1e-12
    # and no point is farther than the diagonal
    assert h <= np.hypot(13.0, 0.4)
