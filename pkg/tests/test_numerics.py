"""Newton, collocation, matrix exponential, Sylvester, orthonormalization."""

from __future__ import annotations

import math

import numpy as np
import pytest

from drybed.collocation import collocation_step, make_scheme
from drybed.errors import (
    ConvergenceError,
    DimensionCapError,
    NewtonError,
    RankDeficiencyError,
    SingularJacobianError,
    SpectralOverlapError,
)
from drybed.numerics import (
    NewtonSettings,
    matrix_exponential,
    newton_solve,
    orthonormalize,
    solve_generalized_sylvester,
    solve_sylvester,
)


def taylor_expm(M, terms=30):
    """Truncated-series oracle; valid only while the truncation tail is
    far below the comparison tolerance (norm kept small by the caller)."""
    n = M.shape[0]
    E = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms + 1):
        term = term @ M / k
        E = E + term
    return E


def kron_sylvester(A, B, C):
    """Dense vectorized solve of A X + X B + C = 0 (column-major vec)."""
    n, m = C.shape
    L = np.kron(np.eye(m), A) + np.kron(B.T, np.eye(n))
    x = np.linalg.solve(L, -C.flatten(order="F"))
    return x.reshape((n, m), order="F")


def kron_generalized(A, A_r, Ns, Nhats, RHS):
    n, r = RHS.shape
    L = np.kron(np.eye(r), A) + np.kron(A_r, np.eye(n))
    for Nj, Nhj in zip(Ns, Nhats):
        L = L + np.kron(Nhj, Nj)
    x = np.linalg.solve(L, -RHS.flatten(order="F"))
    return x.reshape((n, r), order="F")


class TestNewton:
    def test_linear_one_step(self):
        root = newton_solve(lambda z: z - 3.0, lambda z: 1.0, 0.0)
        assert abs(root - 3.0) < 1e-14

    def test_sqrt_two(self):
        settings = NewtonSettings(atol=1e-12)
        root = newton_solve(lambda z: z * z - 2.0, lambda z: 2.0 * z, 1.0, settings)
        assert abs(root - math.sqrt(2.0)) <= 1e-12

    def test_residual_scaling_invariance(self):
        # same root to atol whether the residual is scaled down or up
        roots = []
        for k in (1e-3, 1e3):
            roots.append(newton_solve(lambda z, k=k: k * (z * z - 2.0),
                                      lambda z, k=k: k * 2.0 * z,
                                      1.0, NewtonSettings(atol=1e-10)))
        assert abs(roots[0] - roots[1]) <= 1e-10
        assert abs(roots[0] - math.sqrt(2.0)) <= 1e-10

    def test_vector_system_fd_jacobian(self):
        def res(v):
            x, y = v
            return np.array([x + 2 * y - 2.0, x * x + 4 * y * y - 4.0])

        sol = newton_solve(res, None, np.array([1.0, 2.0]))
        assert np.linalg.norm(res(sol), np.inf) <= 1e-10

    def test_max_iter_carries_best_iterate(self):
        with pytest.raises(NewtonError) as info:
            newton_solve(lambda z: z * z + 1.0, lambda z: 2.0 * z, 0.7,
                         NewtonSettings(max_iter=4))
        assert info.value.best is not None
        assert np.isfinite(info.value.residual_norm)

    def test_singular_jacobian_error(self):
        with pytest.raises(SingularJacobianError):
            newton_solve(lambda z: np.array([z[0] - 1.0, z[0] - 2.0]),
                         lambda z: np.zeros((2, 2)), np.zeros(2))

    def test_damping_used_on_overshoot(self):
        # steep arctan makes the full step overshoot; damping must recover
        root = newton_solve(lambda z: math.atan(5.0 * z), lambda z: 5.0 / (1 + 25 * z * z),
                            1.0, NewtonSettings(atol=1e-12, max_iter=100))
        assert abs(root) <= 1e-10

    def test_start_at_root_returns_immediately(self):
        calls = []

        def jac(z):
            calls.append(z)
            return 1.0

        root = newton_solve(lambda z: z - 1.0, jac, 1.0)
        assert root == 1.0 and not calls


class TestCollocation:
    def test_exponential_decay_oracle(self):
        x1, _ = collocation_step(lambda x, z, u, w: -x, None,
                                 np.array([1.0]), None, None, None, 0.1)
        assert abs(x1[0] - math.exp(-0.1)) <= 1e-9

    def test_zero_rhs_is_identity(self):
        x1, _ = collocation_step(lambda x, z, u, w: 0.0 * x, None,
                                 np.array([2.5]), None, None, None, 0.7)
        assert x1[0] == 2.5

    def test_a_stability_no_blowup(self):
        x1, _ = collocation_step(lambda x, z, u, w: -1e6 * x, None,
                                 np.array([1.0]), None, None, None, 1.0)
        assert abs(x1[0]) <= 1.0

    def test_order_ratio_on_dt_halving(self):
        lam = -1.0

        def integrate(dt):
            x = np.array([1.0])
            t = 0.0
            while t < 1.0 - 1e-12:
                x, _ = collocation_step(lambda x, z, u, w: lam * x, None,
                                        x, None, None, None, dt)
                t += dt
            return x[0]

        err_h = abs(integrate(0.2) - math.exp(-1.0))
        err_h2 = abs(integrate(0.1) - math.exp(-1.0))
        assert err_h / err_h2 >= 16.0

    def test_quadrature_exactness_degree_five(self):
        # clock augmentation: dx0 = 1, dx1 = x0^5; exact integral 1/6
        def rhs(x, z, u, w):
            return np.array([1.0, x[0] ** 5])

        x1, _ = collocation_step(rhs, None, np.zeros(2), None, None, None, 1.0)
        assert abs(x1[1] - 1.0 / 6.0) <= 1e-13

    def test_dae_constraint_enforced(self):
        # dx = -x with slaved z = x^2: z must track the constraint at the end
        def rhs(x, z, u, w):
            return -x

        def g(x, z, u, w):
            return np.array([z[0] - x[0] ** 2])

        x1, z1 = collocation_step(rhs, g, np.array([1.0]), np.array([1.0]),
                                  None, None, 0.05)
        assert abs(x1[0] - math.exp(-0.05)) <= 1e-9
        assert abs(z1[0] - x1[0] ** 2) <= 1e-9

    def test_radau_alternative_family(self):
        scheme = make_scheme("radau")
        assert scheme.nodes[-1] == 1.0
        x1, _ = collocation_step(lambda x, z, u, w: -x, None,
                                 np.array([1.0]), None, None, None, 0.1,
                                 scheme=scheme)
        assert abs(x1[0] - math.exp(-0.1)) <= 1e-7

    def test_nodes_strictly_increasing_in_unit_interval(self):
        for family in ("gauss", "radau"):
            s = make_scheme(family)
            assert np.all(np.diff(s.nodes) > 0)
            assert s.nodes[0] > 0 and s.nodes[-1] <= 1.0

    def test_newton_failure_carries_step_context(self):
        def bad_rhs(x, z, u, w):
            return np.array([np.inf])

        with pytest.raises(NewtonError) as info:
            collocation_step(bad_rhs, None, np.array([1.0]), None, None, None, 0.1,
                             newton=NewtonSettings(max_iter=3))
        assert "collocation step" in str(info.value)


class TestMatrixExponential:
    def test_zero_matrix(self):
        assert np.array_equal(matrix_exponential(np.zeros((4, 4))), np.eye(4))

    def test_diagonal_case(self):
        out = matrix_exponential(np.diag([0.3, -1.2]), dt=2.0)
        expect = np.diag([math.exp(0.6), math.exp(-2.4)])
        assert np.allclose(out, expect, rtol=1e-13, atol=0)

    def test_series_oracle_5x5(self):
        rng = np.random.default_rng(42)
        M = rng.standard_normal((5, 5))
        M *= 1.0 / np.linalg.norm(M, 1)  # keep the 30-term oracle tail negligible
        out = matrix_exponential(M, dt=0.3)
        assert np.linalg.norm(out - taylor_expm(M * 0.3), np.inf) <= 1e-9

    def test_inverse_property_8x8(self):
        rng = np.random.default_rng(7)
        M = rng.standard_normal((8, 8))
        prod = matrix_exponential(M) @ matrix_exponential(-M)
        assert np.linalg.norm(prod - np.eye(8), np.inf) <= 1e-9

    def test_large_norm_pade13_path(self):
        # force the scaled path and compare against the doubled-argument square
        rng = np.random.default_rng(3)
        M = rng.standard_normal((6, 6))
        M *= 40.0 / np.linalg.norm(M, 1)
        full = matrix_exponential(M)
        half = matrix_exponential(M, dt=0.5)
        assert np.allclose(full, half @ half, rtol=1e-9, atol=1e-11)

    def test_dimension_cap(self):
        with pytest.raises(DimensionCapError):
            matrix_exponential(np.eye(401))
        out = matrix_exponential(np.zeros((401, 401)), cap=500)
        assert out.shape == (401, 401)


class TestSylvester:
    def test_identity_case(self):
        X = solve_sylvester(-np.eye(3), -np.eye(3), 2.0 * np.eye(3))
        assert np.allclose(X, np.eye(3), rtol=0, atol=1e-12)

    def test_kronecker_oracle_2x2(self):
        rng = np.random.default_rng(11)
        A = rng.standard_normal((2, 2)) - 3.0 * np.eye(2)
        B = rng.standard_normal((2, 2)) - 2.0 * np.eye(2)
        C = rng.standard_normal((2, 2))
        X = solve_sylvester(A, B, C)
        assert np.allclose(X, kron_sylvester(A, B, C), rtol=1e-10, atol=1e-12)

    def test_zero_rhs(self):
        A = -2.0 * np.eye(3) + np.triu(np.ones((3, 3)), 1)
        assert np.array_equal(solve_sylvester(A, -np.eye(3), np.zeros((3, 3))),
                              np.zeros((3, 3)))

    def test_scaled_identity_fast_paths_match_oracle(self):
        rng = np.random.default_rng(5)
        B = rng.standard_normal((3, 3)) - 2.0 * np.eye(3)
        C = rng.standard_normal((4, 3))
        X = solve_sylvester(-np.eye(4), B, C)
        assert np.allclose(X, kron_sylvester(-np.eye(4), B, C), rtol=1e-10, atol=1e-12)
        A = rng.standard_normal((4, 4)) - 2.0 * np.eye(4)
        C2 = rng.standard_normal((4, 3))
        X2 = solve_sylvester(A, -1.5 * np.eye(3), C2)
        assert np.allclose(X2, kron_sylvester(A, -1.5 * np.eye(3), C2),
                           rtol=1e-10, atol=1e-12)

    def test_spectral_overlap_rejected(self):
        A = np.diag([1.0, 2.0])
        B = np.diag([-1.0, -3.0])
        with pytest.raises((SpectralOverlapError, ConvergenceError)):
            solve_sylvester(A, B, np.ones((2, 2)))


class TestGeneralizedSylvester:
    def test_degenerates_to_standard(self):
        rng = np.random.default_rng(13)
        A = -np.eye(4)
        Ar = rng.standard_normal((2, 2)) - 2.0 * np.eye(2)
        RHS = rng.standard_normal((4, 2))
        X = solve_generalized_sylvester(A, Ar, [np.zeros((4, 4))], [np.zeros((2, 2))], RHS)
        assert np.allclose(X, solve_sylvester(A, Ar.T, RHS), rtol=1e-12, atol=1e-14)

    def test_kronecker_oracle_contractive(self):
        rng = np.random.default_rng(17)
        A = -np.eye(4)
        Ar = -np.eye(2) + 0.1 * rng.standard_normal((2, 2))
        Ns = [0.2 * rng.standard_normal((4, 4)) for _ in range(2)]
        Nhats = [0.2 * rng.standard_normal((2, 2)) for _ in range(2)]
        RHS = rng.standard_normal((4, 2))
        X = solve_generalized_sylvester(A, Ar, Ns, Nhats, RHS)
        assert np.allclose(X, kron_generalized(A, Ar, Ns, Nhats, RHS),
                           rtol=1e-8, atol=1e-10)

    def test_zero_rhs(self):
        A = -np.eye(3)
        Ar = -np.eye(2)
        X = solve_generalized_sylvester(A, Ar, [0.3 * np.eye(3)], [0.3 * np.eye(2)],
                                        np.zeros((3, 2)))
        assert np.array_equal(X, np.zeros((3, 2)))

    def test_non_contractive_raises(self):
        A = -np.eye(2)
        Ar = -np.eye(2)
        with pytest.raises(ConvergenceError):
            solve_generalized_sylvester(A, Ar, [3.0 * np.eye(2)], [3.0 * np.eye(2)],
                                        np.ones((2, 2)), max_sweeps=40)


class TestOrthonormalize:
    def test_orthonormal_input_up_to_sign(self):
        V = np.eye(4)[:, :2]
        Q = orthonormalize(V)
        assert np.allclose(np.abs(Q), V, rtol=0, atol=1e-14)

    def test_axis_scaling(self):
        V = np.array([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]])
        Q = orthonormalize(V)
        assert np.allclose(Q, np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]),
                           rtol=0, atol=1e-14)

    def test_span_preserved_vs_qr_oracle(self):
        rng = np.random.default_rng(23)
        V = rng.standard_normal((10, 3))
        Q = orthonormalize(V)
        assert np.linalg.norm(Q.T @ Q - np.eye(3), np.inf) <= 1e-12
        Qr, _ = np.linalg.qr(V)
        # identical column spans give identical orthogonal projectors
        assert np.allclose(Q @ Q.T, Qr @ Qr.T, rtol=0, atol=1e-12)

    def test_rank_deficiency_error(self):
        V = np.ones((5, 2))
        with pytest.raises(RankDeficiencyError):
            orthonormalize(V)
