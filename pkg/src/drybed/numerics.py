"""Generic numerical kernels.

Damped Newton iteration, scaling-and-squaring matrix exponential, standard
and generalized Sylvester solvers, and basis orthonormalization. All kernels
are pure functions; none hold state between calls.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    ConvergenceError,
    DimensionCapError,
    NewtonError,
    RankDeficiencyError,
    SingularJacobianError,
    SpectralOverlapError,
)

logger = logging.getLogger(__name__)

DEFAULT_EXPM_CAP = 400


@dataclass
class NewtonSettings:
    """Tolerances and damping controls for the Newton solver.

    atol applies to both the residual infinity norm and (scaled by the
    iterate magnitude) the step size; rtol, when positive, additionally
    accepts a residual reduced below rtol times its initial norm.
    """

    atol: float = 1e-10
    rtol: float = 0.0
    max_iter: int = 50
    damping_min: float = 1.0 / 1024.0
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.atol <= 0:
            raise ValueError("atol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.damping_min <= 1:
            raise ValueError("damping_min must lie in (0, 1]")


def fd_jacobian(residual, z, rel_step=1e-6):
    """Central-difference Jacobian with steps scaled by variable magnitude."""
    z = np.asarray(z, dtype=float)
    r0 = np.atleast_1d(np.asarray(residual(z), dtype=float))
    m = r0.size
    n = z.size
    J = np.empty((m, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        # guarded residuals may return inf at infeasible probes; the resulting
        # non-finite column is handled by the Newton loop, not worth a warning
        with np.errstate(invalid="ignore"):
            J[:, i] = (np.atleast_1d(residual(zp))
                       - np.atleast_1d(residual(zm))) / (2.0 * h)
    return J


def _dense_linear_solve(J, r):
    try:
        step = np.linalg.solve(J, r)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(f"linear solve failed: {exc}") from exc
    if not np.all(np.isfinite(step)):
        raise SingularJacobianError("linear solve produced non-finite step")
    return step


def newton_solve(residual, jacobian, z0, settings=None, linear_solve=None):
    """Damped Newton iteration for residual(z) = 0.

    Parameters
    ----------
    residual : callable
        Maps R^m -> R^m (scalars accepted).
    jacobian : callable or None
        Returns the Jacobian at z; None selects a central finite-difference
        fallback. May return any object the linear_solve callback accepts.
    z0 : array_like
        Starting point.
    settings : NewtonSettings, optional
    linear_solve : callable, optional
        (J, r) -> step solving J @ step = r; defaults to a dense solve.

    Returns
    -------
    ndarray of the same shape as z0 (scalar inputs return 0-d compatible
    one-element arrays squeezed to scalar ndarray).

    Acceptance requires both a small residual and a small last step: the
    step criterion is invariant under rescaling of the residual, so solving
    k*residual yields the same root.
    """
    settings = settings or NewtonSettings()
    solve = linear_solve or _dense_linear_solve
    scalar_input = np.ndim(z0) == 0
    z = np.atleast_1d(np.asarray(z0, dtype=float)).copy()

    def res_at(zz):
        return np.atleast_1d(np.asarray(residual(zz if not scalar_input else zz[0]), dtype=float))

    def jac_at(zz):
        if jacobian is None:
            return fd_jacobian(lambda v: res_at(v if not scalar_input else np.atleast_1d(v)),
                               zz, settings.fd_step)
        J = jacobian(zz if not scalar_input else zz[0])
        if np.ndim(J) == 0:
            J = np.array([[float(J)]])
        return J

    r = res_at(z)
    rnorm = np.linalg.norm(r, np.inf)
    r0norm = rnorm
    best_z, best_norm = z.copy(), rnorm
    if rnorm <= settings.atol:
        # already at a root; nothing beyond the convergence check to do
        return z[0] if scalar_input else z

    for _ in range(settings.max_iter):
        J = jac_at(z)
        step = solve(J, r)
        step = np.atleast_1d(np.asarray(step, dtype=float))

        # damped line search on the residual norm
        lam = 1.0
        while True:
            z_new = z - lam * step
            r_new = res_at(z_new)
            n_new = np.linalg.norm(r_new, np.inf)
            if np.isfinite(n_new) and n_new <= rnorm:
                break
            lam *= 0.5
            if lam < settings.damping_min:
                # accept the least-bad damped point and let the outer loop
                # decide, unless even that point is outside the residual's
                # domain; continuing from a non-finite iterate cannot recover
                if not np.isfinite(n_new):
                    raise NewtonError(
                        "Newton line search left the residual domain "
                        f"(best residual norm {best_norm:.3e})",
                        best=best_z[0] if scalar_input else best_z,
                        residual_norm=best_norm,
                    )
                break

        z, r, rnorm = z_new, r_new, n_new
        if np.isfinite(rnorm) and rnorm < best_norm:
            best_z, best_norm = z.copy(), rnorm

        step_small = lam * np.linalg.norm(step, np.inf) <= settings.atol * (1.0 + np.linalg.norm(z, np.inf))
        residual_ok = rnorm <= settings.atol or (settings.rtol > 0 and rnorm <= settings.rtol * r0norm)
        if residual_ok and step_small:
            return z[0] if scalar_input else z

    raise NewtonError(
        f"Newton did not converge in {settings.max_iter} iterations "
        f"(best residual norm {best_norm:.3e})",
        best=best_z[0] if scalar_input else best_z,
        residual_norm=best_norm,
    )


def newton_solve_scalar(residual, derivative, x0, settings=None):
    """Damped Newton for one scalar equation, plain-float fast path.

    Same damping and acceptance rules as newton_solve; exists because the
    steppers solve two scalar constraints every step and the array plumbing
    of the general routine costs more than the arithmetic.
    """
    settings = settings or NewtonSettings()
    x = float(x0)
    r = float(residual(x))
    r0 = abs(r)
    rnorm = r0
    best_x, best_norm = x, rnorm
    if rnorm <= settings.atol:
        return x

    for _ in range(settings.max_iter):
        d = float(derivative(x))
        if d == 0.0 or not math.isfinite(d):
            raise SingularJacobianError(f"zero or non-finite derivative at {x!r}")
        step = r / d

        lam = 1.0
        while True:
            x_new = x - lam * step
            r_new = float(residual(x_new))
            n_new = abs(r_new)
            if math.isfinite(n_new) and n_new <= rnorm:
                break
            lam *= 0.5
            if lam < settings.damping_min:
                if not math.isfinite(n_new):
                    raise NewtonError(
                        "Newton line search left the residual domain "
                        f"(best residual norm {best_norm:.3e})",
                        best=best_x,
                        residual_norm=best_norm,
                    )
                break

        x, r, rnorm = x_new, r_new, n_new
        if math.isfinite(rnorm) and rnorm < best_norm:
            best_x, best_norm = x, rnorm

        step_small = lam * abs(step) <= settings.atol * (1.0 + abs(x))
        residual_ok = rnorm <= settings.atol or (settings.rtol > 0 and rnorm <= settings.rtol * r0)
        if residual_ok and step_small:
            return x

    raise NewtonError(
        f"Newton did not converge in {settings.max_iter} iterations "
        f"(best residual norm {best_norm:.3e})",
        best=best_x,
        residual_norm=best_norm,
    )


# ---------------------------------------------------------------------------
# Matrix exponential: scaling and squaring with diagonal Pade approximants.

_PADE_COEFFS = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
         960960.0, 16380.0, 182.0, 1.0),
}

_PADE_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}


def _pade_uv(A, m, powers):
    b = _PADE_COEFFS[m]
    n = A.shape[0]
    I = np.eye(n)
    if m == 13:
        A2, A4, A6 = powers["A2"], powers["A4"], powers["A6"]
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I)
        return U, V
    U = b[1] * I
    V = b[0] * I
    Apow = I
    for k in range(1, m // 2 + 1):
        Apow = Apow @ powers["A2"] if k > 1 else powers["A2"]
        U = U + b[2 * k + 1] * Apow
        V = V + b[2 * k] * Apow
    return A @ U, V


def matrix_exponential(M, dt=1.0, cap=DEFAULT_EXPM_CAP):
    """exp(M*dt) by scaling and squaring with Pade approximants.

    The dimension cap guards against the quadratic memory and cubic time
    blow-up of dense matrix functions; raise it explicitly when a larger
    problem is genuinely intended.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix_exponential expects a square matrix")
    n = A.shape[0]
    if cap is not None and n > cap:
        raise DimensionCapError(
            f"matrix exponential of dimension {n} exceeds cap {cap}; "
            "dense matrix functions at this size are intractable here"
        )
    A = A * float(dt)
    if n == 0:
        return np.zeros((0, 0))
    norm = np.linalg.norm(A, 1)
    if norm == 0.0:
        return np.eye(n)

    powers = {"A2": A @ A}
    for m in (3, 5, 7, 9):
        if norm <= _PADE_THETA[m]:
            U, V = _pade_uv(A, m, powers)
            return _pade_solve(U, V)

    s = max(0, int(math.ceil(math.log2(norm / _PADE_THETA[13]))))
    As = A / (2.0 ** s)
    powers = {"A2": As @ As}
    powers["A4"] = powers["A2"] @ powers["A2"]
    powers["A6"] = powers["A2"] @ powers["A4"]
    U, V = _pade_uv(As, 13, powers)
    E = _pade_solve(U, V)
    for _ in range(s):
        E = E @ E
    return E


def _pade_solve(U, V):
    try:
        return np.linalg.solve(V - U, V + U)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(f"Pade denominator singular: {exc}") from exc


# ---------------------------------------------------------------------------
# Sylvester equations.

def _as_scaled_identity(A, tol=0.0):
    """Return c if A == c*I (exactly, or within tol in max norm), else None."""
    n = A.shape[0]
    c = A[0, 0] if n else 0.0
    if tol == 0.0:
        d = np.diagonal(A)
        if np.all(d == c) and np.count_nonzero(A) == np.count_nonzero(d):
            return c
        return None
    if np.max(np.abs(A - c * np.eye(n))) <= tol:
        return c
    return None


def solve_sylvester(A, B, C, residual_rtol=1e-8):
    """Solve A X + X B + C = 0 for X.

    Scaled-identity operands take a one-sided direct solve; the general case
    goes through a Schur-based solver after a spectral-separation check. The
    residual is always verified by substitution.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    if A.shape != (n, n) or B.shape != (m, m):
        raise ValueError("incompatible Sylvester operand shapes")

    cA = _as_scaled_identity(A)
    cB = _as_scaled_identity(B)
    try:
        if cA is not None:
            # X (B + cA I) = -C
            X = np.linalg.solve((B + cA * np.eye(m)).T, -C.T).T
        elif cB is not None:
            X = np.linalg.solve(A + cB * np.eye(n), -C)
        else:
            lam_a = np.linalg.eigvals(A)
            lam_b = np.linalg.eigvals(B)
            sep = np.min(np.abs(lam_a[:, None] + lam_b[None, :]))
            scale = max(np.max(np.abs(lam_a), initial=0.0), np.max(np.abs(lam_b), initial=0.0), 1.0)
            if sep <= 1e-12 * scale:
                raise SpectralOverlapError(
                    f"spectra of A and -B overlap (separation {sep:.3e})"
                )
            X = scipy.linalg.solve_sylvester(A, B, -C)
    except np.linalg.LinAlgError as exc:
        raise SpectralOverlapError(f"Sylvester solve failed: {exc}") from exc

    resid = np.linalg.norm(A @ X + X @ B + C, "fro")
    bound = residual_rtol * max(np.linalg.norm(C, "fro"), np.finfo(float).tiny)
    if resid > bound:
        raise ConvergenceError(
            f"Sylvester residual {resid:.3e} exceeds {bound:.3e}", residual=resid
        )
    return X


def solve_generalized_sylvester(A, A_r, N_list, N_hat_list, RHS,
                                update_tol=1e-10, max_sweeps=200):
    """Solve A X + X A_r^T + sum_j N_j X N_hat_j^T + RHS = 0.

    Stationary iteration: the bilinear sum is lagged and a standard Sylvester
    equation is solved each sweep. Contracts when the coupling terms are small
    against the linear part.
    """
    A = np.asarray(A, dtype=float)
    A_rT = np.asarray(A_r, dtype=float).T
    RHS = np.asarray(RHS, dtype=float)
    N_list = [np.asarray(N, dtype=float) for N in N_list]
    N_hat_T = [np.asarray(Nh, dtype=float).T for Nh in N_hat_list]
    if len(N_list) != len(N_hat_T):
        raise ValueError("N_list and N_hat_list lengths differ")

    def coupling(X):
        S = np.zeros_like(RHS)
        for Nj, NhTj in zip(N_list, N_hat_T):
            S += Nj @ X @ NhTj
        return S

    X = solve_sylvester(A, A_rT, RHS)
    update = np.inf
    first_delta = None
    for sweep in range(1, max_sweeps + 1):
        X_new = solve_sylvester(A, A_rT, RHS + coupling(X))
        delta = np.linalg.norm(X_new - X, "fro")
        scale = max(np.linalg.norm(X_new, "fro"), np.finfo(float).tiny)
        update = delta / scale
        X = X_new
        if update <= update_tol:
            break
        if first_delta is None:
            first_delta = delta
        elif not np.isfinite(delta) or delta > 1e6 * first_delta:
            # the lagged sum is expanding, not contracting; no point burning
            # the remaining sweeps on matrices headed for overflow
            raise ConvergenceError(
                f"generalized Sylvester diverging at sweep {sweep} "
                f"(update growth {delta / first_delta:.3e})",
                residual=float(delta),
            )
    resid = np.linalg.norm(A @ X + X @ A_rT + coupling(X) + RHS, "fro")
    rhs_norm = max(np.linalg.norm(RHS, "fro"), np.finfo(float).tiny)
    logger.debug(
        "generalized Sylvester: %d sweeps, update %.3e, residual %.3e (relative %.3e)",
        sweep, update, resid, resid / rhs_norm,
    )
    if update > update_tol:
        raise ConvergenceError(
            f"generalized Sylvester stalled after {max_sweeps} sweeps "
            f"(relative update {update:.3e}, residual {resid:.3e})",
            residual=resid,
        )
    return X


def orthonormalize(V, rank_tol=1e-12):
    """Orthonormal basis of span(V) with V^T V = I to machine accuracy.

    Columns are sign-fixed so the largest-magnitude entry of each basis
    vector is positive, keeping results deterministic across runs.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise ValueError("orthonormalize expects a 2-d array")
    n, r = V.shape
    if r > n:
        raise RankDeficiencyError(f"more columns ({r}) than rows ({n})")
    Q, R = np.linalg.qr(V)
    diag = np.abs(np.diagonal(R))
    scale = max(np.linalg.norm(V, "fro"), np.finfo(float).tiny)
    if np.any(diag <= rank_tol * scale):
        raise RankDeficiencyError(
            f"column rank below {r} (smallest R diagonal {diag.min():.3e})"
        )
    for j in range(r):
        k = np.argmax(np.abs(Q[:, j]))
        if Q[k, j] < 0:
            Q[:, j] = -Q[:, j]
    return Q
