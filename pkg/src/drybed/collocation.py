"""Implicit collocation integration for semi-explicit index-1 DAEs.

A fixed-step scheme: the step polynomial is pinned to the current state at
zero and forced to satisfy the differential equations and the algebraic
constraints at every interior node. One Newton solve covers all node states
simultaneously; the step end value is the polynomial evaluated at one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NewtonError, NumericalError
from .numerics import NewtonSettings, fd_jacobian, newton_solve

_SQRT6 = np.sqrt(6.0)
_RADAU3 = np.array([(4.0 - _SQRT6) / 10.0, (4.0 + _SQRT6) / 10.0, 1.0])


def _lagrange_tables(nodes):
    """Derivative and endpoint tables for the basis on {0} union nodes."""
    pts = np.concatenate(([0.0], nodes))
    m = len(nodes)
    C = np.zeros((m, m + 1))
    D = np.zeros(m + 1)
    for k in range(m + 1):
        ell = np.poly1d([1.0])
        for r in range(m + 1):
            if r != k:
                ell *= np.poly1d([1.0, -pts[r]]) / (pts[k] - pts[r])
        dell = np.polyder(ell)
        for j in range(m):
            C[j, k] = np.polyval(dell, nodes[j])
        D[k] = np.polyval(ell, 1.0)
    # pin the conservation identities exactly: a constant state must be a
    # fixed point of the step, so rows of C sum to zero and D sums to one
    C[:, 0] = -np.sum(C[:, 1:], axis=1)
    D[0] = 1.0 - np.sum(D[1:])
    return C, D


@dataclass(frozen=True)
class CollocationScheme:
    """Nodes on (0, 1] with precomputed coefficient tables.

    C[j, k] is the time derivative of basis polynomial k at node j; D[k]
    evaluates basis polynomial k at the step end. Both tables are exact for
    polynomial data up to the scheme's degree.
    """

    family: str
    nodes: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)


def make_scheme(family="gauss", n_nodes=3):
    family = family.lower()
    if family == "gauss":
        x, _ = np.polynomial.legendre.leggauss(n_nodes)
        nodes = (x + 1.0) / 2.0
    elif family == "radau":
        if n_nodes != 3:
            raise ValueError("radau scheme is provided with 3 nodes only")
        nodes = _RADAU3.copy()
    else:
        raise ValueError(f"unknown collocation family {family!r}")
    if not np.all(np.diff(nodes) > 0) or nodes[0] <= 0 or nodes[-1] > 1:
        raise ValueError("collocation nodes must be strictly increasing in (0, 1]")
    C, D = _lagrange_tables(nodes)
    return CollocationScheme(family=family, nodes=nodes, C=C, D=D)


DEFAULT_SCHEME = make_scheme()


def collocation_step(rhs, alg_residual, x0, z0, u, w, dt,
                     scheme=None, newton=None, block_jacobian=None):
    """Advance the DAE  dx/dt = rhs(x, z, u, w),  0 = alg_residual(x, z, u, w).

    Parameters
    ----------
    rhs, alg_residual : callables
        alg_residual may be None for a pure ODE (z0 then ignored/empty).
    x0, z0 : array_like
        Consistent initial state (algebraic residual at or near zero).
    u, w : opaque inputs forwarded to the callables, held constant over dt.
    dt : float
    scheme : CollocationScheme, optional
    newton : NewtonSettings, optional
    block_jacobian : callable, optional
        (x, z, u, w) -> (fx, fz, gx, gz) analytic blocks; finite differences
        otherwise.

    Returns
    -------
    (x1, z1) arrays; z1 is reconciled so the constraint holds at the step end.
    """
    scheme = scheme or DEFAULT_SCHEME
    newton = newton or NewtonSettings()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    nd = x0.size
    has_alg = alg_residual is not None
    z0 = np.atleast_1d(np.asarray(z0, dtype=float)) if has_alg else np.zeros(0)
    na = z0.size
    m = scheme.n_nodes
    nb = nd + na           # one node block
    C, D = scheme.C, scheme.D

    def split(xi):
        return [(xi[j * nb:j * nb + nd], xi[j * nb + nd:(j + 1) * nb]) for j in range(m)]

    def residual(xi):
        states = split(xi)
        R = np.empty(m * nb)
        for j in range(m):
            Xj, Zj = states[j]
            acc = C[j, 0] * x0
            for k in range(m):
                acc = acc + C[j, k + 1] * states[k][0]
            R[j * nb:j * nb + nd] = acc - dt * np.asarray(rhs(Xj, Zj, u, w), dtype=float)
            if na:
                R[j * nb + nd:(j + 1) * nb] = np.asarray(
                    alg_residual(Xj, Zj, u, w), dtype=float)
        return R

    def blocks_at(Xj, Zj):
        if block_jacobian is not None:
            return block_jacobian(Xj, Zj, u, w)
        xz = np.concatenate([Xj, Zj])

        def stacked(v):
            x, z = v[:nd], v[nd:]
            top = np.asarray(rhs(x, z, u, w), dtype=float)
            if na:
                return np.concatenate([top, np.asarray(alg_residual(x, z, u, w), dtype=float)])
            return top

        J = fd_jacobian(stacked, xz, newton.fd_step)
        return J[:nd, :nd], J[:nd, nd:], J[nd:, :nd], J[nd:, nd:]

    def jacobian(xi):
        states = split(xi)
        J = np.zeros((m * nb, m * nb))
        for j in range(m):
            fx, fz, gx, gz = blocks_at(*states[j])
            rj = j * nb
            for k in range(m):
                ck = k * nb
                J[rj:rj + nd, ck:ck + nd] = C[j, k + 1] * np.eye(nd)
            J[rj:rj + nd, rj:rj + nd] -= dt * fx
            if na:
                J[rj:rj + nd, rj + nd:rj + nb] = -dt * np.asarray(fz)
                J[rj + nd:rj + nb, rj:rj + nd] = np.asarray(gx)
                J[rj + nd:rj + nb, rj + nd:rj + nb] = np.asarray(gz)
        return J

    xi0 = np.tile(np.concatenate([x0, z0]), m)
    try:
        xi = newton_solve(residual, jacobian, xi0, newton)
    except NumericalError as exc:
        best = getattr(exc, "best", None)
        raise NewtonError(
            f"collocation step over dt={dt} failed: {exc}",
            best=best, residual_norm=getattr(exc, "residual_norm", None),
        ) from exc

    states = split(xi)
    x1 = D[0] * x0
    for k in range(m):
        x1 = x1 + D[k + 1] * states[k][0]
    if not has_alg:
        return x1, np.zeros(0)

    if scheme.nodes[-1] == 1.0:
        return x1, states[-1][1].copy()
    z_guess = D[0] * z0
    for k in range(m):
        z_guess = z_guess + D[k + 1] * states[k][1]
    z1 = newton_solve(lambda z: alg_residual(x1, z, u, w), None, z_guess, newton)
    return x1, np.atleast_1d(z1)
