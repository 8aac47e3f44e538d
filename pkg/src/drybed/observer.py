"""Reduced-order DAE-aware extended Kalman filtering.

Both observer variants share the same thirteen-stage cycle: restrict the
estimate to observer coordinates, predict nonlinearly through one collocation
step of the reduced DAE, propagate the covariance under a linearized flow,
correct with the scalar outlet measurement, reconcile the algebraic pair on
the constraint manifold, and lift back to the grid. They differ only in how
the algebraic pair enters the covariance: variant 1 eliminates it through the
constraint Jacobians and propagates a covariance over the differential states
alone, while variant 2 augments the linearization so the algebraic entries
are propagated and corrected alongside the differential ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    eval_algebraic_residual,
    pressure_drop_gradient,
    saturation_residual_derivative,
)
from .errors import (
    ConfigError,
    DimensionCapError,
    DomainError,
    NewtonError,
    NumericalError,
    SingularJacobianError,
)
from .model import discharge_rate, predict_coefficients, uhat_from_coefficients
from .mor import N_INPUTS, make_basis, project_system, rom_measurement
from .numerics import (
    DEFAULT_EXPM_CAP,
    NewtonSettings,
    matrix_exponential,
    newton_solve,
)
from .simulate import RomSimulator, RomState, _InputCache


@dataclass(frozen=True)
class PlausibilityBounds:
    """Physically-permissible boxes the estimate is projected onto."""

    m_h_min: float = 0.2
    m_h_max: float = 2.2
    eps_min: float = 0.0
    eps_max: float = 1.0
    x1_min: float = 0.0
    x1_max: float = 1.0


@dataclass(frozen=True)
class ObserverConfig:
    """Sampling, noise, and projection settings for one observer."""

    variant: int
    dt: float
    nu: float
    omega: np.ndarray
    P0: np.ndarray
    bounds: PlausibilityBounds = field(default_factory=PlausibilityBounds)
    reconcile_atol: float = 1e-9
    negate_psi_lower: bool = False
    fd_rel: float = 1e-6
    expm_cap: int = DEFAULT_EXPM_CAP

    def __post_init__(self):
        if self.variant not in (1, 2):
            raise ConfigError(f"observer variant must be 1 or 2, got {self.variant}")
        if not self.dt > 0:
            raise ConfigError("observer sampling period must be positive")
        if not self.nu > 0:
            raise ConfigError("measurement noise variance must be positive")
        omega = np.asarray(self.omega, dtype=float)
        if omega.ndim != 1 or np.any(omega < 0) or not np.all(np.isfinite(omega)):
            raise ConfigError("state noise must be a nonnegative finite vector")
        P0 = np.asarray(self.P0, dtype=float)
        m = omega.shape[0] + 2
        if P0.shape != (m, m):
            raise ConfigError(
                f"initial covariance must be {m} square to match the noise vector")
        scale = 1.0 + float(np.max(np.abs(P0)))
        if float(np.max(np.abs(P0 - P0.T))) > 1e-10 * scale:
            raise ConfigError("initial covariance must be symmetric")
        if float(np.linalg.eigvalsh(P0)[0]) < -1e-8 * scale:
            raise ConfigError("initial covariance must be positive semidefinite")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "P0", P0)


def default_observer_config(N, variant=2, dt=2.0, nu=3.6e-5, omega=1e-6,
                            p0_x1=1e-2, p0_m_h=1e-1, p0_alg=1e-2, bounds=None,
                            reconcile_atol=1e-9, negate_psi_lower=False,
                            fd_rel=1e-6, expm_cap=DEFAULT_EXPM_CAP):
    """Config with a diagonal initial covariance and uniform state noise."""
    om = np.asarray(omega, dtype=float)
    if om.ndim == 0:
        om = np.full(N + 1, float(om))
    P0 = np.diag(np.concatenate(
        [np.full(N, p0_x1), [p0_m_h, p0_alg, p0_alg]]))
    return ObserverConfig(variant=variant, dt=dt, nu=nu, omega=om, P0=P0,
                          bounds=bounds or PlausibilityBounds(),
                          reconcile_atol=reconcile_atol,
                          negate_psi_lower=negate_psi_lower,
                          fd_rel=fd_rel, expm_cap=expm_cap)


def observer_config_from_tree(tree, N):
    """ObserverConfig from a validated configuration tree."""
    ob = tree["observer"]
    pl = ob["plausibility"]
    bounds = PlausibilityBounds(m_h_min=float(pl["m_h_min"]),
                                m_h_max=float(pl["m_h_max"]),
                                x1_max=float(pl["x1_max"]))
    return default_observer_config(
        N, variant=int(ob["variant"]), dt=float(ob["dt"]), nu=float(ob["nu"]),
        omega=float(ob["omega"]), p0_x1=float(ob["p0_x1"]),
        p0_m_h=float(ob["p0_m_h"]), p0_alg=float(ob["p0_alg"]), bounds=bounds,
        reconcile_atol=float(ob["reconcile_atol"]),
        negate_psi_lower=bool(ob["negate_psi_lower"]),
        fd_rel=float(tree["numerics"]["fd_step"]),
        expm_cap=tree["numerics"]["expm_cap"])


@dataclass
class EkfState:
    """Full-grid estimate [x1; m_h; eps; T_s] with its covariance."""

    x_full: np.ndarray
    P_full: np.ndarray
    k: int = 0
    innovation: float = 0.0
    innovation_variance: float = 0.0
    reconcile_failed: bool = False
    gain_skipped: bool = False

    def __post_init__(self):
        self.x_full = np.asarray(self.x_full, dtype=float)
        self.P_full = np.asarray(self.P_full, dtype=float)
        n = self.x_full.shape[0]
        if self.P_full.shape != (n, n):
            raise ValueError("covariance shape does not match the state length")
        scale = 1.0 + float(np.max(np.abs(self.P_full)))
        if float(np.max(np.abs(self.P_full - self.P_full.T))) > 1e-9 * scale:
            raise ValueError("covariance must be symmetric")

    @property
    def x1(self):
        return self.x_full[:-3]

    @property
    def m_h(self):
        return float(self.x_full[-3])

    @property
    def eps(self):
        return float(self.x_full[-2])

    @property
    def T_s(self):
        return float(self.x_full[-1])

    @property
    def outlet(self):
        return float(self.x_full[-4])

    def copy(self):
        return EkfState(self.x_full.copy(), self.P_full.copy(), self.k,
                        self.innovation, self.innovation_variance,
                        self.reconcile_failed, self.gain_skipped)


@dataclass(frozen=True)
class ProjectionPair:
    """Restriction to and prolongation from observer coordinates.

    The prolongation is the displayed block pseudo-inverse: the product
    Gamma GammaInv is the identity, the reverse product is the oblique
    projector V T padded with the identity on the slow states.
    """

    Gamma: np.ndarray
    GammaInv: np.ndarray


def make_projection(basis, N):
    """Block projections: reduction on the grid, identity on (m_h, eps, T_s)."""
    if basis.V.shape[0] != N:
        raise ConfigError(
            f"basis rows {basis.V.shape[0]} do not match the grid size {N}")
    r = basis.r
    G = np.zeros((r + 3, N + 3))
    G[:r, :N] = basis.T
    G[r:, N:] = np.eye(3)
    Gi = np.zeros((N + 3, r + 3))
    Gi[:N, :r] = basis.V
    Gi[N:, r:] = np.eye(3)
    gap = float(np.max(np.abs(G @ Gi - np.eye(r + 3))))
    if gap > 1e-10:
        raise ConfigError(f"projection pair is inconsistent (deviation {gap:.2e})")
    return ProjectionPair(Gamma=G, GammaInv=Gi)


@dataclass(frozen=True)
class JacobianSet:
    """Constraint-partitioned linearization blocks at one point.

    J1 couples the differential pair (xr, m_h) to itself, J2 carries the
    algebraic influence on the differential flow, J3 and J4 partition the
    constraint residual the same way.
    """

    J1: np.ndarray
    J2: np.ndarray
    J3: np.ndarray
    J4: np.ndarray


def assemble_jacobians(eta_hat, z, u, w, rom, deps, coeffs=None, qflat=None,
                       fd_rel=1e-6):
    """Linearize the reduced DAE at one evaluation point.

    The bilinear part of the moisture block is exact; the coefficient-vector
    chain through (m_h, eps, T_s) is formed by central differences, with the
    surrogate outputs frozen at the operating point. The holdup row and the
    constraint blocks use the closed-form discharge and residual gradients.
    """
    xr = np.asarray(eta_hat[0], dtype=float)
    m_h = float(eta_hat[1])
    params, grid = deps.params, deps.grid
    if coeffs is None:
        coeffs = predict_coefficients(deps.maps, u)
    if qflat is None:
        qflat = np.stack(rom.Qslices).reshape(N_INPUTS, -1)
    r = rom.r
    x2 = np.array([m_h, float(z[0]), float(z[1])])

    uh0 = uhat_from_coefficients(coeffs, x2, u, w, params, grid)
    chain = np.empty((N_INPUTS, 3))
    for j in range(3):
        h = fd_rel * max(abs(x2[j]), 1.0)
        xp = x2.copy()
        xp[j] += h
        xm = x2.copy()
        xm[j] -= h
        chain[:, j] = (uhat_from_coefficients(coeffs, xp, u, w, params, grid)
                       - uhat_from_coefficients(coeffs, xm, u, w, params, grid)
                       ) / (2.0 * h)

    cols = [(chain[:, j] @ qflat).reshape(r, r) @ xr + rom.Br @ chain[:, j]
            for j in range(3)]
    dis = discharge_rate(m_h, x2[1], coeffs[2], params, grid)

    J1 = np.zeros((r + 1, r + 1))
    J1[:r, :r] = rom.Ar + (uh0 @ qflat).reshape(r, r)
    J1[:r, r] = cols[0]
    # discharge scales as m_h^(3/2) (1-eps)^(-1/2); same closed form as the
    # holdup collocation solve uses, differentiated with the opposite sign
    J1[r, r] = -1.5 * dis / m_h
    J2 = np.zeros((r + 1, 2))
    J2[:r, 0] = cols[1]
    J2[:r, 1] = cols[2]
    J2[r, 0] = -0.5 * dis / (1.0 - x2[1])

    d_eps, d_mh = pressure_drop_gradient(x2[1], m_h, u, params)
    J3 = np.zeros((2, r + 1))
    J3[0, r] = d_mh
    J4 = np.array([[d_eps, 0.0],
                   [0.0, saturation_residual_derivative(x2[2], params)]])
    cond = np.linalg.cond(J4)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularJacobianError(
            f"algebraic Jacobian block condition {cond:.2e} exceeds 1e12")
    return JacobianSet(J1=J1, J2=J2, J3=J3, J4=J4)


def _solve_constraint_block(J, rhs):
    try:
        sol = np.linalg.solve(J.J4, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(
            f"algebraic Jacobian block is singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularJacobianError(
            "algebraic Jacobian block solve produced non-finite entries")
    return sol


def build_al1(J):
    """Differential-only linearization: Schur elimination of the algebra."""
    return J.J1 - J.J2 @ _solve_constraint_block(J, J.J3)


def build_al2(J):
    """Augmented linearization; its flow keeps the differentiated constraint
    at zero, so covariance propagated under it respects the manifold."""
    S = _solve_constraint_block(J, J.J3)
    return np.block([[J.J1, J.J2], [-S @ J.J1, -S @ J.J2]])


def transition_matrix(A_L, dt, cap=DEFAULT_EXPM_CAP):
    """Discrete covariance propagator over one sampling period."""
    return matrix_exponential(A_L, dt, cap=cap)


def noise_core(omega, basis):
    """Grid-state noise mapped into reduced differential coordinates.

    Block application of blockdiag(T, 1) diag(omega) blockdiag(V, 1); the
    product is not symmetric for oblique bases, callers symmetrize.
    """
    omega = np.asarray(omega, dtype=float)
    n, r = basis.V.shape
    if omega.shape != (n + 1,):
        raise ValueError(f"noise vector must have length {n + 1}")
    core = np.zeros((r + 1, r + 1))
    core[:r, :r] = basis.T @ (omega[:n, None] * basis.V)
    core[r, r] = omega[n]
    return core


def noise_matrix(omega, basis, J, negate_psi_lower=False):
    """Augmented process noise: the reduced core spread over the algebraic
    rows through the constraint coupling."""
    core = noise_core(omega, basis)
    S = _solve_constraint_block(J, J.J3)
    if negate_psi_lower:
        S = -S
    psi = np.vstack([np.eye(core.shape[0]), S])
    return psi @ core @ psi.T


def reconcile_algebraic(x_hat, u, w, params, atol=1e-9, max_iter=60,
                        bounds=None):
    """Newton solve of both constraints at the estimate's holdup mass.

    Works on any state vector ending in [m_h, eps, T_s]. The converged pair
    is clamped to the permissible boxes before being returned; failure raises
    with the best iterate attached so callers can retain their previous pair.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    m_h = float(x_hat[-3])
    if m_h <= 0.0:
        raise NewtonError(f"holdup estimate {m_h:.3e} is not positive; "
                          "constraints are undefined")
    z0 = x_hat[-2:].astype(float)
    # the porosity guess may sit on a clamp boundary; pull it inside the
    # open domain so the first residual and Jacobian are evaluable
    z0[0] = min(max(z0[0], 1e-6), 1.0 - 1e-6)

    def res(zv):
        try:
            return eval_algebraic_residual(m_h, zv, u, w, params)
        except DomainError:
            return np.array([np.inf, np.inf])

    def jac(zv):
        d_eps, _ = pressure_drop_gradient(float(zv[0]), m_h, u, params)
        return np.array([
            [d_eps, 0.0],
            [0.0, saturation_residual_derivative(float(zv[1]), params)]])

    z = newton_solve(res, jac, z0, NewtonSettings(atol=atol, max_iter=max_iter))
    b = bounds or PlausibilityBounds()
    return (float(min(max(z[0], b.eps_min), b.eps_max)), float(z[1]))


def plausibility_project(x_full, bounds):
    """Clip the full estimate onto its physically-permissible boxes."""
    out = np.array(x_full, dtype=float)
    out[:-3] = np.clip(out[:-3], bounds.x1_min, bounds.x1_max)
    out[-3] = min(max(out[-3], bounds.m_h_min), bounds.m_h_max)
    out[-2] = min(max(out[-2], bounds.eps_min), bounds.eps_max)
    return out


class Observer:
    """Sequential estimator; one instance per estimated trajectory.

    Holds read-only models plus per-trajectory solver caches, so distinct
    instances can run concurrently while sharing rom, basis, and deps.
    """

    def __init__(self, cfg, rom, basis, deps, scheme=None):
        N = deps.grid.N
        if basis.V.shape[0] != N or rom.r != basis.r:
            raise ConfigError("reduced system and basis do not match the grid")
        if cfg.omega.shape[0] != N + 1:
            raise ConfigError(
                f"state noise vector must have length {N + 1} for this grid")
        if cfg.P0.shape != (N + 3, N + 3):
            raise ConfigError(f"initial covariance must be {N + 3} square")
        dim = rom.r + (1 if cfg.variant == 1 else 3)
        if cfg.expm_cap is not None and dim > cfg.expm_cap:
            raise DimensionCapError(
                f"transition matrix dimension {dim} exceeds the exponential "
                f"cap {cfg.expm_cap}; this observer cannot take a step")
        self.cfg = cfg
        self.rom = rom
        self.basis = basis
        self.deps = deps
        self.proj = make_projection(basis, N)
        self._sim = RomSimulator(rom, deps, scheme)
        self._qflat = np.ascontiguousarray(
            np.stack(rom.Qslices).reshape(N_INPUTS, -1))
        self._chat = np.zeros(dim)
        self._chat[:rom.r] = rom.Cr[0]
        self._coef = _InputCache()

    def init_state(self, x1, m_h, eps, T_s, P0=None):
        """Initial estimate, projected plausible, with the configured (or a
        caller-supplied) covariance."""
        N = self.deps.grid.N
        x1 = np.asarray(x1, dtype=float)
        if x1.shape != (N,):
            raise ConfigError(f"initial profile must have length {N}")
        x = np.concatenate([x1, [float(m_h), float(eps), float(T_s)]])
        x = plausibility_project(x, self.cfg.bounds)
        P = np.array(self.cfg.P0 if P0 is None else P0, dtype=float)
        return EkfState(x_full=x, P_full=0.5 * (P + P.T), k=0)

    def step(self, state, y_meas, u, w):
        """One predict/correct cycle against a single outlet measurement."""
        cfg, rom, deps = self.cfg, self.rom, self.deps
        r = rom.r
        y_meas = float(y_meas)
        if not math.isfinite(y_meas):
            raise ValueError("measurement must be finite")
        G, Gi = self.proj.Gamma, self.proj.GammaInv

        # 1-2: restrict the estimate and covariance to observer coordinates
        xh = G @ state.x_full
        Ph = G @ state.P_full @ Gi

        # 3: nonlinear prediction through one collocation step of the DAE
        pred = self._sim.step(
            RomState(xr=xh[:r].copy(), m_h=float(xh[r]), eps=float(xh[r + 1]),
                     T_s=float(xh[r + 2])), u, w, cfg.dt)
        z_pred = (pred.eps, pred.T_s)

        # 4: linearize at the predicted point
        coeffs = self._coef.coefficients(deps.maps, u)
        J = assemble_jacobians((pred.xr, pred.m_h), z_pred, u, w, rom, deps,
                               coeffs=coeffs, qflat=self._qflat,
                               fd_rel=cfg.fd_rel)

        # 5-7: propagate the covariance under the variant's linearized flow
        if cfg.variant == 1:
            Phi = transition_matrix(build_al1(J), cfg.dt, cap=cfg.expm_cap)
            Pd = Phi @ Ph[:r + 1, :r + 1] @ Phi.T \
                + noise_core(cfg.omega, self.basis)
        else:
            Phi = transition_matrix(build_al2(J), cfg.dt, cap=cfg.expm_cap)
            Pd = Phi @ Ph @ Phi.T \
                + noise_matrix(cfg.omega, self.basis, J, cfg.negate_psi_lower)
        Pd = 0.5 * (Pd + Pd.T)

        # 8: scalar innovation variance and gain
        chat = self._chat
        innov_var = float(chat @ Pd @ chat) + cfg.nu
        gain_skipped = not (innov_var > 0.0 and math.isfinite(innov_var))
        K = np.zeros(chat.shape[0]) if gain_skipped else (Pd @ chat) / innov_var

        # 9: state correction from the outlet innovation
        innovation = y_meas - rom_measurement(rom, pred.xr)
        if cfg.variant == 1:
            eta = np.concatenate([pred.xr, [pred.m_h]]) + K * innovation
            xh_new = np.concatenate([eta, [pred.eps, pred.T_s]])
        else:
            xh_new = np.concatenate(
                [pred.xr, [pred.m_h, pred.eps, pred.T_s]]) + K * innovation

        # 10: covariance correction
        Pd = Pd - np.outer(K, chat @ Pd)
        Pd = 0.5 * (Pd + Pd.T)
        if cfg.variant == 1:
            # algebraic rows stay as projected: eliminated from propagation
            Ph[:r + 1, :r + 1] = Pd
        else:
            Ph = Pd

        reconcile_failed = False
        if cfg.variant == 2:
            # 11: pull the corrected pair back onto the constraint manifold
            try:
                zr = reconcile_algebraic(xh_new, u, w, deps.params,
                                         atol=cfg.reconcile_atol,
                                         bounds=cfg.bounds)
                xh_new[r + 1], xh_new[r + 2] = zr
            except NewtonError:
                xh_new[r + 1], xh_new[r + 2] = z_pred
                reconcile_failed = True

        # 12-13: lift the estimate and covariance back to the grid
        x_full = Gi @ xh_new
        P_full = Gi @ Ph @ G

        if cfg.variant == 1:
            # reconciliation happens outside the covariance machinery, at
            # the lifted estimate
            try:
                zr = reconcile_algebraic(x_full, u, w, deps.params,
                                         atol=cfg.reconcile_atol,
                                         bounds=cfg.bounds)
                x_full[-2], x_full[-1] = zr
            except NewtonError:
                x_full[-2], x_full[-1] = z_pred
                reconcile_failed = True

        x_full = plausibility_project(x_full, cfg.bounds)
        P_full = 0.5 * (P_full + P_full.T)
        if not np.all(np.isfinite(P_full)):
            raise NumericalError(
                f"observer covariance lost finiteness at step {state.k + 1}")

        return EkfState(x_full=x_full, P_full=P_full, k=state.k + 1,
                        innovation=float(innovation),
                        innovation_variance=innov_var,
                        reconcile_failed=reconcile_failed,
                        gain_skipped=gain_skipped)


def ekf_step(state, y_meas, u, w, cfg, rom, basis, deps, scheme=None):
    """Functional single step; stateful loops should hold an Observer."""
    return Observer(cfg, rom, basis, deps, scheme).step(state, y_meas, u, w)


def full_order_observer(cfg, fom, deps, scheme=None):
    """Observer on the unreduced grid: identity bases, every block full size."""
    eye = np.eye(fom.n)
    basis = make_basis(eye, eye)
    return Observer(cfg, project_system(fom, basis), basis, deps, scheme)
