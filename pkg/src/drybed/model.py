"""Grey-box dryer model: semi-discretized moisture transport plus holdup.

The moisture field is advected, spread, and depleted along the bed on an
N-point grid; the holdup mass follows a weir discharge balance; porosity and
saturation temperature close the system algebraically. All nonlinearity is
collected into a five-entry coefficient vector so the grid dynamics are
linear in the state given those coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import bed_height, drying_potential, eval_algebraic_residual
from .errors import DegenerateFeedError
from .gpr import GprModel, gpr_predict


@dataclass(frozen=True)
class GridConfig:
    """Uniform spatial grid along the bed: points z_i = i*dz, i = 0..N-1."""

    N: int
    L: float

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("grid needs at least 2 points")
        if self.L <= 0:
            raise ValueError("bed length must be positive")

    @property
    def dz(self):
        return self.L / self.N

    @property
    def z(self):
        return np.arange(self.N) * self.dz


@dataclass
class FomState:
    """Full-order state: moisture grid, holdup mass, and algebraic pair."""

    x1: np.ndarray
    m_h: float
    eps: float
    T_s: float

    def validate(self):
        if np.any(self.x1 < 0) or not np.all(np.isfinite(self.x1)):
            raise ValueError("moisture grid entries must be finite and nonnegative")
        if self.m_h <= 0:
            raise ValueError("holdup mass must be positive")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("porosity must lie in (0, 1)")
        if not np.isfinite(self.T_s):
            raise ValueError("saturation temperature must be finite")
        return self

    def copy(self):
        return FomState(self.x1.copy(), self.m_h, self.eps, self.T_s)


@dataclass(frozen=True)
class PlantInputs:
    T_a: float
    mdot_a: float
    a_vib: float
    dP: float

    def __post_init__(self):
        if self.mdot_a < 0:
            raise ValueError("air mass flow must be nonnegative")
        if self.dP < 0:
            raise ValueError("pressure loss must be nonnegative")

    @property
    def theta(self):
        return np.array([self.mdot_a, self.a_vib])


@dataclass(frozen=True)
class Disturbances:
    mdot_s: float
    mdot_l: float
    phi_a: float

    def __post_init__(self):
        if self.mdot_s < 0 or self.mdot_l < 0:
            raise ValueError("feed rates must be nonnegative")
        if not 0.0 <= self.phi_a <= 1.0:
            raise ValueError("inlet relative humidity must lie in [0, 1]")


@dataclass(frozen=True)
class QTensor:
    """Coupling matrices of the grid dynamics and the boundary inflow vector."""

    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    Q4: np.ndarray
    b1: np.ndarray


@dataclass(frozen=True)
class PhysicalParams:
    k_d1: float        # drying-rate magnitude
    rho_s: float       # solid density, kg/m^3
    rho_a: float       # air density, kg/m^3
    mu_a: float        # air viscosity, Pa s
    d_p: float         # particle diameter, m
    A_bed: float       # bed cross section, m^2
    c_pa: float        # air specific heat, J/kg/K
    dh_v: float        # latent heat, J/kg
    P_a: float         # total air pressure, Pa
    lambda_phi: float  # drying-profile decay length, m
    g: float = 9.81

    def __post_init__(self):
        for name in ("k_d1", "rho_s", "rho_a", "mu_a", "d_p", "A_bed",
                     "c_pa", "dh_v", "P_a", "lambda_phi", "g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"physical parameter {name} must be positive")


@dataclass(frozen=True)
class CoefficientMaps:
    """The three fitted coefficient surrogates."""

    v: GprModel
    D: GprModel
    zeta: GprModel


def drying_profile(z, lambda_phi):
    """Falling drying intensity along the bed, normalized to one at the inlet."""
    return np.exp(-np.asarray(z, dtype=float) / lambda_phi)


def assemble_q_matrices(grid, params):
    """Dense coupling matrices for the semi-discretized grid dynamics.

    Q1 carries upwind transport, Q2 the conservative spreading stencil with
    closed ends, Q3 the sampled drying profile, Q4 the holdup dilution; b1
    injects the feed moisture at the first grid point.
    """
    N, dz = grid.N, grid.dz
    Q1 = (np.diag(np.full(N, -1.0)) + np.diag(np.ones(N - 1), -1)) / dz
    main = np.full(N, -2.0)
    main[0] = main[-1] = -1.0
    Q2 = (np.diag(main) + np.diag(np.ones(N - 1), 1) + np.diag(np.ones(N - 1), -1)) / dz ** 2
    Q3 = -np.diag(drying_profile(grid.z, params.lambda_phi))
    Q4 = -np.eye(N)
    b1 = np.zeros(N)
    b1[0] = 1.0 / dz
    return QTensor(Q1=Q1, Q2=Q2, Q3=Q3, Q4=Q4, b1=b1)


def predict_coefficients(maps, u):
    """The three surrogate outputs at the current operating point."""
    theta = u.theta
    return (gpr_predict(maps.v, theta), gpr_predict(maps.D, theta),
            gpr_predict(maps.zeta, theta))


def uhat_from_coefficients(coeffs, x2, u, w, params, grid):
    """Coefficient vector from pre-evaluated surrogate outputs (v, D, zeta).

    The surrogates depend on the operating point only, so steppers evaluate
    them once per step and call this per collocation node.
    """
    v, D, zeta = coeffs
    m_h, eps, T_s = float(x2[0]), float(x2[1]), float(x2[2])
    if m_h <= 1e-12:
        raise DegenerateFeedError("holdup mass vanished; dilution rate undefined")
    if w.mdot_s <= 0:
        raise DegenerateFeedError("solid feed vanished; feed moisture undefined")
    dY = drying_potential(T_s, u, w, params)
    mdot_h = w.mdot_s - discharge_rate(m_h, eps, zeta, params, grid)
    c_in = w.mdot_l / w.mdot_s
    return np.array([
        v,
        D,
        params.k_d1 * (u.mdot_a / m_h) * dY,
        mdot_h / m_h - 1.0,
        v * c_in,
    ])


def eval_vector_field(x2, u, w, maps, params, grid):
    """Coefficient vector [v, D, drying rate, dilution rate, inflow speed].

    x2 is the (m_h, eps, T_s) triple. The fourth entry is shifted by minus
    one so the grid dynamics keep a fixed negative-identity linear part.
    """
    return uhat_from_coefficients(predict_coefficients(maps, u), x2, u, w,
                                  params, grid)


def discharge_rate(m_h, eps, zeta, params, grid):
    """Solid outflow over the weir at the bed end."""
    h_b = bed_height(m_h, eps, params)
    return zeta * (m_h / grid.L) * np.sqrt(2.0 * params.g * h_b)


def holdup_derivative(m_h, eps, zeta, w, params, grid):
    return w.mdot_s - discharge_rate(m_h, eps, zeta, params, grid)


def apply_grid_operator(uhat, x1, c_in_speed, grid, phi_vec):
    """Grid part of the dynamics in the coefficient form, structure-exploiting.

    Equals -x1 + sum_i uhat_i Q_i x1 + b1 * uhat_5 without forming the dense
    matrices; the identity part of the dilution slice cancels the fixed
    negative identity.
    """
    dz = grid.dz
    v, D, u3, u4 = uhat[0], uhat[1], uhat[2], uhat[3]
    adv = np.empty_like(x1)
    adv[0] = -x1[0]
    adv[1:] = x1[:-1] - x1[1:]
    diff = np.empty_like(x1)
    diff[0] = x1[1] - x1[0]
    diff[1:-1] = x1[:-2] - 2.0 * x1[1:-1] + x1[2:]
    diff[-1] = x1[-2] - x1[-1]
    out = (v / dz) * adv + (D / dz ** 2) * diff - u3 * (phi_vec * x1) + (u4 + 1.0) * (-x1)
    out[0] += c_in_speed / dz
    return out


def eval_fom_rhs(state, u, w, deps, route="bilinear"):
    """Time derivative of (x1, m_h).

    route selects between the production coefficient-form evaluation and an
    explicit stencil-by-stencil evaluation kept as an independent check.
    """
    grid, params, maps = deps.grid, deps.params, deps.maps
    x1 = state.x1
    uhat = eval_vector_field((state.m_h, state.eps, state.T_s), u, w, maps, params, grid)
    zeta = gpr_predict(maps.zeta, u.theta)
    dm_h = holdup_derivative(state.m_h, state.eps, zeta, w, params, grid)
    if route == "bilinear":
        dx1 = apply_grid_operator(uhat, x1, uhat[4], grid, deps.phi_vec)
    elif route == "direct":
        dx1 = _direct_stencil_rhs(uhat, x1, grid, params, w)
    else:
        raise ValueError(f"unknown rhs route {route!r}")
    return dx1, dm_h


def _direct_stencil_rhs(uhat, x1, grid, params, w):
    """Pointwise transport equation evaluation, term by term.

    Written deliberately as the continuous-equation reading (upwind transport,
    closed-end spreading, profiled depletion, dilution, boundary inflow) so it
    stays an independent cross-check of the coefficient-form route.
    """
    N, dz = grid.N, grid.dz
    v, D, u3 = uhat[0], uhat[1], uhat[2]
    c_in = w.mdot_l / w.mdot_s
    dilution = uhat[3] + 1.0  # holdup growth rate mdot_h / m_h
    phi = drying_profile(grid.z, params.lambda_phi)
    dx1 = np.zeros(N)
    for i in range(N):
        if i == 0:
            transport = v * (c_in - x1[0]) / dz
            spread = D * (x1[1] - x1[0]) / dz ** 2
        else:
            transport = v * (x1[i - 1] - x1[i]) / dz
            if i == N - 1:
                spread = D * (x1[N - 2] - x1[N - 1]) / dz ** 2
            else:
                spread = D * (x1[i - 1] - 2.0 * x1[i] + x1[i + 1]) / dz ** 2
        drying = -u3 * phi[i] * x1[i]
        dx1[i] = transport + spread + drying - dilution * x1[i]
    return dx1


def outlet_measurement(x1):
    """Moisture at the last grid point; the plant's single measured output."""
    return float(np.asarray(x1)[-1])


@dataclass(frozen=True)
class ModelDeps:
    """Shared read-only bundle for rhs evaluations."""

    grid: GridConfig
    params: PhysicalParams
    maps: CoefficientMaps
    phi_vec: np.ndarray = field(default=None)

    @staticmethod
    def build(grid, params, maps):
        return ModelDeps(grid=grid, params=params, maps=maps,
                         phi_vec=drying_profile(grid.z, params.lambda_phi))


def algebraic_residual_state(state, u, w, params):
    """Constraint residual at a full state (convenience wrapper)."""
    return eval_algebraic_residual(state.m_h, (state.eps, state.T_s), u, w, params)
