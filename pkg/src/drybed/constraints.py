"""Algebraic closures: bed expansion and adiabatic saturation.

Two scalar constraints tie the algebraic pair (porosity, saturation
temperature) to the holdup mass and the air-side inputs. Both are strictly
monotone in their own variable, so each has at most one root and the joint
Newton solve is well posed whenever a root exists.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .numerics import NewtonSettings, newton_solve

# Magnus saturation pressure constants (pressure in Pa, temperature in deg C)
_MAGNUS_A = 610.94
_MAGNUS_B = 17.625
_MAGNUS_C = 243.04

_EPS_MARGIN = 1e-9


def saturation_pressure(T_c):
    """Saturation vapor pressure over liquid water, Magnus form."""
    return _MAGNUS_A * np.exp(_MAGNUS_B * T_c / (T_c + _MAGNUS_C))


def humidity_ratio(phi, T_c, P_a):
    """Absolute humidity (kg water per kg dry air) at relative humidity phi."""
    p_sat = saturation_pressure(T_c)
    if p_sat >= P_a:
        raise DomainError(
            f"saturation pressure {p_sat:.1f} Pa reaches total pressure at {T_c:.2f} C"
        )
    p_v = phi * p_sat
    return 0.622 * p_v / (P_a - p_v)


def superficial_velocity(u, params):
    return u.mdot_a / (params.rho_a * params.A_bed)


def bed_height(m_h, eps, params):
    """Bed height from holdup mass at porosity eps."""
    return m_h / (params.rho_s * params.A_bed * (1.0 - eps))


def pressure_drop_residual(eps, m_h, u, params):
    """g1: measured bed pressure loss minus the packed-bed expansion value."""
    if not _EPS_MARGIN < eps < 1.0 - _EPS_MARGIN:
        raise DomainError(f"porosity {eps} outside (0, 1)")
    u_s = superficial_velocity(u, params)
    h_b = bed_height(m_h, eps, params)
    viscous = 150.0 * params.mu_a * (1.0 - eps) ** 2 / (eps ** 3 * params.d_p ** 2) * u_s
    inertial = 1.75 * (1.0 - eps) * params.rho_a / (eps ** 3 * params.d_p) * u_s ** 2
    return u.dP - h_b * (viscous + inertial)


def drying_potential(T_s, u, w, params):
    """Humidity headroom between saturated air at T_s and the inlet air."""
    y_sat = humidity_ratio(1.0, T_s, params.P_a)
    y_in = humidity_ratio(w.phi_a, u.T_a, params.P_a)
    return y_sat - y_in


def saturation_residual(T_s, u, w, params):
    """g2: sensible heat given up by the air minus latent heat taken up."""
    dY = drying_potential(T_s, u, w, params)
    return params.c_pa * (u.T_a - T_s) - dY * params.dh_v


def saturation_residual_derivative(T_s, params):
    """d g2 / d T_s, for Newton on the scalar saturation equation."""
    p_sat = saturation_pressure(T_s)
    if p_sat >= params.P_a:
        raise DomainError(
            f"saturation pressure {p_sat:.1f} Pa reaches total pressure at {T_s:.2f} C"
        )
    dp = p_sat * _MAGNUS_B * _MAGNUS_C / (T_s + _MAGNUS_C) ** 2
    dy_sat = 0.622 * params.P_a * dp / (params.P_a - p_sat) ** 2
    return -params.c_pa - dy_sat * params.dh_v


def pressure_drop_gradient(eps, m_h, u, params):
    """(d g1 / d eps, d g1 / d m_h) at one point."""
    if not _EPS_MARGIN < eps < 1.0 - _EPS_MARGIN:
        raise DomainError(f"porosity {eps} outside (0, 1)")
    u_s = superficial_velocity(u, params)
    h_b = bed_height(m_h, eps, params)
    viscous = 150.0 * params.mu_a * (1.0 - eps) ** 2 / (eps ** 3 * params.d_p ** 2) * u_s
    inertial = 1.75 * (1.0 - eps) * params.rho_a / (eps ** 3 * params.d_p) * u_s ** 2
    dvisc = (150.0 * params.mu_a * u_s / params.d_p ** 2
             * (1.0 - eps) * (-2.0 * eps - 3.0 * (1.0 - eps)) / eps ** 4)
    dinert = (1.75 * params.rho_a * u_s ** 2 / params.d_p
              * (-eps - 3.0 * (1.0 - eps)) / eps ** 4)
    dh_b = h_b / (1.0 - eps)
    d_eps = -(dh_b * (viscous + inertial) + h_b * (dvisc + dinert))
    d_m_h = -h_b * (viscous + inertial) / m_h
    return d_eps, d_m_h


def eval_algebraic_residual(m_h, z, u, w, params):
    """Both constraint residuals [g1, g2] at algebraic pair z = (eps, T_s).

    The moisture grid does not enter either constraint; only the holdup mass
    couples the algebraic pair to the differential states.
    """
    eps, T_s = float(z[0]), float(z[1])
    if m_h <= 0:
        raise DomainError(f"holdup mass {m_h} must be positive")
    return np.array([
        pressure_drop_residual(eps, m_h, u, params),
        saturation_residual(T_s, u, w, params),
    ])


def _guarded_residual(m_h, u, w, params):
    def res(z):
        try:
            return eval_algebraic_residual(m_h, z, u, w, params)
        except DomainError:
            # out-of-domain trial points must look bad, not fatal, so the
            # damped line search backs off instead of aborting
            return np.array([np.inf, np.inf])
    return res


def solve_algebraic(m_h, u, w, params, z_guess=None, settings=None):
    """Solve g(m_h, z, u, w) = 0 for z = (eps, T_s) by damped Newton."""
    # residual entries carry Pa and J/kg magnitudes (~1e4), so the achievable
    # absolute floor sits near 1e-11; 1e-10 is the tightest robust demand
    settings = settings or NewtonSettings(atol=1e-10, max_iter=80)
    if z_guess is None:
        z_guess = np.array([0.7, 0.5 * u.T_a])
    z = newton_solve(_guarded_residual(m_h, u, w, params), None,
                     np.asarray(z_guess, dtype=float), settings)
    return float(z[0]), float(z[1])
