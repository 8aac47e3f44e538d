"""Gaussian process surrogates for the flow coefficient maps.

Three independent zero-mean processes with a squared-exponential kernel map
the operating point (air mass flow, vibration intensity) to the transport
speed v, the spreading coefficient D, and the discharge coefficient zeta.
Fitting solves the regularized kernel system once; prediction is a kernel
dot product clamped below so the physical coefficients stay positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IllConditionedError

CONDITION_BOUND = 1e14


@dataclass(frozen=True)
class GprModel:
    theta_train: np.ndarray      # (n, d) training inputs
    targets: np.ndarray          # (n,)
    lengthscales: np.ndarray     # (d,)
    signal_variance: float
    noise_variance: float
    alpha: np.ndarray            # (n,) precomputed weights
    clamp_floor: float


def _kernel(theta_a, theta_b, lengthscales, signal_variance):
    """Squared-exponential kernel matrix between two input sets."""
    a = theta_a[:, None, :] / lengthscales
    b = theta_b[None, :, :] / lengthscales
    sq = np.sum((a - b) ** 2, axis=-1)
    return signal_variance * np.exp(-0.5 * sq)


def gpr_fit(training, lengthscales, signal_variance=1.0, noise_variance=0.0,
            clamp_floor=1e-8):
    """Fit one coefficient map from ((mdot_a, a_vib), target) pairs.

    Raises IllConditionedError when the regularized kernel matrix is
    numerically singular (condition estimate above the bound).
    """
    pairs = list(training)
    if not pairs:
        raise ValueError("at least one training point is required")
    theta = np.array([np.asarray(p[0], dtype=float) for p in pairs])
    y = np.array([float(p[1]) for p in pairs])
    ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if np.any(ls <= 0) or signal_variance <= 0 or noise_variance < 0:
        raise ValueError("hyperparameters must be positive (noise may be zero)")
    if theta.ndim != 2 or ls.size != theta.shape[1]:
        raise ValueError("lengthscale count must match the input dimension")

    K = _kernel(theta, theta, ls, signal_variance)
    K[np.diag_indices_from(K)] += noise_variance
    lam = scipy.linalg.eigvalsh(K)
    cond = lam[-1] / lam[0] if lam[0] > 0 else np.inf
    if cond > CONDITION_BOUND:
        raise IllConditionedError(
            f"kernel matrix condition {cond:.3e} exceeds {CONDITION_BOUND:.1e}; "
            "add noise variance or drop duplicate inputs"
        )
    c, low = scipy.linalg.cho_factor(K, lower=True)
    alpha = scipy.linalg.cho_solve((c, low), y)
    return GprModel(theta_train=theta, targets=y, lengthscales=ls,
                    signal_variance=float(signal_variance),
                    noise_variance=float(noise_variance),
                    alpha=alpha, clamp_floor=float(clamp_floor))


def gpr_predict(model, theta):
    """Posterior mean at one operating point, clamped at the positive floor."""
    t = np.asarray(theta, dtype=float).reshape(1, -1)
    k_star = _kernel(t, model.theta_train, model.lengthscales, model.signal_variance)
    mean = float((k_star @ model.alpha)[0])
    return max(mean, model.clamp_floor)
