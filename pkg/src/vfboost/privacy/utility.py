"""Upper bound on the deviation of a noised split score."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.special import ndtr

_TRUNCATION = 12.0


def utility_kappa(n_active: int, C: float, sigma2: float) -> float:
    """Standard deviation of a noised child gradient sum."""
    return math.sqrt(n_active * C) * sigma2


def _child_bound(alpha: float, kappa: float, mean_g: float,
                 mean_den: float) -> float:
    """Bound on Pr(|X^2 / Y - c| >= alpha) for X ~ N(mean_g, kappa^2),
    Y ~ N(mean_den, kappa^2) and c = mean_g^2 / mean_den.

    The two events X^2 >= (c + alpha) Y and X^2 <= (c - alpha) Y are integrated
    over Y > 0; Y <= 0 is bounded by its probability.
    """
    center = mean_g**2 / mean_den
    beta_hi = center + alpha
    beta_lo = center - alpha

    def integrand(s):
        t = mean_den + kappa * s
        weight = math.exp(-0.5 * s * s) / math.sqrt(2 * math.pi)
        root_hi = math.sqrt(beta_hi * t)
        root_lo = math.sqrt(beta_lo * t)
        above = (ndtr((mean_g - root_hi) / kappa) +
                 ndtr((-root_hi - mean_g) / kappa))
        below = max(0.0, ndtr((root_lo - mean_g) / kappa) -
                    ndtr((-root_lo - mean_g) / kappa))
        return (above + below) * weight

    lower = max(-mean_den / kappa, -_TRUNCATION)
    if lower >= _TRUNCATION:
        value = 0.0
    else:
        value, _ = integrate.quad(integrand, lower, _TRUNCATION,
                                  points=[0.0] if lower < 0 else None,
                                  epsabs=1e-13, epsrel=1e-8, limit=400)
    return value + float(ndtr(-mean_den / kappa))


def utility_bound(alpha: float, kappa: float, g_left: float, h_left: float,
                  g_right: float, h_right: float, lam: float) -> float:
    """Bound U(alpha, kappa) on Pr(|noised score - score| >= alpha).

    Each child's gradient and regularized Hessian sums are modelled as normals
    with standard deviation `kappa`. The result can exceed 1; callers reporting
    a probability should clip it.

    Args:
        alpha: Deviation, positive and at most min(g_L^2/(h_L+lam),
            g_R^2/(h_R+lam)).
        kappa: Noise standard deviation of each child sum, positive.
        g_left, h_left, g_right, h_right: Noise-free child sums.
        lam: L2 regularizer.

    Returns:
        A value in [0, 4].
    """
    if not alpha > 0 or not kappa > 0:
        raise ValueError("alpha and kappa must be positive")
    den_left, den_right = h_left + lam, h_right + lam
    if not den_left > 0 or not den_right > 0:
        raise ValueError("regularized child Hessian sums must be positive")
    limit = min(g_left**2 / den_left, g_right**2 / den_right)
    if alpha > limit:
        raise ValueError(
            f"alpha={alpha} is outside the closed-form regime (<= {limit})")
    total = (_child_bound(alpha, kappa, g_left, den_left) +
             _child_bound(alpha, kappa, g_right, den_right))
    return float(np.clip(total, 0.0, 4.0))
