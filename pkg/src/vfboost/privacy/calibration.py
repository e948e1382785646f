"""Noise calibration for both parties.

The labelled party scales its response noise by a radius C chosen from its
(epsilon, delta) budget. The passive party chooses the ratio between its
structured noise and its isotropic noise from a Monte Carlo tail estimate of a
three-dimensional quadratic form whose coefficients come from circulant
eigenvalue sums.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from vfboost import rng
from vfboost.errors import CalibrationError, NumericError
from vfboost.privacy.accountant import PrivacyConfig, QueryBudget, budget_schedule

_CHUNK = 1 << 18


def mu_logistic() -> float:
    """Sensitivity constant 2e / (e + 1) used for logistic-loss derivatives."""
    return 2 * math.e / (math.e + 1)


def ap_sensitivity_budget(eps: float, delta: float) -> float:
    """Largest noise-normalized squared sensitivity allowed by (eps, delta).

    Equals 2(eps - 2 ln delta - 2 sqrt(ln delta (ln delta - eps))), evaluated in
    the rationalized form 2 eps^2 / (eps + 2K + 2 sqrt(K (K + eps))) with
    K = -ln delta, which avoids cancellation when the result is small.
    """
    if not eps > 0 or not 0 < delta < 1:
        raise ValueError("need eps > 0 and 0 < delta < 1")
    k = -math.log(delta)
    return 2 * eps * eps / (eps + 2 * k + 2 * math.sqrt(k * (k + eps)))


def sensitivity_sum(n_active, n_inactive, mu: float, sigma1: float,
                    sigma2: float):
    """Noise-normalized squared sensitivity at C = 1."""
    n_active = np.asarray(n_active, dtype=np.float64)
    n_inactive = np.asarray(n_inactive, dtype=np.float64)
    return (n_inactive * mu**2 / (2 * sigma1**2 + sigma2**2) +
            n_active * mu**2 / sigma2**2)


def calibrate_C(eps: float, delta: float, n_active, n_inactive, mu: float,
                sigma1: float, sigma2: float):
    """Smallest response-noise radius C meeting the labelled party's budget.

    Accepts scalars or arrays for the set sizes and returns the matching shape.

    Raises:
        CalibrationError: If sigma2 is zero; no finite C suffices then.
    """
    if not sigma2 > 0:
        raise CalibrationError("sigma2 = 0 needs an infinite C")
    if np.any(np.asarray(n_active) < 0) or np.any(np.asarray(n_inactive) < 0):
        raise ValueError("set sizes must be non-negative")
    value = (sensitivity_sum(n_active, n_inactive, mu, sigma1, sigma2) /
             ap_sensitivity_budget(eps, delta))
    return float(value) if np.ndim(value) == 0 else value


def pp_abc(r: float, n: int) -> tuple[float, float, float]:
    """Scale-free circulant sums a, b, c at noise ratio r = sigma2^2 / (2 sigma1^2).

    a, b and c average 1, cos(theta_j) and cos(2 theta_j) against the weights
    1 / (2 (1 - cos theta_j) + 2 r), theta_j = 2 pi j / n.
    """
    if not r > 0:
        raise ValueError("noise ratio must be positive")
    if n < 3:
        raise ValueError("need n >= 3")
    theta = 2 * np.pi * np.arange(n) / n
    cos1 = np.cos(theta)
    weight = 1.0 / (2 * (1 - cos1) + 2 * r)
    return (float(weight.mean()), float((weight * cos1).mean()),
            float((weight * np.cos(2 * theta)).mean()))


def pp_matrix(a: float, b: float, c: float) -> np.ndarray:
    """The 3x3 matrix whose eigenvalues weight the passive party's privacy loss."""
    return np.array([[b - c, a + c, b - a],
                     [a - b, 2 * b, a - b],
                     [b - a, a + c, b - c]])


def pp_k_eigs(a: float, b: float, c: float) -> tuple[float, float, float]:
    """Eigenvalues (k1, k2, k3) of `pp_matrix`, with k2 = a - c and k1 >= k3."""
    trace = 4 * b - a - c
    product = 2 * (2 * b * b - a * a - a * c)
    disc = trace * trace - 4 * product
    scale = max(1.0, trace * trace, abs(4 * product))
    if disc < -1e-12 * scale:
        raise NumericError(f"negative discriminant {disc}")
    root = math.sqrt(max(disc, 0.0))
    return 0.5 * (trace + root), a - c, 0.5 * (trace - root)


@dataclasses.dataclass(frozen=True)
class DeltaEstimate:
    """Monte Carlo estimate of delta with its standard error."""

    value: float
    stderr: float
    samples: int

    @property
    def conservative(self) -> float:
        return self.value + 3 * self.stderr


def _squared_normals(samples: int, seed: int) -> np.ndarray:
    chunks = []
    for index, start in enumerate(range(0, samples, _CHUNK)):
        size = min(_CHUNK, samples - start)
        chunks.append(rng.stream(seed, "mc", index).standard_normal((size, 3)))
    return np.square(np.concatenate(chunks))


def _pp_threshold(eps: float, W: int) -> float:
    if not eps > W * math.log(2):
        raise ValueError(f"eps_pp must exceed W*ln2 = {W * math.log(2):.4f}")
    return 2 * eps / W - 2 * math.log(2)


def _tail(squares: np.ndarray, k, threshold: float, W: int) -> DeltaEstimate:
    stat = squares @ np.asarray(k, dtype=np.float64)
    p = float(np.count_nonzero(stat >= threshold)) / squares.shape[0]
    n = squares.shape[0]
    return DeltaEstimate(W * p, W * math.sqrt(p * (1 - p) / n), n)


def pp_delta(eps: float, W: int, k, samples: int = 10**6,
             seed: int = 0) -> DeltaEstimate:
    """Monte Carlo estimate of W * Pr(sum_i k_i y_i^2 >= 2 eps / W - 2 ln 2).

    Args:
        eps: Passive party epsilon per noise matrix, above W ln 2.
        W: Noise columns per candidate.
        k: The three eigenvalues from `pp_k_eigs`.
        samples: Number of standard normal triples, at least 1e5.
        seed: Seed of the chunked sample streams.
    """
    if samples < 10**5:
        raise ValueError("need at least 1e5 samples")
    threshold = _pp_threshold(eps, W)
    return _tail(_squared_normals(samples, seed), k, threshold, W)


def pp_delta_at_ratio(eps: float, W: int, r: float, n: int,
                      samples: int = 10**6, seed: int = 0) -> DeltaEstimate:
    return pp_delta(eps, W, pp_k_eigs(*pp_abc(r, n)), samples, seed)


_RATIO_RANGE = (1e-6, 1e6)


def calibrate_ratio(eps: float, delta: float, W: int, n: int,
                    samples: int = 10**6,
                    seed: int = 0) -> tuple[float, DeltaEstimate]:
    """Smallest noise ratio r whose conservative delta estimate is <= delta.

    Bisects log r with common random numbers, so the estimate is a
    deterministic function of r during the search.
    """
    threshold = _pp_threshold(eps, W)
    if not 0 < delta < 1:
        raise ValueError("need 0 < delta < 1")
    squares = _squared_normals(samples, seed)

    def estimate(r):
        return _tail(squares, pp_k_eigs(*pp_abc(r, n)), threshold, W)

    lo, hi = math.log(_RATIO_RANGE[0]), math.log(_RATIO_RANGE[1])
    first = estimate(math.exp(lo))
    if first.conservative <= delta:
        return math.exp(lo), first
    if estimate(math.exp(hi)).conservative > delta:
        raise CalibrationError(
            f"no noise ratio in {_RATIO_RANGE} reaches delta_pp={delta}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if estimate(math.exp(mid)).conservative <= delta:
            hi = mid
        else:
            lo = mid
    r = math.exp(hi)
    final = estimate(r)
    if final.conservative > delta:
        raise CalibrationError("re-verification of the calibrated ratio failed")
    return r, final


def calibrate_sigma2(eps: float, delta: float, W: int, n: int, sigma1: float,
                     samples: int = 10**6, seed: int = 0) -> float:
    """Disturbing-noise scale for the passive party: sigma1 * sqrt(2 r)."""
    if not sigma1 > 0:
        raise ValueError("sigma1 must be positive")
    r, _ = calibrate_ratio(eps, delta, W, n, samples, seed)
    return sigma1 * math.sqrt(2 * r)


def cycle_covariance(size: int, sigma1: float, sigma2: float) -> np.ndarray:
    """Covariance of one noise column restricted to an active set of `size`.

    Consecutive differences around the cycle give variance 2 sigma1^2 + sigma2^2
    and covariance -sigma1^2 between cyclic neighbours. Two elements are each
    other's neighbour twice (-2 sigma1^2); a single element carries only the
    isotropic part.
    """
    if size < 1:
        raise ValueError("size must be positive")
    if size == 1:
        return np.array([[sigma2**2]])
    cov = np.eye(size) * (2 * sigma1**2 + sigma2**2)
    for i in range(size):
        j = (i + 1) % size
        cov[i, j] -= sigma1**2
        cov[j, i] -= sigma1**2
    return cov


def circulant_logdet(n: int, sigma1: float, sigma2: float) -> float:
    """Log-determinant of the n-cycle covariance from its circulant spectrum."""
    theta = 2 * np.pi * np.arange(n) / n
    return float(np.sum(np.log(2 * sigma1**2 * (1 - np.cos(theta)) + sigma2**2)))


def det_ratio(n: int, sigma1: float, sigma2: float) -> float:
    """det(Sigma2) / det(Sigma1) for neighbouring splitting vectors.

    Sigma2 has all n instances active; Sigma1 moves the first instance to the
    inactive set and keeps the remaining n - 1 in a cycle.
    """
    if n < 3:
        raise ValueError("need n >= 3")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    full = cycle_covariance(n, sigma1, sigma2)
    split = np.zeros((n, n))
    split[0, 0] = 2 * sigma1**2 + sigma2**2
    split[1:, 1:] = cycle_covariance(n - 1, sigma1, sigma2)
    sign_full, log_full = np.linalg.slogdet(full)
    sign_split, log_split = np.linalg.slogdet(split)
    if sign_full <= 0 or sign_split <= 0:
        raise NumericError("covariance is not positive definite")
    spectral = circulant_logdet(n, sigma1, sigma2)
    if not math.isclose(log_full, spectral, rel_tol=1e-8, abs_tol=1e-8):
        raise NumericError("dense and spectral determinants disagree")
    return math.exp(log_full - log_split)


@dataclasses.dataclass(frozen=True)
class CalibratedParams:
    """Noise parameters agreed on before training.

    Attributes:
        sigma1: Scale of the lossless (active and inactive) noise.
        sigma2: Scale of the disturbing noise.
        W: Noise columns per candidate.
        mu: Sensitivity constant of the released derivatives.
        ap: Labelled party budget per query.
        pp: Passive party budget per noise matrix.
        accountant: Settings of the composition accountant.
        fixed_C: When set, accounting is disabled and every candidate uses this
            response radius.
        pp_delta_estimate: Conservative delta of the calibrated ratio.
    """

    sigma1: float
    sigma2: float
    W: int
    mu: float
    ap: Optional[QueryBudget]
    pp: Optional[QueryBudget]
    accountant: dict
    fixed_C: Optional[float] = None
    pp_delta_estimate: Optional[float] = None

    @property
    def noise_ratio(self) -> float:
        return self.sigma2**2 / (2 * self.sigma1**2) if self.sigma1 > 0 else math.inf

    @property
    def accounting(self) -> bool:
        return self.fixed_C is None

    @property
    def max_units(self) -> Optional[int]:
        return self.accountant.get("k") if self.accounting else None

    @classmethod
    def unaccounted(cls, sigma1: float, sigma2: float, C: float,
                    W: int = 1) -> "CalibratedParams":
        """Fixed noise with privacy accounting disabled."""
        if min(sigma1, sigma2, C) < 0 or W < 1:
            raise ValueError("noise parameters must be non-negative")
        return cls(sigma1=sigma1, sigma2=sigma2, W=W, mu=mu_logistic(), ap=None,
                   pp=None, accountant={"mode": "off"}, fixed_C=C)

    def C_for(self, n_active, n_inactive):
        """Response radius for candidates with the given set sizes."""
        if self.fixed_C is not None:
            return np.broadcast_to(float(self.fixed_C),
                                   np.shape(n_active)).astype(np.float64)
        return np.asarray(calibrate_C(self.ap.eps, self.ap.delta, n_active,
                                      n_inactive, self.mu, self.sigma1,
                                      self.sigma2), dtype=np.float64)

    def to_dict(self) -> dict:
        doc = {"sigma1": self.sigma1, "sigma2": self.sigma2, "W": self.W,
               "noise_ratio": self.noise_ratio, "accountant": self.accountant}
        if self.accounting:
            doc["C_formula_inputs"] = {
                "mu": self.mu,
                "sigma1": self.sigma1,
                "sigma2": self.sigma2,
                "inactive_weight": self.mu**2 / (2 * self.sigma1**2 +
                                                 self.sigma2**2),
                "active_weight": self.mu**2 / self.sigma2**2,
                "budget": ap_sensitivity_budget(self.ap.eps, self.ap.delta),
            }
            doc["per_query"] = {
                "ap": {"eps": self.ap.eps, "delta": self.ap.delta},
                "pp": {"eps": self.pp.eps, "delta": self.pp.delta},
            }
            doc["pp_delta_estimate"] = self.pp_delta_estimate
        else:
            doc["C_formula_inputs"] = {"fixed_C": self.fixed_C}
            doc["per_query"] = None
        return doc


def calibrate(config: PrivacyConfig, n: int, sigma1: float = 1.0,
              releases_per_node: int = 1, samples: int = 10**6,
              seed: int = 0) -> CalibratedParams:
    """Turns total budgets into noise parameters for a root node of n instances.

    The noise ratio is fixed once from the root size; C stays adaptive and is
    recomputed per candidate from its active and inactive set sizes.
    """
    schedule = budget_schedule(config, releases_per_node=releases_per_node)
    r, estimate = calibrate_ratio(schedule.pp.eps, schedule.pp.delta, config.W,
                                  max(n, 3), samples, seed)
    return CalibratedParams(sigma1=sigma1, sigma2=sigma1 * math.sqrt(2 * r),
                            W=config.W, mu=mu_logistic(), ap=schedule.ap,
                            pp=schedule.pp, accountant=schedule.to_dict(),
                            pp_delta_estimate=estimate.conservative)
