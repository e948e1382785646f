"""Honest-but-curious inference attacks on the masked protocol.

The attribute attack plays PP's counterpart: given one noise matrix it guesses
which instances formed the active set. The label attack plays PP denoising AP's
response: PP generated the noise columns, so it projects them out of the
masked gradient and reads labels off the gradient signs.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Optional

import numpy as np

from vfboost import rng
from vfboost.boost import GradPair, grad_hess
from vfboost.privacy.calibration import calibrate_C, calibrate_sigma2, mu_logistic
from vfboost.protocol.noise import (CategoricalMatrix, NoiseMatrix,
                                    information_noising, noise_calibration)

ENUMERATION_LIMIT = 24
_CHUNK = 1 << 16


@dataclasses.dataclass(frozen=True)
class AttackReport:
    """Per-trial success rates of one attack and the configuration used."""

    kind: str
    metrics: tuple[float, ...]
    config: dict
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.metrics:
            raise ValueError("need at least one trial")
        if any(not 0 <= m <= 1 for m in self.metrics):
            raise ValueError("metrics must lie in [0, 1]")

    @property
    def trials(self) -> int:
        return len(self.metrics)

    @property
    def mean(self) -> float:
        return float(np.mean(self.metrics))

    @property
    def std(self) -> float:
        return float(np.std(self.metrics, ddof=1)) if self.trials > 1 else 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "trials": self.trials, "mean": self.mean,
                "std": self.std, "metrics": list(self.metrics),
                "config": self.config, "flags": list(self.flags)}


@dataclasses.dataclass(frozen=True)
class ActiveSetGuess:
    active: tuple[int, ...]
    heuristic: bool


def pp_attribute_attack(noise: NoiseMatrix | np.ndarray,
                        n_active: int) -> ActiveSetGuess:
    """Guesses the active set as the subset of size n_active whose noise sums
    are closest to zero.

    The statistic of a subset S is sum over columns of |sum_{i in S} b_i|.
    Subsets are enumerated in lexicographic order and the first minimum wins.
    Beyond ENUMERATION_LIMIT instances a greedy search is used instead and the
    guess is flagged as heuristic.
    """
    b = noise.columns if isinstance(noise, NoiseMatrix) else np.asarray(noise)
    if b.ndim == 1:
        b = b[:, None]
    n = b.shape[0]
    if not 1 <= n_active <= n:
        raise ValueError("n_active must lie in [1, n]")
    if n_active == n:
        return ActiveSetGuess(tuple(range(n)), False)
    if n > ENUMERATION_LIMIT:
        return ActiveSetGuess(_greedy_subset(b, n_active), True)
    best_value, best_subset = math.inf, None
    combos = itertools.combinations(range(n), n_active)
    while True:
        chunk = np.fromiter(itertools.chain.from_iterable(
            itertools.islice(combos, _CHUNK)), dtype=np.int64)
        if chunk.size == 0:
            break
        chunk = chunk.reshape(-1, n_active)
        stat = np.abs(b[chunk].sum(axis=1)).sum(axis=1)
        i = int(np.argmin(stat))
        if stat[i] < best_value:
            best_value, best_subset = float(stat[i]), tuple(int(x)
                                                            for x in chunk[i])
    return ActiveSetGuess(best_subset, False)


def _greedy_subset(b: np.ndarray, n_active: int) -> tuple[int, ...]:
    chosen: list[int] = []
    running = np.zeros(b.shape[1])
    free = np.ones(b.shape[0], dtype=bool)
    for _ in range(n_active):
        stat = np.abs(running[None, :] + b).sum(axis=1)
        stat[~free] = np.inf
        i = int(np.argmin(stat))
        chosen.append(i)
        free[i] = False
        running += b[i]
    return tuple(sorted(chosen))


def bit_match(active: tuple[int, ...], bits: np.ndarray) -> float:
    """Fraction of positions where the guessed indicator equals the true one."""
    guess = np.zeros(len(bits), dtype=bool)
    guess[list(active)] = True
    return float(np.mean(guess == np.asarray(bits).astype(bool)))


def _random_bits(gen: np.random.Generator, n: int, n_active: int) -> np.ndarray:
    bits = np.zeros(n, dtype=bool)
    bits[gen.permutation(n)[:n_active]] = True
    return bits


def attribute_attack_trials(n: int, n_active: int, sigma1: float,
                            sigma2: float, W: int = 1, trials: int = 100,
                            seed: int = 0) -> AttackReport:
    """Runs the attribute attack on fresh random splitting vectors."""
    metrics, flags = [], set()
    for trial in range(trials):
        bits = _random_bits(rng.stream(seed, "trial", trial), n, n_active)
        M = CategoricalMatrix(bits[:, None], (0,))
        noise = noise_calibration(M, sigma1, sigma2, W, seed,
                                  node_key=(trial,))[0]
        guess = pp_attribute_attack(noise, n_active)
        if guess.heuristic:
            flags.add("heuristic")
        metrics.append(bit_match(guess.active, bits))
    return AttackReport("attribute-inference", tuple(metrics),
                        {"n": n, "n_active": n_active, "sigma1": sigma1,
                         "sigma2": sigma2, "W": W, "seed": seed},
                        tuple(sorted(flags)))


def ap_label_attack(noise: np.ndarray, g_noised: np.ndarray,
                    labels: np.ndarray,
                    attacker: str = "projection") -> tuple[float, bool]:
    """Label accuracy of a passive party reading AP's masked gradient.

    Args:
        noise: The (n, W) noise columns the passive party generated.
        g_noised: The masked gradient AP returned for that candidate.
        labels: True labels, used only for scoring.
        attacker: "projection" removes span(noise) before reading signs;
            "naive" reads the signs of the masked gradient directly.

    Returns:
        (accuracy, reliable); reliable is False when the noise span covers
        every instance.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 1:
        noise = noise[:, None]
    g_noised = np.asarray(g_noised, dtype=np.float64)
    n, W = noise.shape
    reliable = W < n
    if attacker == "projection":
        q, _ = np.linalg.qr(noise)
        estimate = g_noised - q @ (q.T @ g_noised)
    elif attacker == "naive":
        estimate = g_noised
    else:
        raise ValueError(f"unknown attacker {attacker!r}")
    predicted = (estimate < 0).astype(int)
    return float(np.mean(predicted == np.asarray(labels))), reliable


def label_attack_trials(n: int, eps: float, delta: float, W: int = 1,
                        trials: int = 50, seed: int = 0, sigma1: float = 1.0,
                        sigma2: Optional[float] = None, eps_pp: float = 1.0,
                        C: Optional[float] = None,
                        attacker: str = "projection") -> AttackReport:
    """Runs the label attack against one masked response per trial.

    Every trial draws balanced labels, gradients at margin 0, a random splitting
    vector with half the instances active, PP's noise and AP's masking with C
    calibrated from (eps, delta). `sigma2` defaults to PP's calibration at
    (eps_pp, 1/n); `C` overrides the calibrated radius.
    """
    if sigma2 is None:
        sigma2 = calibrate_sigma2(eps_pp, 1.0 / n, W, n, sigma1)
    n_active = n // 2
    if C is None:
        C = calibrate_C(eps, delta, n_active, n - n_active, mu_logistic(),
                        sigma1, sigma2)
    metrics, flags = [], set()
    for trial in range(trials):
        gen = rng.stream(seed, "trial", trial)
        labels = np.zeros(n, dtype=int)
        labels[gen.permutation(n)[:n // 2]] = 1
        gp = grad_hess(labels, np.zeros(n))
        bits = _random_bits(gen, n, n_active)
        M = CategoricalMatrix(bits[:, None], (0,))
        noise = noise_calibration(M, sigma1, sigma2, W, seed, node_key=(trial,))
        resp = information_noising(noise, GradPair(gp.g, gp.h), C, seed,
                                   node_key=(trial,))
        accuracy, reliable = ap_label_attack(noise[0].columns, resp.g[0], labels,
                                             attacker)
        if not reliable:
            flags.add("unreliable")
        metrics.append(accuracy)
    return AttackReport("label-inference", tuple(metrics),
                        {"n": n, "eps_ap": eps, "delta_ap": delta, "W": W,
                         "sigma1": sigma1, "sigma2": sigma2, "C": float(C),
                         "attacker": attacker, "seed": seed},
                        tuple(sorted(flags)))
