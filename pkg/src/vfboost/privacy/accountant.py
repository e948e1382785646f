"""Sequential and parallel composition of (epsilon, delta) mechanisms."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

from vfboost.errors import CalibrationError

COMPOSITION_MODES = ("basic", "advanced")
PP_ACCOUNTING_MODES = ("per-release", "composed")


def _check_pair(eps: float, delta: float) -> None:
    if not (eps >= 0 and 0 <= delta <= 1):
        raise ValueError(f"invalid privacy pair ({eps}, {delta})")


def advanced_epsilon(eps: float, k: int, delta_prime: float) -> float:
    """Total epsilon of k-fold advanced composition."""
    return (eps * math.sqrt(2 * k * math.log(1 / delta_prime)) +
            k * eps * math.expm1(eps))


def compose(mechanisms: Sequence[tuple[float, float]], mode: str = "basic",
            delta_prime: Optional[float] = None) -> tuple[float, float]:
    """Sequential composition.

    Args:
        mechanisms: (epsilon, delta) of each mechanism run on the same data.
        mode: "basic" sums the pairs; "advanced" applies the k-fold bound and
            needs identical pairs.
        delta_prime: Slack of the advanced bound, in (0, 1).

    Returns:
        Total (epsilon, delta).
    """
    mechanisms = list(mechanisms)
    for eps, delta in mechanisms:
        _check_pair(eps, delta)
    if mode == "basic":
        return (math.fsum(e for e, _ in mechanisms),
                math.fsum(d for _, d in mechanisms))
    if mode != "advanced":
        raise ValueError(f"unknown composition mode {mode!r}")
    if delta_prime is None or not 0 < delta_prime < 1:
        raise ValueError("advanced composition needs delta_prime in (0, 1)")
    if not mechanisms:
        return 0.0, 0.0
    if any(m != mechanisms[0] for m in mechanisms):
        raise ValueError("advanced composition needs identical mechanisms")
    eps, delta = mechanisms[0]
    k = len(mechanisms)
    return advanced_epsilon(eps, k, delta_prime), k * delta + delta_prime


def compose_parallel(
        mechanisms: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mechanisms on disjoint subsets cost the worst of them."""
    mechanisms = list(mechanisms)
    if not mechanisms:
        return 0.0, 0.0
    for eps, delta in mechanisms:
        _check_pair(eps, delta)
    return max(e for e, _ in mechanisms), max(d for _, d in mechanisms)


@dataclasses.dataclass(frozen=True)
class PrivacyConfig:
    """Requested budgets for both parties.

    Attributes:
        eps_ap: Total epsilon for the labelled party's releases.
        delta_ap: Total delta for the labelled party's releases.
        eps_pp: Epsilon for the passive party's noise matrices.
        delta_pp: Delta for the passive party's noise matrices.
        W: Noise columns per candidate.
        rounds: Boosting rounds.
        max_depth: Tree depth.
        composition: "basic" or "advanced".
        pp_accounting: "per-release" treats (eps_pp, delta_pp) as the budget of
            every noise-matrix release; "composed" splits it over all releases.
    """

    eps_ap: float
    delta_ap: float
    eps_pp: float
    delta_pp: float
    W: int = 1
    rounds: int = 20
    max_depth: int = 4
    composition: str = "advanced"
    pp_accounting: str = "per-release"

    def __post_init__(self):
        if not self.eps_ap > 0 or not 0 < self.delta_ap < 1:
            raise ValueError("need eps_ap > 0 and 0 < delta_ap < 1")
        if not 0 < self.delta_pp < 1:
            raise ValueError("need 0 < delta_pp < 1")
        if self.W < 1:
            raise ValueError("W must be at least 1")
        if not self.eps_pp > self.W * math.log(2):
            raise ValueError(
                f"eps_pp must exceed W*ln2 = {self.W * math.log(2):.4f}")
        if self.composition not in COMPOSITION_MODES:
            raise ValueError(f"unknown composition mode {self.composition!r}")
        if self.pp_accounting not in PP_ACCOUNTING_MODES:
            raise ValueError(f"unknown PP accounting {self.pp_accounting!r}")


@dataclasses.dataclass(frozen=True)
class QueryBudget:
    eps: float
    delta: float


@dataclasses.dataclass(frozen=True)
class Schedule:
    """Per-query budgets and the accountant settings that produced them."""

    ap: QueryBudget
    pp: QueryBudget
    mode: str
    k: int
    delta_prime: float
    releases_per_node: int
    pp_accounting: str

    def to_dict(self) -> dict:
        return {"mode": self.mode, "k": self.k, "delta_prime": self.delta_prime,
                "releases_per_node": self.releases_per_node,
                "pp_accounting": self.pp_accounting}


def split_budget(eps: float, delta: float, k: int,
                 mode: str) -> tuple[QueryBudget, float]:
    """Largest per-query pair whose k-fold composition stays within the total."""
    if k <= 1 and mode == "basic":
        return QueryBudget(eps, delta), 0.0
    if mode == "basic":
        eps_q, delta_q = eps / k, delta / k
        while compose([(eps_q, delta_q)] * k)[0] > eps:
            eps_q = math.nextafter(eps_q, 0.0)
        while compose([(eps_q, delta_q)] * k)[1] > delta:
            delta_q = math.nextafter(delta_q, 0.0)
        return QueryBudget(eps_q, delta_q), 0.0
    delta_prime = delta / 2
    delta_q = (delta - delta_prime) / k
    while k * delta_q + delta_prime > delta:
        delta_q = math.nextafter(delta_q, 0.0)
    lo, hi = 0.0, eps
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if advanced_epsilon(mid, k, delta_prime) <= eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    if not lo > 0:
        raise CalibrationError(f"no positive per-query epsilon for k={k}")
    return QueryBudget(lo, delta_q), delta_prime


def budget_schedule(config: PrivacyConfig, rounds: Optional[int] = None,
                    depth: Optional[int] = None,
                    releases_per_node: int = 1) -> Schedule:
    """Per-query budgets from total budgets.

    Same-depth nodes touch disjoint instances, so one tree level costs one
    sequential unit; a tree costs `depth` units and training `rounds * depth`.
    `releases_per_node` multiplies this when every candidate release at a node
    is counted on its own.

    Raises:
        CalibrationError: If composed PP releases leave a per-query epsilon at or
            below W*ln2.
    """
    rounds = config.rounds if rounds is None else rounds
    depth = config.max_depth if depth is None else depth
    if releases_per_node < 1:
        raise ValueError("releases_per_node must be at least 1")
    k = max(1, rounds * depth * releases_per_node)
    ap, delta_prime = split_budget(config.eps_ap, config.delta_ap, k,
                                   config.composition)
    if config.pp_accounting == "per-release":
        pp = QueryBudget(config.eps_pp, config.delta_pp)
    else:
        pp, _ = split_budget(config.eps_pp, config.delta_pp, k,
                             config.composition)
        if not pp.eps > config.W * math.log(2):
            raise CalibrationError(
                f"composed PP budget gives per-release eps {pp.eps:.4g}, "
                f"which is not above W*ln2 = {config.W * math.log(2):.4g}")
    return Schedule(ap=ap, pp=pp, mode=config.composition, k=k,
                    delta_prime=delta_prime,
                    releases_per_node=releases_per_node,
                    pp_accounting=config.pp_accounting)
