"""Two-party training: the masked protocol, the noisy-gradient baseline and
transcript replay."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np

from vfboost import rng
from vfboost.boost import (TIE_RTOL, BoostParams, Dataset, GradPair,
                           SplitChoice, TreeModel, feature_candidates,
                           grad_hess, grow_tree, local_best_split,
                           score_candidates, select_best)
from vfboost.errors import ProtocolError
from vfboost.privacy.accountant import split_budget
from vfboost.privacy.calibration import CalibratedParams, mu_logistic
from vfboost.protocol.noise import NoisedResponse, node_matrix, pp_evaluate_splits
from vfboost.protocol.parties import ActiveParty, PassiveParty, handle_table
from vfboost.protocol.transcript import ProtocolTranscript


@dataclasses.dataclass(frozen=True)
class TrainResult:
    """A two-party model and the artefacts needed to use or audit it.

    Attributes:
        model: The ensemble; PP splits refer to handles.
        pp_table: PP's private handle -> (column, threshold) map.
        transcript: Message log (masked training only).
        units_used: Sequential privacy units consumed.
    """

    model: TreeModel
    pp_table: list[tuple[int, float]]
    transcript: Optional[ProtocolTranscript] = None
    units_used: int = 0


def combine(ap: Optional[SplitChoice],
            pp: Optional[SplitChoice]) -> Optional[SplitChoice]:
    """AP keeps the node unless PP's score beats it beyond the tie tolerance."""
    if pp is None:
        return ap
    if ap is None:
        return pp
    return pp if pp.score > ap.score + TIE_RTOL * ap.scale else ap


class BudgetOdometer:
    """Counts sequential privacy units; one tree level costs `per_level`."""

    def __init__(self, limit: Optional[int], per_level: int = 1):
        self.limit = limit
        self.per_level = per_level
        self.used = 0
        self._levels: set[tuple[int, int]] = set()
        self.exhausted = False

    def charge(self, round_: int, depth: int) -> bool:
        if (round_, depth) in self._levels:
            return True
        if self.limit is not None and self.used + self.per_level > self.limit:
            self.exhausted = True
            return False
        self._levels.add((round_, depth))
        self.used += self.per_level
        return True


def _check_partitions(ap_data: Dataset, pp_features: np.ndarray) -> np.ndarray:
    pp_features = np.asarray(pp_features, dtype=np.float64)
    if pp_features.ndim != 2 or pp_features.shape[0] != ap_data.n:
        raise ValueError("PP features must be aligned with the AP rows")
    if not np.all(np.isfinite(pp_features)):
        raise ValueError("PP feature values must be finite")
    return pp_features


def _boost(ap_data: Dataset, params: BoostParams, clip: Optional[float],
           odometer: BudgetOdometer, pp_split) -> TreeModel:
    """Boosting loop shared by both two-party trainers.

    pp_split(round, node_id, index, node_gp) returns PP's proposal for a node.
    """
    ap_thresholds = feature_candidates(ap_data.features, params.candidates)
    margins = np.zeros(ap_data.n)
    rows = np.arange(ap_data.n)
    trees = []
    for t in range(params.rounds):
        gp = grad_hess(ap_data.labels, margins)
        if clip is not None:
            gp = gp.clipped(clip)

        def find_split(node_id, depth, index, t=t, gp=gp):
            if not odometer.charge(t, depth):
                return None
            node_gp = gp.take(index)
            G, H = float(node_gp.g.sum()), float(node_gp.h.sum())
            ap = local_best_split(ap_data.features[index], node_gp, G, H,
                                  ap_thresholds, params.lam, params.gamma)
            return combine(ap, pp_split(t, node_id, index, node_gp))

        tree, values = grow_tree(gp, rows, params.max_depth, params.lam,
                                 find_split)
        trees.append(tree)
        margins = margins + params.eta * values
        if odometer.exhausted:
            break
    return TreeModel(trees=tuple(trees), eta=params.eta, lam=params.lam,
                     gamma=params.gamma, max_depth=params.max_depth,
                     rounds=params.rounds,
                     status="budget_exhausted" if odometer.exhausted
                     else "complete")


def train_masked(ap_data: Dataset, pp_features: np.ndarray,
                 params: BoostParams, privacy: CalibratedParams, seed: int,
                 retain_payloads: bool = False) -> TrainResult:
    """Trains with the masked split-finding protocol.

    At every node PP noises its candidate columns, AP masks its derivatives
    with that noise, PP returns its best noised score, and AP keeps its own
    noise-free best split unless PP's is better. With accounting enabled the
    derivatives are clipped to +-mu/2 so the calibrated sensitivity holds.

    Args:
        ap_data: AP features and labels.
        pp_features: PP features, row-aligned with `ap_data`.
        params: Boosting hyperparameters.
        privacy: Agreed noise parameters.
        seed: Master seed.
        retain_payloads: Keep full message payloads in the transcript.

    Returns:
        Model, PP handle table, transcript and units used. When the privacy
        odometer runs out the model is partial and its status is
        "budget_exhausted".
    """
    pp_features = _check_partitions(ap_data, pp_features)
    pp_thresholds = feature_candidates(pp_features, params.candidates)
    passive = PassiveParty(pp_features, pp_thresholds, privacy, seed,
                           params.lam, params.gamma)
    active = ActiveParty(privacy, seed, params.lam, params.gamma)
    transcript = ProtocolTranscript(retain_payloads)
    odometer = BudgetOdometer(privacy.max_units,
                              privacy.accountant.get("releases_per_node", 1))

    def pp_split(t, node_id, index, node_gp):
        noise = passive.noise_message(t, node_id, index)
        if noise is None:
            return None
        transcript.append(noise)
        response = active.response_message(noise, node_gp)
        transcript.append(response)
        score = passive.score_message(response)
        transcript.append(score)
        return active.read_score(score)

    clip = privacy.mu / 2 if privacy.accounting else None
    model = _boost(ap_data, params, clip, odometer, pp_split)
    return TrainResult(model, passive.table, transcript, odometer.used)


def ldp_sigma(eps: float, delta: float, n: int, mu: float) -> float:
    """Gaussian-mechanism scale for a derivative vector with L2 sensitivity
    mu * sqrt(n)."""
    if math.isinf(eps):
        return 0.0
    return mu * math.sqrt(n) * math.sqrt(2 * math.log(1.25 / delta)) / eps


def train_ldp_baseline(ap_data: Dataset, pp_features: np.ndarray,
                       params: BoostParams, eps: float, delta: float,
                       seed: int, composition: str = "advanced",
                       releases_per_node: int = 1) -> TrainResult:
    """Trains with AP releasing Gaussian-noised derivatives at every node.

    The total (eps, delta) is split over rounds * depth sequential levels with
    the same accountant as the masked protocol. eps = inf gives noise-free
    training without clipping.
    """
    pp_features = _check_partitions(ap_data, pp_features)
    pp_thresholds = feature_candidates(pp_features, params.candidates)
    table = handle_table(pp_thresholds)
    mu = mu_logistic()
    if math.isinf(eps):
        query = None
        limit = None
    else:
        k = max(1, params.rounds * params.max_depth * releases_per_node)
        query, _ = split_budget(eps, delta, k, composition)
        limit = k
    odometer = BudgetOdometer(limit, releases_per_node)

    def pp_split(t, node_id, index, node_gp):
        M = node_matrix(pp_features[index], table)
        if M is None:
            return None
        sigma = 0.0 if query is None else ldp_sigma(query.eps, query.delta,
                                                    index.size, mu)
        gen = rng.stream(seed, "ldp", t, node_id)
        g = node_gp.g + gen.normal(0.0, sigma, index.size)
        h = node_gp.h + gen.normal(0.0, sigma, index.size)
        G, H = float(g.sum()), float(h.sum())
        if not H + params.lam > 0:
            return None
        scores, scales = score_candidates(g @ M.columns, h @ M.columns, G, H,
                                          params.lam, params.gamma)
        best = select_best(scores, scales)
        if best is None:
            return None
        return SplitChoice(score=float(scores[best]), scale=float(scales[best]),
                           left=M.columns[:, best], owner="PP",
                           pp_handle=M.handles[best])

    clip = None if query is None else mu / 2
    model = _boost(ap_data, params, clip, odometer, pp_split)
    return TrainResult(model, table, None, odometer.used)


@dataclasses.dataclass(frozen=True)
class ReplayReport:
    nodes: int
    mismatches: list[tuple[int, int]]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def replay(transcript: ProtocolTranscript, pp_features: np.ndarray,
           pp_table: Sequence[tuple[int, float]], lam: float,
           gamma: float) -> ReplayReport:
    """Re-scores every recorded response and compares with the recorded result.

    Needs a transcript kept with payloads. PP's candidate matrix at each node is
    rebuilt from its features, its handle table and the node's instances.
    """
    if not transcript.retain_payloads:
        raise ProtocolError("replay needs a transcript with payloads")
    pp_features = np.asarray(pp_features, dtype=np.float64)
    mismatches = []
    triples = transcript.node_triples()
    for noise, response, score in triples:
        instances = noise.message().fields()["instances"]
        M = node_matrix(pp_features[instances], list(pp_table))
        fields = response.message().fields()
        resp = NoisedResponse(fields["g"], fields["h"], float(fields["G"]),
                              float(fields["H"]))
        recorded = score.message().fields()
        value, handle = pp_evaluate_splits(resp, M, lam, gamma)
        handle = -1 if handle is None else handle
        same_score = (value == float(recorded["score"]) or
                      (math.isinf(value) and
                       math.isinf(float(recorded["score"]))))
        if not (same_score and handle == int(recorded["handle"])):
            mismatches.append((noise.round, noise.node))
    return ReplayReport(len(triples), mismatches)
