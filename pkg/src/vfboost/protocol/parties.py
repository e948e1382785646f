"""The two protocol parties as message-driven state machines.

Per node the passive party (PP) sends structured noise for its candidates, the
active party (AP) answers with masked derivatives, and PP returns its best
noised score together with the instances its winning split sends left.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from vfboost.boost import GradPair, SplitChoice
from vfboost.errors import ProtocolError
from vfboost.privacy.calibration import CalibratedParams
from vfboost.protocol.noise import (CategoricalMatrix, NoisedResponse,
                                    information_noising, node_matrix,
                                    noise_calibration, pp_evaluate_splits,
                                    stack_noise)
from vfboost.protocol.transcript import Message, encode_payload


def handle_table(thresholds: Sequence[np.ndarray]) -> list[tuple[int, float]]:
    """Handle -> (column, threshold), ordered by column then threshold."""
    return [(j, float(t)) for j, thr in enumerate(thresholds) for t in thr]


class PassiveParty:
    """Feature-only party. Holds its columns and the handle table privately.

    Args:
        features: PP feature matrix for all training rows.
        thresholds: Candidate thresholds per PP column.
        params: Agreed noise parameters.
        seed: Master seed for PP's noise streams.
        lam: L2 regularizer.
        gamma: Per-split penalty.
    """

    def __init__(self, features: np.ndarray, thresholds: Sequence[np.ndarray],
                 params: CalibratedParams, seed: int, lam: float, gamma: float):
        self.features = np.asarray(features, dtype=np.float64)
        self.table = handle_table(thresholds)
        self.params = params
        self.seed = seed
        self.lam = lam
        self.gamma = gamma
        self._open: dict[tuple[int, int], tuple[np.ndarray, CategoricalMatrix]] = {}

    def matrix(self, instances: np.ndarray) -> Optional[CategoricalMatrix]:
        return node_matrix(self.features[instances], self.table)

    def noise_message(self, round_: int, node: int,
                      instances: np.ndarray) -> Optional[Message]:
        """Opens a node; returns None when PP has no usable candidate there."""
        key = (round_, node)
        if key in self._open:
            raise ProtocolError(f"node {key} is already open")
        M = self.matrix(instances)
        if M is None:
            return None
        noise = noise_calibration(M, self.params.sigma1, self.params.sigma2,
                                  self.params.W, self.seed, node_key=key)
        self._open[key] = (instances, M)
        payload = encode_payload({"instances": instances,
                                  "active_counts": M.active_counts,
                                  "noise": stack_noise(noise)})
        return Message(round_, node, "pp_to_ap", "noise", payload)

    def score_message(self, response: Message) -> Message:
        """Scores every candidate against AP's response and closes the node."""
        key = (response.round, response.node)
        if response.kind != "response" or key not in self._open:
            raise ProtocolError(f"unexpected {response.kind} for node {key}")
        instances, M = self._open.pop(key)
        fields = response.fields()
        resp = NoisedResponse(fields["g"], fields["h"], float(fields["G"]),
                              float(fields["H"]))
        score, handle = pp_evaluate_splits(resp, M, self.lam, self.gamma)
        if handle is None:
            left = np.zeros(0, dtype=np.int64)
            handle = -1
        else:
            left = instances[M.column(handle)]
        payload = encode_payload({"score": score, "handle": handle,
                                  "left": left})
        return Message(response.round, response.node, "pp_to_ap", "score",
                       payload)


class ActiveParty:
    """Labelled party. Masks its derivatives and reads PP's best score."""

    def __init__(self, params: CalibratedParams, seed: int, lam: float,
                 gamma: float):
        self.params = params
        self.seed = seed
        self.lam = lam
        self.gamma = gamma
        self._open: dict[tuple[int, int], tuple[np.ndarray, float, float]] = {}

    def response_message(self, noise: Message, gp: GradPair) -> Message:
        """Answers a noise message with masked derivatives of the node rows.

        Args:
            noise: PP's noise message.
            gp: Derivatives of the node's rows, in the order PP listed them.
        """
        key = (noise.round, noise.node)
        if noise.kind != "noise" or key in self._open:
            raise ProtocolError(f"unexpected {noise.kind} for node {key}")
        fields = noise.fields()
        instances = fields["instances"]
        if instances.size != len(gp):
            raise ProtocolError("noise message covers different instances")
        counts = fields["active_counts"]
        C = self.params.C_for(counts, instances.size - counts)
        resp = information_noising(fields["noise"], gp, C, self.seed,
                                   node_key=key)
        self._open[key] = (instances, resp.G, resp.H)
        payload = encode_payload({"g": resp.g, "h": resp.h, "G": resp.G,
                                  "H": resp.H})
        return Message(noise.round, noise.node, "ap_to_pp", "response", payload)

    def read_score(self, score: Message) -> Optional[SplitChoice]:
        """Turns PP's score message into a candidate split of the node."""
        key = (score.round, score.node)
        if score.kind != "score" or key not in self._open:
            raise ProtocolError(f"unexpected {score.kind} for node {key}")
        instances, G, H = self._open.pop(key)
        fields = score.fields()
        handle = int(fields["handle"])
        if handle < 0:
            return None
        value = float(fields["score"])
        parent = G * G / (H + self.lam)
        scale = value + self.gamma + parent + abs(self.gamma)
        left = np.isin(instances, fields["left"], assume_unique=True)
        return SplitChoice(score=value, scale=abs(scale), left=left, owner="PP",
                           pp_handle=handle)
