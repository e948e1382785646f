"""Gradient-boosted regression trees for binary classification.

Holds the second-order split gain, leaf weights, the shared tree grower used by
every trainer in the package, the non-private reference trainer, prediction and
the versioned JSON model format.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from vfboost.errors import NumericError, SchemaError

MODEL_VERSION = 1

# Two scores closer than TIE_RTOL times the magnitude of their terms are a tie.
# Ties go to the earliest (feature, candidate) pair.
TIE_RTOL = 1e-9


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Feature matrix with binary labels.

    Attributes:
        features: Array of shape (n, d), finite floats.
        labels: Array of shape (n,) with values in {0, 1}.
        feature_names: Optional column names, one per feature.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels length must equal the number of rows")
        if features.shape[0] < 2:
            raise ValueError("a dataset needs at least two instances")
        if not np.all(np.isfinite(features)):
            raise ValueError("feature values must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        names = tuple(self.feature_names) or tuple(
            f"f{j}" for j in range(features.shape[1]))
        if len(names) != features.shape[1]:
            raise ValueError("one feature name per column is required")
        features.setflags(write=False)
        labels = labels.astype(np.int8)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def rows(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.features[index], self.labels[index],
                       self.feature_names)

    def columns(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return Dataset(self.features[:, cols], self.labels,
                       tuple(self.feature_names[c] for c in cols))


@dataclasses.dataclass(frozen=True)
class GradPair:
    """Per-instance first and second derivatives of the logistic loss."""

    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        if g.shape != h.shape or g.ndim != 1:
            raise ValueError("g and h must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise ValueError("gradients must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    def __len__(self) -> int:
        return self.g.shape[0]

    def take(self, index: np.ndarray) -> "GradPair":
        return GradPair(self.g[index], self.h[index])

    def clipped(self, bound: float) -> "GradPair":
        """Clips both derivatives into [-bound, bound]."""
        return GradPair(np.clip(self.g, -bound, bound),
                        np.clip(self.h, -bound, bound))


def grad_hess(labels: np.ndarray, margins: np.ndarray) -> GradPair:
    """Logistic-loss gradient and Hessian at the given margins."""
    labels = np.asarray(labels, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    if labels.shape != margins.shape:
        raise ValueError("labels and margins must have equal length")
    if not np.all(np.isfinite(margins)):
        raise ValueError("margins must be finite")
    p = expit(margins)
    return GradPair(p - labels, p * (1.0 - p))


def split_score(g_left: float, h_left: float, g_right: float, h_right: float,
                g_total: float, h_total: float, lam: float,
                gamma: float) -> float:
    """Second-order gain of splitting a node into the given children.

    Raises:
        NumericError: If any regularized Hessian sum is not positive.
        ValueError: If the children do not add up to the parent.
    """
    for denom in (h_left + lam, h_right + lam, h_total + lam):
        if not denom > 0:
            raise NumericError("regularized Hessian sum must be positive")
    scale = abs(g_left) + abs(g_right) + abs(h_left) + abs(h_right) + 1.0
    if (abs(g_left + g_right - g_total) > 1e-9 * scale or
            abs(h_left + h_right - h_total) > 1e-9 * scale):
        raise ValueError("child sums must add up to the parent sums")
    return -gamma + 0.5 * (g_left**2 / (h_left + lam) +
                           g_right**2 / (h_right + lam) -
                           g_total**2 / (h_total + lam))


def leaf_weight(sum_g: float, sum_h: float, lam: float) -> float:
    """Optimal leaf value -G / (H + lambda)."""
    if not sum_h + lam > 0:
        raise NumericError("regularized Hessian sum must be positive")
    return -sum_g / (sum_h + lam)


def score_candidates(g_left: np.ndarray, h_left: np.ndarray, g_total: float,
                     h_total: float, lam: float,
                     gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized split gain for many candidates of one node.

    Candidates with a non-positive child denominator score -inf.

    Returns:
        (scores, scales): the gains and the magnitude of the terms that form
        them, used as the reference for tie tolerance.
    """
    if not h_total + lam > 0:
        raise NumericError("regularized Hessian sum must be positive")
    g_left = np.asarray(g_left, dtype=np.float64)
    h_left = np.asarray(h_left, dtype=np.float64)
    d_left = h_left + lam
    d_right = (h_total - h_left) + lam
    ok = (d_left > 0) & (d_right > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_left = np.where(ok, g_left**2 / np.where(ok, d_left, 1.0), 0.0)
        t_right = np.where(ok, (g_total - g_left)**2 / np.where(ok, d_right, 1.0),
                           0.0)
    t_parent = g_total**2 / (h_total + lam)
    scores = np.where(ok, -gamma + 0.5 * (t_left + t_right - t_parent), -np.inf)
    scales = 0.5 * (t_left + t_right + t_parent) + abs(gamma)
    return scores, scales


def select_best(scores: np.ndarray, scales: np.ndarray) -> Optional[int]:
    """Index of the winning candidate under the tie rule, or None if none is finite.

    The winner is the lowest index whose score is within TIE_RTOL * scale of the
    maximum.
    """
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    if not finite.any():
        return None
    top = int(np.argmax(np.where(finite, scores, -np.inf)))
    tol = TIE_RTOL * scales[top]
    return int(np.flatnonzero(scores >= scores[top] - tol)[0])


def candidate_thresholds(column: np.ndarray, count: int) -> np.ndarray:
    """Equi-probability quantiles of a feature column, deduplicated and sorted.

    The quantiles are taken at probabilities k / (count + 1), k = 1..count, and
    are always observed values, so every threshold separates real instances.
    """
    if count < 1:
        raise ValueError("need at least one candidate per feature")
    probs = np.arange(1, count + 1) / (count + 1)
    return np.unique(np.quantile(np.asarray(column, dtype=np.float64), probs,
                                 method="inverted_cdf"))


def feature_candidates(features: np.ndarray, count: int) -> list[np.ndarray]:
    return [candidate_thresholds(features[:, j], count)
            for j in range(features.shape[1])]


@dataclasses.dataclass(frozen=True)
class SplitChoice:
    """A proposed split of one node.

    Attributes:
        score: Gain of the split.
        scale: Magnitude of the terms forming `score`.
        left: Boolean mask over the node's rows, True for the left child.
        owner: "AP" for a split on the labelled party's features, "PP" for a
            passive-party candidate.
        feature: Column index for AP splits.
        threshold: Threshold for AP splits.
        pp_handle: Opaque candidate handle for PP splits.
    """

    score: float
    scale: float
    left: np.ndarray
    owner: str = "AP"
    feature: Optional[int] = None
    threshold: Optional[float] = None
    pp_handle: Optional[int] = None


def local_best_split(features: np.ndarray, gp: GradPair, g_total: float,
                     h_total: float, thresholds: Sequence[np.ndarray],
                     lam: float, gamma: float) -> Optional[SplitChoice]:
    """Best split of one node over locally held features.

    Args:
        features: Node rows of the local feature matrix.
        gp: Node rows of the gradients.
        g_total: Sum of gradients at the node.
        h_total: Sum of Hessians at the node.
        thresholds: Candidate thresholds per feature.
        lam: L2 regularizer.
        gamma: Per-split penalty.

    Returns:
        The winning split, or None when every candidate leaves a child empty.
    """
    n = features.shape[0]
    all_scores, all_scales, owners = [], [], []
    for j, thr in enumerate(thresholds):
        if thr.size == 0:
            continue
        mask = features[:, j][:, None] <= thr[None, :]
        count = mask.sum(axis=0)
        scores, scales = score_candidates(gp.g @ mask, gp.h @ mask, g_total,
                                          h_total, lam, gamma)
        scores[(count == 0) | (count == n)] = -np.inf
        all_scores.append(scores)
        all_scales.append(scales)
        owners.extend((j, k) for k in range(thr.size))
    if not owners:
        return None
    scores = np.concatenate(all_scores)
    scales = np.concatenate(all_scales)
    best = select_best(scores, scales)
    if best is None:
        return None
    j, k = owners[best]
    threshold = float(thresholds[j][k])
    return SplitChoice(score=float(scores[best]), scale=float(scales[best]),
                       left=features[:, j] <= threshold, feature=j,
                       threshold=threshold)


def best_split_bruteforce(
        features: np.ndarray, gp: GradPair, candidates: Sequence[Sequence[float]],
        lam: float = 1.0,
        gamma: float = 0.0) -> tuple[float, Optional[int], Optional[float]]:
    """Exhaustive reference search over every (feature, threshold) pair.

    Written with plain Python loops so it shares no arithmetic with the
    vectorized trainer; only the tie rule is common.

    Returns:
        (score, feature, threshold) of the winner. When every candidate leaves
        a child empty the first candidate is returned with score -inf.
    """
    features = np.asarray(features, dtype=np.float64)
    g = [float(x) for x in gp.g]
    h = [float(x) for x in gp.h]
    n = len(g)
    g_total, h_total = sum(g), sum(h)
    flat = []
    for j, cands in enumerate(candidates):
        column = [float(x) for x in features[:, j]]
        for s in cands:
            gl = hl = 0.0
            count = 0
            for i in range(n):
                if column[i] <= s:
                    gl += g[i]
                    hl += h[i]
                    count += 1
            gr, hr = g_total - gl, h_total - hl
            if count in (0, n) or hl + lam <= 0 or hr + lam <= 0:
                flat.append((-math.inf, 0.0, j, float(s)))
                continue
            tl = gl * gl / (hl + lam)
            tr = gr * gr / (hr + lam)
            tp = g_total * g_total / (h_total + lam)
            flat.append((-gamma + 0.5 * (tl + tr - tp),
                         0.5 * (tl + tr + tp) + abs(gamma), j, float(s)))
    if not flat:
        raise ValueError("need at least one candidate")
    top = None
    for item in flat:
        if item[0] > -math.inf and (top is None or item[0] > top[0]):
            top = item
    if top is None:
        return -math.inf, flat[0][2], flat[0][3]
    cutoff = top[0] - TIE_RTOL * top[1]
    for score, _, j, s in flat:
        if score >= cutoff:
            return score, j, s
    raise AssertionError("unreachable")


@dataclasses.dataclass(frozen=True)
class Node:
    """Tree node. Leaves carry `weight`; internal nodes carry children."""

    owner: str = "AP"
    feature: Optional[int] = None
    threshold: Optional[float] = None
    pp_handle: Optional[int] = None
    left: Optional[int] = None
    right: Optional[int] = None
    weight: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclasses.dataclass(frozen=True)
class Tree:
    nodes: tuple[Node, ...]

    def internal_count(self) -> int:
        return sum(not node.is_leaf for node in self.nodes)


@dataclasses.dataclass(frozen=True)
class TreeModel:
    """Boosted ensemble. Leaf weights are stored unscaled; `eta` is applied at
    prediction time."""

    trees: tuple[Tree, ...]
    eta: float
    lam: float
    gamma: float
    max_depth: int
    rounds: int
    initial_margin: float = 0.0
    status: str = "complete"

    def to_dict(self) -> dict:
        trees = []
        for tree in self.trees:
            nodes = []
            for node in tree.nodes:
                item = {"owner": node.owner, "left": node.left,
                        "right": node.right}
                if node.is_leaf:
                    item["weight"] = node.weight
                elif node.owner == "PP":
                    item["pp_handle"] = node.pp_handle
                else:
                    item["feature"] = node.feature
                    item["threshold"] = node.threshold
                nodes.append(item)
            trees.append({"nodes": nodes})
        return {"version": MODEL_VERSION, "eta": self.eta, "lambda": self.lam,
                "gamma": self.gamma, "depth": self.max_depth,
                "rounds": self.rounds, "initial_margin": self.initial_margin,
                "status": self.status, "trees": trees}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TreeModel":
        try:
            if doc["version"] != MODEL_VERSION:
                raise SchemaError(f"unsupported model version {doc['version']}")
            trees = []
            for tree in doc["trees"]:
                nodes = []
                for item in tree["nodes"]:
                    nodes.append(Node(owner=item["owner"],
                                      feature=item.get("feature"),
                                      threshold=item.get("threshold"),
                                      pp_handle=item.get("pp_handle"),
                                      left=item.get("left"),
                                      right=item.get("right"),
                                      weight=item.get("weight")))
                _check_tree(nodes)
                trees.append(Tree(tuple(nodes)))
            return cls(trees=tuple(trees), eta=float(doc["eta"]),
                       lam=float(doc["lambda"]), gamma=float(doc["gamma"]),
                       max_depth=int(doc["depth"]),
                       rounds=int(doc.get("rounds", len(trees))),
                       initial_margin=float(doc["initial_margin"]),
                       status=doc.get("status", "complete"))
        except (KeyError, TypeError) as err:
            raise SchemaError(f"malformed model document: {err}") from err

    @classmethod
    def from_json(cls, text: str) -> "TreeModel":
        return cls.from_dict(json.loads(text))

    def resolve_handles(self, pp_table: Sequence[tuple[int, float]],
                        feature_offset: int) -> "TreeModel":
        """Rewrites PP nodes as plain feature splits on a merged column layout.

        Args:
            pp_table: Handle -> (PP column, threshold) map held by the passive
                party.
            feature_offset: Index of the first PP column in the merged matrix.
        """
        trees = []
        for tree in self.trees:
            nodes = []
            for node in tree.nodes:
                if node.owner == "PP" and not node.is_leaf:
                    column, threshold = pp_table[node.pp_handle]
                    node = dataclasses.replace(
                        node, owner="AP", pp_handle=None,
                        feature=feature_offset + int(column),
                        threshold=float(threshold))
                nodes.append(node)
            trees.append(Tree(tuple(nodes)))
        return dataclasses.replace(self, trees=tuple(trees))


def _check_tree(nodes: Sequence[Node]) -> None:
    for node in nodes:
        if node.owner not in ("AP", "PP"):
            raise SchemaError(f"unknown owner {node.owner!r}")
        if node.is_leaf:
            if node.right is not None or node.weight is None or not math.isfinite(
                    node.weight):
                raise SchemaError("leaves need a finite weight and no children")
        else:
            if node.right is None:
                raise SchemaError("internal nodes need two children")
            if not (0 <= node.left < len(nodes) and 0 <= node.right < len(nodes)):
                raise SchemaError("child index out of range")
            if node.owner == "PP" and node.pp_handle is None:
                raise SchemaError("PP split without a candidate handle")
            if node.owner == "AP" and (node.feature is None or
                                       node.threshold is None):
                raise SchemaError("AP split without feature and threshold")


# find_split(node_id, depth, rows) -> SplitChoice or None (make a leaf).
SplitFinder = Callable[[int, int, np.ndarray], Optional[SplitChoice]]


def grow_tree(gp: GradPair, rows: np.ndarray, max_depth: int, lam: float,
              find_split: SplitFinder) -> tuple[Tree, np.ndarray]:
    """Grows one tree depth-first, numbering nodes in preorder.

    Args:
        gp: Gradients for every training row.
        rows: Row indices at the root.
        max_depth: Depth limit; the root has depth 0.
        lam: L2 regularizer for leaf weights.
        find_split: Strategy proposing a split for a node.

    Returns:
        The tree and, for every training row, the unscaled weight of its leaf.
    """
    nodes: list[Optional[Node]] = []
    values = np.zeros(len(gp))

    def build(index: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append(None)
        choice = None
        if depth < max_depth and index.size >= 2:
            choice = find_split(node_id, depth, index)
        if choice is None or not choice.score > TIE_RTOL * choice.scale:
            w = leaf_weight(float(gp.g[index].sum()), float(gp.h[index].sum()),
                            lam)
            nodes[node_id] = Node(weight=w)
            values[index] = w
            return node_id
        left = build(index[choice.left], depth + 1)
        right = build(index[~choice.left], depth + 1)
        nodes[node_id] = Node(owner=choice.owner, feature=choice.feature,
                              threshold=choice.threshold,
                              pp_handle=choice.pp_handle, left=left, right=right)
        return node_id

    build(np.asarray(rows), 0)
    return Tree(tuple(nodes)), values


@dataclasses.dataclass(frozen=True)
class BoostParams:
    """Training hyperparameters.

    Attributes:
        rounds: Number of boosting rounds T.
        max_depth: Maximum tree depth.
        lam: L2 regularizer on leaf weights.
        gamma: Per-split penalty.
        eta: Shrinkage applied to every tree.
        candidates: Quantile candidates per feature.
    """

    rounds: int = 20
    max_depth: int = 4
    lam: float = 1.0
    gamma: float = 0.0
    eta: float = 0.3
    candidates: int = 32

    def __post_init__(self):
        if self.rounds < 0 or self.max_depth < 0:
            raise ValueError("rounds and depth must be non-negative")
        if self.candidates < 1:
            raise ValueError("need at least one candidate per feature")
        if not self.lam >= 0 or not self.eta > 0:
            raise ValueError("lambda must be >= 0 and eta > 0")


def train_centralized(data: Dataset, params: BoostParams,
                      thresholds: Optional[Sequence[np.ndarray]] = None
                      ) -> TreeModel:
    """Non-private boosting with every feature held in one place."""
    if thresholds is None:
        thresholds = feature_candidates(data.features, params.candidates)
    margins = np.zeros(data.n)
    rows = np.arange(data.n)
    trees = []
    for _ in range(params.rounds):
        gp = grad_hess(data.labels, margins)

        def find_split(node_id, depth, index, gp=gp):
            node_gp = gp.take(index)
            return local_best_split(data.features[index], node_gp,
                                    float(node_gp.g.sum()),
                                    float(node_gp.h.sum()), thresholds,
                                    params.lam, params.gamma)

        tree, values = grow_tree(gp, rows, params.max_depth, params.lam,
                                 find_split)
        trees.append(tree)
        margins = margins + params.eta * values
    return TreeModel(trees=tuple(trees), eta=params.eta, lam=params.lam,
                     gamma=params.gamma, max_depth=params.max_depth,
                     rounds=params.rounds)


def _tree_values(tree: Tree, features: np.ndarray,
                 pp_features: Optional[np.ndarray],
                 pp_table: Optional[Sequence[tuple[int, float]]]) -> np.ndarray:
    out = np.zeros(features.shape[0])
    stack = [(0, np.arange(features.shape[0]))]
    while stack:
        node_id, index = stack.pop()
        node = tree.nodes[node_id]
        if node.is_leaf:
            out[index] = node.weight
            continue
        if node.owner == "PP":
            if pp_features is None or pp_table is None:
                raise SchemaError("PP-owned split needs PP features and handles")
            if not 0 <= node.pp_handle < len(pp_table):
                raise SchemaError(f"unknown candidate handle {node.pp_handle}")
            column, threshold = pp_table[node.pp_handle]
            if column >= pp_features.shape[1]:
                raise SchemaError(f"missing PP feature column {column}")
            go_left = pp_features[index, column] <= threshold
        else:
            if node.feature >= features.shape[1]:
                raise SchemaError(f"missing feature column {node.feature}")
            go_left = features[index, node.feature] <= node.threshold
        stack.append((node.left, index[go_left]))
        stack.append((node.right, index[~go_left]))
    return out


def predict_margin(model: TreeModel, features: np.ndarray,
                   pp_features: Optional[np.ndarray] = None,
                   pp_table: Optional[Sequence[tuple[int, float]]] = None
                   ) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise SchemaError("features must be a 2-D array")
    if pp_features is not None:
        pp_features = np.asarray(pp_features, dtype=np.float64)
        if pp_features.shape[0] != features.shape[0]:
            raise SchemaError("party partitions must have the same rows")
    margin = np.full(features.shape[0], model.initial_margin)
    for tree in model.trees:
        margin += model.eta * _tree_values(tree, features, pp_features, pp_table)
    return margin


def predict(model: TreeModel, features: np.ndarray,
            pp_features: Optional[np.ndarray] = None,
            pp_table: Optional[Sequence[tuple[int, float]]] = None
            ) -> np.ndarray:
    """Probability of the positive class.

    Args:
        model: Trained ensemble.
        features: Rows of the AP feature partition (or the full matrix for a
            centralized model).
        pp_features: Rows of the PP partition, needed when the model has
            PP-owned splits.
        pp_table: The passive party's handle -> (column, threshold) map.

    Raises:
        SchemaError: If a split refers to a column or handle that is missing.
    """
    return expit(predict_margin(model, features, pp_features, pp_table))


def log_loss(labels: np.ndarray, margins: np.ndarray) -> float:
    """Mean binary cross-entropy, computed stably from margins."""
    labels = np.asarray(labels, dtype=np.float64)
    margins = np.asarray(margins, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, margins) - labels * margins))
