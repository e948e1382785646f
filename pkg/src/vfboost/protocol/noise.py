"""Splitting vectors, structured noise and noised responses.

A splitting vector m marks the instances sent left by one passive-party
candidate. Each noise column b = u + v + r has an active part u whose entries
on the active set cancel (m^T u = 0), an inactive part v that lives off the
active set (m^T v = 0), and an isotropic disturbing part r. Only r survives the
products m^T <g> and m^T <h> that split scoring needs.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from vfboost import rng
from vfboost.boost import GradPair, score_candidates, select_best
from vfboost.privacy.calibration import cycle_covariance


@dataclasses.dataclass(frozen=True)
class SplittingVector:
    """Left-child indicator of one candidate threshold over n instances."""

    bits: np.ndarray
    candidate: float
    feature: int = 0

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def inactive(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.bits))


def build_splitting_vector(column: np.ndarray, threshold: float,
                           feature: int = 0) -> SplittingVector:
    """bit_j = 1 iff column_j <= threshold."""
    column = np.asarray(column, dtype=np.float64)
    if not np.all(np.isfinite(column)):
        raise ValueError("feature column must be finite")
    return SplittingVector((column <= threshold).astype(np.uint8),
                           float(threshold), feature)


@dataclasses.dataclass(frozen=True)
class CategoricalMatrix:
    """Stacked splitting vectors of one node.

    Attributes:
        columns: Boolean array (n, l); column i is candidate i's splitting vector.
        handles: Opaque candidate identifier of each column.
    """

    columns: np.ndarray
    handles: tuple[int, ...]

    def __post_init__(self):
        columns = np.asarray(self.columns, dtype=bool)
        if columns.ndim != 2 or columns.shape[1] < 1:
            raise ValueError("need an (n, l) matrix with l >= 1")
        if len(self.handles) != columns.shape[1]:
            raise ValueError("one handle per column is required")
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "handles", tuple(int(h) for h in self.handles))

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    @property
    def l(self) -> int:
        return self.columns.shape[1]

    @property
    def active_counts(self) -> np.ndarray:
        return self.columns.sum(axis=0)

    def column(self, handle: int) -> np.ndarray:
        return self.columns[:, self.handles.index(handle)]

    @classmethod
    def from_vectors(cls, vectors: Sequence[SplittingVector],
                     handles: Optional[Sequence[int]] = None
                     ) -> "CategoricalMatrix":
        if handles is None:
            handles = range(len(vectors))
        return cls(np.stack([v.bits.astype(bool) for v in vectors], axis=1),
                   tuple(handles))


def node_matrix(features: np.ndarray,
                table: Sequence[tuple[int, float]]) -> Optional[CategoricalMatrix]:
    """Usable candidate columns of one node.

    Builds a column for every entry of the handle table, then drops columns that
    send every instance the same way and keeps only the lowest handle among
    identical columns.

    Returns:
        The matrix, or None when no candidate splits the node.
    """
    if not table:
        return None
    n = features.shape[0]
    cols = np.array([c for c, _ in table])
    thresholds = np.array([t for _, t in table])
    bits = features[:, cols] <= thresholds[None, :]
    counts = bits.sum(axis=0)
    keep = []
    seen = set()
    packed = np.packbits(bits, axis=0).T
    for handle in range(len(table)):
        if counts[handle] in (0, n):
            continue
        key = packed[handle].tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(handle)
    if not keep:
        return None
    return CategoricalMatrix(bits[:, keep], tuple(keep))


@dataclasses.dataclass(frozen=True)
class NoiseMatrix:
    """W noise columns calibrated to one splitting vector.

    Attributes:
        columns: Array (n, W), each column b = u + v + r.
        candidate: Handle of the source candidate.
        active_part, inactive_part, disturbing_part: The u, v and r components,
            kept only on request.
    """

    columns: np.ndarray
    candidate: int
    active_part: Optional[np.ndarray] = None
    inactive_part: Optional[np.ndarray] = None
    disturbing_part: Optional[np.ndarray] = None

    @property
    def W(self) -> int:
        return self.columns.shape[1]


def cyclic_differences(draws: np.ndarray) -> np.ndarray:
    """u_k = p_k - p_{k-1} around the cycle, with u_1 = p_1 - p_last."""
    draws = np.asarray(draws, dtype=np.float64)
    out = draws.copy()
    out[1:] -= draws[:-1]
    out[:1] -= draws[-1:]
    return out


def noise_calibration(M: CategoricalMatrix, sigma1: float, sigma2: float,
                      W: int, seed: int, node_key: Sequence[int] = (0,),
                      keep_components: bool = False) -> list[NoiseMatrix]:
    """Draws W structured noise columns for every candidate of a node.

    Column j of candidate i comes from its own stream keyed by
    (seed, node_key, handle_i, j), drawing the active-cycle values, then the
    inactive values, then the disturbing values.

    Args:
        M: Candidate columns of the node.
        sigma1: Scale of the lossless noise.
        sigma2: Scale of the disturbing noise.
        W: Columns per candidate.
        seed: Master seed.
        node_key: Integers identifying the node, e.g. (round, node id).
        keep_components: Also return u, v and r separately.

    Returns:
        One NoiseMatrix per column of M, in column order.
    """
    if W < 1:
        raise ValueError("W must be at least 1")
    if not (np.isfinite(sigma1) and np.isfinite(sigma2)) or min(sigma1,
                                                                sigma2) < 0:
        raise ValueError("noise scales must be finite and non-negative")
    out = []
    for i, handle in enumerate(M.handles):
        bits = M.columns[:, i]
        active = np.flatnonzero(bits)
        inactive = np.flatnonzero(~bits)
        if active.size == 0:
            raise ValueError(f"candidate {handle} has an empty active set")
        u = np.zeros((M.n, W))
        v = np.zeros((M.n, W))
        r = np.empty((M.n, W))
        for j in range(W):
            gen = rng.stream(seed, "noise", *node_key, handle, j)
            u[active, j] = cyclic_differences(gen.normal(0.0, sigma1,
                                                         active.size))
            v[inactive, j] = gen.normal(0.0, np.sqrt(2.0) * sigma1,
                                        inactive.size)
            r[:, j] = gen.normal(0.0, sigma2, M.n)
        b = u + v + r
        if keep_components:
            out.append(NoiseMatrix(b, handle, u, v, r))
        else:
            out.append(NoiseMatrix(b, handle))
    return out


def noise_covariance(bits: np.ndarray, sigma1: float,
                     sigma2: float) -> np.ndarray:
    """Exact covariance of one noise column for splitting vector `bits`."""
    bits = np.asarray(bits).astype(bool)
    n = bits.size
    cov = np.eye(n) * (2 * sigma1**2 + sigma2**2)
    active = np.flatnonzero(bits)
    if active.size:
        cov[np.ix_(active, active)] = cycle_covariance(active.size, sigma1,
                                                       sigma2)
    return cov


@dataclasses.dataclass(frozen=True)
class NoisedResponse:
    """Per-candidate noised derivatives and the exact node sums.

    Attributes:
        g: Array (l, n); row i is g + sum_k c_ik b_ik.
        h: Array (l, n); row i is h + sum_k d_ik b_ik.
        G: Sum of gradients.
        H: Sum of Hessians.
    """

    g: np.ndarray
    h: np.ndarray
    G: float
    H: float

    @property
    def l(self) -> int:
        return self.g.shape[0]


def sphere_coefficients(gen: np.random.Generator, W: int,
                        radius: float) -> np.ndarray:
    """Uniform draw from the sphere of the given radius in W dimensions."""
    z = gen.standard_normal(W)
    return radius * z / np.linalg.norm(z)


def stack_noise(noise: Sequence[NoiseMatrix]) -> np.ndarray:
    return np.stack([nm.columns for nm in noise])


def information_noising(noise: Sequence[NoiseMatrix] | np.ndarray,
                        gp: GradPair, C, seed: int,
                        node_key: Sequence[int] = (0,)) -> NoisedResponse:
    """Masks g and h with each candidate's noise columns.

    Coefficients c_i and d_i of candidate position i are drawn from the stream
    keyed by (seed, node_key, i), uniformly on the sphere of radius sqrt(C_i).

    Args:
        noise: NoiseMatrix per candidate, or an array (l, n, W).
        gp: Node derivatives.
        C: Squared radius, a scalar or one value per candidate.
        seed: Master seed.
        node_key: Integers identifying the node.
    """
    stacked = noise if isinstance(noise, np.ndarray) else stack_noise(noise)
    l, n, W = stacked.shape
    if n != len(gp):
        raise ValueError("noise and gradients cover different instances")
    C = np.broadcast_to(np.asarray(C, dtype=np.float64), (l,))
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("C must be finite and non-negative")
    coef_g = np.empty((l, W))
    coef_h = np.empty((l, W))
    for i in range(l):
        gen = rng.stream(seed, "coef", *node_key, i)
        radius = float(np.sqrt(C[i]))
        coef_g[i] = sphere_coefficients(gen, W, radius)
        coef_h[i] = sphere_coefficients(gen, W, radius)
    g = gp.g[None, :] + np.einsum("inw,iw->in", stacked, coef_g)
    h = gp.h[None, :] + np.einsum("inw,iw->in", stacked, coef_h)
    return NoisedResponse(g, h, float(gp.g.sum()), float(gp.h.sum()))


def candidate_scores(resp: NoisedResponse, M: CategoricalMatrix, lam: float,
                     gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Split gains of every candidate from a noised response."""
    if resp.l != M.l or resp.g.shape[1] != M.n:
        raise ValueError("response does not match the candidate matrix")
    mask = M.columns.T
    g_left = np.sum(resp.g * mask, axis=1)
    h_left = np.sum(resp.h * mask, axis=1)
    return score_candidates(g_left, h_left, resp.G, resp.H, lam, gamma)


def pp_evaluate_splits(resp: NoisedResponse, M: CategoricalMatrix, lam: float,
                       gamma: float) -> tuple[float, Optional[int]]:
    """Best candidate of the passive party from a noised response.

    Returns:
        (score, handle); (-inf, None) when every candidate has a non-positive
        noised denominator.
    """
    scores, scales = candidate_scores(resp, M, lam, gamma)
    best = select_best(scores, scales)
    if best is None:
        return -np.inf, None
    return float(scores[best]), M.handles[best]
