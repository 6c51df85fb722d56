"""Prototype banks and the similarity machinery built on them.

Visual prototypes are learnable anchors initialized from support data
(k-means) or at random; textual prototypes are ingested embeddings of
entity-level descriptions. Instances are scored against both banks by
cosine similarity, the cross-modal cost is one minus prototype-pair
cosine, and the transport marginals are softmaxed column means of the
similarity matrices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import ZERO_NORM_EPS, as_matrix
from .sinkhorn import Marginals


@dataclass
class PrototypeBank:
    visual: np.ndarray  # (K_v, d)
    textual: np.ndarray  # (K_t, d)
    freeze_textual: bool = False

    def __post_init__(self):
        self.visual = as_matrix(self.visual, "visual prototypes")
        self.textual = as_matrix(self.textual, "textual prototypes")
        for name, m in (("visual", self.visual), ("textual", self.textual)):
            if m.shape[0] < 1:
                raise ValueError(f"{name} prototype bank must have at least one row")
            _reject_zero_rows(m, f"{name} prototypes")
        if self.visual.shape[1] != self.textual.shape[1]:
            raise ValueError(
                f"prototype width mismatch: visual d={self.visual.shape[1]}, "
                f"textual d={self.textual.shape[1]}"
            )

    @property
    def k_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def k_textual(self) -> int:
        return self.textual.shape[0]

    @property
    def dim(self) -> int:
        return self.visual.shape[1]


@dataclass
class SimilarityPair:
    """Instance-to-prototype cosine matrices for both modalities."""

    s_visual: np.ndarray  # (n, K_v)
    s_textual: np.ndarray  # (n, K_t)


def _reject_zero_rows(m: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmin(norms))
        raise ValueError(f"{name} row {bad} has near-zero norm")


# ---------------------------------------------------------------------------
# differentiable building blocks (shared by the array API and the trainer)


def rows_cosine_graph(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of `a` and rows of `b`.

    Row norms are floored at ZERO_NORM_EPS, so exactly-zero rows yield zero
    similarity instead of NaN.
    """
    na = ad.clamp_min((a * a).sum(axis=1, keepdims=True) ** 0.5, ZERO_NORM_EPS)
    nb = ad.clamp_min((b * b).sum(axis=1, keepdims=True) ** 0.5, ZERO_NORM_EPS)
    return (a / na) @ (b / nb).transpose()


def cost_graph(visual: Tensor, textual: Tensor) -> Tensor:
    return 1.0 - rows_cosine_graph(visual, textual)


def marginals_graph(s_visual: Tensor, s_textual: Tensor) -> tuple[Tensor, Tensor]:
    mu = ad.softmax(s_visual.mean(axis=0))
    nu = ad.softmax(s_textual.mean(axis=0))
    return mu, nu


# ---------------------------------------------------------------------------
# array API


def similarity_pair(features, bank: PrototypeBank) -> SimilarityPair:
    """Cosine similarity of every instance against both prototype banks."""
    x = as_matrix(features, "features")
    if x.shape[1] != bank.dim:
        raise ValueError(
            f"feature width {x.shape[1]} does not match prototype width {bank.dim}"
        )
    with ad.no_grad():
        sv = rows_cosine_graph(Tensor(x), Tensor(bank.visual)).data
        st = rows_cosine_graph(Tensor(x), Tensor(bank.textual)).data
    return SimilarityPair(sv, st)


def cost_matrix(bank: PrototypeBank) -> np.ndarray:
    """Cross-modal cost: 1 - cosine for every (visual, textual) prototype pair."""
    with ad.no_grad():
        return cost_graph(Tensor(bank.visual), Tensor(bank.textual)).data


def estimate_marginals(sp: SimilarityPair) -> Marginals:
    """Transport marginals: softmax of the per-prototype mean similarity."""
    sv = as_matrix(sp.s_visual, "s_visual")
    st = as_matrix(sp.s_textual, "s_textual")
    if sv.shape[0] < 1 or st.shape[0] < 1:
        raise ValueError("cannot estimate marginals from an empty bag")
    if sv.shape[0] != st.shape[0]:
        raise ValueError("similarity matrices disagree on instance count")
    with ad.no_grad():
        mu, nu = marginals_graph(Tensor(sv), Tensor(st))
    return Marginals(mu.data, nu.data)


def load_textual_prototypes(bank: PrototypeBank, priors) -> PrototypeBank:
    """Replace the textual bank with ingested prior embeddings (copied)."""
    priors = as_matrix(priors, "textual priors")
    if priors.shape[1] != bank.dim:
        raise ValueError(
            f"prior width {priors.shape[1]} does not match bank width {bank.dim}"
        )
    _reject_zero_rows(priors, "textual priors")
    bank.textual = priors.copy()
    return bank


# ---------------------------------------------------------------------------
# visual prototype initialization


def init_visual_prototypes(
    support_bags,
    k_v: int,
    d: int,
    seed: int,
    strategy: str = "kmeans",
) -> np.ndarray:
    """Build the initial visual bank: unit-norm rows, deterministic in `seed`.

    "kmeans" clusters all support instances (k-means++ seeding, 50 Lloyd
    iterations) and normalizes the centroids; it falls back to "random"
    unit Gaussian rows when there is no support data or fewer instances
    than prototypes.
    """
    if k_v < 1:
        raise ValueError(f"k_v must be >= 1, got {k_v}")
    if strategy not in ("kmeans", "random"):
        raise ValueError(f"unknown init strategy: {strategy!r}")
    rng = np.random.default_rng(seed)
    if strategy == "random" or support_bags is None:
        return _random_unit_rows(rng, k_v, d)

    feats = [as_matrix(getattr(b, "features", b), "support features") for b in support_bags]
    if feats and any(f.shape[1] != d for f in feats):
        raise ValueError("support bag width does not match requested d")
    pooled = np.concatenate(feats, axis=0) if feats else np.empty((0, d))
    if pooled.shape[0] < k_v:
        warnings.warn(
            f"kmeans init needs >= {k_v} support instances, got {pooled.shape[0]}; "
            "falling back to random prototypes",
            stacklevel=2,
        )
        return _random_unit_rows(rng, k_v, d)

    centers = _kmeans(pooled, k_v, rng, iters=50)
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    dead = norms[:, 0] < ZERO_NORM_EPS
    if np.any(dead):
        centers[dead] = _random_unit_rows(rng, int(dead.sum()), d)
        norms = np.linalg.norm(centers, axis=1, keepdims=True)
    return centers / norms


def _random_unit_rows(rng, k: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((k, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _kmeans(points: np.ndarray, k: int, rng, iters: int) -> np.ndarray:
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(points.shape[0])]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with a center
            centers[j] = points[rng.integers(points.shape[0])]
        else:
            centers[j] = points[rng.choice(points.shape[0], p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    for _ in range(iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        updated = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                updated[j] = points[members].mean(axis=0)
            else:  # re-seed empty cluster at the farthest point
                updated[j] = points[dists.min(axis=1).argmax()]
        if np.array_equal(updated, centers):
            break
        centers = updated
    return centers
