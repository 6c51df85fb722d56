"""Reference bag aggregators: element-wise max pooling and gated-free
attention pooling. Both feed the same affine-plus-softmax head shape as
the main model so comparisons isolate the aggregation step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import xavier_uniform
from .kernel import as_matrix, as_vector


@dataclass
class AbmilParams:
    v: np.ndarray  # (h, d) attention projection
    w: np.ndarray  # (h,) attention vector
    head_w: np.ndarray  # (d, c)
    head_b: np.ndarray  # (c,)

    def __post_init__(self):
        self.v = as_matrix(self.v, "v")
        self.w = as_vector(self.w, "w")
        self.head_w = as_matrix(self.head_w, "head_w")
        self.head_b = as_vector(self.head_b, "head_b")
        if self.v.shape[0] != self.w.shape[0]:
            raise ValueError(
                f"attention width mismatch: V has {self.v.shape[0]} rows, "
                f"w has {self.w.shape[0]}"
            )


def init_abmil_params(d: int, hidden: int, n_classes: int, rng) -> AbmilParams:
    return AbmilParams(
        v=xavier_uniform(rng, hidden, d),
        w=xavier_uniform(rng, hidden, 1)[:, 0],
        head_w=np.zeros((d, n_classes)),
        head_b=np.zeros(n_classes),
    )


def max_pool_graph(features: Tensor) -> Tensor:
    return features.max(axis=0)


def abmil_graph(features: Tensor, v: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Attention weights softmax(w . tanh(V x_j)) and the weighted sum."""
    scores = ad.tanh(features @ v.transpose()) @ w  # (n,)
    weights = ad.softmax(scores)
    return weights, weights @ features


def max_pool(features) -> np.ndarray:
    """Element-wise max over instances; the classic MIL witness detector."""
    x = as_matrix(features, "features")
    if x.shape[0] < 1:
        raise ValueError("cannot max-pool an empty bag")
    with ad.no_grad():
        return max_pool_graph(Tensor(x)).data


def abmil_aggregate(features, params: AbmilParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention-pool a bag; returns (instance weights, bag embedding)."""
    x = as_matrix(features, "features")
    if x.shape[1] != params.v.shape[1]:
        raise ValueError(
            f"feature width {x.shape[1]} does not match V width {params.v.shape[1]}"
        )
    with ad.no_grad():
        weights, z = abmil_graph(Tensor(x), Tensor(params.v), Tensor(params.w))
    return weights.data, z.data
