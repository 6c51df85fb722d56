"""Transport-guided fusion of the two similarity views and the bag head.

The transport plan couples visual and textual prototypes; sandwiching it
between an instance's two similarity rows yields one scalar relevance per
instance. Those scores softmax-reweight the instance tokens, bag-level
prior embeddings query the reweighted tokens through multi-head scaled
dot-product cross-attention, and a linear head over the pooled attention
output produces class probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import as_matrix, as_vector, require_finite
from .sinkhorn import TransportPlan


@dataclass
class FusedScores:
    scores: np.ndarray  # (n,), one scalar per instance, in [-1, 1]


@dataclass
class BagPriors:
    """Per-class bag-level prior embeddings used as attention queries."""

    z_bag: np.ndarray  # (c, d)

    def __post_init__(self):
        self.z_bag = as_matrix(self.z_bag, "bag priors")
        if self.z_bag.shape[0] < 1:
            raise ValueError("bag priors need at least one class row")

    @property
    def n_classes(self) -> int:
        return self.z_bag.shape[0]


@dataclass
class AttentionParams:
    """Projections for bag-query cross-attention plus the classifier head."""

    wq: np.ndarray  # (d, h)
    wk: np.ndarray  # (d, h)
    wv: np.ndarray  # (d, h)
    wo: np.ndarray  # (h, h)
    head_w: np.ndarray  # (h, c)
    head_b: np.ndarray  # (c,)
    heads: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo", "head_w"):
            setattr(self, name, as_matrix(getattr(self, name), name))
        self.head_b = as_vector(self.head_b, "head_b")
        hidden = self.wq.shape[1]
        if self.heads < 1 or hidden % self.heads != 0:
            raise ValueError(
                f"hidden width {hidden} must be divisible by heads={self.heads}"
            )

    @property
    def hidden(self) -> int:
        return self.wq.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_b.shape[0]


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attention_params(
    d: int, hidden: int, heads: int, n_classes: int, rng
) -> AttentionParams:
    """Seeded projections (Xavier-uniform) with a zero classifier head."""
    return AttentionParams(
        wq=xavier_uniform(rng, d, hidden),
        wk=xavier_uniform(rng, d, hidden),
        wv=xavier_uniform(rng, d, hidden),
        wo=xavier_uniform(rng, hidden, hidden),
        head_w=np.zeros((hidden, n_classes)),
        head_b=np.zeros(n_classes),
        heads=heads,
    )


# ---------------------------------------------------------------------------
# differentiable building blocks


def fuse_graph(s_visual: Tensor, plan: Tensor, s_textual: Tensor) -> Tensor:
    """Per-instance bilinear score S_v(j,:) . plan . S_t(j,:)."""
    return ((s_visual @ plan) * s_textual).sum(axis=1)


def reweight_graph(features: Tensor, scores: Tensor) -> Tensor:
    """Scale each instance row by its softmax share of the fused scores."""
    alpha = ad.softmax(scores)
    return features * ad.reshape(alpha, (-1, 1))


def attention_graph(
    queries: Tensor, tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
    wo: Tensor, heads: int,
) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product cross-attention.

    Returns the (c, h) output and the (heads, c, n) attention weights.
    """
    c = queries.data.shape[0]
    n = tokens.data.shape[0]
    hidden = wq.data.shape[1]
    head_dim = hidden // heads

    def split(x: Tensor, rows: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (rows, heads, head_dim)), (1, 0, 2))

    q = split(queries @ wq, c)  # (heads, c, head_dim)
    k = split(tokens @ wk, n)  # (heads, n, head_dim)
    v = split(tokens @ wv, n)
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)  # (heads, c, n)
    mixed = weights @ v  # (heads, c, head_dim)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (c, hidden))
    return merged @ wo, weights


def classify_graph(attended: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Mean-pool the query outputs, apply the affine head, softmax."""
    pooled = attended.mean(axis=0)
    return ad.softmax(pooled @ head_w + head_b)


# ---------------------------------------------------------------------------
# array API


def fuse_scores(sp, plan) -> FusedScores:
    """Fuse both similarity views through the transport plan."""
    sv = as_matrix(sp.s_visual, "s_visual")
    st = as_matrix(sp.s_textual, "s_textual")
    t = plan.plan if isinstance(plan, TransportPlan) else as_matrix(plan, "plan")
    if sv.shape[0] != st.shape[0]:
        raise ValueError("similarity matrices disagree on instance count")
    if t.shape != (sv.shape[1], st.shape[1]):
        raise ValueError(
            f"plan shape {t.shape} incompatible with similarities "
            f"{sv.shape} x {st.shape}"
        )
    with ad.no_grad():
        out = fuse_graph(Tensor(sv), Tensor(t), Tensor(st)).data
    return FusedScores(out)


def reweight_instances(features, fs: FusedScores) -> np.ndarray:
    x = as_matrix(features, "features")
    scores = as_vector(fs.scores, "fused scores")
    if scores.shape[0] != x.shape[0]:
        raise ValueError("fused scores length does not match instance count")
    with ad.no_grad():
        return reweight_graph(Tensor(x), Tensor(scores)).data


def cross_attention(
    priors: BagPriors, tokens, params: AttentionParams, return_weights: bool = False
):
    """Attend bag-prior queries over the fused instance tokens."""
    x = as_matrix(tokens, "fused tokens")
    if x.shape[1] != params.wk.shape[0] or priors.z_bag.shape[1] != params.wq.shape[0]:
        raise ValueError("token/prior width incompatible with attention projections")
    with ad.no_grad():
        out, weights = attention_graph(
            Tensor(priors.z_bag), Tensor(x),
            Tensor(params.wq), Tensor(params.wk), Tensor(params.wv),
            Tensor(params.wo), params.heads,
        )
    if return_weights:
        return out.data, weights.data
    return out.data


def classify(attended, params: AttentionParams) -> np.ndarray:
    h = as_matrix(attended, "attention output")
    if h.shape[1] != params.head_w.shape[0]:
        raise ValueError("attention output width does not match classifier head")
    with ad.no_grad():
        return classify_graph(
            Tensor(h), Tensor(params.head_w), Tensor(params.head_b)
        ).data


@dataclass
class AttributionReport:
    """Mean absolute prototype gradient, per row and per modality."""

    per_visual: np.ndarray  # (K_v,)
    per_textual: np.ndarray  # (K_t,)
    mean_visual: float
    mean_textual: float


def prototype_attribution(grad_visual, grad_textual) -> AttributionReport:
    """Summarize backpropagated prototype gradients for export.

    Raises RuntimeError when called before any backward pass (None grads).
    """
    if grad_visual is None or grad_textual is None:
        raise RuntimeError(
            "no prototype gradients recorded; run a backward pass first"
        )
    gv = as_matrix(grad_visual, "visual prototype gradients")
    gt = as_matrix(grad_textual, "textual prototype gradients")
    require_finite(gv, "visual prototype gradients")
    require_finite(gt, "textual prototype gradients")
    per_v = np.abs(gv).mean(axis=1)
    per_t = np.abs(gt).mean(axis=1)
    return AttributionReport(per_v, per_t, float(per_v.mean()), float(per_t.mean()))
