"""Attentional context refinement over pooled region features.

Pairwise attention scores every ordered region pair (self-pairs included):
query and key maps act channelwise at each spatial site of the pooled
features, the tanh-aligned sum is reduced to a pair logit by a spatial mean
through a small linear head, and a row softmax turns region r's logits into
a distribution over the regions it attends to.  Context vectors are the
attention-weighted sums of the raw pooled features (the values carry no
extra transform).  Each context vector is max-pooled over space, scored by
a learned importance head whose softmax weights the final aggregation, and
the sigmoid of its projection gates the transformed image descriptor
through a skip connection: refined = f + f * gate.

The pair-logit bias shifts a whole softmax row uniformly, so it cannot
change the attention distribution; it is kept so parameter counts line up
with the declared head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class RefinementParams:
    """Weights of the refinement head.

    w_query/w_key: (C, d_a) channelwise maps; b_align: (d_a,) alignment bias;
    w_pair: (d_a, 1) + b_pair: (1,) pair-logit head; w_score: (C, 1) +
    b_score: (1,) importance head; projection: (C, D) aligning the gate with
    the descriptor dimension (identity when C == D unless trained).
    """

    w_query: Tensor
    w_key: Tensor
    b_align: Tensor
    w_pair: Tensor
    b_pair: Tensor
    w_score: Tensor
    b_score: Tensor
    projection: Tensor


def _ensure_batched(x: Tensor, rank: int):
    if x.data.ndim == rank:
        return x, False
    return T.reshape(x, (1,) + x.shape), True


def pairwise_attention(features: Tensor, params: RefinementParams) -> Tensor:
    """Row-stochastic R x R attention map (batched: N x R x R).

    features: (R, sp, C) pooled region features or (N, R, sp, C).  The
    alignment bias is folded into the query side before pair expansion;
    (q + b) + k is exactly q + k + b.
    """
    x, squeezed = _ensure_batched(features, 4)
    n, r, sp, c = x.shape
    d_a = params.w_query.shape[1]
    flat = T.reshape(x, (n * r * sp, c))
    queries = T.add_bias(T.matmul(flat, params.w_query), params.b_align)
    keys = T.matmul(flat, params.w_key)
    aligned = T.tanh(T.pair_sum(T.reshape(queries, (n, r, sp * d_a)),
                                T.reshape(keys, (n, r, sp * d_a))))
    site_mean = T.reduce_mean(T.reshape(aligned, (n * r * r, sp, d_a)), axes=(1,))
    logits = T.add_bias(T.matmul(site_mean, params.w_pair), params.b_pair)
    attn = T.softmax(T.reshape(logits, (n, r, r)), axis=2)
    return T.reshape(attn, (r, r)) if squeezed else attn


def context_vectors(features: Tensor, attention: Tensor) -> Tensor:
    """v_r = sum_r' a[r, r'] * f_r'; spatial shape preserved.

    features: (R, sp, C) or (N, R, sp, C); attention of matching rank.
    """
    x, squeezed = _ensure_batched(features, 4)
    a = T.reshape(attention, (1,) + attention.shape) if squeezed else attention
    n, r, sp, c = x.shape
    mixed = T.bmm(a, T.reshape(x, (n, r, sp * c)))
    out = T.reshape(mixed, (n, r, sp, c))
    return T.reshape(out, (r, sp, c)) if squeezed else out


def refine_weight_vector(vectors: Tensor, params: RefinementParams,
                         uniform_weights: bool = False) -> tuple:
    """Aggregate context vectors into the gate vector.

    vectors: (R, sp, C) or (N, R, sp, C).  Each context vector is
    max-pooled over its spatial sites, the importance head's softmax
    weights their sum, and the sigmoid of the projected sum is the gate.
    Returns (gate, weights): ((D,), (R,)) or batched ((N, D), (N, R)).

    uniform_weights short-circuits the importance softmax to 1/R (the
    weighted-attention ablation).
    """
    x, squeezed = _ensure_batched(vectors, 4)
    n, r, sp, c = x.shape
    peaks = T.reduce_max(x, axes=(2,))  # (N, R, C)
    if uniform_weights:
        weights = T.constant(np.full((n, r), 1.0 / r))
    else:
        scores = T.add_bias(T.matmul(T.reshape(peaks, (n * r, c)), params.w_score),
                            params.b_score)
        weights = T.softmax(T.reshape(scores, (n, r)), axis=1)
    pooled = T.reshape(T.bmm(T.reshape(weights, (n, 1, r)), peaks), (n, c))
    gate = T.sigmoid(T.matmul(pooled, params.projection))
    if squeezed:
        return T.reshape(gate, (gate.shape[1],)), T.reshape(weights, (r,))
    return gate, weights


def apply_refinement(descriptor: Tensor, gate: Tensor) -> Tensor:
    """Skip-connection fusion: refined = descriptor + descriptor * gate."""
    if descriptor.shape != gate.shape:
        raise T.ShapeError(
            f"descriptor {descriptor.shape} and gate {gate.shape} differ")
    return T.add(descriptor, T.mul(descriptor, gate))


def identity_projection(c: int) -> Tensor:
    """Constant identity used when the pooled channels already match D."""
    return T.constant(np.eye(c))
