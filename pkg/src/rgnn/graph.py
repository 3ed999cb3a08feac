"""Region graph construction and message passing.

Regions are nodes; edges default to fully-connected (the spatial overlap
mode is available for experiments).  Messages propagate with the
personalized-PageRank scheme: a per-node prediction H is smoothed over the
symmetrically normalized adjacency by K power-iteration steps while a
teleport weight alpha keeps each node anchored to its own prediction,

    Y(0) = H,   Y(k+1) = (1 - alpha) * A_hat @ Y(k) + alpha * H,

so alpha = 1 disables propagation entirely and small alpha widens each
node's effective neighborhood.  ``fixed_point`` is the independent
convergence oracle: the closed-form limit via a dense solve.

Node features are aggregated into one image descriptor either by the gated
attentional readout (a learned sigmoid gate deciding how much of each
node's value enters the sum) or by the plain mean/max/sum baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .regions import Region
from .tensor import Tensor


@dataclass(frozen=True)
class PropagationConfig:
    """Teleport probability and power-iteration step count."""

    alpha: float = 0.3
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class GnnLayerParams:
    """Single-layer MLP of one propagation layer plus its activation tag."""

    weight: Tensor
    bias: Tensor
    activation: str  # "relu" (inner layers) or "sigmoid" (final layer)


@dataclass(frozen=True)
class ReadoutParams:
    """Gate and value affine maps of the gated attentional readout."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class RegionGraph:
    """Adjacency structures over R regions.

    A is symmetric 0/1 with a zero diagonal; self-loops enter via
    A_tilde = A + I, whose degrees normalize A_hat = D^-1/2 A_tilde D^-1/2.
    """

    def __init__(self, adjacency: np.ndarray):
        a = np.asarray(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency diagonal must be zero (self-loops are implicit)")
        if not np.array_equal(a, a.astype(bool).astype(np.float64)):
            raise ValueError("adjacency entries must be 0/1")
        self.adjacency = a
        self.n_nodes = a.shape[0]
        self.a_tilde = a + np.eye(self.n_nodes)
        self.degrees = self.a_tilde.sum(axis=1)
        inv_sqrt = 1.0 / np.sqrt(self.degrees)
        self.a_hat = self.a_tilde * np.outer(inv_sqrt, inv_sqrt)
        self._a_hat_tensor = T.constant(self.a_hat)

    @property
    def a_hat_tensor(self) -> Tensor:
        return self._a_hat_tensor

    def spectral_norm(self, iters: int = 200) -> float:
        """Power-method estimate of ||A_hat||_2 (symmetric, so = spectral radius)."""
        v = np.ones(self.n_nodes) / np.sqrt(self.n_nodes)
        for _ in range(iters):
            w = self.a_hat @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                return 0.0
            v = w / norm
        return float(np.linalg.norm(self.a_hat @ v))


def iou(a: Region, b: Region) -> float:
    """Intersection over union of two half-open rectangles."""
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def build_adjacency(regions, mode: str = "full", iou_thresh: float = 0.1) -> RegionGraph:
    """Region graph with full connectivity or IoU-overlap edges.

    Isolated nodes under overlap mode are fine: the implicit self-loop
    keeps every degree >= 1.
    """
    r = len(regions)
    if r < 1:
        raise ValueError("need at least one region")
    if mode == "full":
        a = np.ones((r, r)) - np.eye(r)
    elif mode == "overlap":
        a = np.zeros((r, r))
        for i in range(r):
            for j in range(i + 1, r):
                if iou(regions[i], regions[j]) >= iou_thresh:
                    a[i, j] = a[j, i] = 1.0
    else:
        raise ValueError(f"unknown edge mode {mode!r}")
    return RegionGraph(a)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def power_iterate(h: Tensor, a_hat: Tensor, alpha: float, steps: int) -> Tensor:
    """K power-iteration steps on (R, D) node predictions, pre-activation."""
    y = h
    for _ in range(steps):
        y = T.add(T.scale(T.matmul(a_hat, y), 1.0 - alpha), T.scale(h, alpha))
    return y


def _propagate_batched(h: Tensor, graph: RegionGraph, cfg: PropagationConfig,
                       batch: int, dim: int) -> Tensor:
    """Propagate (batch*R, dim) features; folds the batch into the columns."""
    r = graph.n_nodes
    cols = T.reshape(T.transpose(T.reshape(h, (batch, r, dim)), (1, 0, 2)), (r, batch * dim))
    out = power_iterate(cols, graph.a_hat_tensor, cfg.alpha, cfg.steps)
    return T.reshape(T.transpose(T.reshape(out, (r, batch, dim)), (1, 0, 2)), (batch * r, dim))


def appnp_propagate(x: Tensor, layers, cfg: PropagationConfig,
                    graph: RegionGraph) -> Tensor:
    """Full relation-aware transform: GAP per node, then the layer stack.

    x: (R, sp, C) pooled region features, or (N, R, sp, C) batched.
    Each layer computes its prediction H = act(prev @ W + b) -- the inner
    layers' activation lives inside H, the final layer is linear there --
    runs K propagation steps, and the final layer applies the sigmoid to
    the last step.  Returns (R, D) or (N, R, D) transformed node features.
    """
    batched = x.data.ndim == 4
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    n, r, sp, c = x.shape
    if r != graph.n_nodes:
        raise T.ShapeError(f"{r} feature rows for a {graph.n_nodes}-node graph")
    h = T.reduce_mean(T.reshape(x, (n * r, sp, c)), axes=(1,))
    for i, layer in enumerate(layers):
        final = i == len(layers) - 1
        z = T.add_bias(T.matmul(h, layer.weight), layer.bias)
        if not final and layer.activation == "relu":
            z = T.relu(z)
        y = _propagate_batched(z, graph, cfg, n, layer.weight.shape[1])
        if final:
            if layer.activation != "sigmoid":
                raise ValueError("final propagation layer must carry the sigmoid tag")
            y = T.sigmoid(y)
        h = y
    d = layers[-1].weight.shape[1]
    out = T.reshape(h, (n, r, d))
    return out if batched else T.reshape(out, (r, d))


def fixed_point(h: np.ndarray, a_hat: np.ndarray, alpha: float) -> np.ndarray:
    """Closed-form propagation limit alpha * (I - (1-alpha) A_hat)^-1 H.

    Pre-activation; the system is nonsingular for every alpha > 0 because
    the spectral radius of A_hat is at most 1.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    r = a_hat.shape[0]
    system = np.eye(r) - (1.0 - alpha) * a_hat
    return alpha * np.linalg.solve(system, h)


def gcn_layer(h: Tensor, a_hat: Tensor, weight: Tensor) -> Tensor:
    """Plain graph-convolution baseline: ReLU(A_hat @ H @ W)."""
    return T.relu(T.matmul(T.matmul(a_hat, h), weight))


# ---------------------------------------------------------------------------
# readouts
# ---------------------------------------------------------------------------

def gated_readout(y: Tensor, params: ReadoutParams) -> Tensor:
    """Sum over nodes of sigmoid(y W1 + b1) * (y W2 + b2).

    y: (R, D) or (N, R, D); returns (D,) or (N, D).
    """
    batched = y.data.ndim == 3
    if not batched:
        y = T.reshape(y, (1,) + y.shape)
    n, r, d = y.shape
    flat = T.reshape(y, (n * r, d))
    gate = T.sigmoid(T.add_bias(T.matmul(flat, params.w1), params.b1))
    value = T.add_bias(T.matmul(flat, params.w2), params.b2)
    gated = T.reshape(T.mul(gate, value), (n, r, d))
    out = T.reduce_sum(gated, axes=(1,))
    return out if batched else T.reshape(out, (d,))


def alt_readout(kind: str, y: Tensor) -> Tensor:
    """Baseline poolings over the node axis: gap (mean), gmp (max), gsum."""
    batched = y.data.ndim == 3
    if not batched:
        y = T.reshape(y, (1,) + y.shape)
    if kind == "gap":
        out = T.reduce_mean(y, axes=(1,))
    elif kind == "gmp":
        out = T.reduce_max(y, axes=(1,))
    elif kind == "gsum":
        out = T.reduce_sum(y, axes=(1,))
    else:
        raise ValueError(f"unknown readout kind {kind!r}")
    return out if batched else T.reshape(out, (y.shape[2],))
