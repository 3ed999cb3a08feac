"""Model assembly: parameter registry, forward pass, loss, counting.

The forward chain is: toy backbone -> bilinear upsample -> region pooling
-> relation-aware node transform with gated readout -> attentional context
refinement -> skip fusion -> linear classifier -> softmax.  Ablation flags
bypass stages: ``no_gnn`` pools raw per-region averages instead of the
transform, ``no_refine`` skips refinement entirely (the descriptor passes
through bit-exactly), ``no_self_attention`` freezes the attention map at
uniform, ``no_weighted_attention`` freezes the importance weights at 1/R.

Parameters live in a name-ordered registry; a parameter exists exactly when
the stage using it is enabled, and the trainable count never depends on the
number of regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .features import pool_regions, toy_backbone_forward, bilinear_upsample
from .graph import (
    GnnLayerParams,
    PropagationConfig,
    ReadoutParams,
    alt_readout,
    appnp_propagate,
    build_adjacency,
    gated_readout,
)
from .refine import (
    RefinementParams,
    apply_refinement,
    context_vectors,
    identity_projection,
    pairwise_attention,
    refine_weight_vector,
)
from .rng import stream
from .tensor import Parameter, Tensor


class ModelParams:
    """Deterministically ordered name -> Parameter registry."""

    def __init__(self):
        self._params: dict = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params.keys())

    def trainable(self):
        return [p for p in self._params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict:
        return {name: p.data for name, p in self._params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self._params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for name, arr in arrays.items():
            self._params[name].assign(np.asarray(arr))


def _fan_in_uniform(rs, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    # He-style uniform bound: keeps activation variance stable through the
    # relu/pool stack instead of shrinking it layer by layer
    bound = gain * np.sqrt(6.0 / fan_in)
    return rs.fill_uniform(int(np.prod(shape)), -bound, bound).reshape(shape)


def build_params(cfg: RunConfig, seed: int | None = None) -> ModelParams:
    """Initialize every parameter the configured forward pass can reach."""
    seed = cfg.seed if seed is None else seed
    params = ModelParams()

    def init(name, fan_in, shape, gain=1.0):
        params.add(name, _fan_in_uniform(stream(seed, "init", name), fan_in, shape, gain))

    c_in = cfg.channels
    for i, c_out in enumerate(cfg.conv_widths):
        init(f"backbone/block{i}/weight", 9 * c_in, (9 * c_in, c_out))
        params.add(f"backbone/block{i}/bias", np.zeros(c_out))
        c_in = c_out

    c = cfg.backbone_channels
    if not cfg.no_gnn:
        d_in = c
        for i, d_out in enumerate(cfg.gnn_dims):
            # gain 3: GAP'd region means are low-variance, and without it
            # the final sigmoid sits in its linear center where per-image
            # differences vanish downstream
            init(f"gnn/layer{i}/weight", d_in, (d_in, d_out), gain=3.0)
            params.add(f"gnn/layer{i}/bias", np.zeros(d_out))
            d_in = d_out
        if cfg.readout_kind == "gated":
            d = cfg.gnn_dims[-1]
            init("readout/gate_weight", d, (d, d))
            params.add("readout/gate_bias", np.zeros(d))
            # center the value columns: the readout sums R gated values, and
            # uncentered columns turn the node-mean profile into a large
            # image-independent descriptor offset that destabilizes SGD
            w_value = _fan_in_uniform(stream(seed, "init", "readout/value_weight"),
                                      d, (d, d))
            params.add("readout/value_weight",
                       w_value - w_value.mean(axis=0, keepdims=True))
            params.add("readout/value_bias", np.zeros(d))

    if not cfg.no_refine:
        if not cfg.no_self_attention:
            init("refine/w_query", c, (c, cfg.attn_dim))
            init("refine/w_key", c, (c, cfg.attn_dim))
            params.add("refine/b_align", np.zeros(cfg.attn_dim))
            init("refine/w_pair", cfg.attn_dim, (cfg.attn_dim, 1))
            params.add("refine/b_pair", np.zeros(1))
        if not cfg.no_weighted_attention:
            init("refine/w_score", c, (c, 1))
            params.add("refine/b_score", np.zeros(1))
        d = cfg.feature_dim
        if c != d:
            init("refine/projection", c, (c, d))
        elif cfg.train_projection:
            params.add("refine/projection", np.eye(c))

    # zero start for the head: logits begin at 0 (loss = ln num_classes)
    # no matter how large the summed descriptor is, so the softmax cannot
    # saturate past the cross-entropy clamp before learning begins
    params.add("classifier/weight", np.zeros((cfg.feature_dim, cfg.num_classes)))
    params.add("classifier/bias", np.zeros(cfg.num_classes))
    return params


@dataclass
class ForwardOut:
    """Probabilities plus the diagnostics bundle for analysis tools."""

    probs: Tensor                 # (N, num_classes), rows sum to 1
    backbone_map: Tensor          # (N, s, s, C) base-CNN map, pre-upsample
    region_features: Tensor       # (N, R, sp, C) pooled features
    node_features: Tensor | None  # (N, R, D) transformed nodes (None if no_gnn)
    descriptor: Tensor            # (N, D) image descriptor f_t
    attention: Tensor | None      # (N, R, R) joint attention map
    weights: Tensor | None        # (N, R) importance weights
    gate: Tensor | None           # (N, D) refinement gate vector
    refined: Tensor               # (N, D) descriptor after refinement


class Model:
    """A config plus its parameters, region geometry and graph."""

    def __init__(self, cfg: RunConfig, params: ModelParams | None = None,
                 seed: int | None = None):
        self.cfg = cfg
        self.params = params if params is not None else build_params(cfg, seed)
        self.regions = cfg.regions()
        mode, thresh = cfg.edge_params()
        self.graph = build_adjacency(self.regions, mode, thresh)
        self.propagation = PropagationConfig(cfg.alpha, cfg.steps)

    def _refinement_params(self) -> RefinementParams:
        p = self.params
        c = self.cfg.backbone_channels
        zeros = lambda shape: T.constant(np.zeros(shape))
        proj = (p["refine/projection"].value if "refine/projection" in p
                else identity_projection(c))
        return RefinementParams(
            w_query=p["refine/w_query"].value if "refine/w_query" in p else zeros((c, 1)),
            w_key=p["refine/w_key"].value if "refine/w_key" in p else zeros((c, 1)),
            b_align=p["refine/b_align"].value if "refine/b_align" in p else zeros(1),
            w_pair=p["refine/w_pair"].value if "refine/w_pair" in p else zeros((1, 1)),
            b_pair=p["refine/b_pair"].value if "refine/b_pair" in p else zeros(1),
            w_score=p["refine/w_score"].value if "refine/w_score" in p else zeros((c, 1)),
            b_score=p["refine/b_score"].value if "refine/b_score" in p else zeros(1),
            projection=proj,
        )

    def forward(self, images: np.ndarray) -> ForwardOut:
        cfg = self.cfg
        p = self.params
        n = images.shape[0]
        if images.shape[1] != cfg.image_size or images.shape[3] != cfg.channels:
            raise T.ShapeError(
                f"expected images (N, {cfg.image_size}, {cfg.image_size}, "
                f"{cfg.channels}), got {images.shape}")
        x = T.constant(images)

        blocks = [(p[f"backbone/block{i}/weight"].value, p[f"backbone/block{i}/bias"].value)
                  for i in range(len(cfg.conv_widths))]
        base_map = toy_backbone_forward(x, blocks)
        fmap = bilinear_upsample(base_map, cfg.upsample_factor)
        feats = pool_regions(fmap, self.regions, cfg.pool_w, cfg.pool_h)
        r = len(self.regions)

        if cfg.no_gnn:
            node_feats = None
            kind = cfg.readout_kind if cfg.readout_kind != "gated" else "gap"
            site_mean = T.reduce_mean(feats, axes=(2,))  # (N, R, C)
            descriptor = alt_readout(kind, site_mean)
        else:
            layers = []
            for i in range(len(cfg.gnn_dims)):
                act = "sigmoid" if i == len(cfg.gnn_dims) - 1 else "relu"
                layers.append(GnnLayerParams(
                    p[f"gnn/layer{i}/weight"].value, p[f"gnn/layer{i}/bias"].value, act))
            node_feats = appnp_propagate(feats, layers, self.propagation, self.graph)
            if cfg.readout_kind == "gated":
                descriptor = gated_readout(node_feats, ReadoutParams(
                    p["readout/gate_weight"].value, p["readout/gate_bias"].value,
                    p["readout/value_weight"].value, p["readout/value_bias"].value))
            else:
                descriptor = alt_readout(cfg.readout_kind, node_feats)

        attention = weights = gate = None
        if cfg.no_refine:
            refined = descriptor
        else:
            rp = self._refinement_params()
            if cfg.no_self_attention:
                attention = T.constant(np.full((n, r, r), 1.0 / r))
            else:
                attention = pairwise_attention(feats, rp)
            vectors = context_vectors(feats, attention)
            gate, weights = refine_weight_vector(
                vectors, rp, uniform_weights=cfg.no_weighted_attention)
            refined = apply_refinement(descriptor, gate)

        logits = T.add_bias(T.matmul(refined, p["classifier/weight"].value),
                            p["classifier/bias"].value)
        probs = T.softmax(logits, axis=1)
        return ForwardOut(probs, base_map, feats, node_feats, descriptor,
                          attention, weights, gate, refined)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(images).probs.data, axis=1)


def forward(images: np.ndarray, params: ModelParams, cfg: RunConfig) -> ForwardOut:
    """Single-call convenience around Model.forward."""
    return Model(cfg, params).forward(images)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -ln p[label], with p floored at 1e-12."""
    n, k = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise T.ShapeError(f"labels shape {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    picked = T.take_flat(probs, np.arange(n) * k + labels, (n,))
    return T.scale(T.reduce_sum(T.log(T.clamp_min(picked, 1e-12))), -1.0 / n)


def param_count(params: ModelParams) -> tuple:
    """(total trainable scalars, per-module breakdown dict)."""
    by_module: dict = {}
    for p in params.trainable():
        module = p.name.split("/", 1)[0]
        by_module[module] = by_module.get(module, 0) + p.data.size
    return sum(by_module.values()), by_module
