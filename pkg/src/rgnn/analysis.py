"""Diagnostics: cluster quality, similarity maps, attention exports.

These tools quantify what training did to the representation.  The
Davies-Bouldin index scores how separated the per-class feature clusters
are (lower is better); feature probes dump the matrix at a named stage of
the forward pass so any external embedding tool can visualize it; the
cosine-similarity matrix shows pairwise node relationships after the graph
transform; attention maps export as CSV plus a max-normalized 8-bit PGM
with a top-k text report tying strong entries back to region rectangles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ForwardOut, Model
from .features import center_crop
from .synth import ImageBatch
from .tensor import save_csv

PROBE_STAGES = ("backbone", "transformed_ft", "refine_v", "final_ft")


@dataclass
class ClusterReport:
    """Davies-Bouldin value plus per-class dispersion detail."""

    value: float
    n_classes: int
    dispersion: dict = field(default_factory=dict)  # label -> mean dist to centroid
    unbounded: bool = False
    coincident_pair: tuple = ()

    def __str__(self):
        if self.unbounded:
            return (f"DB unbounded: classes {self.coincident_pair} share a centroid")
        return f"DB {self.value:.6f} over {self.n_classes} classes"


def davies_bouldin_report(features: np.ndarray, labels) -> ClusterReport:
    """DB = mean_i max_{j != i} (S_i + S_j) / M_ij.

    S_i is the mean Euclidean distance of class i's points to their
    centroid, M_ij the distance between centroids.  Coincident centroids
    make the ratio unbounded; that is reported, not masked.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("Davies-Bouldin needs at least two classes")
    centroids = []
    spreads = {}
    for c in classes:
        pts = feats[labels == c]
        centroid = pts.mean(axis=0)
        centroids.append(centroid)
        spreads[int(c)] = float(np.mean(np.linalg.norm(pts - centroid, axis=1)))
    centroids = np.stack(centroids)

    k = len(classes)
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            m = float(np.linalg.norm(centroids[i] - centroids[j]))
            if m == 0.0:
                return ClusterReport(float("inf"), k, spreads, True,
                                     (int(classes[i]), int(classes[j])))
            ratio = (spreads[int(classes[i])] + spreads[int(classes[j])]) / m
            worst[i] = max(worst[i], ratio)
    return ClusterReport(float(worst.mean()), k, spreads)


def davies_bouldin(features: np.ndarray, labels) -> float:
    return davies_bouldin_report(features, labels).value


def cosine_similarity_matrix(node_features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows; symmetric, unit diagonal.

    Zero-norm rows get similarity 0 against everything else (their
    diagonal entry stays 1 by convention).
    """
    y = np.asarray(node_features, dtype=np.float64)
    norms = np.linalg.norm(y, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = y / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def zero_norm_rows(node_features: np.ndarray) -> list:
    return list(np.nonzero(np.linalg.norm(np.asarray(node_features), axis=1) == 0)[0])


# ---------------------------------------------------------------------------
# feature probes
# ---------------------------------------------------------------------------

def feature_probe(model: Model, batch: ImageBatch, stage: str, chunk: int = 32):
    """Per-image feature rows at a named stage; returns (matrix, labels).

    backbone: spatially averaged base-CNN map; transformed_ft: the graph
    descriptor; refine_v: the refinement gate; final_ft: the refined
    descriptor.  Stages bypassed by the active ablation flags error out.
    """
    if stage not in PROBE_STAGES:
        raise ValueError(f"stage must be one of {PROBE_STAGES}, got {stage!r}")
    if stage == "refine_v" and model.cfg.no_refine:
        raise ValueError("stage refine_v is unavailable: this model was "
                         "built with no_refine")
    rows = []
    for start in range(0, len(batch), chunk):
        stop = min(start + chunk, len(batch))
        images = np.stack([center_crop(batch.images[i], model.cfg.image_size)
                           for i in range(start, stop)])
        out = model.forward(images)
        rows.append(_stage_matrix(out, stage))
    return np.concatenate(rows, axis=0), np.asarray(batch.labels)


def _stage_matrix(out: ForwardOut, stage: str) -> np.ndarray:
    if stage == "backbone":
        return out.backbone_map.data.mean(axis=(1, 2))
    if stage == "transformed_ft":
        return out.descriptor.data
    if stage == "refine_v":
        return out.gate.data
    return out.refined.data


# ---------------------------------------------------------------------------
# attention exports
# ---------------------------------------------------------------------------

def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM after per-map max normalization."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got shape {v.shape}")
    peak = v.max()
    scaled = v / peak if peak > 0 else np.zeros_like(v)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def export_attention_map(out: ForwardOut, index: int, regions, prefix: str,
                         top_cols: int = 2, top_rows: int = 3) -> dict:
    """Write one image's joint attention map as CSV + PGM + top-k report.

    The report ranks columns by the importance weights and, for each top
    column, the rows attending to it most strongly, with rectangles.
    Returns the written paths.
    """
    if out.attention is None:
        raise ValueError("refinement disabled: no attention map to export")
    attn = out.attention.data[index]
    weights = (out.weights.data[index] if out.weights is not None
               else np.full(attn.shape[0], 1.0 / attn.shape[0]))

    paths = {"csv": f"{prefix}.csv", "pgm": f"{prefix}.pgm", "topk": f"{prefix}_topk.txt"}
    save_csv(paths["csv"], attn)
    write_pgm(paths["pgm"], attn)

    order = np.argsort(-weights)[:top_cols]
    with open(paths["topk"], "w") as fh:
        fh.write(f"# top-{top_cols} regions by importance weight, "
                 f"each with its top-{top_rows} attending regions\n")
        for col in order:
            rc = regions[col]
            fh.write(f"region {rc.id} weight={weights[col]:.6f} "
                     f"rect=({rc.x0},{rc.y0},{rc.x1},{rc.y1})\n")
            for row in np.argsort(-attn[:, col])[:top_rows]:
                rr = regions[row]
                fh.write(f"  from region {rr.id} attention={attn[row, col]:.6f} "
                         f"rect=({rr.x0},{rr.y0},{rr.x1},{rr.y1})\n")
    return paths
