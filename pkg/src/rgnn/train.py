"""SGD training loop, evaluation, and bit-exact checkpointing.

Everything random is drawn from streams derived statelessly from
(seed, purpose, epoch, ...): the epoch shuffle, each image's augmentation.
A checkpoint therefore needs no mutable RNG snapshot beyond the seed, and a
resumed run replays the exact batch sequence an uninterrupted run would
have seen, which is what makes resume-equivalence testable to the byte.

Divergence policy: the first non-finite value anywhere in the chain aborts
the epoch and surfaces the checkpoint of the last completed epoch.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_items, config_to_text
from .features import augment, center_crop
from .model import Model, ModelParams, build_params, cross_entropy
from .rng import stream
from .synth import ImageBatch

METRICS_HEADER = "epoch,lr,train_loss,train_acc,test_acc"
_CKPT_MAGIC = b"RGCK v1\n"


class TrainingDiverged(RuntimeError):
    """Raised when the loss chain produces NaN/Inf; carries the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    config: RunConfig
    epoch: int          # last completed epoch, -1 if none
    lr: float
    seed: int           # base of all derived streams (the full RNG state)
    arrays: dict        # parameter name -> ndarray
    trainable: dict     # parameter name -> bool


def lr_schedule(epoch: int, cfg: RunConfig) -> float:
    """Step decay: lr * decay^(epoch // step)."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def sgd_step(params: ModelParams, lr: float) -> None:
    """Plain gradient descent on every trainable parameter."""
    for p in params.trainable():
        p.assign(p.data - lr * p.grad)


def snapshot(model: Model, epoch: int, lr: float) -> Checkpoint:
    return Checkpoint(
        config=model.cfg,
        epoch=epoch,
        lr=lr,
        seed=model.cfg.seed,
        arrays={k: v.copy() for k, v in model.params.state().items()},
        trainable={p.name: p.trainable for p in model.params},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    params = build_params(ckpt.config)
    params.load_state(ckpt.arrays)
    return Model(ckpt.config, params)


def _augmented_batch(raw: ImageBatch, positions, cfg: RunConfig, epoch: int):
    images = np.stack([
        augment(raw.images[i], stream(cfg.seed, "augment", epoch, raw.ids[i]),
                cfg.image_size, cfg.rot_degrees, cfg.scale_jitter)
        for i in positions])
    return images, raw.labels[list(positions)]


def evaluate(model: Model, batch: ImageBatch, chunk: int = 32):
    """Top-1 accuracy and confusion matrix on center-cropped images."""
    cfg = model.cfg
    k = cfg.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(batch), chunk):
        stop = min(start + chunk, len(batch))
        images = np.stack([center_crop(batch.images[i], cfg.image_size)
                           for i in range(start, stop)])
        pred = model.predict(images)
        for p, t in zip(pred, batch.labels[start:stop]):
            confusion[t, p] += 1
    acc = float(np.trace(confusion)) / max(1, confusion.sum())
    return acc, confusion


def _format_row(row) -> str:
    epoch, lr, loss, tr_acc, te_acc = row
    return f"{epoch},{lr:.10g},{loss:.10g},{tr_acc:.10g},{te_acc:.10g}"


def write_metrics(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")


def train(cfg: RunConfig, train_set: ImageBatch, test_set: ImageBatch,
          out_dir: str | None = None, resume: Checkpoint | None = None,
          log=None):
    """Run the schedule; returns (final Checkpoint, metrics rows).

    Deterministic given cfg.seed: shuffling, augmentation and init all
    derive from it.  With ``out_dir`` set, writes metrics.csv and
    checkpoint.rgck there.  ``resume`` continues after its last completed
    epoch and reproduces the uninterrupted run exactly.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if resume is not None:
        if resume.config != cfg:
            raise ValueError("resume checkpoint was built from a different config")
        model = model_from_checkpoint(resume)
        start_epoch = resume.epoch + 1
    else:
        model = Model(cfg)
        start_epoch = 0

    n = len(train_set)
    rows = []
    last_good = snapshot(model, start_epoch - 1, lr_schedule(max(start_epoch - 1, 0), cfg))
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = list(range(n))
        stream(cfg.seed, "shuffle", epoch).shuffle(order)
        losses = []
        hits = 0
        seen = 0
        try:
            for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
                positions = order[start : start + cfg.batch_size]
                images, labels = _augmented_batch(train_set, positions, cfg, epoch)
                model.params.zero_grad()
                out = model.forward(images)
                loss = cross_entropy(out.probs, labels)
                T.backward(loss)
                sgd_step(model.params, lr)
                losses.append(loss.item())
                hits += int(np.sum(np.argmax(out.probs.data, axis=1) == labels))
                seen += len(positions)
        except T.NonFiniteError as exc:
            if out_dir:
                os.makedirs(out_dir, exist_ok=True)
                save_checkpoint(os.path.join(out_dir, "checkpoint.rgck"), last_good)
                write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
            raise TrainingDiverged(
                f"non-finite value in epoch {epoch}: {exc}", last_good) from exc

        train_loss = float(np.mean(losses)) if losses else 0.0
        train_acc = hits / seen if seen else 0.0
        test_acc, _ = evaluate(model, test_set)
        rows.append((epoch, lr, train_loss, train_acc, test_acc))
        last_good = snapshot(model, epoch, lr)
        if log:
            log(_format_row(rows[-1]))

    final = last_good
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.rgck"), final)
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    return final, rows


# ---------------------------------------------------------------------------
# checkpoint file format: magic, config text, scalars, named tensor blocks
# ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg_text = config_to_text(ckpt.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_text)))
        fh.write(cfg_text)
        fh.write(struct.pack("<q", ckpt.epoch))
        fh.write(struct.pack("<d", ckpt.lr))
        fh.write(struct.pack("<Q", ckpt.seed))
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name, arr in ckpt.arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", 1 if ckpt.trainable[name] else 0))
            T.write_tensor(fh, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg_text = fh.read(cfg_len).decode("utf-8")
        items = dict(line.split("=", 1) for line in cfg_text.splitlines() if line)
        cfg = config_from_items(items)
        (epoch,) = struct.unpack("<q", fh.read(8))
        (lr,) = struct.unpack("<d", fh.read(8))
        (seed,) = struct.unpack("<Q", fh.read(8))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        trainable = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (flag,) = struct.unpack("<B", fh.read(1))
            arrays[name] = T.read_tensor(fh)
            trainable[name] = bool(flag)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return Checkpoint(cfg, epoch, lr, seed, arrays, trainable)
