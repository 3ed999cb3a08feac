"""Command-line interface.

Subcommands: gen-data, train, eval, probe, ablate, export-maps,
param-count, gradcheck.  Every RunConfig key is also a flag, applied on
top of --config.  Exit codes: 0 success, 1 usage error, 2 runtime error.
RGNN_OUT_DIR sets the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import tensor as T
from .ablate import (
    ablation_variants,
    alpha_sweep,
    key_modules_grid,
    region_sweep,
    run_ablation,
    steps_sweep,
)
from .analysis import (
    PROBE_STAGES,
    cosine_similarity_matrix,
    davies_bouldin_report,
    export_attention_map,
    feature_probe,
)
from .config import RunConfig, config_from_items, load_config, save_config
from .features import center_crop
from .model import Model, cross_entropy, param_count
from .rng import SplitMix64
from .synth import SynthSpec, generate, nearest_centroid_accuracy, read_dataset, write_dataset
from .train import evaluate, load_checkpoint, model_from_checkpoint, train
from .tensor import save_csv, save_tensor


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def out_root() -> str:
    return os.environ.get("RGNN_OUT_DIR", "rgnn_out")


def _add_config_flags(parser: Parser) -> None:
    parser.add_argument("--config", help="key=value config file")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue  # --seed is declared per-subcommand (required for train/ablate)
        parser.add_argument(f"--{f.name}", metavar="V")


def _resolve_config(args) -> RunConfig:
    base = load_config(args.config) if args.config else RunConfig()
    items = {}
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            items[f.name] = value
    if getattr(args, "seed", None) is not None:
        items["seed"] = args.seed
    return config_from_items(items, base)


def _load_data(args):
    if not args.data:
        raise UsageError("--data <dataset dir> is required")
    return read_dataset(args.data)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    items = {f.name: getattr(args, f.name) for f in fields(SynthSpec)
             if getattr(args, f.name, None) is not None}
    kinds = {f.name: type(getattr(SynthSpec(), f.name)) for f in fields(SynthSpec)}
    spec = replace(SynthSpec(), **{k: kinds[k](v) for k, v in items.items()})
    train_set, test_set = generate(spec)
    out = args.out or os.path.join(out_root(), "dataset")
    write_dataset(out, train_set, test_set, spec)
    baseline = nearest_centroid_accuracy(train_set, test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {out}")
    print(f"pixel nearest-centroid baseline: {baseline:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_set, test_set = _load_data(args)
    out = args.out or os.path.join(out_root(), "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = train(cfg, train_set, test_set, out_dir=out, resume=resume,
                       log=print if not args.quiet else None)
    if rows:
        print(f"final test accuracy: {rows[-1][4]:.4f}")
    print(f"checkpoint + metrics in {out}")
    save_config(os.path.join(out, "config.cfg"), cfg)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    train_set, test_set = _load_data(args)
    batch = train_set if args.split == "train" else test_set
    acc, confusion = evaluate(model, batch)
    print(f"top-1 accuracy on {args.split}: {acc:.4f} ({len(batch)} images)")
    if args.out:
        save_csv(args.out, confusion.astype(np.float64))
        print(f"confusion matrix written to {args.out}")
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    train_set, test_set = _load_data(args)
    batch = train_set if args.split == "train" else test_set
    feats, labels = feature_probe(model, batch, args.stage)
    out = args.out or os.path.join(out_root(), f"probe_{args.stage}")
    os.makedirs(out, exist_ok=True)
    save_tensor(os.path.join(out, "features.rgt"), feats)
    save_csv(os.path.join(out, "labels.csv"), labels.astype(np.float64))
    report = davies_bouldin_report(feats, labels)
    print(f"stage {args.stage}: {feats.shape[0]}x{feats.shape[1]} features, {report}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    train_set, test_set = _load_data(args)
    base_seed = int(args.seed)
    seeds = [base_seed + i for i in range(args.num_seeds)]
    grids = {
        "key-modules": key_modules_grid,
        "variants": ablation_variants,
        "alpha": alpha_sweep,
        "steps": steps_sweep,
        "regions": region_sweep,
    }
    if args.grid not in grids:
        raise UsageError(f"--grid must be one of {sorted(grids)}")
    grid = grids[args.grid](cfg)
    out = args.out or os.path.join(out_root(), f"ablate_{args.grid}")
    rows = run_ablation(grid, train_set, test_set, seeds, out,
                        threads=args.threads, log=print if not args.quiet else None)
    finite = [r for r in rows if np.isfinite(r[2])]
    print(f"{len(finite)}/{len(rows)} cells completed; summary in {out}")
    return 0


def cmd_export_maps(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    train_set, test_set = _load_data(args)
    batch = train_set if args.split == "train" else test_set
    index = args.index
    if not 0 <= index < len(batch):
        raise UsageError(f"--index {index} out of range for {len(batch)} images")
    images = center_crop(batch.images[index], model.cfg.image_size)[None]
    out_fwd = model.forward(images)
    prefix = args.out or os.path.join(out_root(), f"attention_{index:04d}")
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    paths = export_attention_map(out_fwd, 0, model.regions, prefix)
    if out_fwd.node_features is not None:
        cos_path = f"{prefix}_cosine.csv"
        save_csv(cos_path, cosine_similarity_matrix(out_fwd.node_features.data[0]))
        paths["cosine"] = cos_path
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def cmd_param_count(args) -> int:
    cfg = _resolve_config(args)
    model = Model(cfg)
    total, by_module = param_count(model.params)
    for module, count in by_module.items():
        print(f"{module:12s} {count:10d}")
    print(f"{'total':12s} {total:10d}")
    print(f"regions: {len(model.regions)} (independent of the count above)")
    return 0


def gradcheck_chains(entries: int = 60, seed: int = 0):
    """Finite-difference checks for each module chain at a tiny config."""
    from .features import bilinear_upsample, pool_regions
    from .graph import (GnnLayerParams, PropagationConfig, ReadoutParams,
                        appnp_propagate, build_adjacency, gated_readout)
    from .refine import (RefinementParams, apply_refinement, context_vectors,
                         pairwise_attention, refine_weight_vector)
    from .regions import Region
    from .tensor import Parameter, Tensor, finite_diff_check

    rng = SplitMix64(seed)
    reports = {}

    # pooling chain
    src = Parameter("map", rng.fill_uniform(6 * 6 * 2, 0, 1).reshape(6, 6, 2))
    regs = [Region(0, 0, 0, 12, 12), Region(1, 2, 3, 9, 11)]

    def pool_chain():
        up = bilinear_upsample(T.reshape(src.value, (1, 6, 6, 2)), 2)
        pooled = pool_regions(up, regs, 3, 3)
        return T.reduce_mean(T.mul(pooled, pooled))

    reports["pooling"] = finite_diff_check(pool_chain, [src], max_entries=entries,
                                           rng=rng.derive("sample", 0))

    # propagation + readout chain
    tiny = tiny_config()
    graph = build_adjacency(tiny.regions(), "full")
    r = graph.n_nodes
    x = Tensor(rng.fill_uniform(r * 4 * 3, -1, 1).reshape(r, 4, 3))
    gp = {
        "l0_w": Parameter("l0_w", rng.fill_uniform(12, -0.5, 0.5).reshape(3, 4)),
        "l0_b": Parameter("l0_b", np.zeros(4)),
        "l1_w": Parameter("l1_w", rng.fill_uniform(16, -0.5, 0.5).reshape(4, 4)),
        "l1_b": Parameter("l1_b", np.zeros(4)),
        "r_w1": Parameter("r_w1", rng.fill_uniform(16, -0.5, 0.5).reshape(4, 4)),
        "r_b1": Parameter("r_b1", np.zeros(4)),
        "r_w2": Parameter("r_w2", rng.fill_uniform(16, -0.5, 0.5).reshape(4, 4)),
        "r_b2": Parameter("r_b2", np.zeros(4)),
    }

    def graph_chain():
        layers = [GnnLayerParams(gp["l0_w"].value, gp["l0_b"].value, "relu"),
                  GnnLayerParams(gp["l1_w"].value, gp["l1_b"].value, "sigmoid")]
        y = appnp_propagate(x, layers, PropagationConfig(0.3, 2), graph)
        ft = gated_readout(y, ReadoutParams(gp["r_w1"].value, gp["r_b1"].value,
                                            gp["r_w2"].value, gp["r_b2"].value))
        return T.reduce_sum(T.mul(ft, ft))

    reports["graph"] = finite_diff_check(graph_chain, list(gp.values()),
                                         max_entries=entries, rng=rng.derive("sample", 1))

    # refinement chain
    c, d_a, d = 3, 2, 4
    shapes = {"w_query": (c, d_a), "w_key": (c, d_a), "b_align": (d_a,),
              "w_pair": (d_a, 1), "b_pair": (1,), "w_score": (c, 1),
              "b_score": (1,), "projection": (c, d)}
    rp = {k: Parameter(k, rng.fill_uniform(int(np.prod(s)), -0.7, 0.7).reshape(s))
          for k, s in shapes.items()}
    feats = Tensor(rng.fill_uniform(4 * 5 * c, -1, 1).reshape(4, 5, c))
    desc = Parameter("desc", rng.fill_uniform(d, -1, 1))

    def refine_chain():
        pr = RefinementParams(**{k: p.value for k, p in rp.items()})
        attn = pairwise_attention(feats, pr)
        gate, _ = refine_weight_vector(context_vectors(feats, attn), pr)
        refined = apply_refinement(desc.value, gate)
        return T.reduce_sum(T.mul(refined, refined))

    reports["refinement"] = finite_diff_check(
        refine_chain, list(rp.values()) + [desc],
        max_entries=entries, rng=rng.derive("sample", 2))

    # full model at the tiny config
    model = Model(tiny, seed=seed)
    images = rng.fill_uniform(2 * tiny.image_size ** 2, 0, 1).reshape(
        2, tiny.image_size, tiny.image_size, 1)
    labels = np.array([0, 2])

    def model_chain():
        return cross_entropy(model.forward(images).probs, labels)

    reports["model"] = finite_diff_check(model_chain, list(model.params),
                                         max_entries=entries,
                                         rng=rng.derive("sample", 3))
    return reports


def tiny_config() -> RunConfig:
    """16px images, one conv block, 5 regions, 8-dim features, 3 classes."""
    return RunConfig(image_size=16, conv_widths=(8,), upsample_factor=1,
                     cell_size=4, min_cells=2, pool_w=3, pool_h=3,
                     gnn_dims=(8, 8), attn_dim=4, num_classes=3,
                     batch_size=2, crop_margin=0)


def cmd_gradcheck(args) -> int:
    reports = gradcheck_chains(entries=args.entries, seed=args.seed or 0)
    ok = True
    for name, report in reports.items():
        print(f"{name:12s} {report}")
        ok = ok and report.passed
    return 0 if ok else 2


# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="rgnn", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    for f in fields(SynthSpec):
        p.add_argument(f"--{f.name}", metavar="V")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_config_flags(p)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="write the confusion matrix CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="export per-image features at a stage")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", required=True, choices=PROBE_STAGES)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_flags(p)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="variants")
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-maps", help="export joint attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="output path prefix")
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("param-count", help="print the trainable-parameter table")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--entries", type=int, default=60)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, OSError, T.NonFiniteError, T.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
