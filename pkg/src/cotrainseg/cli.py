"""Command-line entry points: gen-data, embed, train, predict, eval,
experiment, report. Every subcommand accepts --seed; failures exit nonzero
with the failing stage named."""

import argparse
import sys
from pathlib import Path

import numpy as np


def _shape(text):
    parts = tuple(int(v) for v in text.replace("x", ",").split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three axes, got {text!r}")
    return parts


def cmd_gen_data(args):
    from .dataio import DatasetSplit, generate_synthetic_dataset, split_dataset, write_dataset

    samples = generate_synthetic_dataset(args.seed, args.n, args.shape, args.difficulty)
    if args.all_labeled:
        split = DatasetSplit(labeled=samples, unlabeled=[], seed=args.seed)
    else:
        split = split_dataset(samples, args.labeled_ratio, args.seed)
    manifest = write_dataset(split, args.out)
    print(f"wrote {len(split.labeled)} labeled + {len(split.unlabeled)} unlabeled "
          f"volumes, manifest {manifest}")


def cmd_embed(args):
    from .textknow import (embed_descriptions, get_provider, load_descriptions,
                           write_embeddings)

    ds = load_descriptions(args.descriptions)
    provider = get_provider(args.provider, dim=args.dim, path=args.file)
    matrix = embed_descriptions(provider, ds)
    write_embeddings(matrix, args.out)
    print(f"embedded {matrix.rows} responses at dim {matrix.dim} -> {args.out}")


def cmd_train(args):
    from .config import read_config
    from .dataio import read_dataset
    from .textknow import pool_embeddings, read_embeddings
    from .trainer import train

    cfg = read_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    split = read_dataset(args.data)
    pooled = pool_embeddings(read_embeddings(args.embeddings))
    val_samples = read_dataset(args.val).labeled if args.val else ()
    state = train(cfg, split, pooled, args.out, val_samples=val_samples,
                  resume_from=args.resume)
    print(f"trained to iteration {state.iteration}, final checkpoint "
          f"{Path(args.out) / 'final.ckpt'}")


def cmd_predict(args):
    import torch

    from .dataio import read_volume, write_volume
    from .inference import (SlidingWindowSpec, ensemble_predict, labels_from_probs)
    from .trainer import load_state, make_model_forward
    from .volumes import Volume

    state, cfg = load_state(args.checkpoint)
    z = None
    if cfg.beta_text > 0:
        with torch.no_grad():
            z = state.projector(state.pooled).numpy()
    fwd_a = make_model_forward(state.model_a, z, cfg.beta_text)
    fwd_b = make_model_forward(state.model_b, z, cfg.beta_text)
    spec = SlidingWindowSpec(patch_size=args.patch or cfg.patch_size,
                             stride=args.stride or tuple(max(1, p // 2)
                                                         for p in cfg.patch_size))
    vol = read_volume(args.infile)
    if not isinstance(vol, Volume):
        raise ValueError(f"{args.infile} is a label volume, expected an image")
    probs = ensemble_predict(fwd_a, fwd_b, vol, spec, select=args.model)
    write_volume(labels_from_probs(probs), args.out)
    if args.probs:
        k, d, h, w = probs.values.shape
        stacked = probs.values.reshape(k * d, h, w).astype(np.float32)
        write_volume(Volume(stacked), args.probs)
    print(f"wrote segmentation {args.out}")


def cmd_eval(args):
    from .dataio import read_volume
    from .metrics import evaluate_many, write_report_csv

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pairs = []
    for pred_path in sorted(pred_dir.glob("*.vol1")):
        if ".label" in pred_path.name:
            continue
        gt_path = gt_dir / f"{pred_path.stem}.label.vol1"
        if not gt_path.exists():
            raise FileNotFoundError(f"no ground truth {gt_path} for {pred_path}")
        pairs.append((pred_path.stem, read_volume(pred_path), read_volume(gt_path)))
    if not pairs:
        raise ValueError(f"no predictions found in {pred_dir}")
    report = evaluate_many(pairs)
    write_report_csv(report, args.out)
    print(f"evaluated {len(pairs)} volumes -> {args.out} "
          f"(mean dice {report.mean_dice:.4f})")


def cmd_experiment(args):
    from .experiment import read_spec, run_experiment

    spec = read_spec(args.spec)
    if args.seed is not None:
        spec.seeds = (args.seed,)
    results = run_experiment(spec, args.out, force=args.force)
    print(f"experiment grid complete -> {results}")


def cmd_report(args):
    from .experiment import report_compare

    report_compare(args.baseline, args.method, args.out)
    print(f"wrote delta table {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="cotrainseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--shape", type=_shape, default=(32, 32, 32))
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--labeled-ratio", type=float, default=0.1)
    p.add_argument("--all-labeled", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("embed", help="embed task descriptions")
    p.add_argument("--descriptions", required=True)
    p.add_argument("--provider", choices=("file", "test"), default="test")
    p.add_argument("--file", default=None, help="EMB1 input for the file provider")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("train", help="co-train the two networks")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="training dataset manifest")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val", default=None, help="validation dataset manifest")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="sliding-window inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=_shape, default=None)
    p.add_argument("--stride", type=_shape, default=None)
    p.add_argument("--model", choices=("a", "b", "ensemble"), default="a")
    p.add_argument("--probs", default=None, help="optional probability VOL1 output")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="compute metrics for predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run an ablation grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="delta table between two result CSVs")
    p.add_argument("--baseline", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as e:
        print(f"error in {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
