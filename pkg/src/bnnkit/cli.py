"""Command-line driver for experiments.

Subcommands: train, teach, soften, distill, eval, export, infer, bench,
sweep, hist. Training options may come from a JSON config file; explicit
flags always win. Failures print a single machine-parseable line
``error: <kind>: <message>`` on stderr and exit nonzero.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from bnnkit import training

from . import analysis, data, infer, modelio
from .nets import alexnet_like_spec, build, float_cnn_spec, table1_spec
from .network import predict_logits, topk_accuracy
from .ops import ShapeError


def _add_dataset_args(p, prefix="train", required=True):
    p.add_argument(f"--{prefix}", required=required, metavar="PATHS",
                   help=f"comma-separated {prefix} files: images,labels for "
                        "idx; one or more batch files for cifar10")


def _add_spec_args(p):
    p.add_argument("--arch", choices=["table1", "alexnet"], default="table1")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--width", type=float, default=1.0,
                   help="width multiplier for desk-scale runs")
    p.add_argument("--input-channels", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--scaling", type=float, default=1.0)


def _add_train_args(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--adam-epsilon", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr-schedule", choices=["constant", "step"], default=None)
    p.add_argument("--step-factor", type=float, default=None)
    p.add_argument("--step-every-n-epochs", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)


def _load_dataset(args, spec_arg, split):
    fmt = args.format
    paths = getattr(args, spec_arg).split(",")
    if fmt == "idx":
        if len(paths) != 2:
            raise data.DataFormatError(
                f"--{spec_arg} needs images,labels paths for idx format")
        return data.load_idx(paths[0], paths[1], split=split)
    return data.load_cifar10(paths, split=split)


def _train_config(args) -> training.TrainConfig:
    overrides = {
        "base_lr": args.lr, "batch_size": args.batch_size,
        "epochs": args.epochs, "optimizer": args.optimizer,
        "beta1": args.beta1, "beta2": args.beta2,
        "adam_epsilon": args.adam_epsilon, "momentum": args.momentum,
        "seed": args.seed, "lr_schedule": args.lr_schedule,
        "step_factor": args.step_factor,
        "step_every_n_epochs": args.step_every_n_epochs,
        "topk": getattr(args, "topk", None),
    }
    if args.config:
        with open(args.config) as f:
            return training.TrainConfig.from_json(f.read(), **overrides)
    return training.TrainConfig(
        **{k: v for k, v in overrides.items() if v is not None})


def _build_spec(args, dataset):
    channels = args.input_channels or dataset.images.shape[1]
    kwargs = dict(input_channels=channels, scaling_factor=args.scaling)
    if args.dropout is not None:
        kwargs["dropout_ratio"] = args.dropout
    ctor = {"table1": table1_spec, "alexnet": alexnet_like_spec}[args.arch]
    return ctor(args.resolution, args.classes, args.width, **kwargs)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    dataset = _load_dataset(args, "train", "train")
    val = _load_dataset(args, "val", "val") if args.val else None
    config = _train_config(args)
    spec = _build_spec(args, dataset)
    model = build(spec, np.random.default_rng(config.seed))
    distill_cfg = training.DistillConfig(phase=args.phase,
                                         temperature=args.temperature,
                                         alpha=args.alpha)
    soft = None
    if args.soft_cache:
        soft = training.SoftTargetCache.load(args.soft_cache,
                                             expected_checksum=dataset.checksum)
    metrics = training.train(model, dataset, config, distill_cfg,
                             soft_targets=soft, val_dataset=val)
    modelio.save_model(model, args.out)
    if args.metrics:
        analysis.write_metrics_csv(metrics, args.metrics, phase=args.phase)
    last = metrics[-1] if metrics else None
    if last is not None:
        print(f"epoch {last.epoch}: loss={last.train_loss:.4f} "
              f"train_acc={last.train_acc:.4f} val_top1={last.val_top1:.4f}")
    print(f"saved model to {args.out}")
    return 0


def cmd_teach(args) -> int:
    dataset = _load_dataset(args, "train", "train")
    val = _load_dataset(args, "val", "val") if args.val else None
    config = _train_config(args)
    spec = float_cnn_spec(dataset.images.shape[1:], dataset.num_classes)
    model, metrics = training.train_teacher(dataset, spec, config,
                                            val_dataset=val)
    modelio.save_model(model, args.out)
    if args.metrics:
        analysis.write_metrics_csv(metrics, args.metrics, phase="teacher")
    if metrics and val is not None:
        print(f"teacher val_top1={metrics[-1].val_top1:.4f}")
    print(f"saved teacher to {args.out}")
    return 0


def cmd_soften(args) -> int:
    dataset = _load_dataset(args, "train", "train")
    teacher = modelio.load_model(args.teacher)
    cache = training.generate_soft_targets(teacher, dataset)
    cache.save(args.out)
    print(f"wrote {cache.sample_count} x {cache.class_count} teacher logits "
          f"to {args.out}")
    return 0


def cmd_distill(args) -> int:
    dataset = _load_dataset(args, "train", "train")
    val = _load_dataset(args, "val", "val") if args.val else None
    config = _train_config(args)
    spec = _build_spec(args, dataset)
    cache = training.SoftTargetCache.load(args.soft_cache,
                                          expected_checksum=dataset.checksum)
    results = training.distillation_recipe(
        spec, dataset, val, cache, config,
        temperature=args.temperature, alpha=args.alpha)
    os.makedirs(args.out_dir, exist_ok=True)
    for phase, r in results.items():
        modelio.save_model(r["model"], os.path.join(args.out_dir, f"{phase}.bnnm"))
        analysis.write_metrics_csv(r["metrics"],
                                   os.path.join(args.out_dir, f"metrics_{phase}.csv"),
                                   phase=phase)
        final = r["metrics"][-1]
        print(f"{phase}: final val_top1={final.val_top1:.4f} "
              f"train_loss={final.train_loss:.4f}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args, "data", "eval")
    model = modelio.load_model(args.model)
    logits = predict_logits(model, dataset.images)
    top1 = topk_accuracy(logits, dataset.labels, 1)
    topk = topk_accuracy(logits, dataset.labels, args.topk or 5)
    print(f"top1={top1:.4f} top{args.topk or 5}={topk:.4f}")
    return 0


def cmd_export(args) -> int:
    model = modelio.load_model(args.model)
    deployment = infer.compile_deployment(model)
    infer.save_deployment(deployment, args.out)
    print(f"exported deployment to {args.out}")
    return 0


def cmd_infer(args) -> int:
    dataset = _load_dataset(args, "data", "infer")
    deployment = infer.load_deployment(args.deployment)
    probs = infer.run_inference(deployment, dataset.images)
    preds = probs.argmax(axis=1)
    if args.out:
        with open(args.out, "w") as f:
            f.write("index,prediction,probability\n")
            for i, (p, pr) in enumerate(zip(preds, probs.max(axis=1))):
                f.write(f"{i},{p},{pr:.6f}\n")
    acc = float((preds == dataset.labels).mean())
    print(f"top1={acc:.4f} over {len(preds)} samples")
    if args.check_model:
        model = modelio.load_model(args.check_model)
        float_preds = predict_logits(model, dataset.images).argmax(axis=1)
        agreement = float((float_preds == preds).mean())
        print(f"float-vs-xnor argmax agreement: {agreement:.4f}")
        if agreement < 1.0:
            print("error: AgreementError: binary runtime disagrees with "
                  "float path", file=sys.stderr)
            return 1
    return 0


def cmd_bench(args) -> int:
    rows = infer.bench(repetitions=args.reps)
    csv_text = infer.bench_rows_to_csv(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv_text)
    print(csv_text, end="")
    return 0


def cmd_sweep(args) -> int:
    dataset = _load_dataset(args, "train", "train")
    val = _load_dataset(args, "val", "val") if args.val else None
    config = _train_config(args)
    spec = _build_spec(args, dataset)
    os.makedirs(args.out_dir, exist_ok=True)
    lrs = [float(x) for x in args.lrs.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    report = analysis.lr_sweep_experiment(
        spec, dataset, val, lrs, args.epochs or 5, seeds,
        base_config=config, out_dir=args.out_dir,
        saturation_threshold=args.saturation_threshold)
    print(f"saturation ordering replicates: {report.saturation_ordering_replicates} "
          f"({report.saturation_ordering_votes}/{report.num_seeds} seeds)")
    print(f"convergence ordering replicates: {report.convergence_ordering_replicates} "
          f"({report.convergence_ordering_votes}/{report.num_seeds} seeds)")
    return 0


def cmd_hist(args) -> int:
    model = modelio.load_model(args.model)
    layers = ([args.layer] if args.layer is not None
              else [i for i, _ in model.latent_layers()])
    hists = [analysis.weight_histogram(model, i, bins=args.bins,
                                       threshold=args.saturation_threshold)
             for i in layers]
    if args.out:
        analysis.write_histograms_csv(hists, args.out)
    for h in hists:
        print(f"layer {h.layer_id}: saturation_fraction="
              f"{h.saturation_fraction:.4f} ({int(h.counts.sum())} weights)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnnkit",
        description="Binarized neural network training and XNOR inference")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_data(p):
        p.add_argument("--format", choices=["idx", "cifar10"], default="idx")

    p = sub.add_parser("train", help="train a binary network")
    common_data(p)
    _add_dataset_args(p, "train")
    _add_dataset_args(p, "val", required=False)
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--phase", choices=["hard_only", "soft_only", "combined"],
                   default="hard_only")
    p.add_argument("--temperature", type=float, default=4.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--soft-cache")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("teach", help="train the float teacher")
    common_data(p)
    _add_dataset_args(p, "train")
    _add_dataset_args(p, "val", required=False)
    _add_train_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("soften", help="cache teacher logits for a dataset")
    common_data(p)
    _add_dataset_args(p, "train")
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_soften)

    p = sub.add_parser("distill", help="hard baseline, soft pretrain, "
                                       "combined fine-tune")
    common_data(p)
    _add_dataset_args(p, "train")
    _add_dataset_args(p, "val", required=False)
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--temperature", type=float, default=4.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--soft-cache", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="top-1/top-k accuracy of a model")
    common_data(p)
    _add_dataset_args(p, "data")
    p.add_argument("--model", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="convert a model to the deployment format")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="run the binary runtime over a dataset")
    common_data(p)
    _add_dataset_args(p, "data")
    p.add_argument("--deployment", required=True)
    p.add_argument("--check-model",
                   help="BNNM model; verify float-vs-xnor argmax agreement")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="XNOR vs float kernel benchmark")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="learning-rate sweep with histograms")
    common_data(p)
    _add_dataset_args(p, "train")
    _add_dataset_args(p, "val", required=False)
    _add_spec_args(p)
    _add_train_args(p)
    p.add_argument("--lrs", default="0.001,0.01")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--saturation-threshold", type=float, default=0.9)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hist", help="latent-weight histogram dump")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--saturation-threshold", type=float, default=0.9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hist)
    return parser


_KNOWN_ERRORS = (data.DataFormatError, modelio.ModelFormatError, ShapeError,
                 training.CacheMismatchError, training.TrainingDivergedError,
                 infer.UnsupportedSpecError, ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
