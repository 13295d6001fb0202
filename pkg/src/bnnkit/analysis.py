"""Weight-distribution analysis and the two-learning-rate sweep.

The sweep trains the same binary architecture at each (learning rate,
seed) cell, snapshots latent-weight histograms after the first epoch, and
reports whether two orderings replicate: higher LR saturates latents
harder after one epoch, and lower LR reaches better validation accuracy
by the final epoch.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .nets import ArchSpec, Model, build
from .training import EpochMetrics, TrainConfig, train

METRICS_CSV_HEADER = ["epoch", "phase", "train_loss", "train_acc",
                      "val_top1", "val_topk", "wall_s"]
HISTOGRAM_CSV_HEADER = ["layer", "edge_lo", "edge_hi", "count"]


@dataclass
class WeightHistogram:
    layer_id: int
    edges: np.ndarray            # bins + 1 edges over [-1, 1]
    counts: np.ndarray
    epoch: int
    saturation_fraction: float   # fraction with |w| > threshold

    def __post_init__(self):
        if not (np.all(np.diff(self.edges) > 0)
                and self.edges[0] == -1.0 and self.edges[-1] == 1.0):
            raise ValueError("edges must increase strictly from -1 to 1")


def weight_histogram(model: Model, layer_id: int, bins: int = 40,
                     epoch: int = -1, threshold: float = 0.9) -> WeightHistogram:
    """Histogram of one layer's latent values over [-1, 1].

    Bins are half-open [lo, hi) except the last, which closes at 1, so the
    boundary value 0 lands in the right-hand bin of a 2-bin histogram.
    """
    from .binary import LatentWeight

    bp = model.params.get(layer_id)
    if bp is None or not isinstance(bp.weight, LatentWeight):
        raise KeyError(f"layer {layer_id} has no latent weights")
    values = bp.weight.value.ravel()
    counts, edges = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    return WeightHistogram(
        layer_id=layer_id, edges=edges, counts=counts, epoch=epoch,
        saturation_fraction=float((np.abs(values) > threshold).mean()))


def write_histograms_csv(histograms, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTOGRAM_CSV_HEADER)
        for h in histograms:
            for lo, hi, count in zip(h.edges[:-1], h.edges[1:], h.counts):
                writer.writerow([h.layer_id, f"{lo:.6f}", f"{hi:.6f}", int(count)])


def write_metrics_csv(metrics: list[EpochMetrics], path, phase: str = "train"):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_CSV_HEADER)
        for m in metrics:
            writer.writerow([m.epoch, phase, f"{m.train_loss:.6f}",
                             f"{m.train_acc:.6f}", f"{m.val_top1:.6f}",
                             f"{m.val_topk:.6f}", f"{m.wall_s:.3f}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# Learning-rate sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRun:
    lr: float
    seed: int
    metrics: list[EpochMetrics]
    epoch1_histograms: list[WeightHistogram]

    @property
    def epoch1_mean_saturation(self) -> float:
        return float(np.mean([h.saturation_fraction
                              for h in self.epoch1_histograms]))

    @property
    def final_val_top1(self) -> float:
        return self.metrics[-1].val_top1


@dataclass
class SweepReport:
    runs: list[SweepRun] = field(default_factory=list)
    saturation_ordering_votes: int = 0   # seeds where sat(hi lr) > sat(lo lr)
    convergence_ordering_votes: int = 0  # seeds where acc(lo lr) > acc(hi lr)
    num_seeds: int = 0

    @property
    def saturation_ordering_replicates(self) -> bool:
        return self.saturation_ordering_votes * 2 > self.num_seeds

    @property
    def convergence_ordering_replicates(self) -> bool:
        return self.convergence_ordering_votes * 2 > self.num_seeds


def lr_sweep_experiment(spec: ArchSpec, train_dataset, val_dataset,
                        lrs, epochs: int, seeds,
                        base_config: TrainConfig | None = None,
                        out_dir=None, bins: int = 40,
                        saturation_threshold: float = 0.9) -> SweepReport:
    """Train spec at every (lr, seed), snapshotting per-layer latent
    histograms after epoch 1. Writes metrics and histogram CSVs when
    out_dir is given. Fully deterministic per cell."""
    if base_config is None:
        base_config = TrainConfig()
    lrs = sorted(lrs)
    report = SweepReport(num_seeds=len(list(seeds)))
    for lr in lrs:
        for seed in seeds:
            config = replace(base_config, base_lr=lr, seed=seed, epochs=epochs)
            model = build(spec, np.random.default_rng(seed))
            holder: dict = {}

            def snapshot(epoch, m, _metrics, holder=holder):
                if epoch == 0:
                    holder["hists"] = [
                        weight_histogram(m, i, bins=bins, epoch=epoch,
                                         threshold=saturation_threshold)
                        for i, _ in m.latent_layers()]

            metrics = train(model, train_dataset, config,
                            val_dataset=val_dataset,
                            callbacks=[lambda e, m, em: snapshot(e, m, em)])
            run = SweepRun(lr=lr, seed=seed, metrics=metrics,
                           epoch1_histograms=holder.get("hists", []))
            report.runs.append(run)
            if out_dir is not None:
                tag = f"lr{lr:g}_seed{seed}"
                write_metrics_csv(metrics, os.path.join(out_dir, f"metrics_{tag}.csv"))
                write_histograms_csv(run.epoch1_histograms,
                                     os.path.join(out_dir, f"hist_epoch1_{tag}.csv"))
    if len(lrs) >= 2:
        lo, hi = lrs[0], lrs[-1]
        for seed in seeds:
            lo_run = next(r for r in report.runs if r.lr == lo and r.seed == seed)
            hi_run = next(r for r in report.runs if r.lr == hi and r.seed == seed)
            if hi_run.epoch1_mean_saturation > lo_run.epoch1_mean_saturation:
                report.saturation_ordering_votes += 1
            if lo_run.final_val_top1 > hi_run.final_val_top1:
                report.convergence_ordering_votes += 1
    if out_dir is not None:
        _write_sweep_summary(report, os.path.join(out_dir, "summary.csv"))
    return report


def _write_sweep_summary(report: SweepReport, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["lr", "seed", "epoch1_mean_saturation", "final_val_top1"])
        for r in report.runs:
            writer.writerow([f"{r.lr:g}", r.seed,
                             f"{r.epoch1_mean_saturation:.6f}",
                             f"{r.final_val_top1:.6f}"])
        writer.writerow(["saturation_ordering_replicates", "",
                         report.saturation_ordering_replicates, ""])
        writer.writerow(["convergence_ordering_replicates", "",
                         report.convergence_ordering_replicates, ""])
