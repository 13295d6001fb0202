"""Weight histograms and the learning-rate sweep machinery."""

import numpy as np
import pytest

from bnnkit.analysis import (lr_sweep_experiment, read_metrics_csv,
                             weight_histogram, write_histograms_csv,
                             write_metrics_csv)
from bnnkit.binary import LatentWeight
from bnnkit.data import Dataset
from bnnkit.nets import build
from bnnkit.training import EpochMetrics, TrainConfig
from test_train import tiny_mlp_spec, two_blob_dataset


def model_with_latents(values):
    model = build(tiny_mlp_spec(hidden=16), np.random.default_rng(0))
    idx, lw = model.latent_layers()[0]
    flat = np.zeros(lw.value.size, dtype=lw.value.dtype)
    flat[:len(values)] = values
    model.params[idx].weight = LatentWeight(
        flat.reshape(lw.value.shape), lw.fan_in, lw.fan_out, lw.lr_scale)
    return model, idx


class TestWeightHistogram:
    def test_two_bin_boundary_convention(self):
        model, idx = model_with_latents([])
        lw = model.params[idx].weight
        lw.value = np.array([[-1.0, -0.5, 0.0, 0.5, 1.0]])
        h = weight_histogram(model, idx, bins=2)
        np.testing.assert_array_equal(h.counts, [2, 3])
        np.testing.assert_allclose(h.edges, [-1.0, 0.0, 1.0])

    def test_saturation_fraction(self):
        model, idx = model_with_latents([])
        model.params[idx].weight.value = np.array([[-1.0, 0.95, 0.2]])
        h = weight_histogram(model, idx, bins=4)
        assert h.saturation_fraction == pytest.approx(2 / 3)

    def test_counts_conserve_weight_count(self):
        rng = np.random.default_rng(1)
        model, idx = model_with_latents([])
        for _ in range(10):
            lw = model.params[idx].weight
            lw.value = rng.uniform(-1, 1, lw.value.shape)
            h = weight_histogram(model, idx, bins=int(rng.integers(2, 50)))
            assert h.counts.sum() == lw.value.size

    def test_rejects_non_latent_layer(self):
        model, _ = model_with_latents([])
        with pytest.raises(KeyError):
            weight_histogram(model, 0)   # layer 0 is real-weight

    def test_csv_round_trip(self, tmp_path):
        model, idx = model_with_latents([0.1, -0.9, 0.95])
        h = weight_histogram(model, idx, bins=4)
        path = tmp_path / "h.csv"
        write_histograms_csv([h], path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "layer,edge_lo,edge_hi,count"
        assert len(lines) == 5
        total = sum(int(line.split(",")[-1]) for line in lines[1:])
        assert total == h.counts.sum()


class TestMetricsCsv:
    def test_schema_and_round_trip(self, tmp_path):
        metrics = [EpochMetrics(0, 1.5, 0.3, 0.25, 0.6, 2.0),
                   EpochMetrics(1, 1.1, 0.5, 0.45, 0.8, 2.1)]
        path = tmp_path / "m.csv"
        write_metrics_csv(metrics, path, phase="hard_only")
        rows = read_metrics_csv(path)
        assert [r["epoch"] for r in rows] == ["0", "1"]
        assert rows[0]["phase"] == "hard_only"
        assert float(rows[1]["val_top1"]) == pytest.approx(0.45)
        header = path.read_text().split("\n")[0]
        assert header == "epoch,phase,train_loss,train_acc,val_top1,val_topk,wall_s"


class TestLrSweep:
    def _tiny_setup(self):
        train_ds = two_blob_dataset(80, seed=0)
        val_ds = two_blob_dataset(40, seed=1)
        return tiny_mlp_spec(), train_ds, val_ds

    def test_structural_report(self, tmp_path):
        spec, train_ds, val_ds = self._tiny_setup()
        report = lr_sweep_experiment(
            spec, train_ds, val_ds, lrs=[0.001, 0.01], epochs=2,
            seeds=[1, 2], base_config=TrainConfig(batch_size=16),
            out_dir=tmp_path)
        assert len(report.runs) == 4
        for run in report.runs:
            assert len(run.metrics) == 2
            assert run.epoch1_histograms    # all binary layers present
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "metrics_lr0.001_seed1.csv").exists()
        assert (tmp_path / "hist_epoch1_lr0.01_seed2.csv").exists()

    def test_deterministic_rerun(self):
        spec, train_ds, val_ds = self._tiny_setup()
        kwargs = dict(lrs=[0.005], epochs=2, seeds=[3],
                      base_config=TrainConfig(batch_size=16))
        r1 = lr_sweep_experiment(spec, train_ds, val_ds, **kwargs)
        r2 = lr_sweep_experiment(spec, train_ds, val_ds, **kwargs)
        assert ([m.train_loss for m in r1.runs[0].metrics]
                == [m.train_loss for m in r2.runs[0].metrics])
        assert (r1.runs[0].epoch1_mean_saturation
                == r2.runs[0].epoch1_mean_saturation)

    def test_higher_lr_saturates_more_on_toy(self):
        spec, train_ds, val_ds = self._tiny_setup()
        report = lr_sweep_experiment(
            spec, train_ds, val_ds, lrs=[0.001, 0.05], epochs=1,
            seeds=[1, 2, 3], base_config=TrainConfig(batch_size=8))
        assert report.saturation_ordering_votes >= 2
