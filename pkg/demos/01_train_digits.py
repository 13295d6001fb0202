# %% [markdown]
# # Training a binarized net on handwritten digits
#
# Every interior layer of this network carries latent real-valued weights
# that are binarized by sign on each forward pass. The optimizer steps the
# latents (scaled per layer by a fan-dependent factor), clips them back
# into [-1, 1], and the sign pattern is what the network actually computes
# with. This demo trains the desk-scale variant of the 13-layer
# architecture on an upsampled digits set and watches the latents saturate.

# %%
import tempfile

import numpy as np

from bnnkit import build, load_idx, table1_spec, train, TrainConfig, save_model
from bnnkit.analysis import weight_histogram
from bnnkit.data import make_digits_idx

workdir = tempfile.mkdtemp(prefix="bnn-digits-")
(train_imgs, train_lbls), (test_imgs, test_lbls) = make_digits_idx(
    workdir, resolution=28, seed=0)
train_ds = load_idx(train_imgs, train_lbls, split="train")
test_ds = load_idx(test_imgs, test_lbls, split="test")
print(f"{train_ds.images.shape[0]} train / {test_ds.images.shape[0]} test "
      f"images of shape {train_ds.images.shape[1:]}")

# %% [markdown]
# The width multiplier of 1/16 shrinks the channel schedule
# (128/384/512 -> 8/24/32) so the whole run takes seconds on a laptop
# core. The first conv keeps real weights (3-channel-style thin inputs
# binarize poorly), the final classifier keeps real weights too; everything
# between them is sign-binarized, weights and activations both.

# %%
spec = table1_spec(28, 10, width_multiplier=1 / 16, input_channels=1,
                   dropout_ratio=0.0)
model = build(spec, np.random.default_rng(1))
print("parameters:", model.num_parameters())
print("binary layers:", [i for i, _ in model.latent_layers()])

# %%
config = TrainConfig(base_lr=0.001, batch_size=16, epochs=5, seed=1,
                     lr_schedule="step", step_factor=0.1,
                     step_every_n_epochs=3)
metrics = train(model, train_ds, config, val_dataset=test_ds)
for m in metrics:
    print(f"epoch {m.epoch}: loss={m.train_loss:.3f} "
          f"train={m.train_acc:.3f} test={m.val_top1:.3f} "
          f"mean_saturation={np.mean(list(m.saturation.values())):.3f}")

# %% [markdown]
# At this deliberately low learning rate the latents stay interior: the
# histogram below concentrates around zero rather than piling up at the
# clip boundaries. That spread is the "hidden state" doing its job; each
# weight integrates many small gradient votes before its sign commits.
# Demo 02 shows what happens when the rate is 10x higher and the latents
# slam into the -1/+1 walls within one epoch.

# %%
layer, _ = model.latent_layers()[1]
hist = weight_histogram(model, layer, bins=10)
peak = hist.counts.max()
for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
    bar = "#" * int(40 * c / peak)
    print(f"[{lo:+.1f},{hi:+.1f}) {c:6d} {bar}")
print(f"saturation fraction (|w| > 0.9): {hist.saturation_fraction:.2f}")

# %%
out_path = f"{workdir}/digits.bnnm"
save_model(model, out_path)
print("saved:", out_path)
