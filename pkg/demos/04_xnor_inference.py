# %% [markdown]
# # Bit-exact XNOR+popcount inference
#
# A trained binary network deploys as packed 64-bit words: each weight is
# one bit (1 for +1, 0 for -1), a +-1 dot product becomes
# `n - 2*popcount(a XOR b)`, and every batchnorm+sign tail folds into one
# integer threshold per channel. Nothing here is approximate: the packed
# runtime is validated to agree with the float path decision-for-decision.

# %%
import tempfile

import numpy as np

from bnnkit import (build, compile_deployment, load_deployment, pack,
                    predict_logits, run_inference, save_deployment,
                    table1_spec, unpack, xnor_dot)

# %% [markdown]
# Packing in miniature: four values become four bits of one word.

# %%
v = np.array([-1.0, 1.0, 1.0, -1.0])
p = pack(v)
print(f"{v} -> word {p.words[0]:#06b}")
w = np.array([1.0, 1.0, -1.0, -1.0])
print(f"dot with {w}: xnor gives {xnor_dot(p, pack(w))}, "
      f"float gives {int(v @ w)}")
print("round trip:", unpack(p))

# %% [markdown]
# Now a whole network. A randomly initialized desk-scale model works for
# demonstrating the equality guarantee (training changes the weights, not
# the runtime contract).

# %%
model = build(table1_spec(32, 10, 1 / 16), np.random.default_rng(0))
deployment = compile_deployment(model)

rng = np.random.default_rng(1)
batch = rng.random((64, 3, 32, 32), dtype=np.float32)
probs = run_inference(deployment, batch)
float_ref = predict_logits(model, batch)
agreement = (probs.argmax(axis=1) == float_ref.argmax(axis=1)).mean()
print(f"float-vs-xnor argmax agreement over {len(batch)} samples: "
      f"{agreement:.0%}")

# %% [markdown]
# The deployment serializes to a compact container: packed weight words
# for binary layers, one (tau, direction) pair per channel instead of four
# batchnorm vectors, and float tensors only for the first and last layers.

# %%
workdir = tempfile.mkdtemp(prefix="bnn-deploy-")
path = f"{workdir}/model.bnnx"
save_deployment(deployment, path)
reloaded = load_deployment(path)
reprobed = run_inference(reloaded, batch)
print("reloaded deployment agrees:",
      bool((reprobed.argmax(axis=1) == probs.argmax(axis=1)).all()))
import os
print(f"deployment file: {os.path.getsize(path) / 1024:.0f} KiB")
