"""Execution engine: compiles an ArchSpec into runnable stages and drives
full forward/backward passes over a Model.

Two structural rules are applied while compiling:

* A maxpool entry that directly follows a conv entry is fused into that
  conv block and runs on the raw conv outputs, before batchnorm and the
  activation. This keeps the float path decision-identical to the
  bit-packed inference path, which pools integer pre-activations before
  thresholding.
* A conv whose incoming activations are sign outputs pads with -1 instead
  of 0, so padding never fabricates +1 mass and both paths see the same
  values.
"""

from dataclasses import dataclass

import numpy as np

from .binary import (BinaryBlockConfig, LatentWeight, binarize_sign,
                     binary_conv_block, binary_conv_block_backward, hard_tanh,
                     ste_backward)
from .nets import ArchSpec, Model
from .ops import (ConvParams, dense, dense_backward, batchnorm,
                  batchnorm_backward, dropout, dropout_backward, maxpool2d,
                  maxpool2d_backward, relu, relu_backward, softmax)


@dataclass(frozen=True)
class ConvStage:
    entry_index: int
    binarize_weights: bool
    binarize_activations: bool
    has_bn: bool
    activation: str
    pool: tuple[int, int, int] | None   # (kernel, stride, pad) fused pre-BN
    pad_value: float
    binary_input: bool                  # incoming activations are sign outputs


@dataclass(frozen=True)
class PoolStage:
    entry_index: int
    kernel: int
    stride: int
    pad: int


@dataclass(frozen=True)
class DenseStage:
    entry_index: int
    binarize_weights: bool
    activation: str
    has_bn: bool
    has_bias: bool
    binary_input: bool


@dataclass(frozen=True)
class DropoutStage:
    entry_index: int


@dataclass(frozen=True)
class FlattenStage:
    entry_index: int


def compile_plan(spec: ArchSpec):
    """Stage list for a spec. Scaling/softmax entries produce no stage;
    the forward pass ends at raw logits."""
    stages = []
    stream_binary = False
    flat = False
    skip_next_pool = False
    for i, e in enumerate(spec.entries):
        if e.kind == "conv":
            pool = None
            if i + 1 < len(spec.entries) and spec.entries[i + 1].kind == "maxpool":
                nxt = spec.entries[i + 1]
                pool = (nxt.kernel_h, nxt.stride_h, nxt.pad_h)
                skip_next_pool = True
            stages.append(ConvStage(
                entry_index=i, binarize_weights=e.binarize_weights,
                binarize_activations=e.binarize_activations, has_bn=e.has_bn,
                activation=e.activation, pool=pool,
                pad_value=-1.0 if stream_binary else 0.0,
                binary_input=stream_binary))
            stream_binary = e.activation == "sign"
        elif e.kind == "maxpool":
            if skip_next_pool:
                skip_next_pool = False
                continue
            stages.append(PoolStage(i, e.kernel_h, e.stride_h, e.pad_h))
        elif e.kind == "dense":
            if not flat:
                stages.append(FlattenStage(i))
                flat = True
            stages.append(DenseStage(
                entry_index=i, binarize_weights=e.binarize_weights,
                activation=e.activation, has_bn=e.has_bn,
                has_bias=bool(e.bias), binary_input=stream_binary))
            stream_binary = e.activation == "sign"
        elif e.kind == "dropout":
            if spec.dropout_ratio > 0:
                stages.append(DropoutStage(i))
        # scaling and softmax live in the loss / prediction path
    return stages


def _conv_params_for(spec_entry, in_channels: int) -> ConvParams:
    e = spec_entry
    return ConvParams(e.channels, in_channels, e.kernel_h, e.kernel_w,
                      e.stride_h, e.stride_w, e.pad_h, e.pad_w)


def forward(model: Model, x: np.ndarray, mode: str = "train",
            rng: np.random.Generator | None = None, surrogate: bool = False):
    """Run the network up to raw logits. Returns (logits, caches).

    `caches` feeds :func:`backward`; pass mode="infer" for evaluation
    (running BN stats, identity dropout).
    """
    spec = model.spec
    stages = compile_plan(spec)
    caches = []
    out = x
    for st in stages:
        if isinstance(st, ConvStage):
            e = spec.entries[st.entry_index]
            bp = model.params[st.entry_index]
            cfg = BinaryBlockConfig(
                conv=_conv_params_for(e, out.shape[1]),
                binarize_weights=st.binarize_weights,
                binarize_activations=st.binarize_activations,
                has_bn=st.has_bn)
            out, cache = binary_conv_block(
                out, bp.weight, bp.bn, cfg, mode, pool=st.pool,
                pad_value=st.pad_value, surrogate=surrogate,
                activation=st.activation)
            caches.append((st, cache))
        elif isinstance(st, PoolStage):
            in_shape = out.shape
            out, argmax = maxpool2d(out, st.kernel, st.stride, st.pad)
            caches.append((st, (in_shape, argmax)))
        elif isinstance(st, FlattenStage):
            in_shape = out.shape
            out = out.reshape(out.shape[0], -1)
            caches.append((st, in_shape))
        elif isinstance(st, DenseStage):
            bp = model.params[st.entry_index]
            latent = bp.weight.value if isinstance(bp.weight, LatentWeight) else bp.weight
            if st.binarize_weights:
                wb = hard_tanh(latent) if surrogate else binarize_sign(latent)
            else:
                wb = latent
            z = dense(out, wb, bp.bias)
            if st.has_bn:
                y, bn_cache = batchnorm(z, bp.bn, mode)
            else:
                y, bn_cache = z, None
            if st.activation == "sign":
                a = hard_tanh(y) if surrogate else binarize_sign(y)
            elif st.activation == "relu":
                a = relu(y)
            else:
                a = y
            caches.append((st, (out, wb, latent, bn_cache, y)))
            out = a
        elif isinstance(st, DropoutStage):
            if mode == "train" and rng is None:
                raise ValueError("dropout in train mode needs an rng")
            out, mask = dropout(out, spec.dropout_ratio, mode,
                                rng if rng is not None else np.random.default_rng(0))
            caches.append((st, mask))
    return out, caches


def backward(model: Model, caches, grad_logits: np.ndarray):
    """Backpropagate from raw-logit gradients. Returns a dict keyed
    (entry_index, name) with name in weight/bias/gamma/beta."""
    grads = {}
    g = grad_logits
    for st, cache in reversed(caches):
        if isinstance(st, ConvStage):
            g, block_grads = binary_conv_block_backward(g, cache)
            for name, arr in block_grads.items():
                grads[(st.entry_index, name)] = arr
        elif isinstance(st, PoolStage):
            in_shape, argmax = cache
            g = maxpool2d_backward(g, argmax, in_shape, st.kernel, st.stride,
                                   st.pad)
        elif isinstance(st, FlattenStage):
            g = g.reshape(cache)
        elif isinstance(st, DenseStage):
            x_in, wb, latent, bn_cache, y = cache
            if st.activation == "sign":
                g = ste_backward(g, y)
            elif st.activation == "relu":
                g = relu_backward(g, y)
            if bn_cache is not None:
                g, dgamma, dbeta = batchnorm_backward(g, bn_cache)
                grads[(st.entry_index, "gamma")] = dgamma
                grads[(st.entry_index, "beta")] = dbeta
            g, gw, gb = dense_backward(g, x_in, wb, st.has_bias)
            if st.binarize_weights:
                gw = ste_backward(gw, latent)
            grads[(st.entry_index, "weight")] = gw
            if gb is not None:
                grads[(st.entry_index, "bias")] = gb
        elif isinstance(st, DropoutStage):
            g = dropout_backward(g, cache)
    return grads


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------

def predict_logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    for i in range(0, x.shape[0], batch_size):
        logits, _ = forward(model, x[i:i + batch_size], mode="infer")
        outs.append(logits)
    return np.concatenate(outs, axis=0)


def predict_proba(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    logits = predict_logits(model, x, batch_size)
    return softmax(logits * model.spec.scaling_factor)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    if k == 1:
        return float((logits.argmax(axis=1) == labels).mean())
    topk = np.argpartition(-logits, min(k, logits.shape[1] - 1), axis=1)[:, :k]
    return float((topk == labels[:, None]).any(axis=1).mean())
