"""Weight and activation binarization with latent-weight bookkeeping.

Latent weights are the real-valued accumulators kept during SGD; the
forward pass sees only their sign. The backward rule is the straight-through
estimator masked to |x| <= 1, and a clip keeps latents inside [-1, 1] after
every optimizer step.
"""

import math
from dataclasses import dataclass

import numpy as np

from .ops import (BatchNormState, ConvParams, batchnorm, batchnorm_backward,
                  conv2d, conv2d_backward, maxpool2d, maxpool2d_backward,
                  relu, relu_backward)


@dataclass
class LatentWeight:
    """Real-valued trainable weight constrained to [-1, 1], binarized on use."""

    value: np.ndarray
    fan_in: int
    fan_out: int
    lr_scale: float

    def __post_init__(self):
        if self.lr_scale <= 0:
            raise ValueError(f"lr_scale must be positive, got {self.lr_scale}")


@dataclass(frozen=True)
class BinaryBlockConfig:
    conv: ConvParams
    binarize_weights: bool = True
    binarize_activations: bool = True
    has_bn: bool = True


def binarize_sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign into {-1, +1}; sign(0) = +1 so packing is well defined."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)


def hard_tanh(x: np.ndarray) -> np.ndarray:
    """clip(x, -1, 1); the smooth surrogate whose exact gradient the STE computes."""
    return np.clip(x, -1.0, 1.0)


def ste_backward(grad_out: np.ndarray, pre_binarization_input: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass gradient where |input| <= 1, else 0."""
    mask = np.abs(pre_binarization_input) <= 1.0
    return grad_out * mask


def clip_latent(w: LatentWeight) -> LatentWeight:
    """Clamp latent values into [-1, 1] in place. Applied after every step."""
    np.clip(w.value, -1.0, 1.0, out=w.value)
    return w


def glorot_gamma(fan_in: int, fan_out: int) -> float:
    return math.sqrt(1.5 / (fan_in + fan_out))


def glorot_lr_scale(fan_in: int, fan_out: int) -> float:
    """Per-layer learning-rate multiplier 1/gamma, gamma = sqrt(1.5/(fan_in+fan_out)).

    Binary layers with large fan adapt far too slowly at a global step size;
    the multiplier restores comparable per-layer adaptation speed.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    return 1.0 / glorot_gamma(fan_in, fan_out)


# ---------------------------------------------------------------------------
# Binary conv block: conv -> (pool) -> batchnorm -> activation
# ---------------------------------------------------------------------------
#
# When a maxpool immediately follows a conv in an architecture table, the
# pool runs on the raw conv outputs, before batchnorm and the sign
# activation. This keeps the float path exactly equal to the bit-packed
# inference path, which pools integer pre-activations before thresholding
# (pooling after a negative-gamma batchnorm would flip which element wins).


def _weight_forward(weights, binarize: bool, surrogate: bool):
    value = weights.value if isinstance(weights, LatentWeight) else weights
    if not binarize:
        return value
    return hard_tanh(value) if surrogate else binarize_sign(value)


def binary_conv_block(x: np.ndarray, weights, bn: BatchNormState | None,
                      cfg: BinaryBlockConfig, mode: str,
                      pool: tuple[int, int, int] | None = None,
                      pad_value: float = 0.0, surrogate: bool = False,
                      activation: str | None = None):
    """Forward pass of one conv block. Returns (out, cache).

    `weights` is a LatentWeight (binarized path) or a plain array (real
    first layer). `pool` is an optional (kernel, stride, pad) maxpool
    inserted between the conv and the batchnorm. `surrogate=True` replaces
    both sign functions with hard-tanh, turning the block into the
    differentiable function whose exact gradient the STE backward computes
    (used by gradient checks). `activation` overrides the default
    (sign when cfg.binarize_activations, identity otherwise); "relu" is
    used by real-valued teacher networks.
    """
    wb = _weight_forward(weights, cfg.binarize_weights, surrogate)
    z = conv2d(x, wb, cfg.conv, pad_value=pad_value)
    pooled_argmax = None
    p = z
    if pool is not None:
        pk, ps, pp = pool
        p, pooled_argmax = maxpool2d(z, pk, ps, pp)
    if cfg.has_bn:
        if bn is None:
            raise ValueError("block configured with batchnorm but bn state is None")
        y, bn_cache = batchnorm(p, bn, mode)
    else:
        y, bn_cache = p, None
    if activation is None:
        activation = "sign" if cfg.binarize_activations else "none"
    if activation == "sign":
        a = hard_tanh(y) if surrogate else binarize_sign(y)
    elif activation == "relu":
        a = relu(y)
    elif activation == "none":
        a = y
    else:
        raise ValueError(f"unknown activation {activation!r}")
    cache = (x, wb, weights, z.shape, pooled_argmax, pool, bn_cache, y, cfg,
             activation)
    return a, cache


def binary_conv_block_backward(grad_out: np.ndarray, cache):
    """Backward pass. Returns (grad_input, grads) with grads keyed
    'weight', 'gamma', 'beta' (bn keys absent when the block has no bn)."""
    (x, wb, weights, z_shape, pooled_argmax, pool, bn_cache, y, cfg,
     activation) = cache
    if activation == "sign":
        grad_y = ste_backward(grad_out, y)
    elif activation == "relu":
        grad_y = relu_backward(grad_out, y)
    else:
        grad_y = grad_out
    grads = {}
    if bn_cache is not None:
        grad_p, grad_gamma, grad_beta = batchnorm_backward(grad_y, bn_cache)
        grads["gamma"] = grad_gamma
        grads["beta"] = grad_beta
    else:
        grad_p = grad_y
    if pool is not None:
        pk, ps, pp = pool
        grad_z = maxpool2d_backward(grad_p, pooled_argmax, z_shape, pk, ps, pp)
    else:
        grad_z = grad_p
    grad_input, grad_wb = conv2d_backward(grad_z, x, wb, cfg.conv)
    if cfg.binarize_weights:
        latent = weights.value if isinstance(weights, LatentWeight) else weights
        grad_wb = ste_backward(grad_wb, latent)
    grads["weight"] = grad_wb
    return grad_input, grads
