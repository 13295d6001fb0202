"""Dense-tensor layer primitives with explicit forward and backward passes.

Everything here operates on plain numpy arrays (NCHW for images, N x D for
flat features) and is a pure function of its inputs. Training uses float32;
gradient-check builds pass float64 arrays and every op preserves the input
dtype.
"""

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent or produce empty outputs."""


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvParams:
    """Geometry of a 2D convolution: filter counts, kernel, stride, padding."""

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel_h", "kernel_w",
                     "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvParams.{name} must be >= 1, got {getattr(self, name)}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError("padding must be non-negative")

    def output_hw(self, in_h: int, in_w: int) -> tuple[int, int]:
        out_h = (in_h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        out_w = (in_w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"conv output would be {out_h}x{out_w} for input {in_h}x{in_w}, "
                f"kernel {self.kernel_h}x{self.kernel_w}, stride "
                f"{self.stride_h}x{self.stride_w}, pad {self.pad_h}x{self.pad_w}")
        return out_h, out_w


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, kernel_h: int, kernel_w: int, stride_h: int,
           stride_w: int, pad_h: int, pad_w: int, pad_value: float = 0.0):
    """Extract convolution patches from NCHW input.

    Returns (cols, out_h, out_w) where cols has shape
    (N * out_h * out_w, C * kernel_h * kernel_w) with the (C, kh, kw) axes
    flattened in that order.
    """
    n, c, h, w = x.shape
    out_h = (h + 2 * pad_h - kernel_h) // stride_h + 1
    out_w = (w + 2 * pad_w - kernel_w) // stride_w + 1
    xp = x
    if pad_h or pad_w:
        xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)),
                    constant_values=pad_value)
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, out_h, out_w, c, kernel_h, kernel_w),
        strides=(sn, sh * stride_h, sw * stride_w, sc, sh, sw),
        writeable=False,
    )
    cols = windows.reshape(n * out_h * out_w, c * kernel_h * kernel_w)
    return np.ascontiguousarray(cols), out_h, out_w


def col2im(cols: np.ndarray, input_shape, kernel_h: int, kernel_w: int,
           stride_h: int, stride_w: int, pad_h: int, pad_w: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the (unpadded) input grid.

    `cols` has the layout produced by :func:`im2col`. Overlapping windows
    accumulate, handled by looping over the kernel taps so each slice-add
    touches disjoint destinations.
    """
    n, c, h, w = input_shape
    out_h = (h + 2 * pad_h - kernel_h) // stride_h + 1
    out_w = (w + 2 * pad_w - kernel_w) // stride_w + 1
    patches = cols.reshape(n, out_h, out_w, c, kernel_h, kernel_w)
    buf = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=cols.dtype)
    for ki in range(kernel_h):
        h_end = ki + stride_h * out_h
        for kj in range(kernel_w):
            w_end = kj + stride_w * out_w
            buf[:, :, ki:h_end:stride_h, kj:w_end:stride_w] += \
                patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return buf[:, :, pad_h:pad_h + h, pad_w:pad_w + w]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, params: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got ndim={x.ndim}")
    if weight.shape != (params.out_channels, params.in_channels,
                        params.kernel_h, params.kernel_w):
        raise ShapeError(
            f"weight shape {weight.shape} does not match params "
            f"(O={params.out_channels}, I={params.in_channels}, "
            f"kh={params.kernel_h}, kw={params.kernel_w})")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, weight expects {params.in_channels}")


def conv2d(x: np.ndarray, weight: np.ndarray, params: ConvParams,
           pad_value: float = 0.0) -> np.ndarray:
    """Direct 2D cross-correlation (no kernel flip), NCHW x OIHW -> NOHW."""
    _check_conv_shapes(x, weight, params)
    n = x.shape[0]
    cols, out_h, out_w = im2col(
        x, params.kernel_h, params.kernel_w, params.stride_h, params.stride_w,
        params.pad_h, params.pad_w, pad_value)
    out = cols @ weight.reshape(params.out_channels, -1).T
    return out.reshape(n, out_h, out_w, params.out_channels).transpose(0, 3, 1, 2)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    params: ConvParams):
    """Gradients of conv2d w.r.t. input and weight.

    Padding is a constant, so its cells receive no gradient regardless of
    the pad value used in the forward pass.
    """
    _check_conv_shapes(x, weight, params)
    n = x.shape[0]
    cols, out_h, out_w = im2col(
        x, params.kernel_h, params.kernel_w, params.stride_h, params.stride_w,
        params.pad_h, params.pad_w)
    gout = grad_out.transpose(0, 2, 3, 1).reshape(n * out_h * out_w,
                                                  params.out_channels)
    grad_weight = (gout.T @ cols).reshape(weight.shape)
    grad_cols = gout @ weight.reshape(params.out_channels, -1)
    grad_input = col2im(grad_cols, x.shape, params.kernel_h, params.kernel_w,
                        params.stride_h, params.stride_w, params.pad_h,
                        params.pad_w)
    return grad_input, grad_weight


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: np.ndarray, kernel: int, stride: int, pad: int = 0,
              pad_value=None):
    """Max pooling over NCHW input. Padded cells count as -inf (or the
    dtype minimum for integer inputs), so they never win a window.

    Returns (out, argmax) where argmax holds, per output cell, the flat
    index of the winning position inside its (kernel x kernel) window. Ties
    go to the lowest flat index.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got ndim={x.ndim}")
    n, c, h, w = x.shape
    if kernel > h + 2 * pad or kernel > w + 2 * pad:
        raise ShapeError(f"pool kernel {kernel} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("maxpool output would be empty")
    xp = x
    if pad:
        if pad_value is None:
            pad_value = (np.iinfo(x.dtype).min
                         if np.issubdtype(x.dtype, np.integer) else -np.inf)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=pad_value)
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, out_h, out_w, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(n, c, out_h, out_w, kernel * kernel)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape,
                       kernel: int, stride: int, pad: int = 0) -> np.ndarray:
    """Route each output gradient to its recorded argmax position."""
    n, c, h, w = input_shape
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    onehot = np.zeros(grad_out.shape + (kernel * kernel,), dtype=grad_out.dtype)
    np.put_along_axis(onehot, argmax[..., None], 1.0, axis=-1)
    patches = onehot * grad_out[..., None]
    # same scatter as col2im, with (N,C) leading instead of channel-in-patch
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    patches = patches.reshape(n, c, out_h, out_w, kernel, kernel)
    for ki in range(kernel):
        for kj in range(kernel):
            buf[:, :, ki:ki + stride * out_h:stride,
                kj:kj + stride * out_w:stride] += patches[:, :, :, :, ki, kj]
    if pad:
        return buf[:, :, pad:pad + h, pad:pad + w]
    return buf


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map: (N x D) @ (D x K) + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shapes incompatible: x {x.shape}, weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                   has_bias: bool = True):
    grad_input = grad_out @ weight.T
    grad_weight = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0) if has_bias else None
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects NCHW or NxD input, got ndim={x.ndim}")


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str,
              update_running: bool = True):
    """Batch normalization forward.

    Train mode normalizes by batch statistics (biased variance) and folds
    them into running stats via momentum; infer mode uses running stats.
    Returns (out, cache); cache is None in infer mode.
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1 if x.ndim == 4 else -1] != state.channels:
        raise ShapeError(
            f"input channel count {x.shape[1 if x.ndim == 4 else -1]} does not "
            f"match BatchNormState with {state.channels} channels")
    gamma = state.gamma.reshape(bshape)
    beta = state.beta.reshape(bshape)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.epsilon)
        xhat = (x - state.running_mean.reshape(bshape)) * inv_std
        return gamma * xhat + beta, None
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var.reshape(bshape) + state.epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std
    out = gamma * xhat + beta
    if update_running:
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    cache = (xhat, inv_std, state, axes, bshape, x.shape)
    return out, cache


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Gradients of train-mode batchnorm w.r.t. input, gamma, beta."""
    xhat, inv_std, state, axes, bshape, x_shape = cache
    m = 1
    for ax in axes:
        m *= x_shape[ax]
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gamma = state.gamma.reshape(bshape)
    gxh = grad_out * gamma
    grad_input = inv_std * (
        gxh
        - gxh.mean(axis=axes, keepdims=True)
        - xhat * (gxh * xhat).mean(axis=axes, keepdims=True))
    return grad_input, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Logit scaling, softmax cross-entropy, dropout
# ---------------------------------------------------------------------------

def scale_layer(logits: np.ndarray, factor: float) -> np.ndarray:
    """Multiply logits by a fixed positive scalar. Not trainable."""
    if not (np.isfinite(factor) and factor > 0):
        raise ValueError(f"scale factor must be positive and finite, got {factor}")
    return logits * factor


def scale_layer_backward(grad_out: np.ndarray, factor: float) -> np.ndarray:
    return grad_out * factor


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over the batch, with gradient w.r.t. logits.

    `targets` is either an int array of class indices or a float array of
    per-row probability targets (rows must sum to 1 within 1e-6).
    Returns (loss, grad) with grad = (softmax(logits) - target) / N.
    """
    n, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    p = np.exp(logp)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ShapeError(f"{targets.shape[0]} labels for {n} logit rows")
        loss = -logp[np.arange(n), targets].mean()
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        grad /= n
    else:
        if targets.shape != logits.shape:
            raise ShapeError(f"target shape {targets.shape} != logits shape {logits.shape}")
        row_sums = targets.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise ValueError("probability targets must sum to 1 per row")
        loss = -(targets * logp).sum(axis=1).mean()
        grad = (p - targets) / n
    return float(loss), grad.astype(logits.dtype)


def dropout(x: np.ndarray, ratio: float, mode: str, rng: np.random.Generator):
    """Inverted dropout. Train mode zeroes with probability `ratio` and
    scales survivors by 1/(1-ratio); infer mode is the identity.

    Returns (out, scaled_mask); the mask is reused by the backward pass and
    is None in infer mode or at ratio 0.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode == "infer" or ratio == 0.0:
        return x, None
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) / (1.0 - ratio)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def first_nonfinite_layer(named_arrays) -> str | None:
    """Name of the first (name, array) pair containing NaN/Inf, else None."""
    for name, arr in named_arrays:
        if not np.isfinite(arr).all():
            return name
    return None
