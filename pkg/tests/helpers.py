"""Independent oracles shared across the test suite.

Everything here is deliberately naive (nested loops, elementwise central
differences) and never calls into the implementation paths it checks.
"""

import numpy as np


def naive_conv2d(x, w, stride_h, stride_w, pad_h, pad_w, pad_value=0.0):
    """Six-nested-loop direct cross-correlation oracle. NCHW x OIHW."""
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    assert c == i
    xp = np.full((n, c, h + 2 * pad_h, wd + 2 * pad_w), pad_value, dtype=np.float64)
    xp[:, :, pad_h:pad_h + h, pad_w:pad_w + wd] = x
    out_h = (h + 2 * pad_h - kh) // stride_h + 1
    out_w = (wd + 2 * pad_w - kw) // stride_w + 1
    out = np.zeros((n, o, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for y in range(out_h):
                for xx in range(out_w):
                    acc = 0.0
                    for ic in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[b, ic, y * stride_h + ky, xx * stride_w + kx]
                                        * w[oc, ic, ky, kx])
                    out[b, oc, y, xx] = acc
    return out


def naive_maxpool2d(x, kernel, stride, pad):
    """Loop maxpool oracle; padded cells are -inf, ties take the first."""
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for y in range(out_h):
                for xx in range(out_w):
                    window = xp[b, ch, y * stride:y * stride + kernel,
                                xx * stride:xx * stride + kernel]
                    out[b, ch, y, xx] = window.max()
    return out


def naive_matmul(a, b):
    """Triple-loop matrix multiply oracle."""
    n, d = a.shape
    d2, k = b.shape
    assert d == d2
    out = np.zeros((n, k), dtype=np.float64)
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for m in range(d):
                acc += a[i, m] * b[m, j]
            out[i, j] = acc
    return out


def numerical_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar f w.r.t. every element of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
        it.iternext()
    return grad


def rel_error(analytic, numeric, floor=1e-8):
    """Max relative error with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def make_random_spec(rng, max_resolution=12):
    """Small random-but-valid architecture: real first conv, 0-2 binary
    convs (some pooled), a binary dense, real classifier tail."""
    from bnnkit.nets import (ArchSpec, LayerSpec, conv_layer, dense_layer,
                             maxpool_layer)

    classes = int(rng.integers(2, 11))
    resolution = int(rng.integers(8, max_resolution + 1))
    in_channels = int(rng.choice([1, 3]))
    entries = [conv_layer(int(rng.choice([4, 8])), 3,
                          int(rng.choice([1, 2])), binarize_weights=False)]
    if rng.random() < 0.5:
        entries.append(maxpool_layer(2, 2))
    for _ in range(int(rng.integers(0, 3))):
        entries.append(conv_layer(int(rng.choice([4, 8])), 3, 1))
    if rng.random() < 0.3:
        entries.append(LayerSpec(kind="dropout"))
    entries.append(dense_layer(int(rng.choice([8, 16]))))
    entries.append(dense_layer(classes, binarize_weights=False,
                               binarize_activations=False, has_bn=False,
                               bias=True))
    entries.append(LayerSpec(kind="scaling"))
    entries.append(LayerSpec(kind="softmax"))
    return ArchSpec(entries=tuple(entries),
                    input_shape=(in_channels, resolution, resolution),
                    num_classes=classes,
                    scaling_factor=float(rng.uniform(0.5, 4.0)),
                    dropout_ratio=float(rng.choice([0.0, 0.2])))


def make_random_model(rng, max_resolution=12):
    """Random small model with non-default batchnorm running stats, so
    serialization round-trips exercise every field."""
    from bnnkit.nets import build

    spec = make_random_spec(rng, max_resolution)
    model = build(spec, rng)
    for bp in model.params.values():
        if bp.bn is not None:
            bp.bn.running_mean = rng.standard_normal(
                bp.bn.channels).astype(np.float32)
            bp.bn.running_var = rng.uniform(
                0.1, 3.0, bp.bn.channels).astype(np.float32)
            bp.bn.gamma = rng.standard_normal(bp.bn.channels).astype(np.float32)
            bp.bn.beta = rng.standard_normal(bp.bn.channels).astype(np.float32)
    return model
