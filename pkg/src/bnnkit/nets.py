"""Declarative network architectures and model construction.

An ArchSpec is an ordered list of layer descriptions (conv / maxpool /
dense / dropout / scaling / softmax) plus input geometry. Constructors here
emit the 13-layer wide-early-layer network, a BVLC-Alexnet-like variant
with binarized interior layers, and a small all-real CNN used as a
distillation teacher. Channel counts scale with a width multiplier for
desk-scale runs.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .binary import LatentWeight, glorot_gamma, glorot_lr_scale
from .ops import BatchNormState, ConvParams, ShapeError

LAYER_KINDS = ("conv", "maxpool", "dense", "dropout", "scaling", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One architecture-table row. Fields not used by `kind` stay None."""

    kind: str
    channels: int | None = None
    kernel_h: int | None = None
    kernel_w: int | None = None
    stride_h: int | None = None
    stride_w: int | None = None
    pad_h: int | None = None
    pad_w: int | None = None
    binarize_weights: bool | None = None
    binarize_activations: bool | None = None
    has_bn: bool | None = None
    activation: str | None = None   # sign | relu | none
    bias: bool | None = None

    _REQUIRED = {
        "conv": ("channels", "kernel_h", "kernel_w", "stride_h", "stride_w",
                 "pad_h", "pad_w", "binarize_weights", "binarize_activations",
                 "has_bn", "activation"),
        "maxpool": ("kernel_h", "kernel_w", "stride_h", "stride_w", "pad_h",
                    "pad_w"),
        "dense": ("channels", "binarize_weights", "binarize_activations",
                  "has_bn", "activation", "bias"),
        "dropout": (),
        "scaling": (),
        "softmax": (),
    }

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        required = set(self._REQUIRED[self.kind])
        for name in ("channels", "kernel_h", "kernel_w", "stride_h", "stride_w",
                     "pad_h", "pad_w", "binarize_weights",
                     "binarize_activations", "has_bn", "activation", "bias"):
            value = getattr(self, name)
            if name in required and value is None:
                raise ValueError(f"{self.kind} layer requires field {name!r}")
            if name not in required and value is not None:
                raise ValueError(f"{self.kind} layer must not set field {name!r}")
        if self.activation is not None and self.activation not in ("sign", "relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.channels is not None and self.channels < 1:
            raise ValueError("channels must be positive")


def conv_layer(channels, kernel, stride=1, *, binarize_weights=True,
               binarize_activations=True, has_bn=True, activation=None) -> LayerSpec:
    """Conv row with the house padding rule pad = floor(kernel/2)."""
    if activation is None:
        activation = "sign" if binarize_activations else "none"
    return LayerSpec(kind="conv", channels=channels, kernel_h=kernel,
                     kernel_w=kernel, stride_h=stride, stride_w=stride,
                     pad_h=kernel // 2, pad_w=kernel // 2,
                     binarize_weights=binarize_weights,
                     binarize_activations=binarize_activations,
                     has_bn=has_bn, activation=activation)


def maxpool_layer(kernel, stride) -> LayerSpec:
    """Maxpool row; 3x3 pools pad by 1, smaller pools are unpadded."""
    pad = 1 if kernel == 3 else 0
    return LayerSpec(kind="maxpool", kernel_h=kernel, kernel_w=kernel,
                     stride_h=stride, stride_w=stride, pad_h=pad, pad_w=pad)


def dense_layer(channels, *, binarize_weights=True, binarize_activations=True,
                has_bn=True, activation=None, bias=False) -> LayerSpec:
    if activation is None:
        activation = "sign" if binarize_activations else "none"
    return LayerSpec(kind="dense", channels=channels,
                     binarize_weights=binarize_weights,
                     binarize_activations=binarize_activations,
                     has_bn=has_bn, activation=activation, bias=bias)


@dataclass(frozen=True)
class ArchSpec:
    entries: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]          # (channels, height, width)
    num_classes: int
    scaling_factor: float = 1.0
    dropout_ratio: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not (np.isfinite(self.scaling_factor) and self.scaling_factor > 0):
            raise ValueError("scaling_factor must be positive and finite")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError("dropout_ratio must be in [0, 1)")
        if len(self.entries) < 3:
            raise ValueError("spec needs at least dense/scaling/softmax tail")
        tail = self.entries[-3:]
        if (tail[0].kind, tail[1].kind, tail[2].kind) != ("dense", "scaling", "softmax"):
            raise ValueError("last three entries must be dense -> scaling -> softmax")
        if tail[0].channels != self.num_classes:
            raise ValueError(
                f"final dense has {tail[0].channels} units, expected {self.num_classes}")
        convs = [e for e in self.entries if e.kind == "conv"]
        if convs and convs[0].binarize_weights:
            raise ValueError("first conv layer must use real-valued weights")
        denses = [e for e in self.entries if e.kind == "dense"]
        if denses[-1].binarize_weights:
            raise ValueError("final dense layer must use real-valued weights")
        propagate_shapes(self)  # raises ShapeError if any dim collapses


def propagate_shapes(spec: ArchSpec) -> list[tuple]:
    """Output shape after every entry (sample shapes, no batch axis).

    Conv/maxpool shapes are (C, H, W); a dense entry flattens whatever
    precedes it. Deterministic and total: raises ShapeError before any
    allocation would fail.
    """
    shape = spec.input_shape
    out = []
    for i, e in enumerate(spec.entries):
        if e.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"entry {i}: conv after flatten is not supported")
            c, h, w = shape
            params = ConvParams(e.channels, c, e.kernel_h, e.kernel_w,
                                e.stride_h, e.stride_w, e.pad_h, e.pad_w)
            oh, ow = params.output_hw(h, w)
            shape = (e.channels, oh, ow)
        elif e.kind == "maxpool":
            c, h, w = shape
            oh = (h + 2 * e.pad_h - e.kernel_h) // e.stride_h + 1
            ow = (w + 2 * e.pad_w - e.kernel_w) // e.stride_w + 1
            if e.kernel_h > h + 2 * e.pad_h or oh < 1 or ow < 1:
                raise ShapeError(
                    f"entry {i}: maxpool {e.kernel_h}x{e.kernel_w} collapses "
                    f"{h}x{w} input")
            shape = (c, oh, ow)
        elif e.kind == "dense":
            shape = (e.channels,)
        elif e.kind in ("dropout", "scaling", "softmax"):
            pass
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# Architecture constructors
# ---------------------------------------------------------------------------

def _scale_to_multiple_of_8(channels: int, multiplier: float) -> int:
    return max(8, int(round(channels * multiplier / 8)) * 8)


def table1_spec(input_resolution: int, num_classes: int,
                width_multiplier: float = 1.0, *, input_channels: int = 3,
                dropout_ratio: float = 0.2,
                scaling_factor: float = 1.0) -> ArchSpec:
    """The 13-layer network: a wide real-weight stem, binarized 3x3 stacks,
    and a real final classifier.

    At multiplier 1 the channel schedule is 128 / 384x3 / 512x6 with a 4096
    dense layer. Scaled channel counts round to the nearest multiple of 8
    (minimum 8) for desk-scale runs.
    """
    c = lambda n: _scale_to_multiple_of_8(n, width_multiplier)
    entries = [
        conv_layer(c(128), 7, 2, binarize_weights=False),
        maxpool_layer(3, 2),
    ]
    entries += [conv_layer(c(384), 3, 1) for _ in range(3)]
    entries.append(maxpool_layer(2, 2))
    entries += [conv_layer(c(512), 3, 1) for _ in range(6)]
    entries.append(maxpool_layer(2, 2))
    entries.append(LayerSpec(kind="dropout"))
    entries.append(dense_layer(c(4096)))
    entries.append(dense_layer(num_classes, binarize_weights=False,
                               binarize_activations=False, has_bn=False,
                               bias=True))
    entries.append(LayerSpec(kind="scaling"))
    entries.append(LayerSpec(kind="softmax"))
    return ArchSpec(entries=tuple(entries),
                    input_shape=(input_channels, input_resolution, input_resolution),
                    num_classes=num_classes, scaling_factor=scaling_factor,
                    dropout_ratio=dropout_ratio)


def alexnet_like_spec(input_resolution: int, num_classes: int,
                      width_multiplier: float = 1.0, *, input_channels: int = 3,
                      dropout_ratio: float = 0.0,
                      scaling_factor: float = 1.0) -> ArchSpec:
    """BVLC-Alexnet layout (5 conv + 3 dense) with binarized interior
    layers, a real first conv, and a real final dense."""
    c = lambda n: max(8, int(round(n * width_multiplier)))
    entries = [
        conv_layer(c(96), 11, 4, binarize_weights=False),
        maxpool_layer(3, 2),
        conv_layer(c(256), 5, 1),
        maxpool_layer(3, 2),
        conv_layer(c(384), 3, 1),
        conv_layer(c(384), 3, 1),
        conv_layer(c(256), 3, 1),
        maxpool_layer(3, 2),
        LayerSpec(kind="dropout"),
        dense_layer(c(4096)),
        LayerSpec(kind="dropout"),
        dense_layer(c(4096)),
        dense_layer(num_classes, binarize_weights=False,
                    binarize_activations=False, has_bn=False, bias=True),
        LayerSpec(kind="scaling"),
        LayerSpec(kind="softmax"),
    ]
    return ArchSpec(entries=tuple(entries),
                    input_shape=(input_channels, input_resolution, input_resolution),
                    num_classes=num_classes, scaling_factor=scaling_factor,
                    dropout_ratio=dropout_ratio)


def float_cnn_spec(input_shape: tuple[int, int, int], num_classes: int,
                   channels: tuple[int, ...] = (32, 64), dense_units: int = 128,
                   scaling_factor: float = 1.0) -> ArchSpec:
    """Small all-real conv net with ReLU activations; the in-repo teacher.

    A 2x2 maxpool follows each conv while the spatial map stays large
    enough to halve, so the same constructor covers tiny toy inputs.
    """
    entries = []
    h = input_shape[1]
    for c in channels:
        entries.append(conv_layer(c, 3, 1, binarize_weights=False,
                                  binarize_activations=False,
                                  activation="relu"))
        if h >= 2:
            entries.append(maxpool_layer(2, 2))
            h //= 2
    entries += [
        dense_layer(dense_units, binarize_weights=False,
                    binarize_activations=False, activation="relu", bias=False),
        dense_layer(num_classes, binarize_weights=False,
                    binarize_activations=False, has_bn=False, bias=True),
        LayerSpec(kind="scaling"),
        LayerSpec(kind="softmax"),
    ]
    return ArchSpec(entries=tuple(entries), input_shape=tuple(input_shape),
                    num_classes=num_classes, scaling_factor=scaling_factor)


# ---------------------------------------------------------------------------
# Parameter allocation
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    """Trainable state of one conv or dense entry."""

    weight: object = None            # LatentWeight or np.ndarray
    bias: np.ndarray | None = None
    bn: BatchNormState | None = None


@dataclass
class Model:
    spec: ArchSpec
    params: dict = field(default_factory=dict)   # entry index -> BlockParams

    def latent_layers(self):
        """(entry_index, LatentWeight) pairs in layer order."""
        return [(i, p.weight) for i, p in sorted(self.params.items())
                if isinstance(p.weight, LatentWeight)]

    def num_parameters(self) -> int:
        total = 0
        for p in self.params.values():
            w = p.weight.value if isinstance(p.weight, LatentWeight) else p.weight
            if w is not None:
                total += w.size
            if p.bias is not None:
                total += p.bias.size
            if p.bn is not None:
                total += p.bn.gamma.size + p.bn.beta.size
        return total


def _uniform_init(rng: np.random.Generator, gamma: float, shape, dtype):
    sample_dtype = np.float32 if dtype == np.float32 else np.float64
    w = rng.random(shape, dtype=sample_dtype)
    w *= 2 * gamma
    w -= gamma
    return w.astype(dtype, copy=False)


def build(spec: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Allocate parameters for `spec`.

    Conv and dense weights draw uniformly from [-gamma, gamma] with
    gamma = sqrt(1.5 / (fan_in + fan_out)), the same gamma whose inverse
    becomes the layer's learning-rate scale; initial latents therefore sit
    well inside the clip range. Deterministic for a given rng state.
    """
    shapes = propagate_shapes(spec)
    model = Model(spec=spec)
    in_shape = spec.input_shape
    for i, e in enumerate(spec.entries):
        if e.kind == "conv":
            c_in = in_shape[0]
            fan_in = c_in * e.kernel_h * e.kernel_w
            fan_out = e.channels * e.kernel_h * e.kernel_w
            gamma = glorot_gamma(fan_in, fan_out)
            w = _uniform_init(rng, gamma,
                              (e.channels, c_in, e.kernel_h, e.kernel_w), dtype)
            bp = BlockParams()
            bp.weight = (LatentWeight(w, fan_in, fan_out,
                                      glorot_lr_scale(fan_in, fan_out))
                         if e.binarize_weights else w)
            if e.has_bn:
                bp.bn = BatchNormState.create(e.channels, dtype=dtype)
            model.params[i] = bp
        elif e.kind == "dense":
            d_in = int(np.prod(in_shape))
            gamma = glorot_gamma(d_in, e.channels)
            w = _uniform_init(rng, gamma, (d_in, e.channels), dtype)
            bp = BlockParams()
            bp.weight = (LatentWeight(w, d_in, e.channels,
                                      glorot_lr_scale(d_in, e.channels))
                         if e.binarize_weights else w)
            if e.bias:
                bp.bias = np.zeros(e.channels, dtype=dtype)
            if e.has_bn:
                bp.bn = BatchNormState.create(e.channels, dtype=dtype)
            model.params[i] = bp
        in_shape = shapes[i]
    return model


def models_equal(a: Model, b: Model) -> bool:
    """Bit-exact equality of specs and all parameter tensors."""
    if a.spec != b.spec or set(a.params) != set(b.params):
        return False
    for i, pa in a.params.items():
        pb = b.params[i]
        wa = pa.weight.value if isinstance(pa.weight, LatentWeight) else pa.weight
        wb = pb.weight.value if isinstance(pb.weight, LatentWeight) else pb.weight
        if (wa is None) != (wb is None) or (wa is not None and not np.array_equal(wa, wb)):
            return False
        if isinstance(pa.weight, LatentWeight) != isinstance(pb.weight, LatentWeight):
            return False
        if (pa.bias is None) != (pb.bias is None):
            return False
        if pa.bias is not None and not np.array_equal(pa.bias, pb.bias):
            return False
        if (pa.bn is None) != (pb.bn is None):
            return False
        if pa.bn is not None:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if not np.array_equal(getattr(pa.bn, name), getattr(pb.bn, name)):
                    return False
            if (pa.bn.momentum, pa.bn.epsilon) != (pb.bn.momentum, pb.bn.epsilon):
                return False
    return True
