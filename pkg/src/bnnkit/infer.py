"""Bit-packed inference runtime.

Binary conv blocks run as: binarize input, pack channel bits per pixel,
gather word-level patches, XNOR+popcount GEMM to integer pre-activations,
(integer maxpool), then a per-channel threshold that encodes
batchnorm-then-sign exactly. The runtime is validated against the float
reference path decision-for-decision: integer results are exact, and
thresholds are probed at fold time against the very batchnorm computation
the float path performs, so there is no tolerance anywhere.
"""

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .binary import LatentWeight, binarize_sign
from .modelio import (BadMagicError, SpecMismatchError, VersionMismatchError,
                      _Reader, canonical_spec_json, read_tensor_record,
                      spec_from_dict, write_tensor_record)
from .nets import ArchSpec, Model
from .network import (ConvStage, DenseStage, DropoutStage, FlattenStage,
                      PoolStage, compile_plan, _conv_params_for)
from .ops import BatchNormState, ConvParams, batchnorm, conv2d, dense, maxpool2d, relu, softmax
from .xnor import WORD_BITS, gemm_packed_words, words_for

BNNX_MAGIC = b"BNNX"
BNNX_VERSION = 1


class UnsupportedSpecError(ValueError):
    """Spec contains a block the binary runtime cannot execute exactly."""


# ---------------------------------------------------------------------------
# BatchNorm + sign -> per-channel threshold
# ---------------------------------------------------------------------------

@dataclass
class ThresholdUnit:
    """Per-channel replacement for batchnorm-then-sign.

    Output is direction * sign(x - tau). Channels with gamma == 0 are
    constant: direction 0, with tau holding the constant output (+-1).
    """

    tau: np.ndarray         # float per channel
    direction: np.ndarray   # int8 per channel: +1, -1, or 0 (constant)

    def apply(self, x: np.ndarray, channel_axis: int = 1) -> np.ndarray:
        shape = [1] * x.ndim
        shape[channel_axis] = -1
        tau = self.tau.astype(np.float64).reshape(shape)
        direction = self.direction.astype(np.float64).reshape(shape)
        signed = np.where(x - tau >= 0, 1.0, -1.0)
        out = np.where(direction == 0, tau, direction * signed)
        return out.astype(np.float32)


def fold_bn_sign(bn: BatchNormState) -> ThresholdUnit:
    """Analytic fold: sign(BN(x)) == direction * sign(x - tau) with
    tau = mu - beta * sqrt(var + eps) / gamma and direction = sign(gamma)."""
    gamma = bn.gamma.astype(np.float64)
    beta = bn.beta.astype(np.float64)
    mu = bn.running_mean.astype(np.float64)
    std = np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon)
    tau = np.empty_like(mu)
    direction = np.zeros(bn.channels, dtype=np.int8)
    nonzero = gamma != 0
    tau[nonzero] = mu[nonzero] - beta[nonzero] * std[nonzero] / gamma[nonzero]
    direction[nonzero] = np.sign(gamma[nonzero]).astype(np.int8)
    # gamma == 0: BN output is the constant beta, so sign(beta) everywhere
    tau[~nonzero] = np.where(beta[~nonzero] >= 0, 1.0, -1.0)
    return ThresholdUnit(tau=tau, direction=direction)


def exact_integer_threshold(bn: BatchNormState, z_lo: int, z_hi: int) -> ThresholdUnit:
    """Threshold that reproduces float batchnorm + sign exactly on every
    integer in [z_lo, z_hi].

    The float path evaluates sign(BN(z)) in float32; rounding can move the
    analytic boundary by an ulp, so instead of trusting the formula this
    probes the *same* batchnorm computation with a vectorized binary search
    per channel and places tau on the half-integer just below/above the
    measured cutover. Half-integer taus make direction * sign(z - tau)
    tie-free on integer inputs.
    """
    c = bn.channels

    def bn_positive(z_vec: np.ndarray) -> np.ndarray:
        out, _ = batchnorm(z_vec.astype(np.float32).reshape(1, c), bn, "infer")
        return out[0] >= 0

    increasing = bn.gamma > 0          # BN output nondecreasing in z
    pos_lo = bn_positive(np.full(c, z_lo))
    pos_hi = bn_positive(np.full(c, z_hi))
    tau = np.zeros(c, dtype=np.float32)
    direction = np.zeros(c, dtype=np.int8)

    constant = pos_lo == pos_hi        # includes every gamma == 0 channel
    tau[constant] = np.where(pos_lo[constant], 1.0, -1.0)

    varying = ~constant
    # binary search for the first z whose positivity differs from z_lo's
    lo = np.full(c, z_lo, dtype=np.int64)
    hi = np.full(c, z_hi, dtype=np.int64)
    while np.any((hi - lo)[varying] > 1):
        mid = (lo + hi) // 2
        flipped = bn_positive(mid) != pos_lo
        hi = np.where(varying & flipped, mid, hi)
        lo = np.where(varying & ~flipped, mid, lo)
    cut = hi                           # first z on the z_hi side of the flip
    up = varying & increasing          # positive for z >= cut
    down = varying & ~increasing       # positive for z < cut
    direction[up] = 1
    tau[up] = cut[up] - 0.5
    direction[down] = -1
    tau[down] = cut[down] - 0.5
    return ThresholdUnit(tau=tau, direction=direction)


def apply_integer_threshold(unit: ThresholdUnit, z: np.ndarray,
                            channel_axis: int) -> np.ndarray:
    """Decide +-1 outputs for integer pre-activations."""
    shape = [1] * z.ndim
    shape[channel_axis] = -1
    tau = unit.tau.astype(np.float64).reshape(shape)
    direction = unit.direction.astype(np.float64).reshape(shape)
    signed = np.where(z - tau >= 0, 1.0, -1.0)
    return np.where(direction == 0, tau, direction * signed).astype(np.float32)


# ---------------------------------------------------------------------------
# Pixel-word packing for convolution
# ---------------------------------------------------------------------------

def pack_pixel_words(x_pm1: np.ndarray) -> np.ndarray:
    """NCHW +-1 input -> (N, H, W, Wc) uint64 with channel bits innermost.

    Channel pad bits (when C is not a multiple of 64) are zero, matching
    zero pad bits in the weight words, so they never contribute.
    """
    n, c, h, w = x_pm1.shape
    wc = words_for(c)
    bits = np.zeros((n, h, w, wc * WORD_BITS), dtype=np.uint8)
    bits[..., :c] = (x_pm1 > 0).transpose(0, 2, 3, 1)
    return np.packbits(bits, axis=-1, bitorder="little").view(np.uint64)


def pack_conv_weight_words(w_pm1: np.ndarray) -> np.ndarray:
    """OIHW +-1 weights -> (O, kh*kw*Wc) uint64, channels innermost per tap
    (the layout pixel-word patches produce)."""
    o, c, kh, kw = w_pm1.shape
    wc = words_for(c)
    bits = np.zeros((o, kh, kw, wc * WORD_BITS), dtype=np.uint8)
    bits[..., :c] = (w_pm1 > 0).transpose(0, 2, 3, 1)
    packed = np.packbits(bits, axis=-1, bitorder="little").view(np.uint64)
    return packed.reshape(o, kh * kw * wc)


def gather_patch_words(pixel_words: np.ndarray, params: ConvParams) -> tuple:
    """Word-level im2col. Spatial padding inserts all-zero words, i.e.
    logical -1 pixels. Returns (patches (N*OH*OW, kh*kw*Wc), OH, OW)."""
    n, h, w, wc = pixel_words.shape
    p = params
    out_h, out_w = p.output_hw(h, w)
    xp = pixel_words
    if p.pad_h or p.pad_w:
        xp = np.pad(pixel_words,
                    ((0, 0), (p.pad_h, p.pad_h), (p.pad_w, p.pad_w), (0, 0)))
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, out_h, out_w, p.kernel_h, p.kernel_w, wc),
        strides=(sn, sh * p.stride_h, sw * p.stride_w, sh, sw, sc),
        writeable=False,
    )
    patches = windows.reshape(n * out_h * out_w, p.kernel_h * p.kernel_w * wc)
    return np.ascontiguousarray(patches), out_h, out_w


# ---------------------------------------------------------------------------
# Deployment compilation
# ---------------------------------------------------------------------------

@dataclass
class BinConvLayer:
    entry_index: int
    params: ConvParams
    weight_words: np.ndarray      # (O, kh*kw*Wc)
    threshold: ThresholdUnit
    pool: tuple | None            # (kernel, stride, pad) on integer pre-acts
    n_logical: int                # I * kh * kw


@dataclass
class RealConvLayer:
    entry_index: int
    params: ConvParams
    weight: np.ndarray
    bn: BatchNormState | None
    pool: tuple | None
    pad_value: float
    activation: str


@dataclass
class BinDenseLayer:
    entry_index: int
    weight_words: np.ndarray      # (K, Wd): one packed row per output unit
    threshold: ThresholdUnit
    n_logical: int


@dataclass
class RealDenseLayer:
    entry_index: int
    weight: np.ndarray            # (D, K)
    bias: np.ndarray | None
    bn: BatchNormState | None
    activation: str


@dataclass
class FlattenOp:
    entry_index: int


@dataclass
class PoolOp:
    entry_index: int
    kernel: int
    stride: int
    pad: int


@dataclass
class Deployment:
    spec: ArchSpec
    layers: list


def _latent_value(weight):
    return weight.value if isinstance(weight, LatentWeight) else weight


def compile_deployment(model: Model) -> Deployment:
    """Pack binary-layer weights and fold their batchnorms into exact
    integer thresholds; real layers keep their float parameters."""
    spec = model.spec
    shapes = {}
    shape = spec.input_shape
    layers = []
    for st in compile_plan(spec):
        if isinstance(st, ConvStage):
            e = spec.entries[st.entry_index]
            bp = model.params[st.entry_index]
            params = _conv_params_for(e, shape[0])
            oh, ow = params.output_hw(shape[1], shape[2])
            shape = (e.channels, oh, ow)
            if st.pool:
                pk, ps, pp = st.pool
                shape = (e.channels,
                         (oh + 2 * pp - pk) // ps + 1,
                         (ow + 2 * pp - pk) // ps + 1)
            if st.binarize_weights:
                if not st.binary_input:
                    raise UnsupportedSpecError(
                        f"layer {st.entry_index}: binary conv over a "
                        "non-binarized activation stream")
                if st.activation != "sign" or not st.has_bn:
                    raise UnsupportedSpecError(
                        f"layer {st.entry_index}: binary conv blocks need "
                        "batchnorm and a sign activation")
                kvol = params.in_channels * params.kernel_h * params.kernel_w
                layers.append(BinConvLayer(
                    entry_index=st.entry_index,
                    params=params,
                    weight_words=pack_conv_weight_words(
                        binarize_sign(_latent_value(bp.weight))),
                    threshold=exact_integer_threshold(bp.bn, -kvol, kvol),
                    pool=st.pool,
                    n_logical=kvol))
            else:
                layers.append(RealConvLayer(
                    entry_index=st.entry_index, params=params,
                    weight=np.asarray(_latent_value(bp.weight), dtype=np.float32),
                    bn=bp.bn, pool=st.pool, pad_value=st.pad_value,
                    activation=st.activation))
        elif isinstance(st, DenseStage):
            e = spec.entries[st.entry_index]
            bp = model.params[st.entry_index]
            d_in = int(np.prod(shape))
            shape = (e.channels,)
            if st.binarize_weights:
                if not st.binary_input:
                    raise UnsupportedSpecError(
                        f"layer {st.entry_index}: binary dense over a "
                        "non-binarized activation stream")
                if st.activation != "sign" or not st.has_bn:
                    raise UnsupportedSpecError(
                        f"layer {st.entry_index}: binary dense blocks need "
                        "batchnorm and a sign activation")
                from .xnor import pack
                wb = binarize_sign(_latent_value(bp.weight))   # (D, K)
                packed = pack(np.ascontiguousarray(wb.T))      # (K, Wd)
                layers.append(BinDenseLayer(
                    entry_index=st.entry_index,
                    weight_words=packed.words,
                    threshold=exact_integer_threshold(bp.bn, -d_in, d_in),
                    n_logical=d_in))
            else:
                layers.append(RealDenseLayer(
                    entry_index=st.entry_index,
                    weight=np.asarray(_latent_value(bp.weight), dtype=np.float32),
                    bias=bp.bias, bn=bp.bn, activation=st.activation))
        elif isinstance(st, PoolStage):
            shape = (shape[0],
                     (shape[1] + 2 * st.pad - st.kernel) // st.stride + 1,
                     (shape[2] + 2 * st.pad - st.kernel) // st.stride + 1)
            layers.append(PoolOp(st.entry_index, st.kernel, st.stride, st.pad))
        elif isinstance(st, FlattenStage):
            layers.append(FlattenOp(st.entry_index))
        elif isinstance(st, DropoutStage):
            continue   # identity at inference
    return Deployment(spec=spec, layers=layers)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def binconv_infer(x: np.ndarray, layer: BinConvLayer) -> np.ndarray:
    """One binary conv block: binarize, pack, gather, XNOR GEMM, integer
    maxpool if fused, threshold. Output is +-1 float32 NCHW."""
    p = layer.params
    if x.shape[1] != p.in_channels:
        raise ValueError(
            f"layer {layer.entry_index}: input has {x.shape[1]} channels, "
            f"packed weights expect {p.in_channels}")
    xb = binarize_sign(np.asarray(x, dtype=np.float32))
    pixel_words = pack_pixel_words(xb)
    patches, out_h, out_w = gather_patch_words(pixel_words, p)
    ints = gemm_packed_words(patches, layer.weight_words, layer.n_logical)
    z = ints.reshape(x.shape[0], out_h, out_w, p.out_channels).transpose(0, 3, 1, 2)
    if layer.pool:
        pk, ps, pp = layer.pool
        z, _ = maxpool2d(z, pk, ps, pp)
    return apply_integer_threshold(layer.threshold, z, channel_axis=1)


def bindense_infer(x: np.ndarray, layer: BinDenseLayer) -> np.ndarray:
    from .xnor import pack
    xb = binarize_sign(np.asarray(x, dtype=np.float32))
    packed = pack(xb)
    ints = gemm_packed_words(packed.words, layer.weight_words, layer.n_logical)
    return apply_integer_threshold(layer.threshold, ints, channel_axis=1)


def run_inference(model_or_deployment, batch: np.ndarray) -> np.ndarray:
    """Class probabilities via the binary runtime: float first layer,
    XNOR+popcount binary blocks, float final dense, scaling, softmax."""
    deployment = (model_or_deployment
                  if isinstance(model_or_deployment, Deployment)
                  else compile_deployment(model_or_deployment))
    x = np.asarray(batch, dtype=np.float32)
    for layer in deployment.layers:
        if isinstance(layer, BinConvLayer):
            x = binconv_infer(x, layer)
        elif isinstance(layer, RealConvLayer):
            x = conv2d(x, layer.weight, layer.params, pad_value=layer.pad_value)
            if layer.pool:
                pk, ps, pp = layer.pool
                x, _ = maxpool2d(x, pk, ps, pp)
            if layer.bn is not None:
                x, _ = batchnorm(x, layer.bn, "infer")
            if layer.activation == "sign":
                x = binarize_sign(x)
            elif layer.activation == "relu":
                x = relu(x)
        elif isinstance(layer, BinDenseLayer):
            x = bindense_infer(x, layer)
        elif isinstance(layer, RealDenseLayer):
            x = dense(x, layer.weight, layer.bias)
            if layer.bn is not None:
                x, _ = batchnorm(x, layer.bn, "infer")
            if layer.activation == "sign":
                x = binarize_sign(x)
            elif layer.activation == "relu":
                x = relu(x)
        elif isinstance(layer, PoolOp):
            x, _ = maxpool2d(x, layer.kernel, layer.stride, layer.pad)
        elif isinstance(layer, FlattenOp):
            x = x.reshape(x.shape[0], -1)
    return softmax(x * deployment.spec.scaling_factor)


# ---------------------------------------------------------------------------
# Deployment file format ("BNNX")
# ---------------------------------------------------------------------------

def save_deployment(deployment: Deployment, path):
    with open(path, "wb") as f:
        f.write(BNNX_MAGIC)
        f.write(struct.pack("<I", BNNX_VERSION))
        blob = canonical_spec_json(deployment.spec)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for layer in deployment.layers:
            i = layer.entry_index
            if isinstance(layer, BinConvLayer):
                write_tensor_record(f, f"layer{i}.words", layer.weight_words)
                write_tensor_record(f, f"layer{i}.tau",
                                    layer.threshold.tau.astype(np.float32))
                write_tensor_record(f, f"layer{i}.direction",
                                    layer.threshold.direction)
            elif isinstance(layer, BinDenseLayer):
                write_tensor_record(f, f"layer{i}.words", layer.weight_words)
                write_tensor_record(f, f"layer{i}.tau",
                                    layer.threshold.tau.astype(np.float32))
                write_tensor_record(f, f"layer{i}.direction",
                                    layer.threshold.direction)
            elif isinstance(layer, RealConvLayer):
                write_tensor_record(f, f"layer{i}.weight", layer.weight)
                if layer.bn is not None:
                    _write_bn(f, i, layer.bn)
            elif isinstance(layer, RealDenseLayer):
                write_tensor_record(f, f"layer{i}.weight", layer.weight)
                if layer.bias is not None:
                    write_tensor_record(f, f"layer{i}.bias",
                                        layer.bias.astype(np.float32))
                if layer.bn is not None:
                    _write_bn(f, i, layer.bn)


def _write_bn(f, i, bn: BatchNormState):
    write_tensor_record(f, f"layer{i}.bn.gamma", bn.gamma.astype(np.float32))
    write_tensor_record(f, f"layer{i}.bn.beta", bn.beta.astype(np.float32))
    write_tensor_record(f, f"layer{i}.bn.running_mean",
                        bn.running_mean.astype(np.float32))
    write_tensor_record(f, f"layer{i}.bn.running_var",
                        bn.running_var.astype(np.float32))
    write_tensor_record(f, f"layer{i}.bn.epsilon",
                        np.array(bn.epsilon, dtype="<f8"))


def load_deployment(path) -> Deployment:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != BNNX_MAGIC:
        raise BadMagicError(f"{path}: not a BNNX deployment file")
    version = r.u32()
    if version != BNNX_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, "
                                   f"expected {BNNX_VERSION}")
    blob = r.take(r.u64())
    try:
        spec = spec_from_dict(json.loads(blob.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise SpecMismatchError(f"{path}: invalid spec blob: {exc}") from exc
    tensors = {}
    while not r.exhausted:
        name, arr = read_tensor_record(r)
        tensors[name] = arr

    shape = spec.input_shape
    layers = []
    def grab(name):
        if name not in tensors:
            raise SpecMismatchError(f"{path}: missing record {name}")
        return tensors.pop(name)

    for st in compile_plan(spec):
        if isinstance(st, ConvStage):
            e = spec.entries[st.entry_index]
            params = _conv_params_for(e, shape[0])
            oh, ow = params.output_hw(shape[1], shape[2])
            shape = (e.channels, oh, ow)
            if st.pool:
                pk, ps, pp = st.pool
                shape = (e.channels, (oh + 2 * pp - pk) // ps + 1,
                         (ow + 2 * pp - pk) // ps + 1)
            i = st.entry_index
            if st.binarize_weights:
                kvol = params.in_channels * params.kernel_h * params.kernel_w
                words = grab(f"layer{i}.words")
                expected = (params.out_channels,
                            params.kernel_h * params.kernel_w *
                            words_for(params.in_channels))
                if words.shape != expected:
                    raise SpecMismatchError(
                        f"{path}: layer{i}.words has shape {words.shape}, "
                        f"spec requires {expected}")
                layers.append(BinConvLayer(
                    entry_index=i, params=params, weight_words=words,
                    threshold=ThresholdUnit(tau=grab(f"layer{i}.tau"),
                                            direction=grab(f"layer{i}.direction")),
                    pool=st.pool, n_logical=kvol))
            else:
                weight = grab(f"layer{i}.weight")
                if weight.shape != (params.out_channels, params.in_channels,
                                    params.kernel_h, params.kernel_w):
                    raise SpecMismatchError(
                        f"{path}: layer{i}.weight has shape {weight.shape}")
                layers.append(RealConvLayer(
                    entry_index=i, params=params, weight=weight,
                    bn=_read_bn(tensors, i, path) if e.has_bn else None,
                    pool=st.pool, pad_value=st.pad_value,
                    activation=st.activation))
        elif isinstance(st, DenseStage):
            e = spec.entries[st.entry_index]
            d_in = int(np.prod(shape))
            shape = (e.channels,)
            i = st.entry_index
            if st.binarize_weights:
                words = grab(f"layer{i}.words")
                if words.shape != (e.channels, words_for(d_in)):
                    raise SpecMismatchError(
                        f"{path}: layer{i}.words has shape {words.shape}, "
                        f"spec requires {(e.channels, words_for(d_in))}")
                layers.append(BinDenseLayer(
                    entry_index=i, weight_words=words,
                    threshold=ThresholdUnit(tau=grab(f"layer{i}.tau"),
                                            direction=grab(f"layer{i}.direction")),
                    n_logical=d_in))
            else:
                weight = grab(f"layer{i}.weight")
                if weight.shape != (d_in, e.channels):
                    raise SpecMismatchError(
                        f"{path}: layer{i}.weight has shape {weight.shape}, "
                        f"spec requires {(d_in, e.channels)}")
                bias = grab(f"layer{i}.bias") if e.bias else None
                layers.append(RealDenseLayer(
                    entry_index=i, weight=weight, bias=bias,
                    bn=_read_bn(tensors, i, path) if e.has_bn else None,
                    activation=st.activation))
        elif isinstance(st, PoolStage):
            shape = (shape[0],
                     (shape[1] + 2 * st.pad - st.kernel) // st.stride + 1,
                     (shape[2] + 2 * st.pad - st.kernel) // st.stride + 1)
            layers.append(PoolOp(st.entry_index, st.kernel, st.stride, st.pad))
        elif isinstance(st, FlattenStage):
            layers.append(FlattenOp(st.entry_index))
        elif isinstance(st, DropoutStage):
            continue
    if tensors:
        raise SpecMismatchError(
            f"{path}: unexpected records {sorted(tensors)}")
    return Deployment(spec=spec, layers=layers)


def _read_bn(tensors: dict, i: int, path) -> BatchNormState:
    try:
        return BatchNormState(
            gamma=tensors.pop(f"layer{i}.bn.gamma"),
            beta=tensors.pop(f"layer{i}.bn.beta"),
            running_mean=tensors.pop(f"layer{i}.bn.running_mean"),
            running_var=tensors.pop(f"layer{i}.bn.running_var"),
            epsilon=float(tensors.pop(f"layer{i}.bn.epsilon")),
        )
    except KeyError as exc:
        raise SpecMismatchError(f"{path}: missing batchnorm record {exc}") from exc


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    op: str
    m: int
    n: int
    k: int
    float_ns_per_iter: float
    xnor_ns_per_iter: float

    @property
    def speedup(self) -> float:
        return self.float_ns_per_iter / self.xnor_ns_per_iter


BENCH_CSV_HEADER = "op,M,N,K,float_ns_per_iter,xnor_ns_per_iter,speedup"

DEFAULT_GEMM_SHAPES = [(256, 128, 64), (256, 128, 256), (256, 128, 1024),
                       (256, 256, 4096)]
DEFAULT_CONV_SHAPES = [(64, 14, 64, 3), (128, 14, 128, 3), (256, 14, 256, 3),
                       (512, 7, 512, 3)]


def _time_ns(fn, repetitions: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter_ns()
    for _ in range(repetitions):
        fn()
    return (time.perf_counter_ns() - t0) / repetitions


def bench(gemm_shapes=None, conv_shapes=None, repetitions: int = 10,
          seed: int = 0) -> list[BenchRow]:
    """Wall-time of the XNOR kernels against the in-repo float path at
    identical shapes, single-threaded. Outputs are verified equal before
    any timing starts."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:   # pragma: no cover
        from contextlib import nullcontext
        threadpool_limits = lambda limits: nullcontext()

    from .xnor import pack
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for m, n, k in (gemm_shapes if gemm_shapes is not None else DEFAULT_GEMM_SHAPES):
            a = binarize_sign(rng.standard_normal((m, k)).astype(np.float32))
            b = binarize_sign(rng.standard_normal((n, k)).astype(np.float32))
            pa, pb = pack(a), pack(b)
            ref = (a @ b.T).astype(np.int64)
            got = gemm_packed_words(pa.words, pb.words, k)
            if not np.array_equal(ref, got):
                raise AssertionError(f"gemm mismatch at shape {(m, n, k)}")
            t_float = _time_ns(lambda: a @ b.T, repetitions)
            t_xnor = _time_ns(
                lambda: gemm_packed_words(pa.words, pb.words, k), repetitions)
            rows.append(BenchRow("gemm", m, n, k, t_float, t_xnor))
        for c, hw, o, kk in (conv_shapes if conv_shapes is not None else DEFAULT_CONV_SHAPES):
            params = ConvParams(o, c, kk, kk, 1, 1, kk // 2, kk // 2)
            x = binarize_sign(rng.standard_normal((1, c, hw, hw)).astype(np.float32))
            w = binarize_sign(rng.standard_normal((o, c, kk, kk)).astype(np.float32))
            kvol = c * kk * kk
            words = pack_conv_weight_words(w)

            def xnor_conv():
                pixel_words = pack_pixel_words(x)
                patches, oh, ow = gather_patch_words(pixel_words, params)
                return gemm_packed_words(patches, words, kvol)

            ref = conv2d(x, w, params, pad_value=-1.0)
            got = xnor_conv().reshape(1, hw, hw, o).transpose(0, 3, 1, 2)
            if not np.array_equal(ref.astype(np.int64), got):
                raise AssertionError(f"conv mismatch at shape {(c, hw, o, kk)}")
            t_float = _time_ns(lambda: conv2d(x, w, params, pad_value=-1.0),
                               repetitions)
            t_xnor = _time_ns(xnor_conv, repetitions)
            m = hw * hw
            rows.append(BenchRow("conv", m, o, kvol, t_float, t_xnor))
    return rows


def bench_rows_to_csv(rows: list[BenchRow]) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.op},{r.m},{r.n},{r.k},{r.float_ns_per_iter:.1f},"
                     f"{r.xnor_ns_per_iter:.1f},{r.speedup:.3f}")
    return "\n".join(lines) + "\n"
