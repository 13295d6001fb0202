"""Model file format ("BNNM").

Layout, little-endian throughout:

    magic "BNNM" | version u32=1 | spec-JSON length u64 | spec JSON (canonical:
    sorted keys, no insignificant whitespace) | parameter records

Each parameter record: name length u16, UTF-8 name, dtype tag u8 (0=f32,
1=f64), rank u8, dims u64 each, raw values. Records appear in layer order
with deterministic per-layer field order, so save/load round-trips are
bit-exact.
"""

import dataclasses
import json
import struct

import numpy as np

from .binary import LatentWeight
from .nets import ArchSpec, LayerSpec, Model

MAGIC = b"BNNM"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8"),
               3: np.dtype("int8")}
_TAG_FOR_KIND = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                 np.dtype("uint64"): 2, np.dtype("int8"): 3}


class ModelFormatError(Exception):
    """Base class for model file problems."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class SpecMismatchError(ModelFormatError):
    """Stored tensors are inconsistent with the stored spec."""


# ---------------------------------------------------------------------------
# Spec <-> canonical JSON
# ---------------------------------------------------------------------------

def spec_to_dict(spec: ArchSpec) -> dict:
    return {
        "entries": [
            {k: v for k, v in dataclasses.asdict(e).items() if v is not None}
            for e in spec.entries
        ],
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "scaling_factor": spec.scaling_factor,
        "dropout_ratio": spec.dropout_ratio,
    }


def spec_from_dict(d: dict) -> ArchSpec:
    entries = tuple(LayerSpec(**e) for e in d["entries"])
    return ArchSpec(entries=entries, input_shape=tuple(d["input_shape"]),
                    num_classes=d["num_classes"],
                    scaling_factor=d["scaling_factor"],
                    dropout_ratio=d["dropout_ratio"])


def canonical_spec_json(spec: ArchSpec) -> bytes:
    return json.dumps(spec_to_dict(spec), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------------------
# Record packing
# ---------------------------------------------------------------------------

def _iter_named_tensors(model: Model):
    """Deterministic (name, array) walk of all parameters."""
    for i in sorted(model.params):
        bp = model.params[i]
        if isinstance(bp.weight, LatentWeight):
            yield f"layer{i}.weight", bp.weight.value
        elif bp.weight is not None:
            yield f"layer{i}.weight", bp.weight
        if bp.bias is not None:
            yield f"layer{i}.bias", bp.bias
        if bp.bn is not None:
            yield f"layer{i}.bn.gamma", bp.bn.gamma
            yield f"layer{i}.bn.beta", bp.bn.beta
            yield f"layer{i}.bn.running_mean", bp.bn.running_mean
            yield f"layer{i}.bn.running_var", bp.bn.running_var
            yield f"layer{i}.bn.momentum", np.array(bp.bn.momentum, dtype="<f8")
            yield f"layer{i}.bn.epsilon", np.array(bp.bn.epsilon, dtype="<f8")


def write_tensor_record(out, name: str, arr: np.ndarray):
    tag = _TAG_FOR_KIND.get(arr.dtype)
    if tag is None:
        raise ValueError(f"unsupported parameter dtype {arr.dtype}")
    nb = name.encode("utf-8")
    out.write(struct.pack("<H", len(nb)))
    out.write(nb)
    out.write(struct.pack("<BB", tag, arr.ndim))
    for d in arr.shape:
        out.write(struct.pack("<Q", d))
    out.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file has "
                f"{len(self.data)} bytes")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def read_tensor_record(r: _Reader):
    name = r.take(r.u16()).decode("utf-8")
    tag = r.u8()
    if tag not in _DTYPE_TAGS:
        raise ModelFormatError(f"unknown dtype tag {tag} for {name}")
    rank = r.u8()
    shape = tuple(r.u64() for _ in range(rank))
    dtype = _DTYPE_TAGS[tag]
    count = 1
    for d in shape:
        count *= d
    raw = r.take(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return name, arr


# ---------------------------------------------------------------------------
# Save / load
# ---------------------------------------------------------------------------

def save_model(model: Model, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = canonical_spec_json(model.spec)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in _iter_named_tensors(model):
            write_tensor_record(f, name, arr)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a BNNM model file")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    blob = r.take(r.u64())
    try:
        spec = spec_from_dict(json.loads(blob.decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise SpecMismatchError(f"{path}: invalid spec blob: {exc}") from exc
    tensors = {}
    while not r.exhausted:
        name, arr = read_tensor_record(r)
        tensors[name] = arr
    return _assemble(spec, tensors, str(path))


def _assemble(spec: ArchSpec, tensors: dict, origin: str) -> Model:
    from .nets import build

    rng = np.random.default_rng(0)
    model = build(spec, rng)
    expected = dict(_iter_named_tensors(model))
    if set(tensors) != set(expected):
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        raise SpecMismatchError(
            f"{origin}: tensor set does not match spec "
            f"(missing={sorted(missing)}, unexpected={sorted(extra)})")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise SpecMismatchError(
                f"{origin}: {name} has shape {arr.shape}, spec requires "
                f"{expected[name].shape}")
    for i in sorted(model.params):
        bp = model.params[i]
        if isinstance(bp.weight, LatentWeight):
            bp.weight.value = tensors[f"layer{i}.weight"]
        elif bp.weight is not None:
            bp.weight = tensors[f"layer{i}.weight"]
        if bp.bias is not None:
            bp.bias = tensors[f"layer{i}.bias"]
        if bp.bn is not None:
            bp.bn.gamma = tensors[f"layer{i}.bn.gamma"]
            bp.bn.beta = tensors[f"layer{i}.bn.beta"]
            bp.bn.running_mean = tensors[f"layer{i}.bn.running_mean"]
            bp.bn.running_var = tensors[f"layer{i}.bn.running_var"]
            bp.bn.momentum = float(tensors[f"layer{i}.bn.momentum"])
            bp.bn.epsilon = float(tensors[f"layer{i}.bn.epsilon"])
    return model
