"""Optimization loop, distillation losses, teacher training and the
three-stage soft-target recipe.

Binary layers step at base_lr * schedule * lr_scale, where lr_scale is the
layer's fan-dependent multiplier; the scale multiplies the step size, not
the gradient, so Adam's moment statistics see raw gradients. Latent weights
are clipped into [-1, 1] immediately after every update.
"""

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .binary import LatentWeight
from .nets import ArchSpec, Model, build
from .network import backward, forward, predict_logits, topk_accuracy
from .ops import scale_layer, scale_layer_backward, softmax, softmax_xent

SOFT_MAGIC = b"SOFT"
SOFT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss; names the first
    layer with non-finite values."""


class CacheMismatchError(ValueError):
    """Soft-target cache does not belong to the dataset it is used with."""


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    base_lr: float = 0.001
    batch_size: int = 64
    epochs: int = 5
    optimizer: str = "adam"            # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    momentum: float = 0.9              # sgd only
    seed: int = 0
    lr_schedule: str = "constant"      # constant | step
    step_factor: float = 0.1
    step_every_n_epochs: int = 10
    topk: int = 5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")

    def schedule_multiplier(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return 1.0
        if self.lr_schedule == "step":
            return self.step_factor ** (epoch // self.step_every_n_epochs)
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def from_json(cls, text: str, **overrides) -> "TrainConfig":
        data = json.loads(text)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


@dataclass
class DistillConfig:
    temperature: float = 4.0
    alpha: float = 0.5                 # weight of the soft term
    phase: str = "hard_only"           # hard_only | soft_only | combined
    teacher_source: str | None = None  # cache path, or None for live teacher

    def __post_init__(self):
        if self.temperature < 1:
            raise ValueError("temperature must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.phase not in ("hard_only", "soft_only", "combined"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "soft_only":
            object.__setattr__(self, "alpha", 1.0)
        elif self.phase == "hard_only":
            object.__setattr__(self, "alpha", 0.0)

    @classmethod
    def from_json(cls, text: str, **overrides) -> "DistillConfig":
        data = json.loads(text)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_top1: float
    val_topk: float
    wall_s: float
    saturation: dict = field(default_factory=dict)   # layer index -> fraction

    def __post_init__(self):
        for v in (self.train_acc, self.val_top1, self.val_topk):
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"accuracy {v} outside [0, 1]")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class Leaf:
    key: tuple
    array: np.ndarray
    lr_scale: float = 1.0
    clip: bool = False
    owner: object = None   # BlockParams holding this array, for rebinding


def collect_leaves(model: Model) -> list[Leaf]:
    leaves = []
    for i in sorted(model.params):
        bp = model.params[i]
        if isinstance(bp.weight, LatentWeight):
            leaves.append(Leaf((i, "weight"), bp.weight.value,
                               lr_scale=bp.weight.lr_scale, clip=True))
        elif bp.weight is not None:
            leaves.append(Leaf((i, "weight"), bp.weight))
        if bp.bias is not None:
            leaves.append(Leaf((i, "bias"), bp.bias))
        if bp.bn is not None:
            leaves.append(Leaf((i, "gamma"), bp.bn.gamma))
            leaves.append(Leaf((i, "beta"), bp.bn.beta))
    return leaves


class Optimizer:
    """Adam (default) or momentum SGD over a fixed leaf set."""

    def __init__(self, leaves: list[Leaf], config: TrainConfig):
        self.leaves = leaves
        self.config = config
        self.step_count = 0
        self._m = {lf.key: np.zeros_like(lf.array) for lf in leaves}
        if config.optimizer == "adam":
            self._v = {lf.key: np.zeros_like(lf.array) for lf in leaves}

    def step(self, grads: dict, lr_multiplier: float = 1.0):
        """One update. Latent leaves are clipped to [-1, 1] afterwards."""
        self.step_count += 1
        cfg = self.config
        t = self.step_count
        for lf in self.leaves:
            g = grads.get(lf.key)
            if g is None:
                continue
            lr = cfg.base_lr * lr_multiplier * lf.lr_scale
            if cfg.optimizer == "adam":
                m = self._m[lf.key]
                v = self._v[lf.key]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1 ** t)
                vhat = v / (1 - cfg.beta2 ** t)
                lf.array -= lr * mhat / (np.sqrt(vhat) + cfg.adam_epsilon)
            else:
                buf = self._m[lf.key]
                buf *= cfg.momentum
                buf += g
                lf.array -= lr * buf
            if lf.clip:
                np.clip(lf.array, -1.0, 1.0, out=lf.array)


def optimizer_step(optimizer: Optimizer, grads: dict, lr_multiplier: float = 1.0):
    optimizer.step(grads, lr_multiplier)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def hard_loss(logits: np.ndarray, labels: np.ndarray, scaling_factor: float = 1.0):
    """Cross-entropy on scaled logits; gradient w.r.t. the raw logits."""
    scaled = scale_layer(logits, scaling_factor)
    loss, grad = softmax_xent(scaled, labels)
    return loss, scale_layer_backward(grad, scaling_factor)


def soft_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
              temperature: float):
    """Distillation term: T^2 * CE(softmax(z_s/T), softmax(z_t/T)), batch
    mean. The T^2 factor keeps gradient magnitudes comparable across T."""
    t = float(temperature)
    teacher_probs = softmax(teacher_logits / t)
    loss, grad = softmax_xent(student_logits / t, teacher_probs)
    return t * t * loss, t * grad


def combined_loss(student_logits: np.ndarray, teacher_logits: np.ndarray | None,
                  labels: np.ndarray, cfg: DistillConfig,
                  scaling_factor: float = 1.0):
    """alpha * soft + (1 - alpha) * hard. The hard term goes through the
    scaling layer; the soft term uses only its temperature."""
    alpha = cfg.alpha
    if alpha == 0.0 or teacher_logits is None:
        return hard_loss(student_logits, labels, scaling_factor)
    sl, sg = soft_loss(student_logits, teacher_logits, cfg.temperature)
    if alpha == 1.0:
        return sl, sg
    hl, hg = hard_loss(student_logits, labels, scaling_factor)
    return alpha * sl + (1 - alpha) * hl, alpha * sg + (1 - alpha) * hg


# ---------------------------------------------------------------------------
# Soft-target cache
# ---------------------------------------------------------------------------

@dataclass
class SoftTargetCache:
    logits: np.ndarray          # (samples, classes) float32, raw teacher logits
    dataset_checksum: bytes     # 32-byte digest of the source dataset

    @property
    def sample_count(self) -> int:
        return self.logits.shape[0]

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def save(self, path):
        with open(path, "wb") as f:
            f.write(SOFT_MAGIC)
            f.write(struct.pack("<I", SOFT_VERSION))
            f.write(struct.pack("<Q", self.sample_count))
            f.write(struct.pack("<I", self.class_count))
            f.write(self.dataset_checksum)
            f.write(np.ascontiguousarray(self.logits, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, expected_checksum: bytes | None = None) -> "SoftTargetCache":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != SOFT_MAGIC:
            raise CacheMismatchError(f"{path}: not a soft-target cache file")
        version, = struct.unpack_from("<I", data, 4)
        if version != SOFT_VERSION:
            raise CacheMismatchError(f"{path}: cache version {version}")
        n, = struct.unpack_from("<Q", data, 8)
        k, = struct.unpack_from("<I", data, 16)
        checksum = data[20:52]
        body = data[52:]
        if len(body) != n * k * 4:
            raise CacheMismatchError(f"{path}: truncated logits payload")
        logits = np.frombuffer(body, dtype="<f4").reshape(n, k).copy()
        cache = cls(logits=logits, dataset_checksum=checksum)
        if expected_checksum is not None and checksum != expected_checksum:
            raise CacheMismatchError(
                f"{path}: cache was generated from a different dataset")
        return cache


def generate_soft_targets(teacher: Model, dataset, batch_size: int = 256) -> SoftTargetCache:
    """Teacher logits over the dataset in canonical order. Raw logits are
    stored so any temperature can be applied later."""
    logits = predict_logits(teacher, dataset.images, batch_size)
    return SoftTargetCache(logits=logits.astype(np.float32),
                           dataset_checksum=dataset.checksum)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def saturation_fraction(w: np.ndarray, threshold: float = 0.9) -> float:
    return float((np.abs(w) > threshold).mean())


def _check_finite(model: Model, logits: np.ndarray, caches, loss: float):
    if np.isfinite(loss):
        return
    from .network import ConvStage, DenseStage
    from .ops import first_nonfinite_layer
    named = []
    for st, cache in caches:
        if isinstance(st, ConvStage):
            named.append((f"layer{st.entry_index} (conv block)", cache[7]))
        elif isinstance(st, DenseStage):
            named.append((f"layer{st.entry_index} (dense block)", cache[4]))
    named.append(("logits", logits))
    bad = first_nonfinite_layer(named) or "loss"
    raise TrainingDivergedError(
        f"non-finite loss; first non-finite values at {bad}")


def train(model: Model, dataset, config: TrainConfig,
          distill: DistillConfig | None = None,
          soft_targets: SoftTargetCache | None = None,
          val_dataset=None, callbacks=None) -> list[EpochMetrics]:
    """Shuffled minibatch training. Returns one EpochMetrics per epoch.

    `soft_targets` must be given for soft_only / combined phases and is
    indexed by dataset position, so shuffling keeps teacher rows aligned.
    Deterministic for a fixed config seed.
    """
    if distill is None:
        distill = DistillConfig(phase="hard_only")
    if distill.phase != "hard_only":
        if soft_targets is None:
            raise ValueError(f"phase {distill.phase} requires soft targets")
        if soft_targets.dataset_checksum != dataset.checksum:
            raise CacheMismatchError(
                "soft-target cache does not match the training dataset")
        if soft_targets.sample_count != dataset.images.shape[0]:
            raise CacheMismatchError("soft-target row count != dataset size")
    rng = np.random.default_rng(config.seed)
    optimizer = Optimizer(collect_leaves(model), config)
    n = dataset.images.shape[0]
    metrics: list[EpochMetrics] = []
    scaling = model.spec.scaling_factor
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        lr_mult = config.schedule_multiplier(epoch)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            tb = soft_targets.logits[idx] if soft_targets is not None else None
            logits, caches = forward(model, xb, mode="train", rng=rng)
            loss, grad = combined_loss(logits, tb, yb, distill, scaling)
            _check_finite(model, logits, caches, loss)
            grads = backward(model, caches, grad)
            optimizer.step(grads, lr_mult)
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == yb).sum())
        train_loss = float(np.sum(losses) / n)
        train_acc = correct / n
        if val_dataset is not None:
            vl = predict_logits(model, val_dataset.images)
            val_top1 = topk_accuracy(vl, val_dataset.labels, 1)
            val_topk = topk_accuracy(vl, val_dataset.labels, config.topk)
        else:
            val_top1 = val_topk = float("nan")
        sat = {i: saturation_fraction(lw.value) for i, lw in model.latent_layers()}
        em = EpochMetrics(epoch=epoch, train_loss=train_loss,
                          train_acc=train_acc, val_top1=val_top1,
                          val_topk=val_topk,
                          wall_s=time.perf_counter() - t0, saturation=sat)
        metrics.append(em)
        if callbacks:
            for cb in callbacks:
                cb(epoch, model, em)
    return metrics


def train_teacher(dataset, spec: ArchSpec, config: TrainConfig,
                  val_dataset=None):
    """Train the small all-real teacher CNN. Returns (model, metrics)."""
    rng = np.random.default_rng(config.seed)
    model = build(spec, rng)
    metrics = train(model, dataset, config, val_dataset=val_dataset)
    return model, metrics


# ---------------------------------------------------------------------------
# Three-stage distillation recipe
# ---------------------------------------------------------------------------

def distillation_recipe(spec: ArchSpec, dataset, val_dataset,
                        soft_targets: SoftTargetCache, config: TrainConfig,
                        temperature: float = 4.0, alpha: float = 0.5,
                        callbacks=None) -> dict:
    """Hard baseline, then soft-only pretraining, then combined fine-tuning
    from the soft-only checkpoint. Returns per-phase models and metrics."""
    results = {}

    hard_model = build(spec, np.random.default_rng(config.seed))
    results["hard_only"] = {
        "model": hard_model,
        "metrics": train(hard_model, dataset, config,
                         DistillConfig(phase="hard_only"),
                         val_dataset=val_dataset, callbacks=callbacks),
    }

    student = build(spec, np.random.default_rng(config.seed))
    results["soft_only"] = {
        "model": student,
        "metrics": train(student, dataset, config,
                         DistillConfig(phase="soft_only", temperature=temperature),
                         soft_targets=soft_targets, val_dataset=val_dataset,
                         callbacks=callbacks),
    }

    results["combined"] = {
        "model": student,
        "metrics": train(student, dataset, config,
                         DistillConfig(phase="combined", temperature=temperature,
                                       alpha=alpha),
                         soft_targets=soft_targets, val_dataset=val_dataset,
                         callbacks=callbacks),
    }
    return results
