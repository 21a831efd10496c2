"""Desk-scale surrogate/victim models: architectures, data, training, I/O.

The dataset is synthetic: each class is an oriented sinusoidal grating
with a per-image random phase and amplitude, buried in pixel noise and
quantized to integer [0, 255] values. Orientation discrimination under
random phase is not linearly separable, which keeps trained models below
ceiling and leaves attacks room to work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .nn_core import (
    DTYPE,
    Batch,
    Conv2d,
    Dense,
    Flatten,
    Network,
    ReLU,
    backward,
    forward,
    param_shapes,
    per_example_loss,
)

# models see (x - 128) / 64; fixed preprocessing, not a trainable parameter
INPUT_SHIFT = 128.0
INPUT_SCALE = 1.0 / 64.0


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple


def build_arch(name: str, input_shape=(1, 14, 14), num_classes=5) -> ArchSpec:
    """Construct one of the named desk-scale architectures.

    cnn_a and cnn_b differ in depth, kernel size and width; mlp has no
    convolutions at all. Transfer experiments need at least two of these.
    """
    c, h, w = input_shape
    if name == "cnn_a":
        layers = (
            Conv2d(c, 6, 3, "valid"),
            ReLU(),
            Conv2d(6, 12, 3, "valid"),
            ReLU(),
            Flatten(),
            Dense(12 * (h - 4) * (w - 4), 24),
            ReLU(),
            Dense(24, num_classes),
        )
    elif name == "cnn_b":
        layers = (
            Conv2d(c, 10, 5, "valid"),
            ReLU(),
            Flatten(),
            Dense(10 * (h - 4) * (w - 4), 32),
            ReLU(),
            Dense(32, num_classes),
        )
    elif name == "mlp":
        layers = (
            Flatten(),
            Dense(c * h * w, 80),
            ReLU(),
            Dense(80, 40),
            ReLU(),
            Dense(40, num_classes),
        )
    else:
        raise ValueError(f"unknown architecture {name!r}")
    return ArchSpec(name, tuple(input_shape), num_classes, layers)


ARCH_NAMES = ("cnn_a", "cnn_b", "mlp")


def init_network(arch: ArchSpec, seed: int) -> Network:
    """Fan-in-scaled uniform init: W ~ U(-a, a) with a = sqrt(1/fan_in), b = 0."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    params = {}
    for idx, spec in enumerate(arch.layers):
        shapes = param_shapes(spec)
        if not shapes:
            continue
        if isinstance(spec, Conv2d):
            fan_in = spec.in_channels * spec.kernel_size**2
        else:
            fan_in = spec.in_features
        bound = math.sqrt(1.0 / fan_in)
        params[idx] = {
            "weight": rng.uniform(-bound, bound, shapes["weight"]),
            "bias": np.zeros(shapes["bias"], dtype=DTYPE),
        }
    return Network(arch.layers, params, arch.input_shape, arch.num_classes,
                   INPUT_SHIFT, INPUT_SCALE)


# --------------------------------------------------------------------------
# Synthetic dataset


@dataclass(frozen=True)
class Dataset:
    train: Batch
    test: Batch
    seed: int
    num_classes: int
    image_shape: tuple[int, int, int]


TRAIN_FRACTION = 0.75  # per class: floor(0.75 * n) train, rest test

AMP_LOW = 32.0
AMP_HIGH = 58.0
NOISE_SIGMA = 55.0


MIN_CLASSES = 3
MIN_PER_CLASS = 50
MIN_SIDE = 8


def generate_dataset(seed: int, num_classes: int, per_class_count: int,
                     image_shape=(1, 14, 14)) -> Dataset:
    """Deterministic class-structured images, quantized to integer [0, 255].

    Class k is a sinusoidal grating at orientation pi*k/K with 2 or 3
    cycles across the image; phase and amplitude are drawn per image, then
    i.i.d. Gaussian pixel noise is added. Identical arguments regenerate
    the dataset bitwise.
    """
    if num_classes < MIN_CLASSES:
        raise ValueError(f"need at least {MIN_CLASSES} classes")
    if per_class_count < MIN_PER_CLASS:
        raise ValueError(f"need at least {MIN_PER_CLASS} images per class")
    c, h, w = image_shape
    if c < 1 or h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"degenerate image shape {image_shape}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    yy, xx = np.mgrid[0:h, 0:w].astype(DTYPE)
    scale = float(max(h, w))

    images = np.empty((num_classes * per_class_count, c, h, w), dtype=DTYPE)
    labels = np.empty(num_classes * per_class_count, dtype=np.int64)
    row = 0
    for k in range(num_classes):
        angle = math.pi * k / num_classes
        cycles = 2.0 + (k % 2)
        u = (math.cos(angle) * xx + math.sin(angle) * yy) / scale
        for _ in range(per_class_count):
            phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(AMP_LOW, AMP_HIGH)
            clean = 128.0 + amp * np.sin(2.0 * math.pi * cycles * u + phase)
            noisy = clean + rng.normal(0.0, NOISE_SIGMA, (c, h, w))
            images[row] = np.clip(np.rint(noisy), 0.0, 255.0)
            labels[row] = k
            row += 1

    n_train = int(TRAIN_FRACTION * per_class_count)
    train_idx, test_idx = [], []
    for k in range(num_classes):
        base = k * per_class_count
        train_idx.extend(range(base, base + n_train))
        test_idx.extend(range(base + n_train, base + per_class_count))
    # shuffle both splits so any prefix is a class-mixed sample
    train_idx = np.array(train_idx)[rng.permutation(len(train_idx))]
    test_idx = np.array(test_idx)[rng.permutation(len(test_idx))]
    return Dataset(
        train=Batch(images[train_idx], labels[train_idx]),
        test=Batch(images[test_idx], labels[test_idx]),
        seed=seed,
        num_classes=num_classes,
        image_shape=tuple(image_shape),
    )


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")


@dataclass
class TrainResult:
    network: Network
    epoch_losses: list[float] = field(default_factory=list)
    test_accuracy: float = 0.0


def accuracy(net: Network, batch: Batch) -> float:
    preds = forward(net, batch.images).argmax(axis=1)
    return float((preds == batch.labels).mean())


def train_with_stats(arch: ArchSpec, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Plain minibatch SGD at constant learning rate; deterministic in cfg.seed."""
    net = init_network(arch, cfg.seed)
    flat = net.flat_params()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    n = len(data.train)
    losses = []
    # overflow in a diverging run is expected; the finiteness checks below
    # turn it into DivergenceError instead of a warning cascade
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                minibatch = Batch(data.train.images[idx], data.train.labels[idx])
                grads = backward(net, minibatch).grad_params
                if cfg.weight_decay:
                    grads = grads + cfg.weight_decay * flat
                flat = flat - cfg.learning_rate * grads
                if not np.isfinite(flat).all():
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}: non-finite "
                        f"parameters (arch={arch.name}, lr={cfg.learning_rate})"
                    )
                net = net.with_flat_params(flat)
            epoch_loss = float(per_example_loss(net, data.train).mean())
            if not math.isfinite(epoch_loss):
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: loss={epoch_loss} "
                    f"(arch={arch.name}, lr={cfg.learning_rate})"
                )
            losses.append(epoch_loss)
    return TrainResult(network=net, epoch_losses=losses, test_accuracy=accuracy(net, data.test))


def train(arch: ArchSpec, data: Dataset, cfg: TrainConfig) -> Network:
    return train_with_stats(arch, data, cfg).network


# --------------------------------------------------------------------------
# Serialization (self-describing containers)


def _layer_to_dict(spec) -> dict:
    if isinstance(spec, Conv2d):
        return {"type": "conv2d", "in": spec.in_channels, "out": spec.out_channels,
                "kernel": spec.kernel_size, "padding": spec.padding}
    if isinstance(spec, Dense):
        return {"type": "dense", "in": spec.in_features, "out": spec.out_features}
    if isinstance(spec, ReLU):
        return {"type": "relu"}
    if isinstance(spec, Flatten):
        return {"type": "flatten"}
    raise ValueError(f"unsupported layer {spec!r}")


def _layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "conv2d":
        return Conv2d(d["in"], d["out"], d["kernel"], d["padding"])
    if kind == "dense":
        return Dense(d["in"], d["out"])
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    raise container.ContainerError(f"unknown layer type {kind!r}")


def save(net: Network) -> bytes:
    """Serialize a network; load(save(net)) is a bitwise round-trip."""
    meta = {
        "format": "network",
        "layers": [_layer_to_dict(s) for s in net.layers],
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "input_shift": net.input_shift,
        "input_scale": net.input_scale,
    }
    tensors = {}
    for slot in net.param_layout:
        tensors[f"layer{slot.layer}.{slot.name}"] = net.params[slot.layer][slot.name]
    return container.pack(meta, tensors)


def load(data: bytes) -> Network:
    meta, tensors = container.unpack(data)
    if meta.get("format") != "network":
        raise container.ContainerError(f"not a network container: {meta.get('format')!r}")
    layers = tuple(_layer_from_dict(d) for d in meta["layers"])
    params: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        head, pname = name.split(".", 1)
        params.setdefault(int(head.removeprefix("layer")), {})[pname] = arr
    return Network(layers, params, tuple(meta["input_shape"]), meta["num_classes"],
                   meta["input_shift"], meta["input_scale"])


def save_dataset(data: Dataset) -> bytes:
    """Single container: tensors "images" / "labels", train split first."""
    meta = {
        "format": "dataset",
        "seed": data.seed,
        "num_classes": data.num_classes,
        "image_shape": list(data.image_shape),
        "train_count": len(data.train),
    }
    images = np.concatenate([data.train.images, data.test.images])
    labels = np.concatenate([data.train.labels, data.test.labels]).astype(DTYPE)
    return container.pack(meta, {"images": images, "labels": labels})


def load_dataset(data: bytes) -> Dataset:
    meta, tensors = container.unpack(data)
    if meta.get("format") != "dataset":
        raise container.ContainerError(f"not a dataset container: {meta.get('format')!r}")
    images = tensors["images"]
    labels = tensors["labels"].astype(np.int64)
    n_train = meta["train_count"]
    return Dataset(
        train=Batch(images[:n_train], labels[:n_train]),
        test=Batch(images[n_train:], labels[n_train:]),
        seed=meta["seed"],
        num_classes=meta["num_classes"],
        image_shape=tuple(meta["image_shape"]),
    )
