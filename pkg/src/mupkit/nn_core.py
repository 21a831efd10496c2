"""Minimal tensor network with exact reverse-mode gradients.

Supports dense, 2D convolution (stride 1, "same" or "valid" zero padding),
ReLU and flatten layers with a softmax cross-entropy head. One backward
pass yields the gradient with respect to the input image and every
parameter, which is all the attack generators need.

Everything is float64 and pure numpy. Operation order inside each kernel
is fixed (including the conv scatter loops), so identical inputs produce
bitwise-identical outputs. No function mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


class ShapeError(ValueError):
    """Tensor shapes do not compose; the message names the offending layer."""


# --------------------------------------------------------------------------
# Layer descriptors


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    padding: str = "same"  # "same" needs an odd kernel; "valid" shrinks


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Dense | Conv2d | ReLU | Flatten


def _layer_output_shape(spec: LayerSpec, idx: int, shape: tuple) -> tuple:
    name = f"layer {idx} ({type(spec).__name__})"
    if isinstance(spec, Conv2d):
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise ShapeError(f"{name}: expected input ({spec.in_channels}, H, W), got {shape}")
        _, h, w = shape
        k = spec.kernel_size
        if spec.padding == "same":
            if k % 2 == 0:
                raise ShapeError(f"{name}: 'same' padding requires an odd kernel, got {k}")
            return (spec.out_channels, h, w)
        if spec.padding != "valid":
            raise ShapeError(f"{name}: unknown padding {spec.padding!r}")
        if h < k or w < k:
            raise ShapeError(f"{name}: kernel {k} larger than input {h}x{w}")
        return (spec.out_channels, h - k + 1, w - k + 1)
    if isinstance(spec, Dense):
        if len(shape) != 1 or shape[0] != spec.in_features:
            raise ShapeError(f"{name}: expected input ({spec.in_features},), got {shape}")
        return (spec.out_features,)
    if isinstance(spec, ReLU):
        return shape
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    raise ShapeError(f"{name}: unsupported layer type")


def param_shapes(spec: LayerSpec) -> dict[str, tuple]:
    """Parameter tensor shapes owned by a layer, weight listed before bias."""
    if isinstance(spec, Dense):
        return {"weight": (spec.out_features, spec.in_features), "bias": (spec.out_features,)}
    if isinstance(spec, Conv2d):
        k = spec.kernel_size
        return {"weight": (spec.out_channels, spec.in_channels, k, k), "bias": (spec.out_channels,)}
    return {}


@dataclass(frozen=True)
class ParamSlot:
    """One named parameter tensor's place in the global flat layout."""

    layer: int
    name: str
    shape: tuple
    offset: int
    size: int


class Network:
    """Ordered layers plus named parameter tensors.

    The flat parameter layout enumerates layers in order, weight before
    bias, each tensor row-major. It is a bijection between global indices
    0..P-1 and scalar parameter slots, reconstructed from the layer list
    alone so it survives save/load unchanged.

    input_shift/input_scale are fixed preprocessing constants baked into
    the model: layer 0 sees (x - shift) * scale. They are not parameters,
    so they are neither trainable nor maskable; attacks keep operating on
    raw [0, 255] pixels.
    """

    def __init__(self, layers, params, input_shape, num_classes,
                 input_shift: float = 0.0, input_scale: float = 1.0):
        self.layers: tuple[LayerSpec, ...] = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.input_shift = float(input_shift)
        self.input_scale = float(input_scale)

        shapes = []
        shape = self.input_shape
        for idx, spec in enumerate(self.layers):
            shape = _layer_output_shape(spec, idx, shape)
            shapes.append(shape)
        self.output_shapes: tuple[tuple, ...] = tuple(shapes)
        if shape != (self.num_classes,):
            raise ShapeError(
                f"network output shape {shape} does not match {self.num_classes} classes"
            )

        self.params: dict[int, dict[str, np.ndarray]] = {}
        layout = []
        offset = 0
        for idx, spec in enumerate(self.layers):
            expected = param_shapes(spec)
            if not expected:
                continue
            given = params.get(idx)
            if given is None or set(given) != set(expected):
                raise ShapeError(f"layer {idx}: parameters {sorted(expected)} required")
            store = {}
            for name in ("weight", "bias"):
                arr = np.ascontiguousarray(given[name], dtype=DTYPE)
                if arr.shape != expected[name]:
                    raise ShapeError(
                        f"layer {idx} {name}: expected shape {expected[name]}, got {arr.shape}"
                    )
                store[name] = arr
                layout.append(ParamSlot(idx, name, arr.shape, offset, arr.size))
                offset += arr.size
            self.params[idx] = store
        self.param_layout: tuple[ParamSlot, ...] = tuple(layout)
        self.num_params: int = offset

    def flat_params(self) -> np.ndarray:
        """Copy of all parameters in the canonical flat order."""
        flat = np.empty(self.num_params, dtype=DTYPE)
        for slot in self.param_layout:
            flat[slot.offset : slot.offset + slot.size] = self.params[slot.layer][
                slot.name
            ].ravel()
        return flat

    def with_flat_params(self, flat: np.ndarray) -> "Network":
        """New network with parameters taken from a flat vector."""
        if flat.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {flat.shape}")
        params: dict[int, dict[str, np.ndarray]] = {}
        for slot in self.param_layout:
            chunk = flat[slot.offset : slot.offset + slot.size].reshape(slot.shape)
            params.setdefault(slot.layer, {})[slot.name] = chunk.copy()
        return Network(self.layers, params, self.input_shape, self.num_classes,
                       self.input_shift, self.input_scale)


# --------------------------------------------------------------------------
# Batch / gradients


@dataclass(frozen=True)
class Batch:
    """Images [B, C, H, W] with pixel values in [0, 255] and integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=DTYPE)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError(f"images must be [B, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {images.shape[0]}")
        if images.size and (images.min() < PIXEL_MIN or images.max() > PIXEL_MAX):
            raise ValueError("image values must lie within [0, 255]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class GradPair:
    """Gradient of the (optionally masked) loss at one point.

    grad_input matches the image batch shape; grad_params is flat and
    aligned with Network.param_layout. Entries at masked positions are 0,
    the true derivative through the elementwise mask multiply.
    """

    grad_input: np.ndarray
    grad_params: np.ndarray


# --------------------------------------------------------------------------
# Forward / backward kernels


def _effective_params(net: Network, mask) -> dict[int, dict[str, np.ndarray]]:
    if mask is None:
        return net.params
    bits = np.asarray(mask, dtype=DTYPE)
    if bits.shape != (net.num_params,):
        raise ShapeError(f"mask length {bits.shape} does not match {net.num_params} parameters")
    eff: dict[int, dict[str, np.ndarray]] = {}
    for slot in net.param_layout:
        piece = bits[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        eff.setdefault(slot.layer, {})[slot.name] = net.params[slot.layer][slot.name] * piece
    return eff


def _conv_im2col(x: np.ndarray, k: int, padding: str):
    if padding == "same":
        p = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, C, oh, ow, k, k]
    b, c, oh, ow = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, oh, ow, c * k * k
    )
    return cols, xp.shape


def _forward(net: Network, images: np.ndarray, eff, act_scales, *, keep_caches: bool):
    if images.ndim != 4 or images.shape[1:] != net.input_shape:
        raise ShapeError(
            f"input shape {images.shape[1:]} does not match network input {net.input_shape}"
        )
    x = (np.ascontiguousarray(images, dtype=DTYPE) - net.input_shift) * net.input_scale
    caches = []
    for idx, spec in enumerate(net.layers):
        cache = None
        if isinstance(spec, Conv2d):
            w = eff[idx]["weight"]
            bias = eff[idx]["bias"]
            cols, padded_shape = _conv_im2col(x, spec.kernel_size, spec.padding)
            wf = w.reshape(spec.out_channels, -1)
            y = np.tensordot(cols, wf, axes=([3], [1])) + bias  # [B, oh, ow, Cout]
            out = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
            cache = (cols, padded_shape)
            x = out
        elif isinstance(spec, Dense):
            w = eff[idx]["weight"]
            bias = eff[idx]["bias"]
            cache = x
            x = x @ w.T + bias
        elif isinstance(spec, ReLU):
            cache = x > 0
            x = np.maximum(x, 0.0)
        elif isinstance(spec, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        if act_scales is not None and idx in act_scales:
            x = x * act_scales[idx]
        if keep_caches:
            caches.append(cache)
    return x, caches


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Per-example cross-entropy and softmax probabilities, numerically stable."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    per_example = np.log(total) - shifted[np.arange(logits.shape[0]), labels]
    return per_example, exp / total[:, None]


def forward(net: Network, images: np.ndarray, mask=None, act_scales=None) -> np.ndarray:
    """Logits [B, K], computed with effective parameters theta*mask.

    act_scales optionally maps layer index -> array broadcastable to that
    layer's output; the output is multiplied elementwise after the layer.
    The attack module uses this hook for the random-dropout baseline.
    Stored network parameters are never mutated.
    """
    eff = _effective_params(net, mask)
    logits, _ = _forward(net, images, eff, act_scales, keep_caches=False)
    return logits


def per_example_loss(net: Network, batch: Batch, mask=None, act_scales=None) -> np.ndarray:
    logits = forward(net, batch.images, mask, act_scales)
    per_example, _ = _softmax_ce(logits, batch.labels)
    return per_example


def loss(net: Network, batch: Batch, mask=None, act_scales=None) -> float:
    """Mean softmax cross-entropy over the batch."""
    return float(per_example_loss(net, batch, mask, act_scales).mean())


def backward(net: Network, batch: Batch, mask=None, act_scales=None) -> GradPair:
    """Exact reverse-mode gradient of loss() at the given point.

    With a mask, gradients are of the masked loss; parameter gradients are
    reported with respect to the pre-mask parameters (zero where masked).
    """
    return backward_at(net, batch.images, batch.labels, mask, act_scales)


def backward_at(net: Network, images: np.ndarray, labels: np.ndarray,
                mask=None, act_scales=None) -> GradPair:
    """backward() on raw arrays, without the Batch pixel-range check.

    Attack inner gradients evaluate scaled or noise-shifted copies that
    legitimately leave [0, 255]; everything else should go through
    backward().
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    eff = _effective_params(net, mask)
    logits, caches = _forward(net, images, eff, act_scales, keep_caches=True)
    per_example, probs = _softmax_ce(logits, labels)
    b = images.shape[0]

    dy = probs.copy()
    dy[np.arange(b), labels] -= 1.0
    dy /= b

    grad_params = np.zeros(net.num_params, dtype=DTYPE)
    slots = {(slot.layer, slot.name): slot for slot in net.param_layout}

    def store(idx: int, name: str, grad: np.ndarray) -> None:
        slot = slots[(idx, name)]
        grad_params[slot.offset : slot.offset + slot.size] = grad.ravel()

    for idx in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[idx]
        if act_scales is not None and idx in act_scales:
            dy = dy * act_scales[idx]
        cache = caches[idx]
        if isinstance(spec, Conv2d):
            cols, padded_shape = cache
            k = spec.kernel_size
            wf = eff[idx]["weight"].reshape(spec.out_channels, -1)
            dyt = dy.transpose(0, 2, 3, 1)  # [B, oh, ow, Cout]
            store(idx, "weight", np.tensordot(dyt, cols, axes=([0, 1, 2], [0, 1, 2])))
            store(idx, "bias", dy.sum(axis=(0, 2, 3)))
            dcols = np.tensordot(dyt, wf, axes=([3], [0]))  # [B, oh, ow, Cin*k*k]
            batch_n, oh, ow = dcols.shape[:3]
            dwin = dcols.reshape(batch_n, oh, ow, spec.in_channels, k, k).transpose(
                0, 3, 1, 2, 4, 5
            )
            dxp = np.zeros(padded_shape, dtype=DTYPE)
            for i in range(k):  # fixed scatter order keeps backward bitwise deterministic
                for j in range(k):
                    dxp[:, :, i : i + oh, j : j + ow] += dwin[:, :, :, :, i, j]
            if spec.padding == "same":
                p = (k - 1) // 2
                dy = dxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p]
            else:
                dy = dxp
        elif isinstance(spec, Dense):
            x_in = cache
            store(idx, "weight", dy.T @ x_in)
            store(idx, "bias", dy.sum(axis=0))
            dy = dy @ eff[idx]["weight"]
        elif isinstance(spec, ReLU):
            dy = dy * cache
        elif isinstance(spec, Flatten):
            dy = dy.reshape(cache)

    if mask is not None:
        grad_params *= np.asarray(mask, dtype=DTYPE)
    grad_input = np.ascontiguousarray(dy) * net.input_scale  # chain through preprocessing
    return GradPair(grad_input=grad_input, grad_params=grad_params)


def fd_gradient(net: Network, batch: Batch, coordinate, h: float, mask=None) -> float:
    """Central finite difference of loss() along one coordinate.

    coordinate is ("input", i) with i a flat index into the image batch,
    or ("param", i) with i a global parameter index. Test oracle for
    backward; intentionally routed through loss() alone.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    kind, index = coordinate
    if kind == "input":
        flat = batch.images.ravel()
        plus = flat.copy()
        plus[index] += h
        minus = flat.copy()
        minus[index] -= h
        shape = batch.images.shape
        loss_plus = _loss_at_images(net, plus.reshape(shape), batch.labels, mask)
        loss_minus = _loss_at_images(net, minus.reshape(shape), batch.labels, mask)
    elif kind == "param":
        flat = net.flat_params()
        plus = flat.copy()
        plus[index] += h
        minus = flat.copy()
        minus[index] -= h
        loss_plus = loss(net.with_flat_params(plus), batch, mask)
        loss_minus = loss(net.with_flat_params(minus), batch, mask)
    else:
        raise ValueError(f"coordinate kind must be 'input' or 'param', got {kind!r}")
    return (loss_plus - loss_minus) / (2.0 * h)


def _loss_at_images(net, images, labels, mask):
    # bypasses Batch range validation: FD probes may step just outside [0, 255]
    eff = _effective_params(net, mask)
    logits, _ = _forward(net, images, eff, None, keep_caches=False)
    per_example, _ = _softmax_ce(logits, labels)
    return float(per_example.mean())
