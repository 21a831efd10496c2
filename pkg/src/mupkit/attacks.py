"""Adversarial-example generators.

One update rule covers the whole family: FGSM, I-FGSM and MIM use the
plain input gradient; SIM and TAIG-R replace it with gradients summed
over scaled or interpolated-plus-noise copies; masking=mup zeroes the
currently least important surrogate parameters before each gradient,
masking=gn rescales randomly dropped activations instead. All variants
step by beta * sign(momentum) and stay inside the epsilon ball.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import importance
from .nn_core import (
    DTYPE,
    PIXEL_MAX,
    PIXEL_MIN,
    Batch,
    Network,
    ReLU,
    ShapeError,
    backward_at,
    forward,
    per_example_loss,
)

INNER_KINDS = ("plain", "sim", "taigr")
MASKING_KINDS = ("none", "mup", "gn")
METHOD_NAMES = ("fgsm", "ifgsm", "mim", "sim", "taigr")

# SeedSequence stream tags, so the two noise consumers never collide
_GN_STREAM = 0x61
_TAIGR_STREAM = 0x7A


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for run_attack. Defaults follow the usual transfer setup:
    epsilon 16, step 2, 10 iterations, momentum 1, 5 scale copies, 20
    interpolation samples."""

    epsilon: float = 16.0
    beta: float = 2.0
    iterations: int = 10
    mu: float = 1.0
    inner: str = "plain"
    sim_m: int = 5
    taigr_s: int = 20
    masking: str = "none"
    mup_ratio: float = 0.0
    mup_metric: str = "taylor"
    mask_biases: bool = True
    gn_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not self.epsilon > 0:
            problems.append(f"epsilon must be > 0, got {self.epsilon}")
        if not self.beta > 0:
            problems.append(f"beta must be > 0, got {self.beta}")
        if self.iterations < 1:
            problems.append(f"iterations must be >= 1, got {self.iterations}")
        if self.mu < 0:
            problems.append(f"mu must be >= 0, got {self.mu}")
        if self.inner not in INNER_KINDS:
            problems.append(f"inner must be one of {INNER_KINDS}, got {self.inner!r}")
        if self.sim_m < 1:
            problems.append(f"sim_m must be >= 1, got {self.sim_m}")
        if self.taigr_s < 1:
            problems.append(f"taigr_s must be >= 1, got {self.taigr_s}")
        if self.masking not in MASKING_KINDS:
            problems.append(f"masking must be one of {MASKING_KINDS}, got {self.masking!r}")
        if not 0.0 <= self.mup_ratio < 1.0:
            problems.append(f"mup_ratio must be in [0, 1), got {self.mup_ratio}")
        if self.mup_metric not in ("taylor", "magnitude"):
            problems.append(f"mup_metric must be taylor or magnitude, got {self.mup_metric!r}")
        if not 0.0 < self.gn_p < 1.0:
            problems.append(f"gn_p must be in (0, 1), got {self.gn_p}")
        if self.seed < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        if problems:
            raise ValueError("invalid attack config: " + "; ".join(problems))


def preset(method: str, **overrides) -> AttackConfig:
    """Named optimizer presets over AttackConfig.

    fgsm is the one-step reduction (N=1, mu=0, step=epsilon); ifgsm drops
    momentum; mim/sim/taigr differ only in the inner gradient.
    """
    bases = {
        "fgsm": {"iterations": 1, "mu": 0.0, "inner": "plain"},
        "ifgsm": {"mu": 0.0, "inner": "plain"},
        "mim": {"inner": "plain"},
        "sim": {"inner": "sim"},
        "taigr": {"inner": "taigr"},
    }
    if method not in bases:
        raise ValueError(f"unknown method {method!r}, expected one of {METHOD_NAMES}")
    cfg = AttackConfig(**{**bases[method], **overrides})
    if method == "fgsm" and "beta" not in overrides:
        cfg = replace(cfg, beta=cfg.epsilon)
    return cfg


# per-method masking ratios that worked best in the original sweeps
TUNED_RATIOS = {"fgsm": 0.15, "ifgsm": 0.15, "mim": 0.15, "sim": 0.30, "taigr": 0.25}


def method_config(spec: str, seed: int = 0, ratio=None, metric: str = "taylor",
                  gn_p: float = 0.1, **overrides) -> AttackConfig:
    """Parse a method spec string into a config.

    Grammar: "<base>" for the unmasked attack, "mup-<base>" or "gn-<base>"
    for the wrapped variants, base one of fgsm/ifgsm/mim/sim/taigr. The
    mup ratio defaults to the tuned per-method preset.
    """
    wrapper, _, rest = spec.partition("-")
    if wrapper in ("mup", "gn") and rest:
        base = rest
    else:
        wrapper, base = "", spec
    if base not in METHOD_NAMES:
        raise ValueError(f"unknown method spec {spec!r}")
    if wrapper == "mup":
        r = TUNED_RATIOS[base] if ratio is None else float(ratio)
        return preset(base, seed=seed, masking="mup", mup_ratio=r,
                      mup_metric=metric, **overrides)
    if wrapper == "gn":
        return preset(base, seed=seed, masking="gn", gn_p=gn_p, **overrides)
    return preset(base, seed=seed, **overrides)


@dataclass
class AttackState:
    """Loop state: current iterate, accumulated momentum, step counter."""

    x: np.ndarray
    g: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class AdvResult:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    whitebox_success: np.ndarray  # bool [B]: surrogate top-1 != label on x_N
    loss_trace: np.ndarray  # [N+1, B] unmasked surrogate loss at each iterate
    config: AttackConfig
    mask_trace: tuple = ()  # per-iteration ParamMask records when requested

    def __len__(self) -> int:
        return self.clean.shape[0]


def clip_ball(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the L-inf ball around x0 intersected with [0, 255]."""
    if x.shape != x0.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x0.shape}")
    return np.clip(np.clip(x, x0 - eps, x0 + eps), PIXEL_MIN, PIXEL_MAX)


class ZeroNoise:
    """RNG stub drawing all-zero noise; for degenerate-case tests."""

    def uniform(self, low, high, size):
        return np.zeros(size, dtype=DTYPE)


def inner_gradient(net: Network, images: np.ndarray, labels: np.ndarray,
                   cfg: AttackConfig, mask=None, act_scales=None,
                   rngs=None) -> np.ndarray:
    """Gradient of the configured attack objective with respect to images.

    plain: d/dx L(x). sim: d/dx of the loss summed over halved copies
    x / 2^i, i = 0..m-1. taigr: d/dx of the loss summed over (i/S) * x + u_i,
    i = 1..S, with u_i uniform in [-eps, eps] per coordinate, drawn fresh
    from rngs[b] for example b. Scaled copies are evaluated as one stacked
    batch; the chain factors from the copy transforms are applied here.
    """
    if cfg.inner == "plain":
        return backward_at(net, images, labels, mask, act_scales).grad_input

    b = images.shape[0]
    if cfg.inner == "sim":
        m = cfg.sim_m
        coeffs = [0.5**i for i in range(m)]
        stacked = np.concatenate([c * images for c in coeffs])
    elif cfg.inner == "taigr":
        if rngs is None:
            raise ValueError("taigr needs per-example RNG streams")
        s = cfg.taigr_s
        coeffs = [i / s for i in range(1, s + 1)]
        noise = np.stack(
            [rngs[j].uniform(-cfg.epsilon, cfg.epsilon, (s,) + images.shape[1:])
             for j in range(b)]
        )  # [B, S, C, H, W]
        stacked = np.concatenate([c * images for c in coeffs])
        stacked += noise.transpose(1, 0, 2, 3, 4).reshape(stacked.shape)
    else:
        raise ValueError(f"unknown inner gradient {cfg.inner!r}")

    copies = len(coeffs)
    grads = backward_at(net, stacked, np.tile(labels, copies), mask, act_scales).grad_input
    # grads is of the mean loss over copies*b rows; undo the mean over
    # copies and chain through each copy's scale factor
    delta = (copies * coeffs[0]) * grads[:b]
    for i in range(1, copies):
        delta += (copies * coeffs[i]) * grads[i * b : (i + 1) * b]
    return delta


def gn_scales(net: Network, rng, p: float) -> dict[int, np.ndarray]:
    """Fresh dropout plan: for every hidden activation (each ReLU output),
    a Bernoulli(keep = 1-p) mask with 1/(1-p) rescaling, shared across the
    batch. Returns {layer index: multiplicative scale array}."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    keep = 1.0 - p
    scales = {}
    for idx, spec in enumerate(net.layers):
        if isinstance(spec, ReLU):
            kept = rng.random(net.output_shapes[idx]) >= p
            scales[idx] = kept.astype(DTYPE) / keep
    return scales


def taigr_rng_streams(seed: int, count: int, example_offset: int = 0) -> list:
    """Per-example noise streams keyed by global example index, so results
    do not depend on how a larger evaluation set was chunked into batches."""
    return [
        np.random.default_rng(np.random.SeedSequence([seed, _TAIGR_STREAM, example_offset + j]))
        for j in range(count)
    ]


def run_attack(net: Network, batch: Batch, cfg: AttackConfig,
               example_offset: int = 0, record_masks: bool = False) -> AdvResult:
    """Iterate the sign-step update from the clean batch.

    Per iteration: (a) build the parameter mask from importance scores on
    the unmasked net at the current iterate (mup), or a fresh activation
    dropout plan (gn); (b) take the inner gradient under that mask;
    (c) fold it into the momentum buffer, normalized per example by the L1
    norm over its pixels (examples with zero gradient contribute nothing);
    (d) step by beta * sign and reproject. The loss trace is recorded on
    the unmasked surrogate at every iterate.
    """
    b = len(batch)
    clean = batch.images
    labels = batch.labels
    state = AttackState(x=clean.copy(), g=np.zeros_like(clean))

    gn_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _GN_STREAM]))
    rngs = (taigr_rng_streams(cfg.seed, b, example_offset)
            if cfg.inner == "taigr" else None)

    loss_trace = np.empty((cfg.iterations + 1, b), dtype=DTYPE)
    loss_trace[0] = per_example_loss(net, Batch(state.x, labels))
    mask_trace = []

    for t in range(cfg.iterations):
        mask_bits = None
        act_scales = None
        if cfg.masking == "mup":
            scores = importance.score_fn(cfg.mup_metric)(net, Batch(state.x, labels))
            maskable = None if cfg.mask_biases else importance.weight_positions(net)
            mask = importance.build_mask(scores, cfg.mup_ratio, maskable)
            mask_bits = mask.bits
            if record_masks:
                mask_trace.append(mask)
        elif cfg.masking == "gn":
            act_scales = gn_scales(net, gn_rng, cfg.gn_p)

        delta = inner_gradient(net, state.x, labels, cfg, mask_bits, act_scales, rngs)
        if cfg.mu == 0.0:
            # no accumulation, so the L1 normalization cannot change sign(g);
            # skipping it keeps the one-step reduction exactly x + beta*sign(dL/dx)
            state.g = delta
        else:
            l1 = np.abs(delta).reshape(b, -1).sum(axis=1).reshape(b, 1, 1, 1)
            state.g = cfg.mu * state.g + np.divide(
                delta, l1, out=np.zeros_like(delta), where=l1 > 0
            )
        state.x = clip_ball(state.x + cfg.beta * np.sign(state.g), clean, cfg.epsilon)
        state.t = t + 1
        loss_trace[t + 1] = per_example_loss(net, Batch(state.x, labels))

    preds = forward(net, state.x).argmax(axis=1)
    return AdvResult(
        clean=clean,
        adversarial=state.x,
        labels=labels,
        whitebox_success=preds != labels,
        loss_trace=loss_trace,
        config=cfg,
        mask_trace=tuple(mask_trace),
    )
