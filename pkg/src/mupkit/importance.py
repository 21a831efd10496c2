"""Parameter importance scores and the masks derived from them.

Scores follow the first-order Taylor criterion |dL/dtheta * theta|
evaluated on the unmasked model at the current input, or the
gradient-free |theta| magnitude criterion. A mask zeroes exactly
floor(ratio * P) parameters, the ones with the smallest scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import DTYPE, Batch, Network, backward


@dataclass(frozen=True)
class ImportanceScores:
    values: np.ndarray  # [P] float64, >= 0
    metric: str  # "taylor" | "magnitude"

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"scores must be flat, got shape {self.values.shape}")
        if self.values.size and self.values.min() < 0.0:
            raise ValueError("importance scores must be non-negative")
        if self.metric not in ("taylor", "magnitude"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class ParamMask:
    bits: np.ndarray  # [P] float64 in {0.0, 1.0}
    ratio: float
    threshold: float  # score of the largest zeroed entry; 0.0 when nothing is zeroed

    def __post_init__(self):
        if self.bits.ndim != 1:
            raise ValueError(f"mask must be flat, got shape {self.bits.shape}")

    @property
    def zero_count(self) -> int:
        return int(self.bits.size - self.bits.sum())


def taylor_scores(net: Network, batch: Batch) -> ImportanceScores:
    """|gradient * parameter| on the unmasked model at the given batch.

    One backward pass per call; the batch-mean loss makes the scores
    shared across the batch.
    """
    grads = backward(net, batch).grad_params
    return ImportanceScores(np.abs(grads * net.flat_params()), "taylor")


def magnitude_scores(net: Network) -> ImportanceScores:
    return ImportanceScores(np.abs(net.flat_params()), "magnitude")


def score_fn(metric: str):
    """Uniform callable interface: (net, batch) -> ImportanceScores."""
    if metric == "taylor":
        return taylor_scores
    if metric == "magnitude":
        return lambda net, batch: magnitude_scores(net)
    raise ValueError(f"unknown metric {metric!r}")


def weight_positions(net: Network) -> np.ndarray:
    """Boolean [P] array marking weight entries; biases are False."""
    marks = np.zeros(net.num_params, dtype=bool)
    for slot in net.param_layout:
        if slot.name == "weight":
            marks[slot.offset : slot.offset + slot.size] = True
    return marks


def build_mask(scores: ImportanceScores, ratio: float, maskable=None) -> ParamMask:
    """Zero exactly floor(ratio * P) entries with the smallest scores.

    Ties are broken by ascending parameter index, so the result is a
    deterministic function of (scores, ratio). With a maskable boolean
    array only those positions compete and count, so biases (or any other
    subset) can be exempted; P is then the number of maskable entries.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    p = scores.values.size
    mask = np.ones(p, dtype=DTYPE)
    if maskable is None:
        candidates = np.arange(p)
    else:
        maskable = np.asarray(maskable, dtype=bool)
        if maskable.shape != (p,):
            raise ValueError(f"maskable shape {maskable.shape} does not match {p} scores")
        candidates = np.flatnonzero(maskable)
    k = int(np.floor(ratio * candidates.size))
    if k == 0:
        return ParamMask(mask, ratio, 0.0)
    order = np.argsort(scores.values[candidates], kind="stable")
    zeroed = candidates[order[:k]]
    mask[zeroed] = 0.0
    return ParamMask(mask, ratio, float(scores.values[zeroed[-1]]))
