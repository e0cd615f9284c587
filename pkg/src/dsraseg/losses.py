"""Background masks and the composite Dice + CE + BCE training loss.

Each loss is a fused tape op with a hand-written backward; targets are plain
integer label maps (0 = background, k = class k).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .ops import bilinear_resize, resize_nearest
from .tensor import Tensor, make


@dataclass(frozen=True)
class LossSpec:
    w_dice: float = 1.0
    w_ce: float = 1.0
    w_bce: float = 1.0
    stage_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    boundary_weighting: bool = True
    boundary_kernel: int = 31
    dice_smooth: float = 1.0
    ce_background: str = "zero"
    resolution: str = "input"

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_weights", tuple(float(s) for s in self.stage_weights))
        ws = (self.w_dice, self.w_ce, self.w_bce)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be nonnegative with one positive, got {ws}")
        if len(self.stage_weights) != 4 or min(self.stage_weights) < 0:
            raise ValueError("stage_weights needs four nonnegative values")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.boundary_kernel < 1 or self.boundary_kernel % 2 == 0:
            raise ValueError("boundary_kernel must be a positive odd size")
        if self.resolution not in ("input", "stage"):
            raise ValueError(f"resolution must be 'input' or 'stage', not {self.resolution!r}")
        if self.ce_background not in ("zero", "bg_mean"):
            raise ValueError(f"ce_background must be 'zero' or 'bg_mean', not {self.ce_background!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stage_weights"] = list(self.stage_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LossSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss fields: {sorted(unknown)}")
        return cls(**d)


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"label maps must be N x H x W, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > k):
        raise ValueError(f"labels must lie in [0, {k}], found [{labels.min()}, {labels.max()}]")
    return labels


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """Foreground one-hot [N, K, H, W]; channel c marks label c + 1."""
    labels = _check_labels(labels, k)
    return (labels[:, None] == np.arange(1, k + 1)[None, :, None, None]).astype(np.float64)


def make_background_mask(labels: np.ndarray, k: int) -> np.ndarray:
    """Per-class background mask [N, K, H, W]: 1 wherever the pixel is not class c + 1."""
    return 1.0 - one_hot(labels, k)


def dice_loss(fg_logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - mean_k (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` with ``p = sigmoid(logit)``."""
    x = fg_logits.data
    g = one_hot(labels, x.shape[1])
    p = expit(x)
    axes = (0, 2, 3)
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + smooth
    dice = (2.0 * inter + smooth) / denom
    k = x.shape[1]

    def backward(gout):
        ddice_dp = (2.0 * g * denom[None, :, None, None] - (2.0 * inter + smooth)[None, :, None, None]) / (
            denom[None, :, None, None] ** 2
        )
        return (-float(gout) / k * ddice_dp * p * (1.0 - p),)

    return make(np.asarray(1.0 - dice.mean()), (fg_logits,), backward)


def ce_loss(fg_logits: Tensor, labels: np.ndarray, bg_logits: Tensor | None = None,
            background: str = "zero") -> Tensor:
    """Pixel-mean cross-entropy over K + 1 classes.

    The implicit background class scores a constant 0 (``background="zero"``)
    or the mean of the per-class background logits (``"bg_mean"``).
    """
    x = fg_logits.data
    n, k, h, w = x.shape
    labels = _check_labels(labels, k)
    if background == "zero":
        s0 = np.zeros((n, 1, h, w))
    elif background == "bg_mean":
        if bg_logits is None:
            raise ValueError("background='bg_mean' needs bg_logits")
        s0 = bg_logits.data.mean(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown background mode {background!r}")
    scores = np.concatenate([s0, x], axis=1)
    logp = log_softmax(scores, axis=1)
    target = labels[:, None].astype(np.intp)
    m = n * h * w
    loss = -np.take_along_axis(logp, target, axis=1).sum() / m

    def backward(gout):
        d = softmax(scores, axis=1)
        np.put_along_axis(d, target, np.take_along_axis(d, target, axis=1) - 1.0, axis=1)
        d *= float(gout) / m
        grads = [d[:, 1:]]
        if background == "bg_mean":
            grads.append(np.repeat(d[:, :1] / k, k, axis=1))
        return tuple(grads)

    inputs = (fg_logits,) if background == "zero" else (fg_logits, bg_logits)
    return make(np.asarray(loss), inputs, backward)


def box_mean(a: np.ndarray, size: int) -> np.ndarray:
    """Mean over a ``size`` x ``size`` window on the last two axes, ignoring out-of-image cells."""
    r = size // 2

    def box_sum(v):
        pad = [(0, 0)] * (v.ndim - 2) + [(r + 1, r), (r + 1, r)]
        c = np.pad(v, pad).cumsum(axis=-2).cumsum(axis=-1)
        return c[..., size:, size:] - c[..., :-size, size:] - c[..., size:, :-size] + c[..., :-size, :-size]

    ones = np.ones(a.shape[-2:])
    return box_sum(a) / box_sum(ones)


def boundary_weights(mask: np.ndarray, size: int = 31) -> np.ndarray:
    """``1 + 5 |boxmean(mask) - mask|``: heavier weight near mask edges."""
    return 1.0 + 5.0 * np.abs(box_mean(mask, size) - mask)


def bce_loss(bg_logits: Tensor, bg_mask: np.ndarray, boundary_weighting: bool = False,
             kernel: int = 31) -> Tensor:
    """Weight-normalised binary cross-entropy of sigmoid(bg logits) against the background mask."""
    x = bg_logits.data
    y = np.asarray(bg_mask, dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError(f"mask shape {y.shape} != logits shape {x.shape}")
    wts = boundary_weights(y, kernel) if boundary_weighting else np.ones_like(x)
    total_w = wts.sum()
    per_px = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = (wts * per_px).sum() / total_w
    return make(
        np.asarray(loss), (bg_logits,), lambda g: (float(g) * wts * (expit(x) - y) / total_w,)
    )


def _weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    # one fused node keeps the tape short
    coeffs = [c for c, _ in terms]
    value = sum(c * t.data for c, t in terms)
    return make(np.asarray(value, dtype=np.float64), tuple(t for _, t in terms),
                lambda g: tuple(c * g for c in coeffs))


def stage_terms(out, labels: np.ndarray, spec: LossSpec) -> dict[str, Tensor]:
    """Unweighted loss terms of one stage.

    ``spec.resolution == "input"`` upsamples the stage logits bilinearly to the
    label extent; ``"stage"`` instead shrinks the labels (nearest) to the stage extent.
    """
    labels = np.asarray(labels)
    k = out.num_classes
    fg, bg = out.fg, out.bg
    if spec.resolution == "input":
        lab = labels
        fg = bilinear_resize(fg, *labels.shape[1:])
        bg = bilinear_resize(bg, *labels.shape[1:])
    else:
        lab = resize_nearest(labels, *out.spatial)
    terms: dict[str, Tensor] = {}
    if spec.w_dice > 0:
        terms["dice"] = dice_loss(fg, lab, spec.dice_smooth)
    if spec.w_ce > 0:
        terms["ce"] = ce_loss(fg, lab, bg, spec.ce_background)
    if spec.w_bce > 0:
        terms["bce"] = bce_loss(bg, make_background_mask(lab, k), spec.boundary_weighting,
                                spec.boundary_kernel)
    return terms


def total_loss(outputs: Sequence, labels: np.ndarray, spec: LossSpec) -> tuple[Tensor, dict[str, float]]:
    """Stage-weighted ``w_dice * Dice + w_ce * CE + w_bce * BCE`` over [R4, R3, R2, R1].

    Returns the scalar loss and its breakdown; a term whose weight is zero is
    skipped and contributes exactly 0.
    """
    if len(outputs) != len(spec.stage_weights):
        raise ValueError(f"expected {len(spec.stage_weights)} stage outputs, got {len(outputs)}")
    if not any(spec.stage_weights):
        raise ValueError("all stage weights are zero")
    weights = {"dice": spec.w_dice, "ce": spec.w_ce, "bce": spec.w_bce}
    parts: list[tuple[float, Tensor]] = []
    breakdown = {"dice": 0.0, "ce": 0.0, "bce": 0.0}
    for sw, out in zip(spec.stage_weights, outputs):
        if sw == 0:
            continue
        for name, term in stage_terms(out, labels, spec).items():
            c = sw * weights[name]
            parts.append((c, term))
            breakdown[name] += c * float(term.data)
    loss = _weighted_sum(parts)
    breakdown["total"] = float(loss.data)
    return loss, breakdown
