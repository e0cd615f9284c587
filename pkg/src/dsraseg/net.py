"""Dual-supervised reverse-attention segmentation network.

A five-block strided CNN produces the feature pyramid F1..F4 (1/4 .. 1/32 of
the input). A partial decoder fuses F2..F4 into the coarse dual prediction
R4; three DSRA stages then refine it coarse-to-fine:

    R3 = dsra(F4, R4),  R2 = dsra(F3, R3),  R1 = dsra(F2, R2)

Each stage runs a shared conv trunk on its feature, splits into separate
foreground and background heads (P_f, P_b), and boosts the foreground logits
with the reverse gain computed from the deeper stage:

    gain = softmax_c(resize(R_fg) - resize(R_bg))
    fg   = P_f + P_f * gain
    bg   = P_b

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import archive
from .ops import bilinear_resize, conv2d, softmax_channels
from .tensor import Tensor, add, concat_channels, mul, relu

Params = dict[str, Tensor]


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 1
    in_channels: int = 3
    stem_channels: int = 16
    encoder_channels: tuple[int, int, int, int] = (32, 48, 64, 80)
    decoder_channels: int = 32
    height: int = 64
    width: int = 64
    seed: int = 0
    softmax_axis: str = "channel"

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels needs four widths (C1..C4)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        widths = (self.in_channels, self.stem_channels, self.decoder_channels, *self.encoder_channels)
        if min(widths) < 1:
            raise ValueError("all channel widths must be >= 1")
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"input extent {self.height}x{self.width} must be positive multiples of 32")
        if self.softmax_axis not in ("channel", "spatial"):
            raise ValueError(f"softmax_axis must be 'channel' or 'spatial', not {self.softmax_axis!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "encoder_channels" in known:
            known["encoder_channels"] = tuple(known["encoder_channels"])
        return cls(**known)


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


@dataclass
class SegOutput:
    """Paired per-class foreground and background logits of one decoder stage."""

    fg: Tensor
    bg: Tensor

    def __post_init__(self) -> None:
        if self.fg.shape != self.bg.shape:
            raise ValueError(f"fg {self.fg.shape} and bg {self.bg.shape} must match")
        if self.fg.ndim != 4 or self.fg.shape[1] < 1:
            raise ValueError(f"SegOutput maps must be N x K x h x w with K >= 1, got {self.fg.shape}")

    @property
    def num_classes(self) -> int:
        return self.fg.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.fg.shape[2], self.fg.shape[3]


# --- parameters -----------------------------------------------------------


def _conv_param(params: Params, rng: np.random.Generator, name: str, cin: int, cout: int, k: int,
                gain: float = 2.0) -> None:
    std = np.sqrt(gain / (cin * k * k))
    params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)))
    params[f"{name}.b"] = Tensor(np.zeros(cout))


def init_dsra_params(params: Params, rng: np.random.Generator, prefix: str, in_channels: int,
                     width: int, num_classes: int) -> None:
    _conv_param(params, rng, f"{prefix}.conv1", in_channels, width, 3)
    _conv_param(params, rng, f"{prefix}.conv2", width, width, 3)
    _conv_param(params, rng, f"{prefix}.fg", width, num_classes, 1, gain=1.0)
    _conv_param(params, rng, f"{prefix}.bg", width, num_classes, 1, gain=1.0)


def init_params(cfg: NetworkConfig) -> Params:
    """He-normal conv weights, zero biases, drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}
    widths = [cfg.in_channels, cfg.stem_channels, *cfg.encoder_channels]
    for b in range(5):
        _conv_param(params, rng, f"enc.b{b}.conv1", widths[b], widths[b + 1], 3)
        _conv_param(params, rng, f"enc.b{b}.conv2", widths[b + 1], widths[b + 1], 3)
    d, k = cfg.decoder_channels, cfg.num_classes
    c1, c2, c3, c4 = cfg.encoder_channels
    for i, c in ((2, c2), (3, c3), (4, c4)):
        _conv_param(params, rng, f"pd.reduce{i}", c, d, 1)
    _conv_param(params, rng, "pd.fuse1", 3 * d, d, 3)
    _conv_param(params, rng, "pd.fuse2", d, d, 3)
    _conv_param(params, rng, "pd.fg", d, k, 1, gain=1.0)
    _conv_param(params, rng, "pd.bg", d, k, 1, gain=1.0)
    for stage, c in ((3, c4), (2, c3), (1, c2)):
        init_dsra_params(params, rng, f"dsra{stage}", c, d, k)
    for p in params.values():
        p.requires_grad = True
    return params


def parameter_groups(params: Params) -> dict[str, list[str]]:
    """Parameter names grouped by module (``enc.b0``, ``pd``, ``dsra3``, ...)."""
    groups: dict[str, list[str]] = {}
    for name in params:
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "enc" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


# --- forward --------------------------------------------------------------


def _conv(x: Tensor, params: Params, name: str, stride: int = 1, act: bool = True) -> Tensor:
    w = params[f"{name}.w"]
    y = conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[2] // 2)
    return relu(y) if act else y


def encoder_forward(x: Tensor, params: Params) -> FeaturePyramid:
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise ValueError(f"input extent {h}x{w} must be divisible by 32")
    feats = []
    t = x
    for b in range(5):
        t = _conv(t, params, f"enc.b{b}.conv1", stride=2)
        t = _conv(t, params, f"enc.b{b}.conv2")
        feats.append(t)
    return FeaturePyramid(*feats[1:])


def partial_decoder(f2: Tensor, f3: Tensor, f4: Tensor, params: Params) -> SegOutput:
    h, w = f2.shape[2:]
    if f3.shape[0] != f2.shape[0] or f4.shape[0] != f2.shape[0]:
        raise ValueError("pyramid batch sizes differ")
    if f3.shape[2:] != (h // 2, w // 2) or f4.shape[2:] != (h // 4, w // 4):
        raise ValueError(f"inconsistent pyramid extents {f2.shape}, {f3.shape}, {f4.shape}")
    r2 = _conv(f2, params, "pd.reduce2")
    r3 = bilinear_resize(_conv(f3, params, "pd.reduce3"), h, w)
    r4 = bilinear_resize(_conv(f4, params, "pd.reduce4"), h, w)
    t = _conv(concat_channels([r2, r3, r4]), params, "pd.fuse1")
    t = _conv(t, params, "pd.fuse2")
    return SegOutput(_conv(t, params, "pd.fg", act=False), _conv(t, params, "pd.bg", act=False))


def reverse_gain(deeper: SegOutput, target_feature: Tensor, num_classes: int | None = None,
                 axis: str = "channel") -> Tensor:
    """Softmax of the resized fg-minus-bg difference of the deeper stage."""
    if num_classes is not None and deeper.num_classes != num_classes:
        raise ValueError(f"deeper stage has {deeper.num_classes} classes, expected {num_classes}")
    h, w = target_feature.shape[2:]
    fg = bilinear_resize(deeper.fg, h, w)
    bg = bilinear_resize(deeper.bg, h, w)
    return softmax_channels(fg - bg, axis=axis)


def dsra_heads(feature: Tensor, params: Params, prefix: str) -> tuple[Tensor, Tensor]:
    """Shared trunk then disjoint fg/bg head convs: returns (P_f, P_b)."""
    if f"{prefix}.conv1.w" not in params:
        raise KeyError(f"no DSRA parameters under {prefix!r}")
    cin = params[f"{prefix}.conv1.w"].shape[1]
    if feature.ndim != 4 or feature.shape[1] != cin:
        raise ValueError(f"{prefix}: feature has shape {feature.shape}, expected {cin} channels")
    t = _conv(feature, params, f"{prefix}.conv1")
    t = _conv(t, params, f"{prefix}.conv2")
    return _conv(t, params, f"{prefix}.fg", act=False), _conv(t, params, f"{prefix}.bg", act=False)


def apply_reverse_gain(pf: Tensor, gain: Tensor) -> Tensor:
    """``P_f + P_f * gain``."""
    return add(pf, mul(pf, gain))


def dsra_forward(feature: Tensor, deeper: SegOutput, params: Params, prefix: str,
                 axis: str = "channel", gain: Tensor | None = None) -> SegOutput:
    """One DSRA stage. ``gain`` overrides the computed reverse gain (test hook)."""
    pf, pb = dsra_heads(feature, params, prefix)
    if gain is None:
        gain = reverse_gain(deeper, feature, num_classes=pf.shape[1], axis=axis)
    elif gain.shape[1:] != pf.shape[1:]:
        raise ValueError(f"gain shape {gain.shape} does not match heads {pf.shape}")
    return SegOutput(apply_reverse_gain(pf, gain), pb)


def pranet_v2_forward(x: Tensor, params: Params, axis: str = "channel") -> list[SegOutput]:
    """Returns the stage outputs [R4, R3, R2, R1]."""
    return cascade_forward(encoder_forward(x, params), params, axis)


def cascade_forward(pyr: FeaturePyramid, params: Params, axis: str = "channel") -> list[SegOutput]:
    """Partial decoder then DSRA3 -> DSRA1 on a given pyramid: [R4, R3, R2, R1]."""
    r4 = partial_decoder(pyr.f2, pyr.f3, pyr.f4, params)
    r3 = dsra_forward(pyr.f4, r4, params, "dsra3", axis)
    r2 = dsra_forward(pyr.f3, r3, params, "dsra2", axis)
    r1 = dsra_forward(pyr.f2, r2, params, "dsra1", axis)
    return [r4, r3, r2, r1]


def predict_logits(x: Tensor, params: Params, axis: str = "channel") -> Tensor:
    """Final foreground logits R1.fg resized to the input extent."""
    r1 = pranet_v2_forward(x, params, axis)[-1]
    return bilinear_resize(r1.fg, *x.shape[2:])


def dsra_refiner(features: Tensor, coarse: SegOutput, params: Params, prefix: str = "refiner",
                 axis: str = "channel") -> SegOutput:
    """Refine any host model's coarse dual prediction with any of its feature maps."""
    return dsra_forward(features, coarse, params, prefix, axis)


@dataclass
class DSRARefiner:
    """Self-contained DSRA stage for attaching to an arbitrary host network."""

    in_channels: int
    num_classes: int
    width: int = 32
    seed: int = 0
    prefix: str = "refiner"
    axis: str = "channel"
    params: Params = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.params:
            init_dsra_params(self.params, np.random.default_rng(self.seed), self.prefix,
                             self.in_channels, self.width, self.num_classes)
            for p in self.params.values():
                p.requires_grad = True

    def __call__(self, features: Tensor, coarse: SegOutput) -> SegOutput:
        return dsra_refiner(features, coarse, self.params, self.prefix, self.axis)


# --- decoding -------------------------------------------------------------


def predict_labels(final: SegOutput, height: int, width: int) -> np.ndarray:
    """Label map [N, H, W]: 0 is background, k >= 1 is foreground class k.

    Per pixel the class with the largest fg logit wins if that logit exceeds
    its own background logit. With a single class this is ``sigmoid(fg) > 0.5``.
    """
    fg = bilinear_resize(final.fg, height, width).data
    if final.num_classes == 1:
        return (fg[:, 0] > 0).astype(np.int64)
    bg = bilinear_resize(final.bg, height, width).data
    best = fg.argmax(axis=1)
    top_fg = np.take_along_axis(fg, best[:, None], axis=1)[:, 0]
    top_bg = np.take_along_axis(bg, best[:, None], axis=1)[:, 0]
    return np.where(top_fg > top_bg, best + 1, 0).astype(np.int64)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(directory: str | Path, params: Params, cfg: NetworkConfig, step: int,
                    extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict[str, Any] | None = None) -> Path:
    tensors = {name: p.data for name, p in params.items()}
    for name, arr in (extra_tensors or {}).items():
        tensors[f"state/{name}"] = arr
    info = {"network": cfg.to_dict(), "step": int(step), **(meta or {})}
    return archive.save_archive(directory, tensors, info)


def load_checkpoint(directory: str | Path) -> tuple[Params, NetworkConfig, dict[str, Any], dict[str, np.ndarray]]:
    """Returns (params, config, meta, extra state tensors)."""
    tensors, meta = archive.load_archive(directory)
    cfg = NetworkConfig.from_dict(meta["network"])
    params: Params = {}
    state = {}
    for name, arr in tensors.items():
        if name.startswith("state/"):
            state[name[len("state/"):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    expected = init_params(cfg)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        raise archive.ArchiveError("checkpoint parameters do not match its network config")
    return {k: params[k] for k in expected}, cfg, meta, state
