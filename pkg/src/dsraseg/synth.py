"""Deterministic synthetic multi-class segmentation data and dataset I/O.

Each image is a smooth textured background with 1..K class shapes painted on
top. A class has a fixed shape type and a fixed colour offset; the offset is
scaled by the contrast ``delta`` so small values give low-contrast objects.
Pixel values are quantised to 8 bits at generation time, so PNG round trips
are lossless.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

SHAPES = ("disk", "rect", "annulus")

# per-class colour directions; class c uses row (c - 1) % len
_COLOURS = np.array(
    [
        [1.0, -0.4, -0.4],
        [-0.4, 1.0, -0.4],
        [-0.4, -0.4, 1.0],
        [1.0, 1.0, -0.6],
        [-0.6, 1.0, 1.0],
        [1.0, -0.6, 1.0],
        [0.8, 0.8, 0.8],
        [-0.8, -0.8, -0.8],
    ]
)
_BASE = 0.45


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    num_classes: int = 3
    shapes: tuple[str, ...] = SHAPES
    contrast: float = 0.3
    noise: float = 0.03
    texture: float = 0.08
    occlusion: bool = False
    radius: tuple[float, float] = (0.11, 0.19)
    annulus_radius: tuple[float, float] = (0.16, 0.24)
    annulus_inner: tuple[float, float] = (0.45, 0.55)
    seed: int = 7
    count: int = 250

    def __post_init__(self) -> None:
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for name in ("radius", "annulus_radius", "annulus_inner"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"{name} must be an increasing pair in (0, 1), got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.size <= 0 or self.size % 32:
            raise ValueError(f"size {self.size} must be a positive multiple of 32")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.noise < 0 or self.texture < 0:
            raise ValueError("noise and texture must be nonnegative")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")

    def shape_of(self, cls: int) -> str:
        return self.shapes[(cls - 1) % len(self.shapes)]

    def colour_of(self, cls: int) -> np.ndarray:
        return 0.5 * self.contrast * _COLOURS[(cls - 1) % len(_COLOURS)]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        for name in ("radius", "annulus_radius", "annulus_inner"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray  # M x 3 x H x W in [0, 1]
    labels: np.ndarray  # M x H x W, int
    names: list[str]
    num_classes: int
    spec: dict[str, Any] = field(default_factory=dict)
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.names[i] for i in idx],
                       self.num_classes, self.spec)

    def split_subset(self, name: str) -> "Dataset":
        if name not in self.splits:
            raise DatasetError(f"dataset has no {name!r} split (has {sorted(self.splits)})")
        return self.subset(self.splits[name])


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, inner: float,
                rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        aspect = rng.uniform(0.6, 1.0)
        hy, hx = (r, r * aspect) if rng.random() < 0.5 else (r * aspect, r)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r * r) & (d2 > (inner * r) ** 2)


def _background(size: int, texture: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((3, size, size))
    for c in range(3):
        for _ in range(4):
            fy, fx = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field_[c] += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return _BASE + texture * field_ / 4.0


def generate_sample(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image [3, H, W] and label map [H, W] for one index; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size, k = spec.size, spec.num_classes
    # class index % k + 1 always present so every class appears in the corpus
    anchor = index % k + 1
    others = [c for c in range(1, k + 1) if c != anchor]
    n_extra = int(rng.integers(0, len(others) + 1))
    classes = [anchor] + [int(c) for c in rng.permutation(others)[:n_extra]] if others else [anchor]

    labels = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    for cls in classes:
        kind = spec.shape_of(cls)
        lo, hi = spec.annulus_radius if kind == "annulus" else spec.radius
        for _attempt in range(200):
            r = rng.uniform(lo, hi) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            mask = _shape_mask(kind, size, cy, cx, r, rng.uniform(*spec.annulus_inner), rng)
            if spec.occlusion or not (mask & occupied).any():
                break
        else:
            # the anchor goes into an empty image so only optional extras can fail
            continue
        labels[mask] = cls
        occupied |= mask

    image = _background(size, spec.texture, rng)
    for cls in range(1, k + 1):
        image += spec.colour_of(cls)[:, None, None] * (labels == cls)[None]
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image, labels


def generate(spec: SynthSpec) -> Dataset:
    images = np.empty((spec.count, 3, spec.size, spec.size))
    labels = np.empty((spec.count, spec.size, spec.size), dtype=np.int64)
    for i in range(spec.count):
        images[i], labels[i] = generate_sample(spec, i)
    names = [f"img_{i:05d}" for i in range(spec.count)]
    return Dataset(images, labels, names, spec.num_classes, spec.to_dict())


def split(n: int, ratios: Sequence[float], seed: int = 0) -> dict[str, list[int]]:
    """Seeded shuffle of ``range(n)`` cut into train/val/test by ``ratios``."""
    ratios = list(ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}
    for (name, idx), r in zip(cuts.items(), ratios):
        if r > 0 and idx.size == 0:
            raise ValueError(f"{name} partition is empty for n={n}, ratios={ratios}")
    return {name: sorted(int(i) for i in idx) for name, idx in cuts.items()}


# --- I/O ------------------------------------------------------------------


def read_gray(path: str | Path) -> np.ndarray:
    """8-bit single-channel image (PNG/PGM) as an int array."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "P", "1", "I"):
                im = im.convert("L")
            return np.asarray(im, dtype=np.int64)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"cannot parse image {path}: {e}") from e


def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"cannot parse image {path}: {e}") from e
    return arr.transpose(2, 0, 1) / 255.0


def write_gray(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.min() < 0 or values.max() > 255:
        raise ValueError("gray images hold values in [0, 255]")
    Image.fromarray(values.astype(np.uint8), mode="L").save(path)


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for img, lab, name in zip(ds.images, ds.labels, ds.names):
        rgb = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(directory / "images" / f"{name}.png")
        write_gray(directory / "labels" / f"{name}.pgm", lab)
        files.append({"name": name, "image": f"images/{name}.png", "label": f"labels/{name}.pgm"})
    present = sorted({int(v) for v in np.unique(ds.labels) if v > 0})
    manifest = {
        "spec": ds.spec,
        "num_classes": ds.num_classes,
        "classes": present,
        "files": files,
        "splits": ds.splits,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{directory} has no manifest.json") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest in {directory}: {e}") from e
    files = manifest["files"]
    if not files:
        raise DatasetError(f"{directory} lists no files")
    images = np.stack([read_rgb(directory / f["image"]) for f in files])
    labels = np.stack([read_gray(directory / f["label"]) for f in files])
    k = int(manifest["num_classes"])
    if labels.max() > k:
        raise DatasetError(f"label value {labels.max()} exceeds num_classes={k}")
    return Dataset(images, labels, [f["name"] for f in files], k, manifest.get("spec", {}),
                   {s: list(v) for s, v in manifest.get("splits", {}).items()})


def reference_dataset(seed: int = 7) -> Dataset:
    """The 3-class 64x64 task (contrast 0.3): 200 train / 50 val images."""
    ds = generate(SynthSpec(size=64, num_classes=3, contrast=0.3, seed=seed, count=250))
    ds.splits = split(len(ds), (0.8, 0.2, 0.0), seed=seed)
    return ds
