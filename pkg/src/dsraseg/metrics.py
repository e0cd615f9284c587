"""Segmentation metrics: Dice/IoU, MAE, weighted F-measure, S-measure,
mean E-measure and HD95, plus directory-level evaluation reports.

The structure-based measures follow the conventions of the widely used
salient-object evaluation code (Fmeasure beta^2 = 1 with a 7x7 sigma=5
Gaussian, S-measure alpha = 0.5, E-measure over 256 thresholds of the 8-bit
prediction). A metric that is undefined for an input pair (for example HD95
with an empty mask) is returned as NaN and skipped during aggregation.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import binary_erosion, convolve, distance_transform_edt

EPS = np.spacing(1)
METRICS = ("mdice", "miou", "wfm", "sm", "mem", "mae", "hd95")
PERCENT = ("mdice", "miou", "wfm", "sm", "mem")
COLUMN_TITLES = {
    "mdice": "mDice",
    "miou": "mIoU",
    "wfm": "wFm",
    "sm": "S-m",
    "mem": "mEm",
    "mae": "MAE",
    "hd95": "HD95",
}
IMAGE_SUFFIXES = (".png", ".pgm", ".bmp", ".tif", ".tiff")


class EvaluationError(ValueError):
    pass


def _pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[float, float]:
    """Binary Dice and IoU; two empty masks agree perfectly (1, 1)."""
    p, g = _pair(pred_mask, gt_mask)
    p, g = p.astype(bool), g.astype(bool)
    inter = int(np.count_nonzero(p & g))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / (total - inter)


def multiclass_dice(pred_labels: np.ndarray, gt_labels: np.ndarray, k: int,
                    ) -> tuple[float, dict[int, float], float, dict[int, float]]:
    """Per-class Dice and IoU averaged over the classes present in the ground truth.

    Returns ``(mean_dice, dice_per_class, mean_iou, iou_per_class)``; the means are
    NaN when the ground truth holds no foreground class.
    """
    p, g = _pair(pred_labels, gt_labels)
    dice, iou = {}, {}
    for c in range(1, k + 1):
        if not np.any(g == c):
            continue
        dice[c], iou[c] = dice_iou(p == c, g == c)
    if not dice:
        return float("nan"), dice, float("nan"), iou
    return float(np.mean(list(dice.values()))), dice, float(np.mean(list(iou.values()))), iou


def mae(pred_prob: np.ndarray, gt_mask: np.ndarray) -> float:
    p, g = _pair(pred_prob, gt_mask)
    return float(np.mean(np.abs(p.astype(np.float64) - g.astype(np.float64))))


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def weighted_fmeasure(pred_prob: np.ndarray, gt_mask: np.ndarray, beta2: float = 1.0) -> float:
    """Weighted F-measure; NaN when the ground truth is empty."""
    pred, gt = _pair(pred_prob, gt_mask)
    pred = pred.astype(np.float64)
    gt = gt.astype(bool)
    if not gt.any():
        return float("nan")
    dist, idx = distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - gt)
    # background errors take the error of the nearest foreground pixel
    err_t = err.copy()
    bg = ~gt
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    blurred = convolve(err_t, gaussian_kernel(7, 5.0), mode="constant", cval=0.0)
    min_err = np.where(gt & (blurred < err), blurred, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_err * importance
    tp = gt.sum() - ew[gt].sum()
    fp = ew[bg].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp / (tp + fp + EPS)
    return float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


def _object_score(x: np.ndarray) -> float:
    mean = np.mean(x)
    std = np.std(x, ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        # empty quadrant (centroid on the last row/column); its area weight is 0 too
        return 0.0
    # a constant block's mean is the constant itself; np.mean can miss it by an ulp
    # and the resulting ~1e-33 variance would flip the beta == 0 branch below
    x = pred.flat[0] if pred.min() == pred.max() else pred.mean()
    y = gt.flat[0] if gt.min() == gt.max() else gt.mean()
    sx = np.sum((pred - x) ** 2) / (n - 1 + EPS)
    sy = np.sum((gt - y) ** 2) / (n - 1 + EPS)
    sxy = np.sum((pred - x) * (gt - y)) / (n - 1 + EPS)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_measure(pred_prob: np.ndarray, gt_mask: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure ``alpha * S_object + (1 - alpha) * S_region``."""
    pred, gt = _pair(pred_prob, gt_mask)
    pred = pred.astype(np.float64)
    gt = gt.astype(bool)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    obj = _object_score(pred[gt]) * y + _object_score((1.0 - pred)[~gt]) * (1.0 - y)

    h, w = gt.shape
    cy, cx = np.argwhere(gt).mean(axis=0).round()
    cy, cx = int(cy) + 1, int(cx) + 1
    area = h * w
    w_lt = cx * cy / area
    w_rt = cy * (w - cx) / area
    w_lb = (h - cy) * cx / area
    w_rb = 1.0 - w_lt - w_rt - w_lb
    g = gt.astype(np.float64)
    region = (
        _ssim(pred[:cy, :cx], g[:cy, :cx]) * w_lt
        + _ssim(pred[:cy, cx:], g[:cy, cx:]) * w_rt
        + _ssim(pred[cy:, :cx], g[cy:, :cx]) * w_lb
        + _ssim(pred[cy:, cx:], g[cy:, cx:]) * w_rb
    )
    return float(max(0.0, alpha * obj + (1.0 - alpha) * region))


def e_measure_curve(pred_prob: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """Enhanced-alignment score at each threshold t = 255, 254, ..., 0 of the 8-bit prediction."""
    pred, gt = _pair(pred_prob, gt_mask)
    gt = gt.astype(bool)
    levels = (pred.astype(np.float64) * 255).astype(np.uint8)
    bins = np.arange(257)
    tp = np.cumsum(np.histogram(levels[gt], bins=bins)[0][::-1])
    fp = np.cumsum(np.histogram(levels[~gt], bins=bins)[0][::-1])
    size = gt.size
    n_gt = int(gt.sum())
    pred_fg = tp + fp
    pred_bg = size - pred_fg
    if n_gt == 0:
        total = pred_bg.astype(np.float64)
    elif n_gt == size:
        total = pred_fg.astype(np.float64)
    else:
        fn = n_gt - tp
        tn = pred_bg - fn
        mp = pred_fg / size
        mg = n_gt / size
        total = np.zeros(256)
        for count, a, b in (
            (tp, 1 - mp, 1 - mg),
            (fp, 1 - mp, -mg),
            (fn, -mp, 1 - mg),
            (tn, -mp, -mg),
        ):
            align = 2.0 * a * b / (a * a + b * b + EPS)
            total = total + (align + 1.0) ** 2 / 4.0 * count
    return total / (size - 1 + EPS)


def e_measure_mean(pred_prob: np.ndarray, gt_mask: np.ndarray) -> float:
    return float(e_measure_curve(pred_prob, gt_mask).mean())


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return mask & ~binary_erosion(mask, structure=cross, border_value=0)


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """95th percentile (linear interpolation) of pooled boundary-to-boundary distances, in pixels."""
    p, g = _pair(pred_mask, gt_mask)
    p, g = p.astype(bool), g.astype(bool)
    if not p.any() or not g.any():
        return float("nan")
    bp, bg = boundary(p), boundary(g)
    d_to_g = distance_transform_edt(~bg)[bp]
    d_to_p = distance_transform_edt(~bp)[bg]
    return float(np.percentile(np.concatenate([d_to_g, d_to_p]), 95))


# --- per-image and aggregate evaluation -------------------------------------


def binary_metrics(pred_prob: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    """All seven metrics for one probability map against a binary mask."""
    pred_prob, gt = _pair(pred_prob, gt_mask)
    pred_prob = pred_prob.astype(np.float64)
    gt = gt.astype(bool)
    pred_mask = pred_prob >= threshold
    d, i = dice_iou(pred_mask, gt)
    return {
        "mdice": d,
        "miou": i,
        "wfm": weighted_fmeasure(pred_prob, gt),
        "sm": s_measure(pred_prob, gt),
        "mem": e_measure_mean(pred_prob, gt),
        "mae": mae(pred_prob, gt),
        "hd95": hd95(pred_mask, gt),
    }


def multiclass_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, k: int) -> dict[str, float]:
    """Metrics per foreground class (one-vs-rest masks), averaged over classes present in the GT."""
    p, g = _pair(pred_labels, gt_labels)
    rows = [binary_metrics((p == c).astype(np.float64), g == c) for c in range(1, k + 1) if np.any(g == c)]
    if not rows:
        return {m: float("nan") for m in METRICS}
    out = {}
    for m in METRICS:
        vals = [r[m] for r in rows if not np.isnan(r[m])]
        out[m] = float(np.mean(vals)) if vals else float("nan")
    return out


@dataclass
class MetricsReport:
    names: list[str] = field(default_factory=list)
    per_image: list[dict[str, float]] = field(default_factory=list)
    mode: str = "binary"

    def add(self, name: str, values: dict[str, float]) -> None:
        self.names.append(name)
        self.per_image.append(dict(values))

    @property
    def aggregate(self) -> dict[str, float]:
        out = {}
        for m in METRICS:
            vals = [r[m] for r in self.per_image if not np.isnan(r[m])]
            out[m] = float(np.mean(vals)) if vals else float("nan")
        return out

    @property
    def undefined(self) -> dict[str, int]:
        return {m: sum(1 for r in self.per_image if np.isnan(r[m])) for m in METRICS}

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        if self.names != other.names or self.mode != other.mode:
            return False
        return all(
            np.array_equal([a[m] for m in METRICS], [b[m] for m in METRICS], equal_nan=True)
            for a, b in zip(self.per_image, other.per_image)
        )

    def columns(self) -> list[str]:
        cols = ["mdice", "miou", "wfm", "sm", "mem", "mae"]
        return cols + ["hd95"] if self.mode == "multiclass" else cols

    @staticmethod
    def _fmt(metric: str, value: float) -> str:
        if np.isnan(value):
            return "nan"
        if metric in PERCENT:
            return f"{100.0 * value:.2f}"
        if metric == "mae":
            return f"{value:.4f}"
        return f"{value:.3f}"

    def to_csv(self) -> str:
        cols = self.columns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image"] + [COLUMN_TITLES[c] for c in cols])
        for name, row in zip(self.names, self.per_image):
            writer.writerow([name] + [self._fmt(c, row[c]) for c in cols])
        agg = self.aggregate
        writer.writerow(["mean"] + [self._fmt(c, agg[c]) for c in cols])
        return buf.getvalue()

    def summary(self) -> str:
        cols = self.columns()
        agg, undef = self.aggregate, self.undefined
        head = "".join(f"{COLUMN_TITLES[c]:>9}" for c in cols)
        vals = "".join(f"{self._fmt(c, agg[c]):>9}" for c in cols)
        lines = [f"images: {len(self.names)}  mode: {self.mode}", head, vals]
        flagged = {c: undef[c] for c in cols if undef[c]}
        if flagged:
            lines.append("undefined (excluded from mean): "
                         + ", ".join(f"{COLUMN_TITLES[c]}={n}" for c, n in flagged.items()))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.summary())
        return csv_path, txt_path


def _list_images(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_pairs(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]], mode: str = "binary",
                   k: int = 1) -> MetricsReport:
    """``pairs`` yields (name, prediction, ground truth). Binary mode takes probability maps
    in [0, 1] and binary masks; multiclass mode takes label maps."""
    if mode not in ("binary", "multiclass"):
        raise EvaluationError(f"mode must be 'binary' or 'multiclass', not {mode!r}")
    report = MetricsReport(mode=mode)
    for name, pred, gt in sorted(pairs, key=lambda t: t[0]):
        if np.shape(pred) != np.shape(gt):
            raise EvaluationError(f"{name}: size mismatch pred {np.shape(pred)} vs gt {np.shape(gt)}")
        if mode == "binary":
            report.add(name, binary_metrics(pred, gt))
        else:
            report.add(name, multiclass_metrics(pred, gt, k))
    return report


def evaluate_dir(pred_dir: str | Path, gt_dir: str | Path, mode: str = "binary", k: int = 1) -> MetricsReport:
    """Pair files by stem. Binary: 8-bit probabilities / 255 vs gt > 0. Multiclass: label maps."""
    from .synth import read_gray

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _list_images(pred_dir), _list_images(gt_dir)
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        if missing_gt:
            parts.append(f"no ground truth for: {', '.join(missing_gt)}")
        raise EvaluationError("unmatched files; " + "; ".join(parts))
    if not gts:
        raise EvaluationError(f"no images found in {gt_dir}")

    def pairs():
        for name in sorted(gts):
            pred, gt = read_gray(preds[name]), read_gray(gts[name])
            if mode == "binary":
                yield name, pred / 255.0, gt > 0
            else:
                yield name, pred, gt

    return evaluate_pairs(pairs(), mode, k)
