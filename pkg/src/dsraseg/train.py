"""Deterministic training loop, evaluation, loss ablation and model gradcheck."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import metrics as M
from .gradcheck import GradcheckReport, gradcheck
from .losses import LossSpec, total_loss
from .net import (
    FeaturePyramid,
    NetworkConfig,
    Params,
    cascade_forward,
    encoder_forward,
    init_params,
    load_checkpoint,
    parameter_groups,
    pranet_v2_forward,
    predict_labels,
    save_checkpoint,
)
from .ops import bilinear_resize, resize_array, resize_nearest
from .synth import Dataset
from .tensor import Tape, Tensor, sigmoid

log = logging.getLogger(__name__)

LOSS_TERMS = ("dice", "ce", "bce", "total")
ABLATION_COMBOS = {
    "BCE+CE": (0.0, 1.0, 1.0),
    "BCE+Dice": (1.0, 0.0, 1.0),
    "CE+Dice": (1.0, 1.0, 0.0),
    "BCE+CE+Dice": (1.0, 1.0, 1.0),
}


class NumericError(FloatingPointError):
    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    eval_every: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec.from_dict(self.loss))
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


def snap32(extent: float) -> int:
    """Nearest multiple of 32 (halves round up), never below 32."""
    return max(32, int(math.floor(extent / 32.0 + 0.5)) * 32)


class Adam:
    """Adaptive-moment optimizer, no weight decay, fixed learning rate."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = state[f"adam.m/{k}"].copy()
            self.v[k] = state[f"adam.v/{k}"].copy()


@dataclass
class EpochRecord:
    epoch: int
    loss: dict[str, float]
    val_mdice: float
    val_miou: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoint: str = ""
    best_checkpoint: str = ""

    def to_dict(self) -> dict[str, Any]:
        # wall time is kept out of the reproducible record; see timing.json
        return {
            "epochs": [
                {"epoch": e.epoch, "loss": e.loss, "val_mdice": e.val_mdice, "val_miou": e.val_miou}
                for e in self.epochs
            ],
            "checkpoint": self.checkpoint,
            "best_checkpoint": self.best_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunRecord":
        return cls([EpochRecord(**e) for e in d["epochs"]], d.get("checkpoint", ""),
                   d.get("best_checkpoint", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *(f"loss_{t}" for t in LOSS_TERMS), "val_mdice", "val_miou"])
        for e in self.epochs:
            w.writerow([e.epoch, *(repr(e.loss[t]) for t in LOSS_TERMS), repr(e.val_mdice), repr(e.val_miou)])
        return buf.getvalue()

    def write(self, out_dir: Path) -> None:
        (out_dir / "run_record.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out_dir / "run_record.csv").write_text(self.to_csv())
        timing = {str(e.epoch): e.wall_time for e in self.epochs}
        (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")


# --- inference ------------------------------------------------------------


def forward_batches(params: Params, images: np.ndarray, cfg: NetworkConfig, batch: int = 16):
    for start in range(0, len(images), batch):
        x = Tensor(images[start:start + batch])
        yield pranet_v2_forward(x, params, cfg.softmax_axis)[-1], x.shape[2:]


def predict(params: Params, cfg: NetworkConfig, images: np.ndarray) -> np.ndarray:
    """Label maps (multi-class) or foreground probabilities (single class) at native size."""
    out = []
    for r1, (h, w) in forward_batches(params, images, cfg):
        if cfg.num_classes == 1:
            out.append(sigmoid(bilinear_resize(r1.fg, h, w)).data[:, 0])
        else:
            out.append(predict_labels(r1, h, w))
    return np.concatenate(out)


def evaluate_params(params: Params, cfg: NetworkConfig, ds: Dataset) -> M.MetricsReport:
    return evaluate_predictions(predict(params, cfg, ds.images), cfg, ds)


def evaluate_predictions(preds: np.ndarray, cfg: NetworkConfig, ds: Dataset) -> M.MetricsReport:
    """Score outputs of :func:`predict` (one per dataset image) against the dataset labels."""
    if cfg.num_classes == 1:
        pairs = ((n, p, g > 0) for n, p, g in zip(ds.names, preds, ds.labels))
        return M.evaluate_pairs(pairs, "binary")
    pairs = zip(ds.names, preds, ds.labels)
    return M.evaluate_pairs(pairs, "multiclass", cfg.num_classes)


def evaluate(checkpoint: str | Path, ds: Dataset) -> M.MetricsReport:
    params, cfg, _, _ = load_checkpoint(checkpoint)
    return evaluate_params(params, cfg, ds)


def quick_scores(params: Params, cfg: NetworkConfig, ds: Dataset) -> tuple[float, float]:
    """Mean Dice and IoU over images (multi-class: over GT classes, then images)."""
    preds = predict(params, cfg, ds.images)
    dices, ious = [], []
    for p, g in zip(preds, ds.labels):
        if cfg.num_classes == 1:
            d, i = M.dice_iou(p >= 0.5, g > 0)
        else:
            d, _, i, _ = M.multiclass_dice(p, g, cfg.num_classes)
        if not np.isnan(d):
            dices.append(d)
            ious.append(i)
    if not dices:
        return float("nan"), float("nan")
    return float(np.mean(dices)), float(np.mean(ious))


# --- training -------------------------------------------------------------


def _dump_diagnostics(out_dir: Path | None, step: int, x: np.ndarray, labels: np.ndarray,
                      params: Params, breakdown: dict[str, float]) -> Path | None:
    if out_dir is None:
        return None
    d = out_dir / "diagnostics"
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / f"step_{step:06d}.npz", images=x, labels=labels)
    info = {
        "step": step,
        "loss": {k: repr(v) for k, v in breakdown.items()},
        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in params.items()},
    }
    path = d / f"step_{step:06d}.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return path


def _train_val(ds: Dataset) -> tuple[Dataset, Dataset | None]:
    if ds.splits.get("train"):
        train = ds.split_subset("train")
        val = ds.split_subset("val") if ds.splits.get("val") else None
        return train, val
    return ds, None


def train(
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    ds: Dataset,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    params: Params | None = None,
) -> tuple[RunRecord, Params]:
    """Train on the dataset's train split, validating on its val split.

    Checkpoints go to ``out_dir/checkpoints/{last,best}`` after each epoch;
    ``resume`` continues from a ``last`` checkpoint and reproduces the
    uninterrupted run exactly.
    """
    train_ds, val_ds = _train_val(ds)
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    if ds.num_classes != net_cfg.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, network expects {net_cfg.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    params = params if params is not None else init_params(net_cfg)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    record = RunRecord()
    start_epoch, step, best = 1, 0, -np.inf
    if resume is not None:
        params, ck_cfg, meta, state = load_checkpoint(resume)
        if ck_cfg != net_cfg:
            raise ValueError("resume checkpoint was trained with a different network config")
        opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        opt.load_state(state, meta["adam_t"])
        rng.bit_generator.state = meta["rng_state"]
        record = RunRecord.from_dict(meta["run_record"])
        start_epoch, step, best = meta["epoch"] + 1, meta["step"], meta["best_val_mdice"]

    n = len(train_ds)
    h, w = train_ds.images.shape[2:]
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        n_steps = 0
        order = rng.permutation(n)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            s = cfg.scales[int(rng.integers(len(cfg.scales)))]
            th, tw = snap32(h * s), snap32(w * s)
            assert th % 32 == 0 and tw % 32 == 0
            x = resize_array(train_ds.images[idx], th, tw)
            lab = resize_nearest(train_ds.labels[idx], th, tw)
            step += 1
            with Tape() as tape:
                outs = pranet_v2_forward(Tensor(x), params, net_cfg.softmax_axis)
                loss, br = total_loss(outs, lab, cfg.loss)
            if not np.isfinite(br["total"]):
                dump = _dump_diagnostics(out, step, x, lab, params, br)
                raise NumericError(f"non-finite loss {br['total']!r} at step {step} (epoch {epoch})", dump)
            tape.backward(loss)
            opt.step(params)
            for p in params.values():
                p.grad = None
            for t in LOSS_TERMS:
                sums[t] += br[t]
            n_steps += 1

        mean_loss = {t: sums[t] / n_steps for t in LOSS_TERMS}
        vd = vi = float("nan")
        if val_ds is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            vd, vi = quick_scores(params, net_cfg, val_ds)
        record.epochs.append(EpochRecord(epoch, mean_loss, vd, vi, time.perf_counter() - t0))
        log.info("epoch %d loss %.4f val mDice %.4f", epoch, mean_loss["total"], vd)

        if out is not None:
            ck = out / "checkpoints"
            improved = not np.isnan(vd) and vd > best
            if improved:
                best = vd
            record.checkpoint = str(Path("checkpoints") / "last")
            if improved or not record.best_checkpoint:
                record.best_checkpoint = str(Path("checkpoints") / "best")
            meta = {
                "epoch": epoch,
                "adam_t": opt.t,
                "rng_state": rng.bit_generator.state,
                "run_record": record.to_dict(),
                "best_val_mdice": best,
                "train_config": cfg.to_dict(),
            }
            save_checkpoint(ck / "last", params, net_cfg, step, opt.state(), meta)
            if improved or not (ck / "best").exists():
                save_checkpoint(ck / "best", params, net_cfg, step, meta=meta)
            record.write(out)
    return record, params


# --- ablation -------------------------------------------------------------


@dataclass
class AblationRow:
    combo: str
    seed: int
    mdice: float
    miou: float
    loss: dict[str, float]


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def medians(self) -> dict[str, tuple[float, float]]:
        out = {}
        for combo in ABLATION_COMBOS:
            rs = [r for r in self.rows if r.combo == combo]
            out[combo] = (float(np.median([r.mdice for r in rs])), float(np.median([r.miou for r in rs])))
        return out

    def full_vs_best_pair(self) -> tuple[float, float]:
        med = self.medians()
        full = med["BCE+CE+Dice"][0]
        best_pair = max(v[0] for k, v in med.items() if k != "BCE+CE+Dice")
        return full, best_pair

    def full_worst_every_seed(self) -> bool:
        seeds = sorted({r.seed for r in self.rows})
        for s in seeds:
            rs = {r.combo: r.mdice for r in self.rows if r.seed == s}
            if rs["BCE+CE+Dice"] > min(rs.values()):
                return False
        return True

    def render(self) -> str:
        lines = [f"{'BCE':>4}{'CE':>4}{'Dice':>6}{'seed':>6}{'mDice':>9}{'mIoU':>9}"]
        for r in self.rows:
            wd, wc, wb = ABLATION_COMBOS[r.combo]
            marks = ["x" if wb else "-", "x" if wc else "-", "x" if wd else "-"]
            lines.append(f"{marks[0]:>4}{marks[1]:>4}{marks[2]:>6}{r.seed:>6}"
                         f"{100 * r.mdice:>9.2f}{100 * r.miou:>9.2f}")
        lines.append("median over seeds:")
        for combo, (d, i) in self.medians().items():
            lines.append(f"  {combo:<12}{100 * d:>9.2f}{100 * i:>9.2f}")
        full, best_pair = self.full_vs_best_pair()
        lines.append(f"full combo {100 * full:.2f} vs best two-term {100 * best_pair:.2f} "
                     f"(margin {100 * (full - best_pair):+.2f} points)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["combo", "seed", "w_dice", "w_ce", "w_bce", "mdice", "miou",
                    "loss_dice", "loss_ce", "loss_bce"])
        for r in self.rows:
            w.writerow([r.combo, r.seed, *ABLATION_COMBOS[r.combo], repr(r.mdice), repr(r.miou),
                        repr(r.loss["dice"]), repr(r.loss["ce"]), repr(r.loss["bce"])])
        return buf.getvalue()


def ablate_losses(net_cfg: NetworkConfig, cfg: TrainConfig, ds: Dataset, seeds: Sequence[int],
                  out_dir: str | Path | None = None) -> AblationTable:
    """One run per (loss combination, seed); scored on the val split."""
    _, val_ds = _train_val(ds)
    if val_ds is None:
        raise ValueError("ablation needs a dataset with a val split")
    rows = []
    for seed in seeds:
        for combo, (wd, wc, wb) in ABLATION_COMBOS.items():
            loss = replace(cfg.loss, w_dice=wd, w_ce=wc, w_bce=wb)
            run_cfg = replace(cfg, loss=loss, seed=seed)
            run_net = replace(net_cfg, seed=seed)
            sub = Path(out_dir) / f"{combo}_seed{seed}" if out_dir is not None else None
            record, params = train(run_net, run_cfg, ds, sub)
            d, i = quick_scores(params, run_net, val_ds)
            rows.append(AblationRow(combo, seed, d, i, record.epochs[-1].loss))
            log.info("ablation %s seed %d: mDice %.4f", combo, seed, d)
    table = AblationTable(rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(table.to_csv())
        (Path(out_dir) / "ablation.txt").write_text(table.render())
    return table


# --- gradcheck of the whole network ----------------------------------------


def tiny_config(size: int = 32, num_classes: int = 2, seed: int = 0) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes, stem_channels=3, encoder_channels=(4, 4, 5, 5),
                         decoder_channels=4, height=size, width=size, seed=seed)


def reference_configs(seed: int = 0) -> tuple[NetworkConfig, TrainConfig]:
    """Network and training settings of the reference 3-class run (full loss, 30 epochs)."""
    net = NetworkConfig(num_classes=3, encoder_channels=(32, 64, 96, 128), decoder_channels=48, seed=seed)
    return net, TrainConfig(epochs=30, batch_size=2, lr=2e-3, seed=seed)


def gradcheck_model(net_cfg: NetworkConfig | None = None, loss_spec: LossSpec | None = None,
                    max_entries: int | None = None, seed: int = 0, h: float = 1e-3,
                    ) -> dict[str, GradcheckReport]:
    """Finite-difference check of the full four-stage loss, one report per parameter group.

    The step is larger than for single ops: many weight gradients are ~1e-7
    against a loss of ~10, so at h = 1e-5 roundoff alone reaches 1e-4
    relative error. Relu crossings are handled by the step shrinking in
    :func:`gradcheck`.
    """
    net_cfg = net_cfg or tiny_config()
    loss_spec = loss_spec or LossSpec()
    params = init_params(net_cfg)
    rng = np.random.default_rng(seed)
    # biases off zero so no ReLU sits exactly on its kink
    for name, p in params.items():
        if name.endswith(".b"):
            p.data[:] = rng.uniform(-0.1, 0.1, size=p.shape)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, net_cfg.in_channels, net_cfg.height, net_cfg.width)))
    labels = rng.integers(0, net_cfg.num_classes + 1, size=(1, net_cfg.height, net_cfg.width))

    # decoder-side groups cannot change the encoder output, so its pyramid is computed once
    pyr = encoder_forward(x, params)
    pyr = FeaturePyramid(*(Tensor(f.data) for f in pyr.as_list()))

    reports = {}
    for group, names in parameter_groups(params).items():
        def f(**subset):
            merged = {**params, **subset}
            if group.startswith("enc."):
                outs = pranet_v2_forward(x, merged, net_cfg.softmax_axis)
            else:
                outs = cascade_forward(pyr, merged, net_cfg.softmax_axis)
            return total_loss(outs, labels, loss_spec)[0]

        reports[group] = gradcheck(f, {k: params[k] for k in names}, h=h, max_entries=max_entries, seed=seed)
    return reports
