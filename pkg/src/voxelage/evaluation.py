"""PAD masks, cohort metrics and slice rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch.nn as nn
from matplotlib import colormaps
from matplotlib.colors import LinearSegmentedColormap
from PIL import Image

from .models import MultiTaskOutput
from .preprocess import preprocess_subject
from .training import predict_global, predict_voxel
from .volume import Subject, ValidationError, Volume3D, check_same_shape

TISSUE_NAMES = {1: "gm", 2: "wm", 3: "csf"}
METRIC_COLUMNS = ["subject_id", "global_mae", "voxel_mae", "dice_gm", "dice_wm", "dice_csf"]


@dataclass
class PADMask:
    map: Volume3D
    brain_mask: Volume3D
    subject_id: str
    chronological_age: float


def compute_pad(pred_voxel_age, chronological_age: float, brain_mask, subject_id: str = "") -> PADMask:
    """Predicted minus chronological age inside the brain, zero outside."""
    pred = pred_voxel_age if isinstance(pred_voxel_age, Volume3D) else Volume3D(np.asarray(pred_voxel_age))
    mask = brain_mask if isinstance(brain_mask, Volume3D) else Volume3D(np.asarray(brain_mask), pred.affine)
    check_same_shape(pred.data, mask.data, names=("prediction", "brain mask"))
    inside = mask.data > 0
    pad = np.where(inside, np.asarray(pred.data, dtype=np.float64) - float(chronological_age), 0.0)
    return PADMask(pred.with_data(pad), mask, subject_id, float(chronological_age))


def hard_dice(pred_probs, target_labels, classes=(1, 2, 3)) -> dict[int, float]:
    """Argmax Dice per tissue class; a class absent from both scores 1."""
    probs = np.asarray(pred_probs)
    target = np.asarray(target_labels)
    if probs.shape[1:] != target.shape:
        raise ValidationError(f"probabilities {probs.shape} do not match labels {target.shape}")
    pred = probs.argmax(axis=0)
    out = {}
    for c in classes:
        p, g = pred == c, target == c
        denom = p.sum() + g.sum()
        out[c] = 1.0 if denom == 0 else float(2.0 * (p & g).sum() / denom)
    return out


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def aggregate(self, name: str) -> tuple[float, float]:
        """(mean, sample SD) of a metric, ignoring missing values."""
        v = self.column(name)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return float(v.mean()), sd

    @property
    def mean_dice(self) -> float:
        return float(np.nanmean([self.aggregate(f"dice_{n}")[0] for n in TISSUE_NAMES.values()]))

    def summary(self) -> dict:
        out = {}
        for name in METRIC_COLUMNS[1:]:
            m, s = self.aggregate(name)
            out[name] = {"mean": m, "sd": s}
        out["dice_mean"] = self.mean_dice
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r["subject_id"]] + [_fmt(r[c]) for c in METRIC_COLUMNS[1:]])
            aggs = [self.aggregate(c) for c in METRIC_COLUMNS[1:]]
            w.writerow(["mean"] + [_fmt(a[0]) for a in aggs])
            w.writerow(["sd"] + [_fmt(a[1]) for a in aggs])


def _fmt(v) -> str:
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def _predict(model, subject: Subject, window):
    if isinstance(model, nn.Module):
        if getattr(model, "kind", None) == "voxel":
            return predict_voxel(model, subject, window=window, preprocess=False)
        return float(predict_global(model, [subject], preprocess=False)[0])
    return model(subject)


def evaluate_cohort(model, subjects, window: int | None = None, preprocess: bool = True) -> MetricsReport:
    """Per-subject global MAE, voxel MAE and hard Dice plus cohort aggregates.

    ``model`` is a trained network or any callable ``subject -> output``
    where output is a :class:`MultiTaskOutput` (voxel-level) or a float
    (global age only).
    """
    if not subjects:
        raise ValidationError("cannot evaluate an empty cohort")
    report = MetricsReport()
    for s in subjects:
        if preprocess:
            s = preprocess_subject(s)
        out = _predict(model, s, window)
        row = {"subject_id": s.subject_id}
        if isinstance(out, MultiTaskOutput):
            mask = s.brain_mask.data > 0
            truth = s.voxel_age_target()
            pred_age = np.asarray(out.voxel_age, dtype=np.float64)
            row["global_mae"] = abs(float(out.global_age) - s.chronological_age)
            row["voxel_mae"] = float(np.abs(pred_age - truth)[mask].mean())
            dice = hard_dice(np.asarray(out.seg_probs), s.tissue_labels.data)
            for c, name in TISSUE_NAMES.items():
                row[f"dice_{name}"] = dice[c]
        else:
            row["global_mae"] = abs(float(out) - s.chronological_age)
            row["voxel_mae"] = float("nan")
            for name in TISSUE_NAMES.values():
                row[f"dice_{name}"] = float("nan")
        report.rows.append(row)
    return report


def _diverging_cmap():
    # odd LUT length so 0.5 lands exactly on white
    return LinearSegmentedColormap.from_list("blue_white_red", ["#0000ff", "#ffffff", "#ff0000"], N=255)


COLORMAPS = ("gray", "red_yellow_blue", "diverging_blue_white_red")


def slice_rgb(volume, axis: int, index: int, colormap: str = "gray", symmetric_range=None, mask=None) -> np.ndarray:
    """Render one slice as a uint8 RGB array (rows = first remaining axis)."""
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float64)
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < data.shape[axis]:
        raise ValidationError(f"slice index {index} outside [0, {data.shape[axis]})")
    sl = np.take(data, index, axis=axis)

    if colormap == "diverging_blue_white_red":
        if symmetric_range is None:
            ref = data if mask is None else data[np.asarray(mask) > 0]
            symmetric_range = float(np.abs(ref).max()) if ref.size else 0.0
        r = float(symmetric_range)
        norm = np.full(sl.shape, 0.5) if r == 0 else np.clip(0.5 + 0.5 * sl / r, 0.0, 1.0)
        cmap = _diverging_cmap()
    else:
        lo, hi = float(data.min()), float(data.max())
        norm = (sl - lo) / (hi - lo) if hi > lo else np.zeros_like(sl)
        if colormap == "gray":
            cmap = colormaps["gray"]
        elif colormap == "red_yellow_blue":
            # high values red, low values blue
            cmap = colormaps["RdYlBu_r"]
        else:
            raise ValidationError(f"unknown colormap {colormap!r}; choose from {COLORMAPS}")
    rgba = cmap(norm)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def export_slice(volume, axis: int, index: int, path, colormap: str = "gray", symmetric_range=None, mask=None) -> Path:
    """Write one slice of ``volume`` as an 8-bit RGB PNG."""
    rgb = slice_rgb(volume, axis, index, colormap, symmetric_range, mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path)
    return path


def export_panel(panels: list[np.ndarray], path, gap: int = 2) -> Path:
    """Place RGB slices side by side (white gaps), e.g. input | Grad-CAM | ... | PAD."""
    h = max(p.shape[0] for p in panels)
    w = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for p in panels:
        canvas[: p.shape[0], x : x + p.shape[1]] = p
        x += p.shape[1] + gap
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(path)
    return path
