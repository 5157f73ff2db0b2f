"""Saliency maps for regression outputs: Grad-CAM, occlusion, SmoothGrad."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .models import (
    Target,
    as_batch,
    capture_activations,
    describe_target,
    eval_mode,
    input_gradient,
    model_dtype,
    select_target,
)
from .nifti import write_nifti
from .volume import ValidationError, Volume3D

METHODS = ("gradcam", "gradcam_avg", "occlusion", "smoothgrad")


@dataclass
class SaliencyResult:
    map: Volume3D
    method: str
    target_descriptor: str
    params: dict = field(default_factory=dict)
    normalization: str = "minmax01"

    def sidecar(self, checkpoint_id: str = "") -> dict:
        return {
            "method": self.method,
            "params": self.params,
            "target_descriptor": self.target_descriptor,
            "normalization": self.normalization,
            "model_checkpoint_id": checkpoint_id,
        }


def save_saliency(result: SaliencyResult, path, checkpoint_id: str = "") -> tuple[Path, Path]:
    """Write ``<path>.nii.gz`` and ``<path>.json``."""
    base = Path(path)
    nii = base.with_name(base.name + ".nii.gz")
    side = base.with_name(base.name + ".json")
    write_nifti(result.map, nii)
    with open(side, "w") as f:
        json.dump(result.sidecar(checkpoint_id), f, indent=2, sort_keys=True)
        f.write("\n")
    return nii, side


def _as_input(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, Volume3D):
        return np.asarray(x.data), x.affine
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValidationError(f"saliency input must be a single 3D volume, got shape {arr.shape}")
    return arr, np.eye(4)


def minmax01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        return (a - lo) / (hi - lo)
    return np.zeros_like(a)


def _cam(model, img, layer, target) -> np.ndarray:
    cap = capture_activations(model, img, [layer])
    acts = cap.activations[layer]
    if acts.dim() != 5:
        raise ValidationError(f"layer {layer!r} does not produce a volumetric activation")
    grads = cap.gradients(target)[layer]
    weights = grads.mean(dim=(2, 3, 4), keepdim=True)
    raw = F.relu((weights * acts).sum(dim=1, keepdim=True)).detach()
    up = F.interpolate(raw, size=tuple(img.shape), mode="trilinear", align_corners=False)
    return up[0, 0].double().numpy()


def grad_cam(model, x, layer: str, target: Target = "global_age") -> SaliencyResult:
    """Grad-CAM with the regression scalar in place of a class score.

    Channel weights are spatially averaged gradients of ``target`` at
    ``layer``; the ReLU of the weighted activation sum is trilinearly
    upsampled to the input grid and min-max normalised.
    """
    img, affine = _as_input(x)
    cam = minmax01(_cam(model, img, layer, target))
    return SaliencyResult(
        Volume3D(cam, affine), "gradcam", describe_target(target), {"layer": layer}, "minmax01"
    )


def grad_cam_averaged(model, x, early_layer: str, final_layer: str, target: Target = "global_age") -> SaliencyResult:
    """Voxel-wise mean of two independently normalised Grad-CAM maps."""
    if early_layer == final_layer:
        raise ValidationError("grad_cam_averaged needs two distinct layers")
    a = grad_cam(model, x, early_layer, target).map
    b = grad_cam(model, x, final_layer, target).map
    avg = 0.5 * (a.data + b.data)
    return SaliencyResult(
        a.with_data(avg),
        "gradcam_avg",
        describe_target(target),
        {"early_layer": early_layer, "final_layer": final_layer},
        "minmax01",
    )


def _starts(size, patch, stride):
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def default_occlusion_patch(shape) -> int:
    patch = int(round(min(shape) / 4 / 2)) * 2
    return max(patch, 2)


def _predict_scalar(model, batch: np.ndarray, target) -> np.ndarray:
    x = as_batch(batch, model_dtype(model))
    with eval_mode(model), torch.no_grad():
        return select_target(model(x), target).double().numpy().reshape(-1)


def occlusion_sensitivity(
    model,
    x,
    patch: int | None = None,
    stride: int | None = None,
    fill: float = 0.0,
    target: Target = "global_age",
    batch_size: int = 8,
) -> SaliencyResult:
    """Signed occlusion map anchored to the unoccluded prediction.

    For every cube on the stride grid, ``s = y0 - y_occluded``; each voxel
    gets the mean ``s`` of the cubes covering it.  Positive values mark
    content that pushes the prediction up.
    """
    img, affine = _as_input(x)
    if patch is None:
        patch = default_occlusion_patch(img.shape)
    if stride is None:
        stride = max(1, patch // 2)
    if patch < 1 or any(patch > s for s in img.shape):
        raise ValidationError(f"occlusion patch {patch} must lie in [1, {min(img.shape)}]")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if stride > patch:
        raise ValidationError(f"stride {stride} > patch {patch} leaves voxels uncovered")

    baseline = _predict_scalar(model, img[None], target)[0]
    positions = [
        (i, j, k)
        for i in _starts(img.shape[0], patch, stride)
        for j in _starts(img.shape[1], patch, stride)
        for k in _starts(img.shape[2], patch, stride)
    ]
    total = np.zeros(img.shape, dtype=np.float64)
    count = np.zeros(img.shape, dtype=np.float64)
    for start in range(0, len(positions), batch_size):
        chunk = positions[start : start + batch_size]
        batch = np.repeat(img[None], len(chunk), axis=0)
        for b, (i, j, k) in enumerate(chunk):
            batch[b, i : i + patch, j : j + patch, k : k + patch] = fill
        scores = baseline - _predict_scalar(model, batch, target)
        for (i, j, k), s in zip(chunk, scores):
            total[i : i + patch, j : j + patch, k : k + patch] += s
            count[i : i + patch, j : j + patch, k : k + patch] += 1
    return SaliencyResult(
        Volume3D(total / count, affine),
        "occlusion",
        describe_target(target),
        {"patch": patch, "stride": stride, "fill": fill, "baseline": float(baseline)},
        "signed_raw",
    )


def smoothgrad(
    model,
    x,
    n: int = 25,
    sigma: float = 0.1,
    target: Target = "global_age",
    mode: str = "signed",
    seed: int = 0,
    batch_size: int = 8,
) -> SaliencyResult:
    """Mean input gradient over ``n`` Gaussian-perturbed copies of ``x``.

    ``sigma`` is a fraction of the input's dynamic range.  ``mode`` is
    ``"signed"`` or ``"magnitude"`` (absolute value of the signed mean).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if mode not in ("signed", "magnitude"):
        raise ValidationError(f"mode must be 'signed' or 'magnitude', got {mode!r}")
    img, affine = _as_input(x)
    std = sigma * float(img.max() - img.min())

    if std == 0:
        # every draw is the clean input
        mean = input_gradient(model, img, target)[0, 0].double().numpy()
    else:
        rng = np.random.default_rng(seed)
        mean = np.zeros(img.shape, dtype=np.float64)
        done = 0
        while done < n:
            b = min(batch_size, n - done)
            noisy = img[None] + rng.normal(0.0, std, size=(b,) + img.shape)
            grads = input_gradient(model, noisy, target)[:, 0].double().numpy()
            for g in grads:
                done += 1
                # running mean stays exact when all draws agree
                mean += (g - mean) / done
    out = np.abs(mean) if mode == "magnitude" else mean
    return SaliencyResult(
        Volume3D(out, affine),
        "smoothgrad",
        describe_target(target),
        {"n": n, "sigma": sigma, "mode": mode, "seed": seed},
        "signed_raw",
    )
