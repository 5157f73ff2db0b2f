"""Patch sampling and on-the-fly augmentation for training."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from scipy import ndimage

from .volume import PatchSample, Subject, ValidationError, Volume3D

MAX_CROP_DRAWS = 32


def _crop(vol: Volume3D, origin, size) -> Volume3D:
    sl = tuple(slice(o, o + size) for o in origin)
    aff = vol.affine.copy()
    aff[:3, 3] = vol.affine[:3, :3] @ np.asarray(origin, dtype=np.float64) + vol.affine[:3, 3]
    return Volume3D(np.ascontiguousarray(vol.data[sl]), aff)


def random_crop(
    subject: Subject,
    size: int,
    min_brain_fraction: float = 0.3,
    rng: np.random.Generator | None = None,
) -> PatchSample:
    """Crop a ``size**3`` patch holding a meaningful amount of brain.

    Origins are drawn uniformly; up to ``MAX_CROP_DRAWS`` draws are tried
    until the mask fraction reaches ``min_brain_fraction``, otherwise the
    best candidate seen is returned.
    """
    if rng is None:
        rng = np.random.default_rng()
    shape = subject.image.shape
    if size < 1 or any(size > s for s in shape):
        raise ValidationError(f"crop size {size} exceeds volume shape {shape}")
    if not 0 <= min_brain_fraction < 1:
        raise ValidationError("min_brain_fraction must lie in [0, 1)")

    mask = subject.brain_mask.data > 0
    best, best_frac = None, -1.0
    for _ in range(MAX_CROP_DRAWS):
        origin = tuple(int(rng.integers(0, s - size + 1)) for s in shape)
        sl = tuple(slice(o, o + size) for o in origin)
        frac = float(mask[sl].mean())
        if frac > best_frac:
            best, best_frac = origin, frac
        if frac >= min_brain_fraction:
            break

    age_map = Volume3D(subject.voxel_age_target(), subject.image.affine)
    return PatchSample(
        image_patch=_crop(subject.image, best, size),
        seg_target=_crop(subject.tissue_labels, best, size),
        voxel_age_target=_crop(age_map, best, size),
        global_age_target=float(subject.chronological_age),
        origin=best,
        brain_mask=_crop(subject.brain_mask, best, size),
    )


def rotation_matrix(axis: int, angle_deg: float) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _rotate(data, rot, order):
    center = (np.asarray(data.shape, dtype=np.float64) - 1) / 2
    offset = center - rot @ center
    return ndimage.affine_transform(
        np.asarray(data, dtype=np.float64), rot, offset=offset, order=order, mode="constant", cval=0.0
    )


def rotate_augment(
    patch: PatchSample,
    angle_deg: float = 15.0,
    probability: float = 0.5,
    rng: np.random.Generator | None = None,
) -> PatchSample:
    """With ``probability``, rotate the patch about a random principal axis.

    Image: trilinear.  Labels and brain mask: nearest neighbour.  The age map
    is interpolated mask-normalised so brain-edge voxels do not blend with
    the zero background.
    """
    if not 0 <= probability <= 1:
        raise ValidationError(f"probability must lie in [0, 1], got {probability}")
    if rng is None:
        rng = np.random.default_rng()
    # draws happen unconditionally so the stream does not depend on the outcome
    apply = rng.random() < probability
    axis = int(rng.integers(0, 3))
    if not apply:
        return patch

    rot = rotation_matrix(axis, angle_deg)
    image = _rotate(patch.image_patch.data, rot, 1).astype(patch.image_patch.data.dtype)
    labels = _rotate(patch.seg_target.data, rot, 0).astype(patch.seg_target.data.dtype)
    mask_f = (patch.brain_mask.data > 0).astype(np.float64)
    mask = _rotate(mask_f, rot, 0)
    weight = _rotate(mask_f, rot, 1)
    ages = _rotate(patch.voxel_age_target.data * mask_f, rot, 1)
    ages = np.divide(ages, weight, out=np.zeros_like(ages), where=weight > 1e-6)
    ages = np.where(mask > 0, ages, 0.0)
    return PatchSample(
        image_patch=patch.image_patch.with_data(image),
        seg_target=patch.seg_target.with_data(labels),
        voxel_age_target=patch.voxel_age_target.with_data(ages),
        global_age_target=patch.global_age_target,
        origin=patch.origin,
        brain_mask=patch.brain_mask.with_data(mask.astype(patch.brain_mask.data.dtype)),
    )


def inject_label_noise(
    voxel_age_target: Volume3D,
    low: float = -2.0,
    high: float = 2.0,
    rng: np.random.Generator | None = None,
    brain_mask: Volume3D | np.ndarray | None = None,
) -> Volume3D:
    """Add i.i.d. uniform noise in ``[low, high]`` to brain voxels.

    Without an explicit mask, brain voxels are those with a positive target.
    Results are clamped at zero.
    """
    if low > high:
        raise ValidationError(f"low ({low}) must not exceed high ({high})")
    if rng is None:
        rng = np.random.default_rng()
    ages = np.asarray(voxel_age_target.data, dtype=np.float64)
    if brain_mask is None:
        mask = ages > 0
    else:
        mask = np.asarray(getattr(brain_mask, "data", brain_mask)) > 0
    noise = rng.uniform(low, high, size=ages.shape)
    out = np.where(mask, np.maximum(ages + noise, 0.0), ages)
    return voxel_age_target.with_data(out)


def augment_patch(patch: PatchSample, rng, angle_deg=15.0, probability=0.5, noise=(-2.0, 2.0)):
    """Rotation then label noise, the per-sample training transform."""
    patch = rotate_augment(patch, angle_deg, probability, rng)
    noisy = inject_label_noise(patch.voxel_age_target, noise[0], noise[1], rng, patch.brain_mask)
    return replace(patch, voxel_age_target=noisy)
