"""Orientation and intensity preprocessing."""

from __future__ import annotations

import numpy as np

from .volume import Subject, ValidationError, Volume3D, check_finite


def axis_codes(affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map each voxel axis to its dominant world axis and direction.

    Returns ``(world_axis, sign)`` per voxel axis.  Assignment is greedy on
    the largest absolute direction cosine so the result is a permutation
    even for strongly oblique affines.
    """
    rzs = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(rzs)) < 1e-12:
        raise ValidationError("cannot reorient: singular affine")
    cosines = rzs / np.sqrt((rzs**2).sum(axis=0))
    work = np.abs(cosines)
    world = np.full(3, -1)
    for _ in range(3):
        w, v = np.unravel_index(np.argmax(work), work.shape)
        world[v] = w
        work[w, :] = -1
        work[:, v] = -1
    sign = np.sign(cosines[world, np.arange(3)])
    return world, sign


def reorient_canonical(vol: Volume3D) -> Volume3D:
    """Permute/flip voxel axes (no resampling) so the affine is closest to RAS+."""
    world, sign = axis_codes(vol.affine)
    if np.array_equal(world, np.arange(3)) and np.all(sign > 0):
        return vol

    data = vol.data
    for v in range(3):
        if sign[v] < 0:
            data = np.flip(data, axis=v)
    # new axis k holds old voxel axis v where world[v] == k
    order = np.argsort(world)
    data = np.ascontiguousarray(np.transpose(data, order))

    # old index = M @ new index
    m = np.zeros((4, 4))
    m[3, 3] = 1.0
    for k, v in enumerate(order):
        if sign[v] < 0:
            m[v, k] = -1.0
            m[v, 3] = vol.shape[v] - 1
        else:
            m[v, k] = 1.0
    return Volume3D(data, vol.affine @ m, header=vol.header)


def normalize_intensity(vol: Volume3D) -> Volume3D:
    """Min-max scale to [0, 1]; a constant volume maps to zeros."""
    data = check_finite(vol.data).astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi > lo:
        out = (data - lo) / (hi - lo)
    else:
        out = np.zeros_like(data)
    return vol.with_data(out.astype(np.float32))


def _reorient_like(vol: Volume3D, ref_affine: np.ndarray) -> Volume3D:
    return reorient_canonical(Volume3D(vol.data, ref_affine))


def preprocess_subject(subject: Subject) -> Subject:
    """Canonical orientation for every volume, min-max intensity for the image."""
    aff = subject.image.affine
    image = normalize_intensity(reorient_canonical(subject.image))
    voxel_age = None
    if subject.voxel_age is not None:
        voxel_age = _reorient_like(subject.voxel_age, aff)
    return Subject(
        image=image,
        chronological_age=subject.chronological_age,
        brain_mask=_reorient_like(subject.brain_mask, aff),
        tissue_labels=_reorient_like(subject.tissue_labels, aff),
        subject_id=subject.subject_id,
        voxel_age=voxel_age,
    )
