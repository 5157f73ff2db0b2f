"""Volumetric data carriers and input validation helpers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass
class Volume3D:
    """A 3D scalar field with a voxel-to-world affine (mm).

    ``header`` optionally carries the raw 348-byte NIfTI header the volume
    was read from so unrelated fields survive a round trip.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    header: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValidationError(f"Volume3D needs 3D data, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValidationError(f"empty volume shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ValidationError(f"affine must be 4x4, got {self.affine.shape}")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise ValidationError("affine upper-left 3x3 is singular")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same geometry, new voxel values."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ValidationError(f"shape {data.shape} does not match {self.data.shape}")
        return replace(self, data=data)


@dataclass
class Subject:
    """One scan with its annotations.

    Tissue labels follow ``{0: background, 1: GM, 2: WM, 3: CSF}``.
    ``voxel_age`` is the per-voxel ground truth when one is known (phantoms);
    otherwise the chronological age is the target everywhere in the brain.
    """

    image: Volume3D
    chronological_age: float
    brain_mask: Volume3D
    tissue_labels: Volume3D
    subject_id: str = ""
    voxel_age: Optional[Volume3D] = None

    def __post_init__(self):
        if not self.chronological_age >= 0:
            raise ValidationError("chronological_age must be >= 0")
        vols = [self.brain_mask, self.tissue_labels]
        if self.voxel_age is not None:
            vols.append(self.voxel_age)
        for v in vols:
            if v.shape != self.image.shape or not np.allclose(v.affine, self.image.affine):
                raise ValidationError("all subject volumes must share shape and affine")

    def voxel_age_target(self) -> np.ndarray:
        if self.voxel_age is not None:
            return np.asarray(self.voxel_age.data, dtype=np.float64)
        return np.where(self.brain_mask.data > 0, float(self.chronological_age), 0.0)


@dataclass
class PatchSample:
    image_patch: Volume3D
    seg_target: Volume3D
    voxel_age_target: Volume3D
    global_age_target: float
    origin: tuple[int, int, int]
    brain_mask: Volume3D

    @property
    def size(self) -> int:
        return self.image_patch.shape[0]


def as_volume(x, affine=None) -> Volume3D:
    if isinstance(x, Volume3D):
        return x
    return Volume3D(np.asarray(x), np.eye(4) if affine is None else affine)


def check_finite(data: np.ndarray, what: str = "volume") -> np.ndarray:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains NaN or Inf")
    return data


def check_volume_batch(X, *, name: str = "X") -> np.ndarray:
    """Coerce images to a float32 array of shape (n, D, H, W).

    Accepts a single 3D array, a 4D stack, a 5D stack with a singleton channel
    axis, or a sequence of arrays / ``Volume3D`` objects of equal shape.
    """
    if isinstance(X, Volume3D):
        X = [X]
    if isinstance(X, (list, tuple)):
        X = np.stack([as_volume(v).data for v in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    elif X.ndim == 5:
        if X.shape[1] != 1:
            raise ValidationError(f"{name}: expected one channel, got {X.shape[1]}")
        X = X[:, 0]
    if X.ndim != 4:
        raise ValidationError(f"{name}: expected (n, D, H, W) volumes, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError(f"{name}: empty batch")
    return check_finite(X, name)


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValidationError(f"shape mismatch between {label}: {shapes}")
