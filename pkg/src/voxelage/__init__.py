"""Voxel-level brain age prediction with interpretability tooling."""

__version__ = "0.1.0"

from .volume import PatchSample, Subject, ValidationError, Volume3D  # noqa: E402
from .nifti import read_nifti, write_nifti  # noqa: E402
from .preprocess import normalize_intensity, reorient_canonical  # noqa: E402
from .estimators import GlobalAgeRegressor, IntensityNormalizer, VoxelAgeRegressor  # noqa: E402

__all__ = [
    "Volume3D",
    "Subject",
    "PatchSample",
    "ValidationError",
    "read_nifti",
    "write_nifti",
    "normalize_intensity",
    "reorient_canonical",
    "VoxelAgeRegressor",
    "GlobalAgeRegressor",
    "IntensityNormalizer",
]
