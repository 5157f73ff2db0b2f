"""Deterministic synthetic "aging brain" phantoms with known ground truth.

Each phantom is an ellipsoidal brain made of concentric tissue shells
(CSF outside, then GM, then WM) with a central CSF ventricle.  Age enters
through two channels: the ventricle grows linearly with age and GM
intensity drops linearly with age.  The per-voxel age ground truth is the
chronological age, optionally shifted by a fixed number of years inside one
octant of the volume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .nifti import read_nifti, write_nifti
from .volume import Subject, ValidationError, Volume3D

BACKGROUND, GM, WM, CSF = 0, 1, 2, 3

WM_INTENSITY = 0.8
CSF_INTENSITY = 0.2
GM_BASE_INTENSITY = 0.55

# Fractions of the outer ellipsoid radius where shells change.
CSF_SHELL = 0.88
GM_SHELL = 0.62
BRAIN_SEMI_AXES = (0.45, 0.39, 0.42)
VENTRICLE_ASPECT = (1.3, 0.8, 0.8)

MANIFEST_COLUMNS = ["subject_id", "age_years", "image", "mask", "labels", "voxel_age"]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    age_range: tuple[float, float] = (30.0, 80.0)
    ventricle_growth_k: float = 0.04
    gm_intensity_slope: float = -0.002
    noise_sigma: float = 0.02
    # ((x_half, y_half, z_half), years); each half is 0 (lower) or 1 (upper)
    regional_offset: Optional[tuple[tuple[int, int, int], float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValidationError("phantom size must be >= 16")
        lo, hi = self.age_range
        if not lo < hi:
            raise ValidationError("age_range must satisfy low < high")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.regional_offset is not None:
            octant, _ = self.regional_offset
            if len(octant) != 3 or any(h not in (0, 1) for h in octant):
                raise ValidationError("octant selector must be three 0/1 flags")

    @property
    def ventricle_r0(self) -> float:
        return 0.06 * self.size


def _age_seed(seed: int, age: float) -> np.random.SeedSequence:
    bits = int(np.float64(age).view(np.uint64))
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, bits & 0xFFFFFFFF, bits >> 32])


def _grid(size):
    c = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64) - c
    return np.meshgrid(idx, idx, idx, indexing="ij")


def octant_mask(size: int, octant) -> np.ndarray:
    c = (size - 1) / 2.0
    idx = np.arange(size)
    sel = [(idx > c) if h else (idx < c) for h in octant]
    return sel[0][:, None, None] & sel[1][None, :, None] & sel[2][None, None, :]


def ventricle_radius(spec: PhantomSpec, age: float) -> float:
    return spec.ventricle_r0 + spec.ventricle_growth_k * age


def generate_phantom(spec: PhantomSpec, age: float, subject_id: str = "") -> Subject:
    lo, hi = spec.age_range
    if not lo <= age <= hi:
        raise ValidationError(f"age {age} outside phantom age range {spec.age_range}")
    n = spec.size
    x, y, z = _grid(n)

    semi = [f * n for f in BRAIN_SEMI_AXES]
    rho = np.sqrt((x / semi[0]) ** 2 + (y / semi[1]) ** 2 + (z / semi[2]) ** 2)
    r_v = ventricle_radius(spec, age)
    vsemi = [f * r_v for f in VENTRICLE_ASPECT]
    rho_v = np.sqrt((x / vsemi[0]) ** 2 + (y / vsemi[1]) ** 2 + (z / vsemi[2]) ** 2)

    brain = rho <= 1.0
    labels = np.zeros((n, n, n), dtype=np.int16)
    labels[brain] = CSF
    labels[rho <= CSF_SHELL] = GM
    labels[rho <= GM_SHELL] = WM
    labels[brain & (rho_v <= 1.0)] = CSF

    image = np.zeros((n, n, n), dtype=np.float64)
    image[labels == WM] = WM_INTENSITY
    image[labels == CSF] = CSF_INTENSITY
    image[labels == GM] = GM_BASE_INTENSITY + spec.gm_intensity_slope * age
    rng = np.random.default_rng(_age_seed(spec.seed, age))
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=image.shape)
        image = np.where(brain, np.clip(image + noise, 0.0, 1.0), 0.0)

    voxel_age = np.where(brain, float(age), 0.0)
    if spec.regional_offset is not None:
        octant, years = spec.regional_offset
        voxel_age = np.where(brain & octant_mask(n, octant), voxel_age + years, voxel_age)

    aff = np.eye(4)
    aff[:3, 3] = -(n - 1) / 2.0
    return Subject(
        image=Volume3D(image.astype(np.float32), aff),
        chronological_age=float(age),
        brain_mask=Volume3D(brain.astype(np.uint8), aff),
        tissue_labels=Volume3D(labels, aff),
        subject_id=subject_id,
        voxel_age=Volume3D(voxel_age.astype(np.float32), aff),
    )


def generate_cohort(spec: PhantomSpec, n: int, out_dir=None) -> list[Subject]:
    """``n`` phantoms with ages ~ Uniform(age_range), seeded by ``spec.seed``.

    When ``out_dir`` is given, per-subject NIfTI files and ``manifest.csv``
    are written there.
    """
    if n < 1:
        raise ValidationError("cohort size must be >= 1")
    rng = np.random.default_rng(spec.seed)
    ages = rng.uniform(*spec.age_range, size=n)
    subjects = [generate_phantom(spec, float(a), f"sub-{i:04d}") for i, a in enumerate(ages)]
    if out_dir is not None:
        write_cohort(subjects, out_dir)
    return subjects


def write_cohort(subjects, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for s in subjects:
            files = {
                "image": s.image,
                "mask": s.brain_mask,
                "labels": s.tissue_labels,
                "voxel_age": s.voxel_age if s.voxel_age is not None else None,
            }
            row = [s.subject_id, repr(float(s.chronological_age))]
            for kind, vol in files.items():
                if vol is None:
                    row.append("")
                    continue
                name = f"{s.subject_id}_{kind}.nii.gz"
                write_nifti(vol, out / name)
                row.append(name)
            w.writerow(row)
    return manifest


def load_cohort(manifest) -> list[Subject]:
    """Read subjects listed in a cohort ``manifest.csv``."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    base = manifest.parent
    subjects = []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            vols = {}
            for kind in ("image", "mask", "labels", "voxel_age"):
                name = row.get(kind) or ""
                vols[kind] = read_nifti(base / name) if name else None
            if vols["image"] is None or vols["mask"] is None or vols["labels"] is None:
                raise ValidationError(f"manifest row {row.get('subject_id')} lacks image/mask/labels")
            labels = vols["labels"]
            subjects.append(
                Subject(
                    image=vols["image"],
                    chronological_age=float(row["age_years"]),
                    brain_mask=vols["mask"].with_data((vols["mask"].data > 0).astype(np.uint8)),
                    tissue_labels=labels.with_data(np.rint(labels.data).astype(np.int16)),
                    subject_id=row["subject_id"],
                    voxel_age=vols["voxel_age"],
                )
            )
    if not subjects:
        raise ValidationError(f"no subjects in {manifest}")
    return subjects


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    d = dict(d)
    if "age_range" in d:
        d["age_range"] = tuple(d["age_range"])
    if d.get("regional_offset") is not None:
        octant, years = d["regional_offset"]
        d["regional_offset"] = (tuple(int(h) for h in octant), float(years))
    return PhantomSpec(**d)


__all__ = [
    "PhantomSpec",
    "generate_phantom",
    "generate_cohort",
    "write_cohort",
    "load_cohort",
    "octant_mask",
    "ventricle_radius",
]
