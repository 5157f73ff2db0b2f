"""scikit-learn compatible wrappers around the training and inference code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .models import MultiTaskOutput
from .preprocess import normalize_intensity
from .training import TrainConfig, predict_global, predict_voxel, train_global_model, train_voxel_model
from .volume import Subject, ValidationError, Volume3D, check_volume_batch


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """Per-volume min-max scaling to [0, 1]. Stateless."""

    def fit(self, X, y=None):
        X = check_volume_batch(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        X = check_volume_batch(X)
        return np.stack([normalize_intensity(Volume3D(v)).data for v in X])


def _subjects_from_arrays(X, y, tissue_labels, brain_mask, voxel_age):
    X = check_volume_batch(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ValidationError(f"{X.shape[0]} images but {y.shape[0]} ages")
    n = X.shape[0]

    def per_subject(arr, name, dtype):
        if arr is None:
            return [None] * n
        arr = np.asarray(arr)
        if arr.shape != X.shape:
            raise ValidationError(f"{name} shape {arr.shape} does not match images {X.shape}")
        return [a.astype(dtype) for a in arr]

    masks = per_subject(brain_mask, "brain_mask", np.uint8)
    labels = per_subject(tissue_labels, "tissue_labels", np.int16)
    ages = per_subject(voxel_age, "voxel_age", np.float32)
    subjects = []
    for i in range(n):
        mask = masks[i] if masks[i] is not None else (X[i] > 0).astype(np.uint8)
        lab = labels[i] if labels[i] is not None else np.zeros(X.shape[1:], np.int16)
        subjects.append(
            Subject(
                image=Volume3D(X[i]),
                chronological_age=float(y[i]),
                brain_mask=Volume3D(mask),
                tissue_labels=Volume3D(lab),
                subject_id=f"sample-{i:05d}",
                voxel_age=Volume3D(ages[i]) if ages[i] is not None else None,
            )
        )
    return subjects


class _AgeRegressorBase(RegressorMixin, BaseEstimator):
    _kind = "voxel"

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        params["label_noise"] = tuple(params["label_noise"])
        return TrainConfig(model_kind=self._kind, **params)

    def fit_subjects(self, subjects, out_dir=None):
        """Fit from :class:`Subject` objects (the natural container for volumes)."""
        cfg = self._train_config()
        train = train_voxel_model if self._kind == "voxel" else train_global_model
        self.model_, self.log_ = train(list(subjects), cfg, out_dir=out_dir)
        self.n_features_in_ = int(np.prod(subjects[0].image.shape))
        return self

    def predict(self, X):
        """Global age per image (years)."""
        check_is_fitted(self, "model_")
        X = IntensityNormalizer().transform(X)
        return predict_global(self.model_, list(X), preprocess=False)


class VoxelAgeRegressor(_AgeRegressorBase):
    """Multi-task U-Net predicting tissue classes, voxel age and global age.

    ``fit(X, y, tissue_labels=..., brain_mask=...)`` takes images
    ``(n, D, H, W)`` already in canonical orientation and their
    chronological ages.  ``predict`` returns the global age head;
    :meth:`predict_voxel_age` and :meth:`predict_segmentation` expose the
    dense heads.  Defaults are the desk-scale recipe.
    """

    _kind = "voxel"

    def __init__(
        self,
        unet_levels=3,
        unet_base_channels=8,
        epochs=60,
        initial_lr=1e-3,
        lr_step=70,
        lr_factor=0.5,
        batch_size=4,
        patch_size=32,
        augment_probability=0.5,
        augment_angle=15.0,
        label_noise=(-2.0, 2.0),
        min_brain_fraction=0.3,
        val_fraction=0.1,
        random_state=0,
    ):
        self.unet_levels = unet_levels
        self.unet_base_channels = unet_base_channels
        self.epochs = epochs
        self.initial_lr = initial_lr
        self.lr_step = lr_step
        self.lr_factor = lr_factor
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.augment_probability = augment_probability
        self.augment_angle = augment_angle
        self.label_noise = label_noise
        self.min_brain_fraction = min_brain_fraction
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y, tissue_labels=None, brain_mask=None, voxel_age=None):
        if tissue_labels is None:
            raise ValidationError("VoxelAgeRegressor.fit needs tissue_labels for the segmentation task")
        return self.fit_subjects(_subjects_from_arrays(X, y, tissue_labels, brain_mask, voxel_age))

    def predict_full(self, X) -> list[MultiTaskOutput]:
        check_is_fitted(self, "model_")
        X = IntensityNormalizer().transform(X)
        return [predict_voxel(self.model_, Volume3D(x), window=self.patch_size, preprocess=False) for x in X]

    def predict_voxel_age(self, X) -> np.ndarray:
        return np.stack([o.voxel_age for o in self.predict_full(X)])

    def predict_segmentation(self, X) -> np.ndarray:
        return np.stack([np.asarray(o.seg_probs).argmax(axis=0) for o in self.predict_full(X)])


class GlobalAgeRegressor(_AgeRegressorBase):
    """SFCN-style regressor predicting one age per volume (desk-scale defaults)."""

    _kind = "global"

    def __init__(
        self,
        sfcn_channels=(8, 16, 32, 64, 64, 32),
        epochs=30,
        initial_lr=1e-4,
        lr_step=20,
        lr_factor=0.5,
        batch_size=4,
        augment_probability=0.5,
        augment_angle=15.0,
        global_loss="mae",
        val_fraction=0.1,
        random_state=0,
    ):
        self.sfcn_channels = sfcn_channels
        self.epochs = epochs
        self.initial_lr = initial_lr
        self.lr_step = lr_step
        self.lr_factor = lr_factor
        self.batch_size = batch_size
        self.augment_probability = augment_probability
        self.augment_angle = augment_angle
        self.global_loss = global_loss
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        params["sfcn_channels"] = list(params["sfcn_channels"])
        return TrainConfig(model_kind="global", **params)

    def fit(self, X, y, brain_mask=None):
        return self.fit_subjects(_subjects_from_arrays(X, y, None, brain_mask, None))
