"""Training loops, learning-rate schedule, whole-volume inference."""

from __future__ import annotations

import copy
import csv
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .augment import augment_patch, random_crop, rotate_augment
from .models import (
    MultiTaskOutput,
    SFCNConfig,
    UNetConfig,
    as_batch,
    build_global_model,
    build_voxel_model,
    eval_mode,
    model_dtype,
    save_checkpoint,
    set_age_scaling,
)
from .preprocess import preprocess_subject
from .volume import PatchSample, Subject, ValidationError, Volume3D

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "dice_loss", "mae_global", "mae_voxel", "alpha", "beta", "gamma", "total", "lr", "val_mae"]


@dataclass
class TrainConfig:
    """Experiment configuration shared by both models.

    Defaults are the full-scale voxel recipe; see :meth:`preset` for the
    global recipe and the desk-scale variants.
    """

    model_kind: str = "voxel"
    epochs: int = 300
    initial_lr: float = 1e-3
    lr_step: int = 70
    lr_factor: float = 0.5
    batch_size: int = 8
    patch_size: int = 96
    augment_probability: float = 0.5
    augment_angle: float = 15.0
    label_noise: tuple = (-2.0, 2.0)
    seed: int = 0
    min_brain_fraction: float = 0.3
    # architecture
    unet_levels: int = 4
    unet_base_channels: int = 16
    sfcn_channels: list = field(default_factory=lambda: [32, 64, 128, 256, 256, 64])
    # bookkeeping
    val_fraction: float = 0.1
    checkpoint_every: int = 10
    restore_best: bool = True
    optimizer: str = "adam"
    global_loss: str = "mae"
    ema_decay: float = losses.EMA_DECAY
    weight_cap: float = losses.WEIGHT_CAP
    num_workers: int = 1

    def __post_init__(self):
        self.label_noise = tuple(float(v) for v in self.label_noise)
        self.sfcn_channels = [int(c) for c in self.sfcn_channels]
        if self.model_kind not in ("voxel", "global"):
            raise ValidationError(f"model_kind must be 'voxel' or 'global', got {self.model_kind!r}")
        for name in ("epochs", "batch_size", "patch_size", "lr_step"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if not 0 < self.lr_factor <= 1:
            raise ValidationError("lr_factor must lie in (0, 1]")
        if not 0 <= self.augment_probability <= 1:
            raise ValidationError("augment_probability must lie in [0, 1]")
        if len(self.label_noise) != 2 or self.label_noise[0] > self.label_noise[1]:
            raise ValidationError("label_noise must be [low, high] with low <= high")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.global_loss not in ("mae", "mse"):
            raise ValidationError(f"unknown global_loss {self.global_loss!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "voxel": {},
            "global": dict(model_kind="global", epochs=50, initial_lr=1e-4, lr_step=20),
            "desk_voxel": dict(epochs=60, batch_size=4, patch_size=32, unet_levels=3, unet_base_channels=8),
            "desk_global": dict(
                model_kind="global",
                epochs=30,
                initial_lr=1e-4,
                lr_step=20,
                batch_size=4,
                patch_size=32,
                sfcn_channels=[8, 16, 32, 64, 64, 32],
            ),
        }
        if name not in presets:
            raise ValidationError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_noise"] = list(self.label_noise)
        return d

    def unet_config(self) -> UNetConfig:
        return UNetConfig(levels=self.unet_levels, base_channels=self.unet_base_channels)

    def sfcn_config(self) -> SFCNConfig:
        return SFCNConfig(channels=list(self.sfcn_channels))


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``initial_lr * lr_factor ** (epoch // lr_step)``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.initial_lr * cfg.lr_factor ** (epoch // cfg.lr_step)


def derived_rng(seed: int, subject_id: str, epoch: int) -> np.random.Generator:
    """Generator owned by one (subject, epoch) draw, independent of worker layout."""
    key = zlib.crc32(subject_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(epoch)]))


def split_cohort(subjects, val_fraction: float, seed: int):
    """Seeded subject-level train/validation split."""
    n = len(subjects)
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        n_val = n - 1
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return [subjects[i] for i in train_idx], [subjects[i] for i in val_idx]


def _make_optimizer(cfg: TrainConfig, model):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.initial_lr, momentum=0.9)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _map(fn, items, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _stack_patches(patches: list[PatchSample]):
    x = torch.as_tensor(np.stack([p.image_patch.data for p in patches]).astype(np.float32))[:, None]
    seg = torch.as_tensor(np.stack([p.seg_target.data for p in patches]).astype(np.int64))
    vage = torch.as_tensor(np.stack([p.voxel_age_target.data for p in patches]).astype(np.float32))
    mask = torch.as_tensor(np.stack([p.brain_mask.data > 0 for p in patches]))
    gage = torch.as_tensor(np.array([p.global_age_target for p in patches], dtype=np.float32))
    return x, seg, vage, mask, gage


def _age_stats(subjects):
    ages = np.array([s.chronological_age for s in subjects], dtype=np.float64)
    return float(ages.mean()), float(max(ages.std(), 1.0))


def write_log_csv(log: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in log:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_COLUMNS})


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()})
    return out


class _Checkpointer:
    def __init__(self, cfg: TrainConfig, out_dir):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.best_val = np.inf
        self.best_state = None
        self.best_epoch = -1

    def after_epoch(self, model, epoch, log, val_mae):
        improved = val_mae < self.best_val or self.best_state is None
        if improved:
            self.best_val = val_mae
            self.best_state = copy.deepcopy(model.state_dict())
            self.best_epoch = epoch
        if self.out_dir is None:
            return
        history = [r["total"] for r in log]
        kw = dict(epoch=epoch, rng_seed=self.cfg.seed, loss_history=history, train_config=self.cfg.to_dict())
        if self.cfg.checkpoint_every > 0 and (epoch + 1) % self.cfg.checkpoint_every == 0:
            save_checkpoint(model, self.out_dir / f"checkpoint_epoch{epoch + 1:04d}", **kw)
        if improved:
            save_checkpoint(model, self.out_dir / "checkpoint_best", **kw)

    def finish(self, model, log):
        if self.cfg.restore_best and self.best_state is not None:
            model.load_state_dict(self.best_state)
        model.eval()
        if self.out_dir is not None:
            write_log_csv(log, self.out_dir / "training_log.csv")
            save_checkpoint(
                model,
                self.out_dir / "checkpoint",
                epoch=self.best_epoch if self.cfg.restore_best else len(log) - 1,
                rng_seed=self.cfg.seed,
                loss_history=[r["total"] for r in log],
                train_config=self.cfg.to_dict(),
            )


def _check_cohort(cohort, cfg: TrainConfig, kind: str):
    if not cohort:
        raise ValidationError("training cohort is empty")
    if cfg.model_kind != kind:
        raise ValidationError(f"config model_kind is {cfg.model_kind!r}, expected {kind!r}")


def train_voxel_model(cohort: list[Subject], cfg: TrainConfig, out_dir=None, preprocess: bool = True):
    """Train the multi-task U-Net; returns ``(model, log)``.

    Every epoch draws one random crop per training subject, rotates it with
    ``augment_probability``, perturbs the voxel-age target with uniform label
    noise and minimises the weighted three-term loss.  Task weights are
    refreshed from per-batch loss EMAs at the start of each epoch.  The model
    with the best validation voxel MAE is restored at the end unless
    ``cfg.restore_best`` is off.
    """
    _check_cohort(cohort, cfg, "voxel")
    subjects = [preprocess_subject(s) for s in cohort] if preprocess else list(cohort)
    train_set, val_set = split_cohort(subjects, cfg.val_fraction, cfg.seed)

    torch.manual_seed(cfg.seed)
    model = build_voxel_model(cfg.unet_config(), cfg.seed)
    set_age_scaling(model, *_age_stats(train_set))
    opt = _make_optimizer(cfg, model)
    tracker = losses.TaskWeightTracker(cfg.ema_decay, cap=cfg.weight_cap)
    ckpt = _Checkpointer(cfg, out_dir)
    log = []

    def sample(args):
        subject, epoch = args
        rng = derived_rng(cfg.seed, subject.subject_id, epoch)
        patch = random_crop(subject, cfg.patch_size, cfg.min_brain_fraction, rng)
        return augment_patch(patch, rng, cfg.augment_angle, cfg.augment_probability, cfg.label_noise)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        _set_lr(opt, lr)
        weights = tracker.refresh()
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(train_set))
        patches = _map(sample, [(train_set[i], epoch) for i in order], cfg.num_workers)

        model.train()
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(patches), cfg.batch_size):
            x, seg, vage, mask, gage = _stack_patches(patches[start : start + cfg.batch_size])
            out = model(x)
            d = losses.soft_dice_loss(out.seg_probs, seg, batched=True)
            g = losses.mae_global(out.global_age, gage)
            v = losses.mae_voxel(out.voxel_age, vage, mask)
            total, br = losses.combined_loss(d, g, v, weights)
            opt.zero_grad()
            total.backward()
            opt.step()
            tracker.observe(br.dice_loss, br.mae_global, br.mae_voxel)
            sums += (br.dice_loss, br.mae_global, br.mae_voxel)
            n_batches += 1

        means = sums / n_batches
        val_mae = _validation_voxel_mae(model, val_set, cfg.patch_size) if val_set else float("nan")
        row = {
            "epoch": epoch,
            "dice_loss": float(means[0]),
            "mae_global": float(means[1]),
            "mae_voxel": float(means[2]),
            "alpha": weights.alpha,
            "beta": weights.beta,
            "gamma": weights.gamma,
            "total": float(losses.weighted_total(means[0], means[1], means[2], weights)),
            "lr": lr,
            "val_mae": val_mae,
        }
        log.append(row)
        logger.info("epoch %d total %.4f dice %.4f g %.3f v %.3f val %.3f", epoch, row["total"],
                    row["dice_loss"], row["mae_global"], row["mae_voxel"], val_mae)
        ckpt.after_epoch(model, epoch, log, val_mae if val_set else -epoch)

    ckpt.finish(model, log)
    return model, log


def _validation_voxel_mae(model, subjects, window):
    errs = []
    for s in subjects:
        out = predict_voxel(model, s, window=window, preprocess=False)
        errs.append(losses.mae_voxel(out.voxel_age, s.voxel_age_target(), s.brain_mask.data))
    return float(np.mean(errs))


def _validation_global_mae(model, subjects):
    preds = predict_global(model, subjects, preprocess=False)
    return float(np.mean(np.abs(preds - np.array([s.chronological_age for s in subjects]))))


def train_global_model(cohort: list[Subject], cfg: TrainConfig, out_dir=None, preprocess: bool = True):
    """Train the SFCN regressor on whole normalised volumes; returns ``(model, log)``."""
    _check_cohort(cohort, cfg, "global")
    subjects = [preprocess_subject(s) for s in cohort] if preprocess else list(cohort)
    train_set, val_set = split_cohort(subjects, cfg.val_fraction, cfg.seed)

    torch.manual_seed(cfg.seed)
    model = build_global_model(cfg.sfcn_config(), cfg.seed)
    set_age_scaling(model, *_age_stats(train_set))
    opt = _make_optimizer(cfg, model)
    loss_fn = losses.mae_global if cfg.global_loss == "mae" else losses.mse_global
    ckpt = _Checkpointer(cfg, out_dir)
    weights = losses.LossWeights(0.0, 1.0, 0.0)
    log = []

    def sample(args):
        s, epoch = args
        rng = derived_rng(cfg.seed, s.subject_id, epoch)
        patch = PatchSample(
            image_patch=s.image,
            seg_target=s.tissue_labels,
            voxel_age_target=Volume3D(s.voxel_age_target(), s.image.affine),
            global_age_target=float(s.chronological_age),
            origin=(0, 0, 0),
            brain_mask=s.brain_mask,
        )
        return rotate_augment(patch, cfg.augment_angle, cfg.augment_probability, rng)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        _set_lr(opt, lr)
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(train_set))
        patches = _map(sample, [(train_set[i], epoch) for i in order], cfg.num_workers)
        model.train()
        total_sum, n_batches = 0.0, 0
        for start in range(0, len(patches), cfg.batch_size):
            x, _, _, _, gage = _stack_patches(patches[start : start + cfg.batch_size])
            loss = loss_fn(model(x), gage)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_sum += float(loss.detach())
            n_batches += 1
        mean = total_sum / n_batches
        val_mae = _validation_global_mae(model, val_set) if val_set else float("nan")
        log.append(
            {
                "epoch": epoch,
                "dice_loss": 0.0,
                "mae_global": mean,
                "mae_voxel": 0.0,
                "alpha": weights.alpha,
                "beta": weights.beta,
                "gamma": weights.gamma,
                "total": float(losses.weighted_total(0.0, mean, 0.0, weights)),
                "lr": lr,
                "val_mae": val_mae,
            }
        )
        logger.info("epoch %d loss %.4f val %.3f", epoch, mean, val_mae)
        ckpt.after_epoch(model, epoch, log, val_mae if val_set else -epoch)

    ckpt.finish(model, log)
    return model, log


def _image_array(x) -> np.ndarray:
    if isinstance(x, Subject):
        return np.asarray(x.image.data, dtype=np.float32)
    return np.asarray(getattr(x, "data", x), dtype=np.float32)


def _pad_to_multiple(img: np.ndarray, m: int):
    pads = [(0, (-s) % m) for s in img.shape]
    return np.pad(img, pads), tuple(slice(0, s) for s in img.shape)


def _window_starts(size: int, window: int, stride: int) -> list[int]:
    if size <= window:
        return [0]
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def _run_dense(model, img: np.ndarray):
    x = as_batch(img, model_dtype(model))
    with eval_mode(model), torch.no_grad():
        out = model(x)
    return (
        out.seg_probs[0].double().numpy(),
        out.voxel_age[0].double().numpy(),
        float(out.global_age[0]),
    )


def predict_voxel(model, subject, window: Optional[int] = None, overlap: float = 0.5, preprocess: bool = True):
    """Whole-volume multi-task inference, returned as numpy arrays.

    Volumes larger than ``window`` along any axis are tiled with windows
    overlapping by ``overlap`` (>= 0.5) and overlapping predictions are
    averaged uniformly; the global age is the mean over windows.
    """
    if getattr(model, "kind", None) != "voxel":
        raise ValidationError("predict_voxel needs a voxel-level model")
    if not 0.5 <= overlap < 1:
        raise ValidationError("overlap must lie in [0.5, 1)")
    if isinstance(subject, Subject) and preprocess:
        subject = preprocess_subject(subject)
    img = _image_array(subject)
    if img.ndim != 3:
        raise ValidationError(f"expected a 3D image, got shape {img.shape}")
    m = model.config.size_multiple

    if window is None or all(s <= window for s in img.shape):
        padded, crop = _pad_to_multiple(img, m)
        seg, age, glob = _run_dense(model, padded)
        return MultiTaskOutput(seg[(slice(None),) + crop], age[crop], glob)

    if window % m:
        raise ValidationError(f"window {window} must be divisible by {m}")
    padded = np.pad(img, [(0, max(0, window - s)) for s in img.shape])
    stride = max(1, int(window * (1 - overlap)))
    seg_sum = np.zeros((model.config.seg_classes,) + padded.shape)
    age_sum = np.zeros(padded.shape)
    count = np.zeros(padded.shape)
    globals_ = []
    for i in _window_starts(padded.shape[0], window, stride):
        for j in _window_starts(padded.shape[1], window, stride):
            for k in _window_starts(padded.shape[2], window, stride):
                sl = (slice(i, i + window), slice(j, j + window), slice(k, k + window))
                seg, age, glob = _run_dense(model, padded[sl])
                seg_sum[(slice(None),) + sl] += seg
                age_sum[sl] += age
                count[sl] += 1
                globals_.append(glob)
    crop = tuple(slice(0, s) for s in img.shape)
    return MultiTaskOutput(
        (seg_sum / count)[(slice(None),) + crop],
        (age_sum / count)[crop],
        float(np.mean(globals_)),
    )


def window_origins(shape, window: int, overlap: float = 0.5) -> list[tuple[int, int, int]]:
    """Window origins used by :func:`predict_voxel` for a volume of ``shape``."""
    stride = max(1, int(window * (1 - overlap)))
    padded = [max(s, window) for s in shape]
    return [
        (i, j, k)
        for i in _window_starts(padded[0], window, stride)
        for j in _window_starts(padded[1], window, stride)
        for k in _window_starts(padded[2], window, stride)
    ]


def predict_global(model, subjects, preprocess: bool = True, batch_size: int = 8) -> np.ndarray:
    """Global age per subject (or per image) from either model kind."""
    items = subjects if isinstance(subjects, (list, tuple)) else [subjects]
    imgs = []
    for s in items:
        if isinstance(s, Subject) and preprocess:
            s = preprocess_subject(s)
        imgs.append(_image_array(s))
    preds = []
    with eval_mode(model), torch.no_grad():
        for start in range(0, len(imgs), batch_size):
            x = as_batch(np.stack(imgs[start : start + batch_size]), model_dtype(model))
            out = model(x)
            out = out.global_age if isinstance(out, MultiTaskOutput) else out
            preds.append(out.double().numpy().reshape(-1))
    return np.concatenate(preds)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
