"""Network architectures and the differentiation helpers built on them.

Two models are provided:

* :class:`VoxelAgeUNet` -- a 3D U-Net with three heads (tissue segmentation,
  per-voxel age, global age from the bottleneck).
* :class:`SFCNRegressor` -- a seven-stage fully convolutional regressor that
  predicts one global age.

Age heads emit ``shift + scale * z`` where ``z`` is the raw network output and
``shift``/``scale`` are non-trainable buffers set from the training cohort,
so the optimiser works on standardised targets.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume import ValidationError

CHECKPOINT_FORMAT_VERSION = 1


class UnknownLayerError(KeyError):
    """A layer handle did not resolve to a stage of the model."""


@dataclass
class UNetConfig:
    levels: int = 4
    base_channels: int = 16
    in_channels: int = 1
    seg_classes: int = 4

    def __post_init__(self):
        if self.levels < 2:
            raise ValidationError("UNet needs levels >= 2")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be positive")

    @classmethod
    def desk(cls) -> "UNetConfig":
        return cls(levels=3, base_channels=8)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


@dataclass
class SFCNConfig:
    # every entry but the last is a 3x3x3 stage followed by a factor-2 max-pool;
    # the last is the 1x1x1 stage
    channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 256, 64])
    in_channels: int = 1

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if len(self.channels) < 2:
            raise ValidationError("SFCN needs at least one pooled stage and the 1x1x1 stage")

    @classmethod
    def desk(cls) -> "SFCNConfig":
        return cls(channels=[8, 16, 32, 64, 64, 32])

    @property
    def size_multiple(self) -> int:
        return 2 ** (len(self.channels) - 1)


class MultiTaskOutput(NamedTuple):
    seg_probs: torch.Tensor  # (B, classes, D, H, W)
    voxel_age: torch.Tensor  # (B, D, H, W)
    global_age: torch.Tensor  # (B,)


def _conv_block(cin, cout, norm: bool) -> nn.Sequential:
    layers = []
    for c in (cin, cout):
        layers.append(nn.Conv3d(c, cout, 3, padding=1))
        if norm:
            layers.append(nn.BatchNorm3d(cout))
        layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


class _AgeScale(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("shift", torch.tensor(0.0))
        self.register_buffer("scale", torch.tensor(1.0))

    def forward(self, z):
        return self.shift + self.scale * z


def set_age_scaling(model: nn.Module, shift: float, scale: float) -> None:
    """Set the output shift/scale buffers of every age head in ``model``."""
    for m in model.modules():
        if isinstance(m, _AgeScale):
            m.shift.fill_(float(shift))
            m.scale.fill_(float(scale))


class VoxelAgeUNet(nn.Module):
    """Multi-output 3D U-Net.

    Stages are named ``enc0`` .. ``enc{L-1}`` (the last one is the
    bottleneck) and ``dec{L-2}`` .. ``dec0``.  Batch normalisation is used in
    the encoder only; decoding upsamples trilinearly then convolves.
    """

    kind = "voxel"

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        L = config.levels
        self.encoders = nn.ModuleDict()
        for i in range(L):
            cin = config.in_channels if i == 0 else config.channels(i - 1)
            self.encoders[f"enc{i}"] = _conv_block(cin, config.channels(i), norm=True)
        self.decoders = nn.ModuleDict()
        for i in reversed(range(L - 1)):
            cin = config.channels(i + 1) + config.channels(i)
            self.decoders[f"dec{i}"] = _conv_block(cin, config.channels(i), norm=False)
        c0 = config.channels(0)
        self.seg_head = nn.Conv3d(c0, config.seg_classes, 1)
        self.age_head = nn.Conv3d(c0, 1, 1)
        self.age_scale = _AgeScale()
        self.age_relu = nn.ReLU()
        self.pool = nn.MaxPool3d(2)
        self.global_head = nn.Linear(config.channels(L - 1), 1)
        self.global_scale = _AgeScale()

    def stage_names(self) -> list[str]:
        return list(self.encoders.keys()) + list(self.decoders.keys())

    def stage(self, name: str) -> nn.Module:
        if name in self.encoders:
            return self.encoders[name]
        if name in self.decoders:
            return self.decoders[name]
        raise UnknownLayerError(name)

    def check_input(self, x: torch.Tensor) -> None:
        m = self.config.size_multiple
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ValidationError(f"expected (B, {self.config.in_channels}, D, H, W), got {tuple(x.shape)}")
        if any(s % m for s in x.shape[2:]):
            raise ValidationError(f"spatial size {tuple(x.shape[2:])} must be divisible by {m}")

    def forward(self, x: torch.Tensor) -> MultiTaskOutput:
        self.check_input(x)
        skips = []
        h = x
        for i, block in enumerate(self.encoders.values()):
            if i > 0:
                h = self.pool(h)
            h = block(h)
            skips.append(h)
        bottleneck = h
        for i in reversed(range(self.config.levels - 1)):
            skip = skips[i]
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = self.decoders[f"dec{i}"](torch.cat([h, skip], dim=1))
        seg = torch.softmax(self.seg_head(h), dim=1)
        voxel_age = self.age_relu(self.age_scale(self.age_head(h)))[:, 0]
        pooled = bottleneck.mean(dim=(2, 3, 4))
        global_age = self.global_scale(self.global_head(pooled))[:, 0]
        return MultiTaskOutput(seg, voxel_age, global_age)


class SFCNRegressor(nn.Module):
    """SFCN-style global age regressor.

    Stages ``block1`` .. ``block{n-1}``: 3x3x3 conv + BN + ReLU + max-pool;
    ``block{n}``: 1x1x1 conv + BN + ReLU; ``head``: global average pooling
    followed by a 1x1x1 convolution to one scalar.
    """

    kind = "global"

    def __init__(self, config: SFCNConfig):
        super().__init__()
        self.config = config
        chans = config.channels
        blocks = []
        cin = config.in_channels
        for c in chans[:-1]:
            blocks.append(
                nn.Sequential(
                    nn.Conv3d(cin, c, 3, padding=1),
                    nn.BatchNorm3d(c),
                    nn.ReLU(),
                    nn.MaxPool3d(2),
                )
            )
            cin = c
        blocks.append(nn.Sequential(nn.Conv3d(cin, chans[-1], 1), nn.BatchNorm3d(chans[-1]), nn.ReLU()))
        self.blocks = nn.ModuleDict({f"block{i + 1}": b for i, b in enumerate(blocks)})
        self.head = nn.Conv3d(chans[-1], 1, 1)
        self.global_scale = _AgeScale()

    def stage_names(self) -> list[str]:
        return list(self.blocks.keys()) + ["head"]

    def stage(self, name: str) -> nn.Module:
        if name == "head":
            return self.head
        if name in self.blocks:
            return self.blocks[name]
        raise UnknownLayerError(name)

    def check_input(self, x: torch.Tensor) -> None:
        m = self.config.size_multiple
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ValidationError(f"expected (B, {self.config.in_channels}, D, H, W), got {tuple(x.shape)}")
        if any(s < m for s in x.shape[2:]):
            raise ValidationError(f"spatial size {tuple(x.shape[2:])} must be at least {m} per axis")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        h = x
        for block in self.blocks.values():
            h = block(h)
        h = F.adaptive_avg_pool3d(h, 1)
        return self.global_scale(self.head(h)).flatten()


def _torch_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    if rng is None:
        return 0
    return int(rng)


def build_voxel_model(cfg: UNetConfig | None = None, rng=0) -> VoxelAgeUNet:
    cfg = cfg or UNetConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_torch_seed(rng))
        return VoxelAgeUNet(cfg)


def build_global_model(cfg: SFCNConfig | None = None, rng=0) -> SFCNRegressor:
    cfg = cfg or SFCNConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_torch_seed(rng))
        return SFCNRegressor(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def as_batch(x, dtype=torch.float32) -> torch.Tensor:
    """Images as a (B, 1, D, H, W) tensor; accepts 3D, 4D or 5D input."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(getattr(x, "data", x)), dtype=dtype)
    else:
        x = x.to(dtype)
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[:, None]
    if x.dim() != 5:
        raise ValidationError(f"cannot interpret input of shape {tuple(x.shape)} as an image batch")
    return x


@contextmanager
def eval_mode(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def forward(model: nn.Module, batch, train: bool = False):
    """Run ``model`` on ``batch`` in eval (stored BN statistics) or train mode."""
    x = as_batch(batch, model_dtype(model))
    if train:
        model.train()
        return model(x)
    with eval_mode(model), torch.no_grad():
        return model(x)


Target = Union[str, np.ndarray, torch.Tensor, Callable]


def select_target(output, target: Target) -> torch.Tensor:
    """Reduce a model output to one differentiable scalar per sample.

    ``target`` is ``"global_age"``, an ROI mask (mean voxel age inside it), or
    a callable mapping the raw output to a (B,) tensor.
    """
    if callable(target) and not isinstance(target, (str, np.ndarray, torch.Tensor)):
        return target(output)
    if isinstance(target, str):
        if target != "global_age":
            raise ValidationError(f"unknown target {target!r}")
        if isinstance(output, MultiTaskOutput):
            return output.global_age
        return output.reshape(output.shape[0], -1)[:, 0]
    if not isinstance(output, MultiTaskOutput):
        raise ValidationError("ROI targets need a model with a voxel-age output")
    roi = torch.as_tensor(np.asarray(target) if not isinstance(target, torch.Tensor) else target)
    roi = (roi > 0).to(output.voxel_age.dtype)
    if roi.sum() == 0:
        raise ValidationError("empty ROI mask")
    if roi.shape != output.voxel_age.shape[1:]:
        raise ValidationError(f"ROI shape {tuple(roi.shape)} != output shape {tuple(output.voxel_age.shape[1:])}")
    return (output.voxel_age * roi).sum(dim=(1, 2, 3)) / roi.sum()


def describe_target(target: Target) -> str:
    if isinstance(target, str):
        return target
    if callable(target) and not isinstance(target, (np.ndarray, torch.Tensor)):
        return getattr(target, "__name__", "custom")
    return "mean voxel_age over ROI"


class Capture:
    """Activations recorded during one forward pass, with gradient access."""

    def __init__(self, output, activations: dict):
        self.output = output
        self.activations = activations

    def gradients(self, target: Target = "global_age") -> dict:
        if not self.activations:
            return {}
        scalar = select_target(self.output, target).sum()
        names = list(self.activations)
        grads = torch.autograd.grad(
            scalar, [self.activations[n] for n in names], retain_graph=True, allow_unused=True
        )
        return {n: (g if g is not None else torch.zeros_like(self.activations[n])) for n, g in zip(names, grads)}


def resolve_layer(model: nn.Module, name: str) -> nn.Module:
    if hasattr(model, "stage"):
        try:
            return model.stage(name)
        except UnknownLayerError:
            pass
    modules = dict(model.named_modules())
    if name in modules and name != "":
        return modules[name]
    raise UnknownLayerError(name)


def capture_activations(model: nn.Module, x, layers, *, train: bool = False) -> Capture:
    """Forward ``x`` recording the outputs of the named stages.

    The pass keeps its graph so :meth:`Capture.gradients` can differentiate a
    scalar target with respect to every captured activation.
    """
    modules = {name: resolve_layer(model, name) for name in layers}
    store = {}
    handles = []
    for name, mod in modules.items():
        def hook(_m, _inp, out, name=name):
            store[name] = out
        handles.append(mod.register_forward_hook(hook))
    x = as_batch(x, model_dtype(model))
    try:
        was_training = model.training
        model.train(train)
        try:
            with torch.enable_grad():
                out = model(x)
        finally:
            model.train(was_training)
    finally:
        for h in handles:
            h.remove()
    return Capture(out, {n: store[n] for n in layers})


def input_gradient(model: nn.Module, x, target: Target = "global_age") -> torch.Tensor:
    """d(target)/d(input), same shape as the (batched) input, eval mode."""
    x = as_batch(x, model_dtype(model)).detach().clone().requires_grad_(True)
    with eval_mode(model), torch.enable_grad():
        out = model(x)
        scalar = select_target(out, target).sum()
        if not scalar.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(scalar, [x], allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


def model_config_dict(model: nn.Module) -> dict:
    return {"kind": model.kind, **asdict(model.config)}


def model_from_config(d: dict, rng=0) -> nn.Module:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "voxel":
        return build_voxel_model(UNetConfig(**d), rng)
    if kind == "global":
        return build_global_model(SFCNConfig(**d), rng)
    raise ValidationError(f"unknown model kind {kind!r}")


def save_checkpoint(model: nn.Module, path, *, epoch=0, rng_seed=0, loss_history=(), train_config=None) -> Path:
    """Write ``model.pt`` (state dict) and ``manifest.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "model.pt")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model_config_dict(model),
        "epoch": int(epoch),
        "rng_seed": int(rng_seed),
        "loss_history": list(loss_history),
    }
    if train_config is not None:
        manifest["train_config"] = train_config
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_checkpoint(path) -> nn.Module:
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format_version {version}")
    model = model_from_config(manifest["config"])
    state = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    model.manifest = manifest
    return model
