"""Test-only oracles: central finite differences and tiny hand-built models."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from voxelage.models import MultiTaskOutput


class KinkProbe:
    """Records the piecewise-linear state of a network during a forward pass.

    The state is the sign pattern of every ReLU input and the argmax of every
    max-pool window.  Two points with the same state lie on the same linear
    piece of those non-linearities.
    """

    def __init__(self, model: nn.Module):
        self.records: list[torch.Tensor] = []
        self.handles = []
        for m in model.modules():
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, nn.MaxPool3d):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, _m, inp, _out):
        self.records.append((inp[0].detach() > 0).flatten())

    def _pool(self, m, inp, _out):
        _, idx = F.max_pool3d(inp[0].detach(), m.kernel_size, m.stride, return_indices=True)
        self.records.append(idx.flatten())

    def snapshot(self) -> list[torch.Tensor]:
        out, self.records = self.records, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def same_state(a, b) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def _evaluate(forward, loss_fns, probe):
    out = forward()
    net = probe.snapshot() if probe else []
    return {n: fn(out) for n, fn in loss_fns.items()}, net


def central_difference_check(loss_fns, forward, tensors, probe=None, h=1e-3, floor=1e-6, max_coords=None, seed=0):
    """Compare autograd gradients with central differences.

    ``forward()`` returns whatever ``loss_fns`` consume; each loss function
    maps that output to ``(scalar, state)``, where ``state`` is a list of
    tensors describing its own kinks (e.g. signs inside an absolute value).
    ``tensors`` are leaf tensors (inputs and/or parameters) perturbed in place.

    A coordinate whose ``x - h`` / ``x + h`` evaluations land on a different
    linear piece of any ReLU, max-pool or absolute value than ``x`` is
    skipped, since the difference quotient there is not a derivative.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.

    Returns ``{loss: (max_rel_err, n_checked, n_excluded, per_tensor_checked)}``.
    """
    names = list(loss_fns)
    out = forward()
    analytic = {}
    for name in names:
        val, _ = loss_fns[name](out)
        grads = torch.autograd.grad(val, tensors, retain_graph=True, allow_unused=True)
        analytic[name] = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, tensors)]
    del out
    if probe:
        probe.snapshot()

    results = {n: [0.0, 0, 0, [0] * len(tensors)] for n in names}
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        base, base_net = _evaluate(forward, loss_fns, probe)
        for ti, t in enumerate(tensors):
            flat = t.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = rng.choice(coords, max_coords, replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + h
                plus, plus_net = _evaluate(forward, loss_fns, probe)
                flat[i] = orig - h
                minus, minus_net = _evaluate(forward, loss_fns, probe)
                flat[i] = orig
                smooth_net = probe is None or (same_state(plus_net, base_net) and same_state(minus_net, base_net))
                for n in names:
                    state = base[n][1]
                    if not (smooth_net and same_state(plus[n][1], state) and same_state(minus[n][1], state)):
                        results[n][2] += 1
                        continue
                    numeric = (float(plus[n][0]) - float(minus[n][0])) / (2 * h)
                    a = float(analytic[n][ti].view(-1)[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    results[n][0] = max(results[n][0], err)
                    results[n][1] += 1
                    results[n][3][ti] += 1
    return {n: tuple(v) for n, v in results.items()}


class MeanModel(nn.Module):
    """Predicts the mean input intensity."""

    kind = "global"

    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x):
        return x.mean(dim=(1, 2, 3, 4)) + 0.0 * self.dummy


class ConstantModel(nn.Module):
    """Output does not depend on the input; ``conv`` is a real (zero-weight) stage."""

    kind = "global"

    def __init__(self, value=42.0):
        super().__init__()
        self.conv = nn.Conv3d(1, 2, 3, padding=1).double()
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
        self.value = value

    def forward(self, x):
        a = self.conv(x)
        return self.value + a.mean(dim=(1, 2, 3, 4))


class LinearModel(nn.Module):
    """y = sum(w * x) for a fixed weight field."""

    kind = "global"

    def __init__(self, weights: np.ndarray):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(weights, dtype=torch.float64))

    def forward(self, x):
        return (x[:, 0] * self.w).sum(dim=(1, 2, 3))


class TanhSumModel(nn.Module):
    kind = "global"

    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x):
        return torch.tanh(x).sum(dim=(1, 2, 3, 4)) + 0.0 * self.dummy


def identity_conv(sign=1.0):
    conv = nn.Conv3d(1, 1, 1).double()
    with torch.no_grad():
        conv.weight.fill_(sign)
        conv.bias.zero_()
    return conv


class IdentityCamModel(nn.Module):
    """``a = x`` (stage ``a``), ``z = 0 * x`` (stage ``z``), ``y = mean(a) + mean(z)``."""

    kind = "global"

    def __init__(self):
        super().__init__()
        self.a = identity_conv(1.0)
        self.z = identity_conv(0.0)

    def forward(self, x):
        return self.a(x).mean(dim=(1, 2, 3, 4)) + self.z(x).mean(dim=(1, 2, 3, 4))


class TwoIdentityModel(nn.Module):
    """``a = x``, ``b = -a``, ``y = -mean(b)``: both stages give the same Grad-CAM."""

    kind = "global"

    def __init__(self):
        super().__init__()
        self.a = identity_conv(1.0)
        self.b = identity_conv(-1.0)

    def forward(self, x):
        return -self.b(self.a(x)).mean(dim=(1, 2, 3, 4))


def constant_voxel_output(shape, seg_classes=4, age=50.0, glob=50.0):
    seg = np.zeros((seg_classes,) + tuple(shape))
    seg[0] = 1.0
    return MultiTaskOutput(seg, np.full(shape, age), glob)
