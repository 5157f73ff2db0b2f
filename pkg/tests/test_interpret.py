import json

import numpy as np
import pytest
import torch

from helpers import ConstantModel, IdentityCamModel, LinearModel, MeanModel, TanhSumModel, TwoIdentityModel
from voxelage.interpret import (
    grad_cam,
    grad_cam_averaged,
    minmax01,
    occlusion_sensitivity,
    save_saliency,
    smoothgrad,
)
from voxelage.models import SFCNConfig, UNetConfig, build_global_model, build_voxel_model, input_gradient
from voxelage.nifti import read_nifti
from voxelage.volume import ValidationError


def positive_volume(shape=(8, 8, 8), seed=0):
    return np.random.default_rng(seed).uniform(0.1, 1.0, size=shape)


def params_snapshot(model):
    return [p.detach().clone() for p in model.parameters()]


def assert_params_unchanged(model, snap):
    for p, q in zip(model.parameters(), snap):
        assert torch.equal(p, q)


# ---- SmoothGrad -------------------------------------------------------------


def test_smoothgrad_sigma_zero_is_vanilla_gradient():
    model = build_global_model(SFCNConfig(channels=[2, 3, 2]), 0).double()
    x = positive_volume()
    res = smoothgrad(model, x, n=5, sigma=0.0)
    ref = input_gradient(model, x)[0, 0].numpy()
    assert res.map.data.tobytes() == ref.tobytes()


def test_smoothgrad_linear_model_returns_weights():
    w = np.random.default_rng(3).normal(size=(6, 6, 6))
    res = smoothgrad(LinearModel(w), positive_volume((6, 6, 6)), n=7, sigma=0.3)
    np.testing.assert_array_equal(res.map.data, w)


def test_smoothgrad_magnitude_mode():
    w = np.random.default_rng(3).normal(size=(4, 4, 4))
    res = smoothgrad(LinearModel(w), positive_volume((4, 4, 4)), n=3, sigma=0.1, mode="magnitude")
    np.testing.assert_array_equal(res.map.data, np.abs(w))


def test_smoothgrad_tanh_matches_monte_carlo():
    # d/dx sum(tanh(x + e)) = 1 - tanh(x + e)^2; the oracle draws its own noise
    x = np.linspace(-1.5, 1.5, 64).reshape(4, 4, 4)
    sigma = 0.2
    std = sigma * (x.max() - x.min())
    n = 500
    res = smoothgrad(TanhSumModel(), x, n=n, sigma=sigma, seed=11)
    draws = 1.0 - np.tanh(x[None] + np.random.default_rng(99).normal(0, std, size=(10_000,) + x.shape)) ** 2
    oracle = draws.mean(axis=0)
    se = np.sqrt(draws.var(axis=0) / n + draws.var(axis=0) / 10_000)
    assert np.all(np.abs(res.map.data - oracle) <= 5 * se)


def test_smoothgrad_seed_reproducible():
    model = TanhSumModel()
    x = positive_volume((4, 4, 4))
    a = smoothgrad(model, x, n=10, sigma=0.1, seed=1).map.data
    b = smoothgrad(model, x, n=10, sigma=0.1, seed=1).map.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kw", [dict(n=0), dict(sigma=-0.1), dict(mode="squared")])
def test_smoothgrad_validation(kw):
    with pytest.raises(ValidationError):
        smoothgrad(TanhSumModel(), positive_volume((4, 4, 4)), **kw)


# ---- Occlusion --------------------------------------------------------------


def test_occlusion_mean_model_tiling():
    # y = mean(x) with x = 1 everywhere: zeroing one p^3 cube lowers y by p^3 / N
    x = np.ones((8, 8, 8))
    res = occlusion_sensitivity(MeanModel(), x, patch=4, stride=4)
    np.testing.assert_allclose(res.map.data, 64 / 512, atol=1e-12)
    assert res.normalization == "signed_raw"


def test_occlusion_mean_model_single_voxel_cubes():
    x = positive_volume((6, 6, 6), seed=4)
    res = occlusion_sensitivity(MeanModel(), x, patch=1, stride=1)
    np.testing.assert_allclose(res.map.data, x / x.size, atol=1e-12)


def test_occlusion_overlapping_cubes_average():
    # 1D along each axis: patch 2 stride 1 on 4 voxels; each cube score is p^3/N = 8/64
    res = occlusion_sensitivity(MeanModel(), np.ones((4, 4, 4)), patch=2, stride=1)
    np.testing.assert_allclose(res.map.data, 8 / 64, atol=1e-12)


def test_occlusion_whole_volume_fill():
    res = occlusion_sensitivity(MeanModel(), np.ones((4, 4, 4)), patch=4, stride=4, fill=0.25)
    np.testing.assert_allclose(res.map.data, 0.75, atol=1e-12)


def test_occlusion_constant_model_is_zero():
    res = occlusion_sensitivity(ConstantModel(), positive_volume(), patch=2, stride=2)
    assert np.all(res.map.data == 0)


def test_occlusion_ignored_region_is_zero():
    w = np.random.default_rng(0).normal(size=(8, 8, 8))
    w[:4] = 0.0
    res = occlusion_sensitivity(LinearModel(w), positive_volume(), patch=2, stride=2)
    assert np.all(res.map.data[:4] == 0)
    assert np.any(res.map.data[4:] != 0)


def test_occlusion_sign_follows_contribution():
    w = np.zeros((8, 8, 8))
    w[:4] = 1.0
    w[4:] = -1.0
    res = occlusion_sensitivity(LinearModel(w), np.ones((8, 8, 8)), patch=4, stride=4)
    assert np.all(res.map.data[:4] > 0) and np.all(res.map.data[4:] < 0)


def test_occlusion_batch_size_does_not_matter():
    model = build_global_model(SFCNConfig(channels=[2, 3, 2]), 1).double()
    x = positive_volume()
    a = occlusion_sensitivity(model, x, patch=4, stride=2, batch_size=1).map.data
    b = occlusion_sensitivity(model, x, patch=4, stride=2, batch_size=7).map.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_occlusion_covers_uneven_grid():
    res = occlusion_sensitivity(MeanModel(), np.ones((7, 7, 7)), patch=3, stride=3)
    assert np.all(np.isfinite(res.map.data))


def test_occlusion_stride_larger_than_patch():
    with pytest.raises(ValidationError):
        occlusion_sensitivity(MeanModel(), np.ones((8, 8, 8)), patch=2, stride=3)


# ---- Grad-CAM ---------------------------------------------------------------


def test_gradcam_identity_stage_reproduces_input():
    x = positive_volume()
    res = grad_cam(IdentityCamModel(), x, "a")
    np.testing.assert_allclose(res.map.data, minmax01(x), atol=1e-12)


def test_gradcam_zero_stage_is_zero():
    res = grad_cam(IdentityCamModel(), positive_volume(), "z")
    assert np.all(res.map.data == 0)


def test_gradcam_constant_model_is_zero():
    res = grad_cam(ConstantModel(), positive_volume(), "conv")
    assert np.all(res.map.data == 0)


def test_gradcam_averaged_identical_maps():
    x = positive_volume()
    avg = grad_cam_averaged(TwoIdentityModel(), x, "a", "b").map.data
    single = grad_cam(TwoIdentityModel(), x, "a").map.data
    np.testing.assert_allclose(avg, single, atol=1e-12)


def test_gradcam_averaged_with_zero_map_halves():
    x = positive_volume()
    avg = grad_cam_averaged(IdentityCamModel(), x, "a", "z").map.data
    np.testing.assert_allclose(avg, 0.5 * minmax01(x), atol=1e-12)


def test_gradcam_averaged_needs_two_layers():
    with pytest.raises(ValidationError):
        grad_cam_averaged(IdentityCamModel(), positive_volume(), "a", "a")


@pytest.mark.parametrize("layer", ["enc0", "enc1", "enc2", "dec1", "dec0"])
def test_gradcam_unet_layers_upsample_to_input(layer):
    model = build_voxel_model(UNetConfig.desk(), 0)
    x = positive_volume((16, 16, 16))
    res = grad_cam(model, x, layer)
    assert res.map.shape == (16, 16, 16)
    assert res.map.data.min() >= 0 and res.map.data.max() <= 1


def test_gradcam_roi_target():
    model = build_voxel_model(UNetConfig.desk(), 0)
    roi = np.zeros((16, 16, 16))
    roi[4:8, 4:8, 4:8] = 1
    res = grad_cam(model, positive_volume((16, 16, 16)), "dec0", target=roi)
    assert res.target_descriptor == "mean voxel_age over ROI"


# ---- shared properties ------------------------------------------------------


def test_methods_leave_parameters_and_mode_untouched():
    model = build_voxel_model(UNetConfig.desk(), 0)
    model.train()
    snap = params_snapshot(model)
    bn = [b.clone() for b in model.buffers()]
    x = positive_volume((16, 16, 16))
    grad_cam(model, x, "enc1")
    grad_cam_averaged(model, x, "enc1", "enc2")
    occlusion_sensitivity(model, x, patch=8, stride=8)
    smoothgrad(model, x, n=2, sigma=0.1)
    assert_params_unchanged(model, snap)
    assert all(torch.equal(a, b) for a, b in zip(model.buffers(), bn))
    assert model.training
    assert all(p.grad is None for p in model.parameters())


def test_save_saliency(tmp_path):
    res = occlusion_sensitivity(MeanModel(), np.ones((4, 4, 4)), patch=2, stride=2)
    nii, side = save_saliency(res, tmp_path / "occ", checkpoint_id="ck-1")
    np.testing.assert_allclose(read_nifti(nii).data, res.map.data.astype(np.float32))
    meta = json.loads(side.read_text())
    assert meta["method"] == "occlusion" and meta["model_checkpoint_id"] == "ck-1"
    assert meta["params"]["patch"] == 2 and meta["normalization"] == "signed_raw"
