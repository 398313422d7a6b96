import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatslam.compaction import (DensifyConfig, GradientAccumulator, MaskConfig, densify_and_prune, discard_masks,
                                  mask_loss, mask_value, masked_scale_opacity, photometric_ssim_loss,
                                  total_scene_loss)
from splatslam.datasets import SyntheticSpec, generate_synthetic
from splatslam.errors import ContractViolation
from splatslam.metrics import psnr
from splatslam.optim import Adam
from splatslam.rasterizer import render
from splatslam.scene import GaussianMap, logit, sigmoid
from splatslam.ssim import C1, C2

from _oracles import central_difference, relative_error


def test_mask_forward_examples():
    assert mask_value(logit(0.9))[0] == 1.0
    assert mask_value(logit(0.005))[0] == 0.0
    assert mask_value(logit(0.01))[0] == 1.0  # threshold inclusive


@given(st.floats(-20, 20, allow_nan=False))
def test_mask_straight_through_gradient(b):
    fwd, grad = mask_value(b)
    e = math.exp(-abs(b))  # cancellation-free form of s(1 - s)
    assert fwd == (1.0 if 1.0 / (1.0 + math.exp(-b)) >= 0.01 else 0.0)
    assert grad == pytest.approx(e / (1 + e) ** 2, rel=1e-9, abs=1e-300)


def test_masked_scale_and_opacity_never_exceed_unmasked():
    rng = np.random.default_rng(0)
    m = GaussianMap.from_arrays(rng.normal(size=(50, 3)), None, rng.normal(size=(50, 3)), rng.normal(size=50),
                                None, rng.normal(0, 4, size=50))
    s, o = masked_scale_opacity(m)
    assert (s <= np.exp(m.log_scale)).all() and (o <= sigmoid(m.opacity_logit)).all()
    hidden = m.mask_values() == 0
    assert hidden.any() and not s[hidden].any() and not o[hidden].any()


def test_mask_loss_examples():
    assert mask_loss(GaussianMap())[0] == 0.0
    assert mask_loss(GaussianMap.from_arrays(np.zeros((1, 3)), mask_logit=[0.0]))[0] == 0.5
    two = GaussianMap.from_arrays(np.zeros((2, 3)), mask_logit=[0.0, math.log(3)])
    assert mask_loss(two)[0] == pytest.approx(0.625, abs=1e-15)
    deep = GaussianMap.from_arrays(np.zeros((3, 3)), mask_logit=[-800.0] * 3)
    assert mask_loss(deep)[0] == 0.0


def test_mask_loss_gradient():
    rng = np.random.default_rng(1)
    b = rng.normal(size=7)
    m = GaussianMap.from_arrays(np.zeros((7, 3)), mask_logit=b)
    _, g = mask_loss(m)
    num = central_difference(lambda x: mask_loss(GaussianMap.from_arrays(np.zeros((7, 3)), mask_logit=x))[0], b,
                             1e-6)
    assert relative_error(g, num) < 1e-6


def test_mask_loss_descends_without_photometric_term():
    rng = np.random.default_rng(2)
    m = GaussianMap.from_arrays(np.zeros((20, 3)), mask_logit=rng.normal(size=20))
    opt = Adam({"mask_logit": 0.05})
    last = mask_loss(m)[0]
    for _ in range(100):
        _, g = mask_loss(m)
        opt.step({"mask_logit": m.mask_logit}, {"mask_logit": 5e-4 * g})
        cur = mask_loss(m)[0]
        assert 0.0 <= cur < last
        last = cur


def test_photometric_loss_identical_is_zero():
    img = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert photometric_ssim_loss(img, img, 0.2) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)])
def test_photometric_loss_constant_images(a, b):
    lam = 0.2
    ssim_const = (2 * a * b + C1) / (a * a + b * b + C1)  # variance terms cancel on flat patches
    expected = (1 - lam) * abs(a - b) + lam * (1 - ssim_const)
    got = photometric_ssim_loss(np.full((12, 12, 3), a), np.full((12, 12, 3), b), lam)
    assert got == pytest.approx(expected, abs=1e-12)


def test_photometric_loss_gradient():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    _, g = photometric_ssim_loss(x, y, 0.2, return_grad=True)
    num = central_difference(lambda v: photometric_ssim_loss(v, y, 0.2), x, 1e-6)
    assert relative_error(g, num) < 1e-4


def test_photometric_loss_rejects_shape_mismatch():
    with pytest.raises(ContractViolation):
        photometric_ssim_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 0.2)


def test_total_loss_is_component_sum():
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(10, 10, 3)), rng.uniform(size=(10, 10, 3))
    m = GaussianMap.from_arrays(np.zeros((4, 3)), mask_logit=rng.normal(size=4))
    cfg = MaskConfig(lambda2=0.3)
    by_hand = photometric_ssim_loss(x, y, cfg.lambda1) + 0.3 * float(sigmoid(m.mask_logit).mean())
    assert total_scene_loss(x, y, m, cfg) == pytest.approx(by_hand, abs=1e-14)
    assert total_scene_loss(x, y, m, MaskConfig(lambda2=0.0)) == photometric_ssim_loss(x, y, 0.2)
    gone = GaussianMap.from_arrays(np.zeros((4, 3)), mask_logit=[-800.0] * 4)
    assert total_scene_loss(x, x, gone, cfg) == pytest.approx(0.0, abs=1e-12)


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        MaskConfig(lambda1=1.5)
    with pytest.raises(ValueError):
        MaskConfig(lambda2=-1.0)


def _map(n, rng):
    return GaussianMap.from_arrays(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), np.log(rng.uniform(0.02, 0.2, (n, 3))),
                                   np.full(n, 2.0), rng.uniform(size=(n, 3)), np.full(n, 5.0))


def test_densify_noop_below_thresholds():
    m = _map(10, np.random.default_rng(0))
    before = {k: v.copy() for k, v in m.params().items()}
    rep = densify_and_prune(m, GradientAccumulator(10), DensifyConfig())
    assert (rep.cloned, rep.split, rep.pruned, rep.mask_pruned) == (0, 0, 0, 0)
    assert all(np.array_equal(before[k], v) for k, v in m.params().items())


def test_mask_prune_removes_exactly_the_hidden_gaussian():
    m = _map(6, np.random.default_rng(1))
    m.mask_logit[3] = logit(0.001)
    rep = densify_and_prune(m, GradientAccumulator(6), DensifyConfig())
    assert rep.mask_pruned == 1 and rep.after == 5
    assert 3 not in m.ids


def test_clone_split_and_untouched_rows():
    rng = np.random.default_rng(2)
    m = _map(8, rng)
    m.log_scale[0] = np.log(0.005)  # small -> clone
    m.log_scale[1] = np.log(0.2)    # large -> split
    m.opacity_logit[2] = logit(0.01)  # transparent -> pruned
    m.optimizer.init_state(m.params())
    acc = GradientAccumulator(8)
    grads = np.zeros((8, 2))
    grads[0] = grads[1] = [1e-3, 0.0]
    acc.update(grads, np.ones(8, dtype=bool))
    untouched = {int(i): {k: v[r].copy() for k, v in m.params().items()} for r, i in enumerate(m.ids) if r > 2}
    rep = densify_and_prune(m, acc, DensifyConfig(), np.random.default_rng(0))
    assert (rep.cloned, rep.split, rep.pruned) == (1, 1, 1)
    assert rep.after == 8 + 1 + 2 - 1 - 1
    m.check_congruent()
    for gid, vals in untouched.items():
        row = int(np.nonzero(m.ids == gid)[0][0])
        assert all(np.array_equal(m.params()[k][row], v) for k, v in vals.items())
    kids = m.log_scale[m.ids >= 10]
    assert np.allclose(kids, np.log(0.2 / 1.6))
    assert len(acc) == len(m) and not acc.count.any()


def test_densify_respects_budget():
    rng = np.random.default_rng(3)
    m = _map(5, rng)
    acc = GradientAccumulator(5)
    acc.update(np.full((5, 2), 1.0), np.ones(5, dtype=bool))
    rep = densify_and_prune(m, acc, DensifyConfig(max_gaussians=6), rng)
    assert rep.cloned + rep.split == 1
    m.check_congruent()


def test_densify_rejects_incongruent_accumulator():
    with pytest.raises(ContractViolation):
        densify_and_prune(_map(3, np.random.default_rng(0)), GradientAccumulator(2), DensifyConfig())


def test_prune_on_overparameterized_scene_keeps_quality():
    ds, gt = generate_synthetic(0, SyntheticSpec(n_frames=4))
    rng = np.random.default_rng(9)
    extra = GaussianMap.from_arrays(gt.position[:120] + rng.normal(0, 0.05, (120, 3)), None,
                                    gt.log_scale[:120], np.r_[np.full(60, logit(0.03)), np.full(60, 1.0)],
                                    rng.uniform(size=(120, 3)), np.r_[np.full(60, 5.0), np.full(60, logit(0.004))])
    m = gt.copy()
    m.add(extra.position, extra.quaternion, extra.log_scale, extra.opacity_logit, extra.color, extra.mask_logit)
    K = ds.intrinsics
    before = [psnr(np.clip(render(m, f.gt_pose, K).color, 0, 1), f.rgb) for f in ds.frames]
    rep = densify_and_prune(m, GradientAccumulator(len(m)), DensifyConfig(), densify=False)
    after = [psnr(np.clip(render(m, f.gt_pose, K).color, 0, 1), f.rgb) for f in ds.frames]
    assert rep.after < rep.before and rep.pruned == 60 and rep.mask_pruned == 60
    assert np.mean(before) - np.mean(after) <= 0.5


def test_discard_masks_contract():
    rng = np.random.default_rng(4)
    ds, gt = generate_synthetic(0, SyntheticSpec(n_frames=2, n_gaussians=40))
    m = gt.copy()
    pose, K = ds.frames[0].gt_pose, ds.intrinsics
    img = render(m, pose, K).color
    bytes_before = m.storage_bytes()
    discard_masks(m)
    assert m.masks_discarded and "mask_logit" not in m.params()
    assert "mask_logit" not in m.optimizer.rows()
    assert np.array_equal(render(m, pose, K).color, img)
    assert m.storage_bytes() == bytes_before - 4 * len(m)
    discard_masks(m)
    assert m.masks_discarded
    hidden = _map(3, rng)
    hidden.mask_logit[0] = -10.0
    with pytest.raises(ContractViolation):
        discard_masks(hidden)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_random_mutations_keep_state_congruent(n, seed):
    rng = np.random.default_rng(seed)
    m = _map(n, rng)
    m.opacity_logit[:] = rng.normal(0, 3, n)
    m.mask_logit[:] = rng.normal(0, 4, n)
    m.optimizer.init_state(m.params())
    acc = GradientAccumulator(n)
    acc.update(rng.exponential(3e-4, (n, 2)), rng.uniform(size=n) < 0.7)
    rep = densify_and_prune(m, acc, DensifyConfig(), rng)
    m.check_congruent()
    assert rep.after == len(m) == rep.before + rep.cloned + rep.split - rep.pruned - rep.mask_pruned
    assert (m.mask_values() == 1).all()
