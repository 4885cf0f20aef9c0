import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condshape import autodiff as ad
from condshape.geom import camera_at
from condshape.losses import (EmptyFront, LossWeights, TooFewViews, chamfer_loss, chamfer_terms,
                              combined_loss, consistency_loss, critic_objective, diversity_loss,
                              diversity_loss_groups, front_loss, front_loss_batch, gan_loss,
                              gradient_penalty, occlusion_pair, pad_sets)
from condshape.metrics import chamfer, emd
from condshape.model import Critic, ModelConfig
from condshape.render import view_based_sample
from gradcases import CASES, check

CAM = camera_at(25.0, 15.0, 2.5)


def test_front_loss_identity_and_occlusion_pair():
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(40, 3))
    assert float(front_loss(pts, pts, CAM).data) == 0.0
    pred, gt = occlusion_pair(CAM)
    assert float(front_loss(pred, gt, CAM).data) == 0.0
    assert sum(chamfer(pred, gt)) > 0


def test_front_loss_equals_manual_composition(rng):
    for _ in range(10):
        pred, gt = rng.uniform(-0.5, 0.5, size=(30, 3)), rng.uniform(-0.5, 0.5, size=(25, 3))
        pf = pred[view_based_sample(pred, CAM).front_indices]
        gf = gt[view_based_sample(gt, CAM).front_indices]
        assert float(front_loss(pred, gt, CAM).data) == pytest.approx(sum(chamfer(pf, gf)), abs=1e-12)


def test_front_loss_emd_variant(rng):
    pred, gt = rng.uniform(-0.5, 0.5, size=(30, 3)), rng.uniform(-0.5, 0.5, size=(25, 3))
    assert float(front_loss(pred, gt, CAM, metric="emd").data) > 0
    assert float(front_loss(gt, gt, CAM, metric="emd").data) == 0.0
    with pytest.raises(ValueError):
        front_loss(pred, gt, CAM, metric="l1")


def test_front_loss_empty_front():
    far = np.array([[100.0, 100.0, 100.0]])
    with pytest.raises(EmptyFront):
        front_loss(far, np.zeros((2, 3)), CAM)


def test_front_loss_at_most_full_cd_on_convex_plane(axis_cam):
    g = np.linspace(-0.3, 0.3, 6)
    plane = np.stack(list(np.meshgrid(g, g)) + [np.zeros((6, 6))], axis=-1).reshape(-1, 3)
    other = plane + np.array([0.01, -0.02, 0.05])
    assert float(front_loss(other, plane, axis_cam).data) <= sum(chamfer(other, plane)) + 1e-12


def test_front_loss_batch_matches_single(rng):
    cams = [camera_at(a, 10.0, 2.5) for a in (0.0, 90.0, 200.0)]
    pred = rng.uniform(-0.5, 0.5, size=(3, 30, 3))
    gts = [rng.uniform(-0.5, 0.5, size=(30, 3)) for _ in cams]
    fronts = [g[view_based_sample(g, c).front_indices] for g, c in zip(gts, cams)]
    loss, per = front_loss_batch(pred, fronts, cams)
    ref = [float(front_loss(p, g, c).data) for p, g, c in zip(pred, gts, cams)]
    assert np.allclose(per, ref, atol=1e-12) and float(loss.data) == pytest.approx(np.mean(ref))


def test_pad_sets():
    out, mask = pad_sets([np.ones((2, 3)), np.ones((1, 3))])
    assert out.shape == (2, 2, 3) and mask.tolist() == [[True, True], [True, False]]


def test_masked_chamfer_ignores_padding(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    pad = np.concatenate([b, np.full((3, 3), 50.0)])
    mask = np.array([True] * 4 + [False] * 3)
    d1, d2 = chamfer_terms(a[None], pad[None], mask_b=mask[None])
    assert np.allclose([float(d1.data[0]), float(d2.data[0])], chamfer(a, b), atol=1e-12)
    assert float(chamfer_loss(a, b).data) == pytest.approx(sum(chamfer(a, b)), abs=1e-12)


def test_diversity_examples(rng):
    s = rng.normal(size=(6, 3))
    assert float(diversity_loss(np.ones(4), np.ones(4), s, s + 1, 0.2).data) == 0.0
    assert float(diversity_loss([1.0, 0, 0], [0.0, 0, 0], s, s, 0.2).data) == pytest.approx(1.0, abs=1e-15)
    # alpha * EMD = 2 against a unit margin: inactive hinge, zero gradient
    s2 = s + np.array([1.0, 0, 0])
    leaf = ad.Tensor(s, requires_grad=True)
    alpha = 2.0 / emd(s, s2).cost
    loss = diversity_loss([1.0, 0, 0], [0.0, 0, 0], leaf, s2, alpha)
    assert float(loss.data) == 0.0 and not np.any(ad.grad(loss, [leaf])[0])


def test_diversity_groups_matches_pairwise(rng):
    pts, noise = rng.normal(size=(2, 3, 5, 3)), rng.normal(size=(2, 3, 4))
    ref = [float(diversity_loss(noise[g, i], noise[g, j], pts[g, i], pts[g, j], 0.05).data)
           for g in range(2) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert float(diversity_loss_groups(pts, noise, 0.05).data) == pytest.approx(np.mean(ref), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 3.0))
def test_diversity_nonnegative_and_monotone_in_margin(seed, scale):
    r = np.random.default_rng(seed)
    s1, s2 = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    dr = r.normal(size=5)
    near = float(diversity_loss(dr, np.zeros(5), s1, s2, 0.1).data)
    far = float(diversity_loss(scale * dr, np.zeros(5), s1, s2, 0.1).data)
    assert 0.0 <= near <= far


def test_gan_zero_critic():
    cfg = ModelConfig(shape_latent=6)
    crit = Critic(cfg, seed=0)
    crit.zero_()
    z_fake, z_real = np.ones((4, 6)), np.zeros((4, 6))
    gen_term, crit_term = gan_loss(crit, z_fake, z_real, 10.0, np.random.default_rng(0))
    assert float(gen_term.data) == 0.0
    assert float(gradient_penalty(crit, z_fake).data) == 1.0
    assert float(crit_term.data) == -10.0


def test_gan_linear_critic_without_penalty(rng):
    crit = Critic(ModelConfig(shape_latent=6), seed=0, hidden=())
    w = crit.params["crit_out.w"].data[:, 0]
    z_fake, z_real = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    obj = critic_objective(crit, z_real, z_fake, 0.0, None)
    assert float(obj.data) == pytest.approx(w @ (z_real.mean(0) - z_fake.mean(0)), abs=1e-12)


def test_gradient_penalty_weight_gradient_matches_finite_differences(rng):
    crit = Critic(ModelConfig(shape_latent=5, critic_hidden=4), seed=1)
    z = rng.normal(size=(3, 5))
    params = list(crit.params.values())
    analytic = ad.grad(gradient_penalty(crit, z), params)
    for p, g in zip(params, analytic):
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + 1e-6
            hi = float(gradient_penalty(crit, z).data)
            p.data[idx] = old - 1e-6
            lo = float(gradient_penalty(crit, z).data)
            p.data[idx] = old
            num[idx] = (hi - lo) / 2e-6
        assert np.allclose(g, num, atol=1e-6)


def test_consistency_examples(rng):
    s = rng.normal(size=(5, 3))
    assert float(consistency_loss([s, s, s]).data) == 0.0
    t = rng.normal(size=(5, 3))
    assert float(consistency_loss([s, t]).data) == pytest.approx(sum(chamfer(s, t)), abs=1e-12)
    three = [np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([[2.0, 0, 0]])]
    assert float(consistency_loss(three).data) == pytest.approx(8 / 3, abs=1e-15)
    with pytest.raises(TooFewViews):
        consistency_loss([s])


def test_consistency_unequal_counts(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    assert float(consistency_loss([a, b]).data) == pytest.approx(sum(chamfer(a, b)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_consistency_permutation_invariant_and_outlier_raises(seed, k):
    r = np.random.default_rng(seed)
    shapes = r.normal(size=(k, 4, 3))
    perm = r.permutation(k)
    assert float(consistency_loss(shapes).data) == pytest.approx(float(consistency_loss(shapes[perm]).data),
                                                                  abs=1e-12)
    same = np.repeat(shapes[:1], k, axis=0)
    outlier = np.concatenate([same, shapes[:1] + 0.5])
    assert float(consistency_loss(outlier).data) > float(consistency_loss(same).data)


def test_combined_loss():
    w = LossWeights(beta=10.0, gamma=0.1)
    assert combined_loss(1.0, 2.0, 3.0, w).total == 21.3
    assert combined_loss(1.5, 2.0, 3.0, LossWeights(beta=0.0, gamma=0.0)).total == 1.5
    assert combined_loss(0.0, 0.0, 0.0, w).total == 0.0
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


@pytest.mark.parametrize("kind", sorted(CASES))
def test_gradients_spot_check(kind):
    assert max(check(CASES[kind], seed) for seed in range(10)) < 1e-4
