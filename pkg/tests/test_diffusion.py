import numpy as np
import pytest
import torch

import oracles
from autorig import diffusion
from autorig.arae import ArAE, ArAEConfig, TrainConfig, train_arae
from autorig.diffusion import (DenoiserConfig, Denoiser, DiffusionBundle, DiffusionTrainConfig, NoiseSchedule,
                               PointEncoder, ddpm_forward, ddpm_sample, diffusion_loss, encode_pointcloud,
                               latent_targets, predict_skeleton, sample_surface_points, train_diffusion)
from autorig.layers import state_arrays
from autorig.skeleton import Mesh, RigValidationError

TRI = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_schedule_alpha_bar_hand_value():
    s = NoiseSchedule(4)
    assert s.alpha_bar[4] == pytest.approx(oracles.alpha_bar(np.linspace(1e-4, 0.02, 4))[4], abs=1e-15)
    by_hand = (1 - 1e-4) * (1 - (1e-4 + 0.0199 / 3)) * (1 - (1e-4 + 2 * 0.0199 / 3)) * (1 - 0.02)
    assert s.alpha_bar[4] == pytest.approx(by_hand, abs=1e-6)
    assert s.alpha_bar[0] == 1.0


@pytest.mark.parametrize("schedule", [NoiseSchedule(1000), NoiseSchedule(100), NoiseSchedule.scaled(100)])
def test_alpha_bar_strictly_decreasing(schedule):
    ab = schedule.alpha_bar
    assert np.all(np.diff(ab) < 0)
    np.testing.assert_allclose(np.sqrt(ab) ** 2 + np.sqrt(1 - ab) ** 2, 1.0, atol=1e-15)


def test_scaled_schedule_ends_near_noise():
    assert NoiseSchedule.scaled(100).alpha_bar[-1] < 1e-3
    with pytest.raises(ValueError):
        NoiseSchedule(10, 0.5, 1.5)


def test_forward_identity_and_range():
    x0 = torch.randn(2, 3, 4, dtype=torch.float64)
    s = NoiseSchedule(100)
    near = ddpm_forward(x0, 1, torch.zeros_like(x0), s)
    torch.testing.assert_close(near, np.sqrt(s.alpha_bar[1]) * x0)
    with pytest.raises(ValueError):
        ddpm_forward(x0, 0, torch.zeros_like(x0), s)
    with pytest.raises(ValueError):
        ddpm_forward(x0, 101, torch.zeros_like(x0), s)


@pytest.mark.parametrize("t", [1, 10, 50, 100])
def test_forward_variance_monte_carlo(t):
    s = NoiseSchedule(100)
    eps = torch.as_tensor(np.random.default_rng(t).standard_normal((10_000, 1)))
    xt = ddpm_forward(torch.zeros_like(eps), t, eps, s)
    assert float(xt.var()) == pytest.approx(1 - s.alpha_bar[t], rel=0.05)


def test_surface_sampling():
    pts = sample_surface_points(TRI, 500, seed=1)
    assert np.all(pts[:, :2] >= -1e-15) and np.all(pts[:, :2].sum(axis=1) <= 1 + 1e-12)
    np.testing.assert_array_equal(pts, sample_surface_points(TRI, 500, seed=1))
    flat = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        sample_surface_points(flat, 10)


def test_area_weighted_choice():
    # big triangle has 9x the area of the small one
    verts = np.array([[0.0, 0, 0], [3, 0, 0], [0, 3, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]])
    mesh = Mesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_surface_points(mesh, 10_000, seed=0)
    frac = np.mean(pts[:, 0] < 4)
    assert abs(frac - 0.9) < 0.03


def test_encoder_permutation_and_duplication():
    enc = PointEncoder(32, seed=0)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    a = encode_pointcloud(enc, pts)
    b = encode_pointcloud(enc, pts[np.random.default_rng(1).permutation(50)])
    c = encode_pointcloud(enc, np.vstack([pts, pts]))
    assert a.per_point.shape == (1, 50, 32) and a.global_.shape == (1, 32)
    assert (a.global_ - b.global_).abs().max() < 1e-9
    assert (a.global_ - c.global_).abs().max() < 1e-12


TOY_DEN = DenoiserConfig(rows=4, latent_width=8, width=16, layers=1, heads=2, cond_width=16)


def _cond(n=2, seed=0):
    enc = PointEncoder(16, seed=seed)
    return encode_pointcloud(enc, np.random.default_rng(seed).uniform(-1, 1, (n, 20, 3)))


def test_loss_zero_prediction_is_unit(monkeypatch):
    s = NoiseSchedule(100)
    monkeypatch.setattr(diffusion, "denoise_predict", lambda *a, **k: torch.zeros(64, 4, 8, dtype=torch.float64))
    noise = torch.as_tensor(np.random.default_rng(0).standard_normal((64, 4, 8)))
    x0 = torch.zeros_like(noise)
    den = Denoiser(TOY_DEN)
    loss = diffusion_loss(den, x0, _cond(64), np.full(64, 50), noise, s)
    assert float(loss) == pytest.approx(1.0, rel=0.05)


def test_loss_exact_prediction_is_zero(monkeypatch):
    s = NoiseSchedule(100)
    noise = torch.as_tensor(np.random.default_rng(0).standard_normal((2, 4, 8)))
    monkeypatch.setattr(diffusion, "denoise_predict", lambda *a, **k: noise.clone())
    assert float(diffusion_loss(Denoiser(TOY_DEN), torch.zeros_like(noise), _cond(), 3, noise, s)) == 0.0


def test_diffusion_gradient_check():
    from autorig.arae import finite_difference_check
    s = NoiseSchedule.scaled(20)
    den = Denoiser(TOY_DEN, seed=1)
    rng = np.random.default_rng(0)
    x0 = torch.as_tensor(rng.standard_normal((2, 4, 8)))
    noise = torch.as_tensor(rng.standard_normal((2, 4, 8)))
    cond = _cond()
    err = finite_difference_check(lambda: diffusion_loss(den, x0, cond, np.array([3, 17]), noise, s),
                                  list(den.parameters()), eps=1e-5, n_coords=200)
    assert err < 1e-4


def test_sampler_shape_determinism_and_seeds():
    den = Denoiser(TOY_DEN, seed=0)
    s = NoiseSchedule.scaled(10)
    cond = _cond(1)
    a = ddpm_sample(den, cond, s, seed=0)
    assert a.shape == (1, 4, 8) and torch.isfinite(a).all()
    assert torch.equal(a, ddpm_sample(den, cond, s, seed=0))
    assert (a - ddpm_sample(den, cond, s, seed=1)).norm() > 0


@pytest.fixture(scope="module")
def overfit(chain_rig):
    cfg = ArAEConfig(n_queries=4, width=32, layers=2, heads=4, k_max=12)
    arae, _ = train_arae(ArAE(cfg, seed=0), [chain_rig], TrainConfig(epochs=400, batch_size=1, lr=1e-3,
                                                                    augment=False), seed=0)
    enc = PointEncoder(32, seed=0)
    diffusion.pretrain_point_encoder(enc, [chain_rig.mesh], steps=20, n_points=128)
    bundle = DiffusionBundle(Denoiser(DenoiserConfig(rows=4, latent_width=32, width=64, layers=2, heads=4,
                                                     cond_width=32), seed=0),
                             enc, NoiseSchedule.scaled(50), n_points=128)
    before = {k: v.copy() for k, v in state_arrays(arae.encoder).items()}
    enc_before = {k: v.copy() for k, v in state_arrays(enc).items()}
    curve = train_diffusion(bundle, arae, [chain_rig],
                            DiffusionTrainConfig(steps=2000, batch_size=8, n_points=128, augment=False), seed=0)
    return arae, bundle, curve, before, enc_before


def test_overfit_loss_and_frozen_parts(overfit):
    arae, bundle, curve, before, enc_before = overfit
    assert np.mean(curve[-100:]) < 0.05
    after = state_arrays(arae.encoder)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    enc_after = state_arrays(bundle.point_encoder)
    assert all(enc_before[k].tobytes() == enc_after[k].tobytes() for k in enc_before)


def test_overfit_sampling_and_prediction(overfit, chain_rig):
    from autorig.metrics import cd_j2j
    from autorig.skeleton import same_topology
    arae, bundle, _, _, _ = overfit
    target = latent_targets(arae, [chain_rig.skeleton])
    got = diffusion.sample_latents(bundle, [chain_rig.mesh], seed=0)
    assert float((got - target).norm() / target.norm()) < 0.2
    pred = predict_skeleton(chain_rig.mesh, arae, bundle, seed=0)
    assert same_topology(pred, chain_rig.skeleton)
    assert cd_j2j(pred, chain_rig.skeleton) < 0.05
    again = predict_skeleton(chain_rig.mesh, arae, bundle, seed=0)
    assert again.joints.tobytes() == pred.joints.tobytes()


def test_invalid_mesh_rejected(overfit):
    arae, bundle, _, _, _ = overfit
    bad = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 5]]))
    with pytest.raises(RigValidationError):
        predict_skeleton(bad, arae, bundle)


def test_training_requires_arae(chain_rig):
    bundle = DiffusionBundle(Denoiser(TOY_DEN), PointEncoder(16), NoiseSchedule(10))
    with pytest.raises(ValueError):
        train_diffusion(bundle, None, [chain_rig], DiffusionTrainConfig(steps=1))


def test_training_deterministic(chain_rig, biped_rig):
    def run():
        arae = ArAE(ArAEConfig(n_queries=4, width=8, layers=1, heads=2, k_max=12), seed=0)
        bundle = DiffusionBundle(Denoiser(TOY_DEN, seed=0), PointEncoder(16), NoiseSchedule(10), n_points=32)
        return train_diffusion(bundle, arae, [chain_rig, biped_rig],
                               DiffusionTrainConfig(steps=5, batch_size=2, n_points=32), seed=3)
    assert run() == run()
