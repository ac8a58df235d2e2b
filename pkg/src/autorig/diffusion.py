"""Mesh-conditioned latent diffusion.

Surface points go through a small permutation-invariant encoder (pre-trained
as a point autoencoder, then frozen). A transformer denoiser predicts the
noise added to a skeleton latent, attending to the point features through
cross-attention. Sampling is ancestral DDPM.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .arae import ArAE, encode_joints, generate_tokens, ordered_joints, pad_joints
from .deform import augment_pose
from .layers import MLP, Block, timestep_embedding
from .skeleton import Mesh, RigValidationError, Skeleton, validate_mesh
from .tokenizer import TokenFormatError, detokenize

log = logging.getLogger(__name__)


# -- noise schedule -----------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @classmethod
    def scaled(cls, steps: int) -> "NoiseSchedule":
        """Linear schedule with endpoints stretched by 1000 / steps so that
        short chains still end near pure noise (abar_T ~ 4e-5 for any T)."""
        f = 1000.0 / steps
        return cls(steps, 1e-4 * f, min(0.02 * f, 0.999))

    def __post_init__(self):
        b = self.betas
        if self.steps < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")

    @property
    def betas(self) -> np.ndarray:
        """betas[t - 1] is beta_t for t = 1..T."""
        return np.linspace(self.beta_start, self.beta_end, self.steps)

    @property
    def alpha_bar(self) -> np.ndarray:
        """alpha_bar[t] for t = 0..T, with alpha_bar[0] = 1."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def ddpm_forward(x0, t, noise, schedule: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``; ``t`` is a scalar or one step per batch row."""
    t_arr = np.asarray(t.cpu().numpy() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.steps):
        raise ValueError(f"timestep outside [1, {schedule.steps}]")
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    noise = torch.as_tensor(noise, dtype=torch.float64)
    if noise.shape != x0.shape:
        raise ValueError("noise and x0 shapes differ")
    ab = torch.as_tensor(schedule.alpha_bar[t_arr])
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


# -- point clouds -------------------------------------------------------------

def sample_surface_points(mesh: Mesh, n: int = 1024, seed=0) -> np.ndarray:
    """Area-weighted triangle choice, then uniform barycentric sampling."""
    if n < 1:
        raise ValueError("need at least one sample")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.triangles()[face]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


@dataclass
class PointCloudFeature:
    per_point: torch.Tensor  # (B, n, c)
    global_: torch.Tensor  # (B, c)

    def tokens(self) -> torch.Tensor:
        """Conditioning tokens: the global feature followed by per-point features."""
        return torch.cat([self.global_[:, None], self.per_point], dim=1)


class PointEncoder(nn.Module):
    """Shared per-point MLP, max pooling, then a post MLP on the pooled vector."""

    def __init__(self, width: int = 128, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.width = width
        self.shared = nn.Sequential(nn.Linear(3, 64), nn.ReLU(), nn.Linear(64, 128), nn.ReLU(),
                                    nn.Linear(128, width))
        self.post = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, width))
        self.double()

    def forward(self, points) -> PointCloudFeature:
        per_point = self.shared(points)
        pooled = per_point.max(dim=1).values
        return PointCloudFeature(per_point, self.post(pooled))


def encode_pointcloud(encoder: PointEncoder, points) -> PointCloudFeature:
    p = torch.as_tensor(np.asarray(points), dtype=torch.float64)
    if p.dim() == 2:
        p = p[None]
    if p.shape[1] < 1:
        raise ValueError("need at least one point")
    return encoder(p)


class PointDecoder(nn.Module):
    def __init__(self, width: int, n_points: int):
        super().__init__()
        self.n_points = n_points
        self.net = nn.Sequential(nn.Linear(width, 256), nn.ReLU(), nn.Linear(256, 3 * n_points))
        self.double()

    def forward(self, g):
        return self.net(g).view(g.shape[0], self.n_points, 3)


def chamfer_torch(a, b) -> torch.Tensor:
    d = torch.cdist(a, b)
    return 0.5 * (d.min(dim=2).values.mean() + d.min(dim=1).values.mean())


def pretrain_point_encoder(encoder: PointEncoder, meshes, steps: int = 200, n_points: int = 256,
                           lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Self-supervised autoencoding warm-up; the encoder is frozen afterwards."""
    meshes = list(meshes)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    dec = PointDecoder(encoder.width, n_points)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(dec.parameters()), lr=lr)
    curve = []
    for _ in range(steps):
        idx = rng.choice(len(meshes), size=min(16, len(meshes)), replace=False)
        pts = torch.as_tensor(np.stack([sample_surface_points(meshes[i], n_points, int(rng.integers(2**63)))
                                        for i in idx]))
        loss = chamfer_torch(dec(encoder(pts).global_), pts)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    freeze(encoder)
    return curve


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# -- denoiser -----------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    rows: int = 16  # latent rows m
    latent_width: int = 64  # latent width d
    width: int = 128
    layers: int = 4
    heads: int = 4
    cond_width: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        w = cfg.width
        self.inp = nn.Linear(cfg.latent_width, w)
        self.row_pos = nn.Parameter(torch.randn(cfg.rows, w) * 0.02)
        self.time = MLP(w)
        self.time_in = nn.Linear(w, w)
        self.cond_ln = nn.LayerNorm(cfg.cond_width)
        self.blocks = nn.ModuleList([Block(w, cfg.heads, ctx_width=cfg.cond_width)
                                     for _ in range(cfg.layers)])
        self.ln = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.latent_width)
        self.double()

    def forward(self, x_t, t, cond: PointCloudFeature, phase=None):
        """Raw network output. ``phase`` is the timestep rescaled to [0, 1000]
        so the sinusoidal embedding sees the same range for any chain length."""
        phase = torch.as_tensor(t, dtype=torch.float64) if phase is None else phase
        temb = self.time(self.time_in(timestep_embedding(phase, self.cfg.width)))
        h = self.inp(x_t) + self.row_pos + temb[:, None]
        ctx = self.cond_ln(cond.tokens())
        for blk in self.blocks:
            h = blk(h, ctx=ctx)
        return self.out(self.ln(h))


def denoise_predict(denoiser: Denoiser, x_t, t, cond: PointCloudFeature,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Noise estimate ``sqrt(1 - abar) x_t + sqrt(abar) F(x_t, t)``.

    The first term is the exact answer for unit-variance data; the network
    only models the residual, which keeps the estimate tied to the scale of
    ``x_t`` near pure noise where the ancestral chain is most sensitive.
    """
    t_arr = np.array(np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],)))
    ab = torch.as_tensor(schedule.alpha_bar[t_arr]).reshape(-1, 1, 1)
    phase = torch.as_tensor(t_arr * (1000.0 / schedule.steps), dtype=torch.float64)
    raw = denoiser(x_t, torch.as_tensor(t_arr), cond, phase=phase)
    return (1 - ab).sqrt() * x_t + ab.sqrt() * raw


def diffusion_loss(denoiser: Denoiser, x0, cond: PointCloudFeature, t, noise,
                   schedule: NoiseSchedule) -> torch.Tensor:
    x_t = ddpm_forward(x0, np.atleast_1d(t), noise, schedule)
    return F.mse_loss(denoise_predict(denoiser, x_t, t, cond, schedule), torch.as_tensor(noise))


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    n_points: int = 1024
    augment: bool = True
    max_angle: float = 30.0
    log_every: int = 0
    # > 0 caches that many point clouds per asset (only without augmentation)
    point_pool: int = 0


@dataclass
class DiffusionBundle:
    """Everything the sampling stage needs besides the ArAE."""

    denoiser: Denoiser
    point_encoder: PointEncoder
    schedule: NoiseSchedule
    n_points: int = 1024


def _posed(assets, rng, augment, max_angle):
    if not augment:
        return list(assets)
    return [augment_pose(a, int(rng.integers(2**63)), max_angle) for a in assets]


def latent_targets(arae: ArAE, skeletons) -> torch.Tensor:
    with torch.no_grad():
        joints, mask = pad_joints([ordered_joints(s) for s in skeletons], arae.cfg.k_max)
        return encode_joints(arae, joints, mask)


def point_batch(meshes, n_points, rng) -> np.ndarray:
    return np.stack([sample_surface_points(m, n_points, int(rng.integers(2**63))) for m in meshes])


class FeatureCache:
    """Frozen-encoder features for ``pool`` point clouds per mesh."""

    def __init__(self, encoder: PointEncoder, meshes, n_points: int, pool: int, rng):
        per, glob = [], []
        with torch.no_grad():
            for mesh in meshes:
                f = encode_pointcloud(encoder, point_batch([mesh] * pool, n_points, rng))
                per.append(f.per_point)
                glob.append(f.global_)
        self.per_point = torch.stack(per)
        self.global_ = torch.stack(glob)
        self.pool = pool

    def batch(self, idx, rng) -> PointCloudFeature:
        idx = torch.as_tensor(np.asarray(idx))
        j = torch.as_tensor(rng.integers(self.pool, size=len(idx)))
        return PointCloudFeature(self.per_point[idx, j], self.global_[idx, j])


def train_diffusion(bundle: DiffusionBundle, arae: ArAE, assets, cfg: DiffusionTrainConfig = DiffusionTrainConfig(),
                    seed: int = 0, target_fn=None) -> list[float]:
    """Noise-prediction MSE steps over the dataset; the ArAE and the point
    encoder are never updated. ``target_fn(skeletons)`` overrides the
    diffusion target (defaults to ArAE latents)."""
    if arae is None and target_fn is None:
        raise ValueError("a trained ArAE is required")
    assets = list(assets)
    if not assets:
        raise ValueError("empty dataset")
    target_fn = target_fn or (lambda skels: latent_targets(arae, skels))
    freeze(bundle.point_encoder)
    if arae is not None:
        freeze(arae)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    den = bundle.denoiser
    den.train()
    opt = torch.optim.Adam(den.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.steps))
    T = bundle.schedule.steps
    fixed = cache = None
    if not cfg.augment:
        fixed = target_fn([a.skeleton for a in assets])
        if cfg.point_pool > 0:
            cache = FeatureCache(bundle.point_encoder, [a.mesh for a in assets], cfg.n_points, cfg.point_pool, rng)
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(len(assets), size=cfg.batch_size)
        if cache is not None:
            x0, cond = fixed[torch.as_tensor(idx)], cache.batch(idx, rng)
        else:
            chunk = _posed([assets[i] for i in idx], rng, cfg.augment, cfg.max_angle)
            x0 = fixed[torch.as_tensor(idx)] if fixed is not None else target_fn([a.skeleton for a in chunk])
            with torch.no_grad():
                cond = encode_pointcloud(bundle.point_encoder,
                                         point_batch([a.mesh for a in chunk], cfg.n_points, rng))
        t = rng.integers(1, T + 1, size=len(idx))
        noise = torch.as_tensor(rng.standard_normal(tuple(x0.shape)))
        loss = diffusion_loss(den, x0, cond, t, noise, bundle.schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        curve.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("diffusion step %d loss %.5f", step + 1, np.mean(curve[-cfg.log_every:]))
    den.eval()
    return curve


def ddpm_sample(denoiser: Denoiser, cond: PointCloudFeature, schedule: NoiseSchedule, seed=0,
                shape=None) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, posterior variance."""
    B = cond.global_.shape[0]
    shape = shape or (B, denoiser.cfg.rows, denoiser.cfg.latent_width)
    gen = torch.Generator().manual_seed(int(seed))
    betas = torch.as_tensor(schedule.betas)
    ab = torch.as_tensor(schedule.alpha_bar)
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            eps = denoise_predict(denoiser, x, t, cond, schedule)
            beta, a_bar, a_prev = betas[t - 1], ab[t], ab[t - 1]
            mean = (x - beta / (1 - a_bar).sqrt() * eps) / (1 - beta).sqrt()
            if t > 1:
                var = beta * (1 - a_prev) / (1 - a_bar)
                x = mean + var.sqrt() * torch.randn(shape, generator=gen, dtype=torch.float64)
            else:
                x = mean
    return x


class PredictionError(RuntimeError):
    """Generated tokens could not be turned into a skeleton."""

    def __init__(self, message, tokens):
        super().__init__(message)
        self.tokens = tokens


def sample_latents(bundle: DiffusionBundle, meshes, seed=0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    pts = point_batch(meshes, bundle.n_points, rng)
    with torch.no_grad():
        cond = encode_pointcloud(bundle.point_encoder, pts)
    return ddpm_sample(bundle.denoiser, cond, bundle.schedule, seed=int(rng.integers(2**62)))


def predict_skeletons(meshes, arae: ArAE, bundle: DiffusionBundle, seed=0) -> list:
    """Batched prediction; failed decodes come back as :class:`PredictionError`."""
    latents = sample_latents(bundle, meshes, seed)
    out = []
    for toks in generate_tokens(arae, latents):
        try:
            out.append(detokenize(toks, arae.cfg.vocab))
        except TokenFormatError as exc:
            out.append(PredictionError(str(exc), toks.ids))
    return out


def predict_skeleton(mesh: Mesh, arae: ArAE, bundle: DiffusionBundle, seed=0) -> Skeleton:
    problems = validate_mesh(mesh)
    if problems:
        raise RigValidationError(problems)
    result = predict_skeletons([mesh], arae, bundle, seed)[0]
    if isinstance(result, PredictionError):
        raise result
    return result

