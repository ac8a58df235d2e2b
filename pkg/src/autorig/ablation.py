"""The two ablation paths and a benchmark runner comparing them to the full model.

* point-conditioned GPT: the token decoder reads a learned cross-attention
  summary of the point features where the full model reads the ArAE latent.
  Trained end to end on next-token cross-entropy, no diffusion involved.
* joint diffusion + MST: the denoiser generates a padded joint array directly
  (xyz plus an existence channel); connectivity comes from a minimum spanning
  tree over the surviving joints.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .arae import ArAEConfig, TokenDecoder, TrainConfig, generate_tokens, make_batch, ordered_joints, sequence_loss
from .diffusion import (Denoiser, DenoiserConfig, DiffusionBundle, DiffusionTrainConfig, FeatureCache, PointEncoder,
                        PredictionError, ddpm_sample, encode_pointcloud, point_batch, predict_skeletons,
                        train_diffusion)
from .layers import Attention
from .metrics import MatchConfig, MetricsReport, evaluate, mean_report
from .mst import mst_connectivity
from .pipeline import EncoderConfig, PipelineConfig, train_pipeline, train_point_encoder
from .skeleton import Skeleton
from .synth import make_splits, synth_dataset
from .tokenizer import TokenFormatError, detokenize

log = logging.getLogger(__name__)

# a failed prediction scores zero overlap and the diameter of the normalized cube
FAILURE_DISTANCE = 2.0 * np.sqrt(3.0)


# -- point-conditioned GPT ------------------------------------------------------

class PointGPT(nn.Module):
    """Token decoder conditioned on point features through learned queries."""

    def __init__(self, cfg: ArAEConfig, cond_width: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        d = cfg.width
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.02)
        self.cond_ln = nn.LayerNorm(cond_width)
        self.cross = Attention(d, cfg.heads, cond_width)
        self.ln = nn.LayerNorm(d)
        self.decoder = TokenDecoder(cfg)
        self.double()

    def latent(self, cond) -> torch.Tensor:
        ctx = self.cond_ln(cond.tokens())
        q = self.queries.expand(ctx.shape[0], -1, -1)
        return self.ln(q + self.cross(q, ctx))


@dataclass(frozen=True)
class GPTTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    n_points: int = 256
    point_pool: int = 4


def train_point_gpt(model: PointGPT, encoder: PointEncoder, assets, cfg: GPTTrainConfig = GPTTrainConfig(),
                    seed: int = 0) -> list[float]:
    assets = list(assets)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cache = FeatureCache(encoder, [a.mesh for a in assets], cfg.n_points, cfg.point_pool, rng)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.steps))
    vocab = model.cfg.vocab
    curve = []
    model.train()
    for _ in range(cfg.steps):
        idx = rng.integers(len(assets), size=cfg.batch_size)
        batch = make_batch([assets[i].skeleton for i in idx], vocab, model.cfg.k_max)
        logits = model.decoder(model.latent(cache.batch(idx, rng)), batch.prefix)
        loss = sequence_loss(logits, batch.targets, vocab.pad)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        curve.append(loss.item())
    model.eval()
    return curve


def predict_point_gpt(model: PointGPT, encoder: PointEncoder, meshes, n_points: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        latent = model.latent(encode_pointcloud(encoder, point_batch(meshes, n_points, rng)))
    out = []
    for toks in generate_tokens(model, latent):
        try:
            out.append(detokenize(toks, model.cfg.vocab))
        except TokenFormatError as exc:
            out.append(PredictionError(str(exc), toks.ids))
    return out


# -- joint diffusion + MST ------------------------------------------------------

def joint_arrays(skeletons, n_pad: int) -> torch.Tensor:
    """(B, n_pad, 4): traversal-ordered xyz with +1 existence, zeros and -1 after."""
    out = np.zeros((len(skeletons), n_pad, 4))
    out[:, :, 3] = -1.0
    for i, s in enumerate(skeletons):
        if s.k > n_pad:
            raise ValueError(f"skeleton with {s.k} joints exceeds padding {n_pad}")
        out[i, : s.k, :3] = ordered_joints(s)
        out[i, : s.k, 3] = 1.0
    return torch.as_tensor(out)


def skeleton_from_array(x: np.ndarray):
    """Joints whose existence channel is positive, connected by MST."""
    x = np.asarray(x)
    joints = np.clip(x[x[:, 3] > 0, :3], -1.0, 1.0)
    if len(joints) < 2:
        return PredictionError(f"only {len(joints)} joints generated", [])
    try:
        return mst_connectivity(joints)
    except ValueError as exc:
        return PredictionError(str(exc), [])


def predict_joint_diffusion(bundle: DiffusionBundle, meshes, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        cond = encode_pointcloud(bundle.point_encoder, point_batch(meshes, bundle.n_points, rng))
    x = ddpm_sample(bundle.denoiser, cond, bundle.schedule, seed=int(rng.integers(2**62)))
    return [skeleton_from_array(row) for row in x.numpy()]


# -- benchmark --------------------------------------------------------------------

def desk_pipeline_config(augment: bool = True) -> PipelineConfig:
    """Single-CPU budget for the synthetic benchmark: a 4-row latent, a long
    pose-augmented ArAE run with latent noise, cached point features."""
    return PipelineConfig(
        arae=ArAEConfig(n_queries=4, k_max=16),
        arae_train=TrainConfig(epochs=500, lr=1e-3, augment=augment, latent_noise=0.5),
        encoder=EncoderConfig(pretrain_steps=300, n_points=256),
        diffusion_train=DiffusionTrainConfig(steps=8000, n_points=256, augment=False, point_pool=4),
    )


@dataclass(frozen=True)
class BenchmarkConfig:
    pipeline: PipelineConfig = field(default_factory=desk_pipeline_config)
    gpt: GPTTrainConfig = GPTTrainConfig(steps=8000)
    n_pad: int = 16
    match: MatchConfig = MatchConfig()


def synthetic_benchmark(seed: int = 0, n: int = 200, ratio: int = 20) -> tuple[list, list]:
    """Seeded synthetic assets split per category into (train, test)."""
    assets = synth_dataset(seed, n)
    manifest = make_splits([{"path": str(i), "category": a.category} for i, a in enumerate(assets)], ratio, seed)
    train = [assets[int(e["path"])] for e in manifest if e["split"] == "train"]
    test = [assets[int(e["path"])] for e in manifest if e["split"] == "test"]
    return train, test


@dataclass
class BenchmarkResult:
    reports: dict  # method -> mean MetricsReport
    failures: dict  # method -> number of failed predictions
    per_asset: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"method": m, **r.as_dict(), "failures": self.failures[m]} for m, r in self.reports.items()]


def score(predictions, truths, cfg: MatchConfig = MatchConfig()) -> tuple[list[MetricsReport], int]:
    reports, failures = [], 0
    for pred, gt in zip(predictions, truths):
        if isinstance(pred, Skeleton):
            reports.append(evaluate(pred, gt, cfg))
        else:
            failures += 1
            d = FAILURE_DISTANCE
            reports.append(MetricsReport(0.0, 0.0, 0.0, d, d, d))
    return reports, failures


METHODS = ("full", "only_gpt", "only_diffusion_mst")


def run_benchmark(train_assets, test_assets, cfg: BenchmarkConfig = BenchmarkConfig(), seed: int = 0,
                  methods=METHODS) -> BenchmarkResult:
    """Train every requested method on ``train_assets`` and score it on ``test_assets``.

    All methods share one frozen point encoder and the same diffusion budget.
    """
    train_assets, test_assets = list(train_assets), list(test_assets)
    pc = cfg.pipeline
    encoder, _ = train_point_encoder(train_assets, pc.encoder, seed)
    meshes = [a.mesh for a in test_assets]
    truths = [a.skeleton for a in test_assets]
    preds = {}
    if "full" in methods:
        pipe = train_pipeline(train_assets, pc, seed, encoder=encoder)
        preds["full"] = predict_skeletons(meshes, pipe.arae, pipe.bundle, seed)
    if "only_gpt" in methods:
        gpt = PointGPT(pc.arae, encoder.width, seed=seed)
        train_point_gpt(gpt, encoder, train_assets, cfg.gpt, seed)
        preds["only_gpt"] = predict_point_gpt(gpt, encoder, meshes, cfg.gpt.n_points, seed)
    if "only_diffusion_mst" in methods:
        den_cfg = DenoiserConfig(**{**asdict(pc.denoiser), "rows": cfg.n_pad, "latent_width": 4,
                                    "cond_width": encoder.width})
        bundle = DiffusionBundle(Denoiser(den_cfg, seed=seed), encoder, pc.schedule(), pc.diffusion_train.n_points)
        train_diffusion(bundle, None, train_assets, pc.diffusion_train, seed,
                        target_fn=lambda skels: joint_arrays(skels, cfg.n_pad))
        preds["only_diffusion_mst"] = predict_joint_diffusion(bundle, meshes, seed)
    reports, failures, per_asset = {}, {}, {}
    for m in methods:
        rs, nf = score(preds[m], truths, cfg.match)
        reports[m], failures[m], per_asset[m] = mean_report(rs), nf, rs
        log.info("%s: %s failures=%d", m, reports[m].as_dict(), nf)
    return BenchmarkResult(reports, failures, per_asset)
