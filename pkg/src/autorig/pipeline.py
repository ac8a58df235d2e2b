"""Training orchestration and checkpoint round trips for the two-stage model."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from . import checkpoint
from .arae import ArAE, ArAEConfig, TrainConfig, train_arae
from .diffusion import (DenoiserConfig, Denoiser, DiffusionBundle, DiffusionTrainConfig, NoiseSchedule,
                        PointEncoder, freeze, pretrain_point_encoder, train_diffusion)
from .layers import load_arrays, state_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 128
    pretrain_steps: int = 200
    n_points: int = 256
    lr: float = 1e-3


@dataclass(frozen=True)
class PipelineConfig:
    arae: ArAEConfig = ArAEConfig()
    arae_train: TrainConfig = TrainConfig()
    encoder: EncoderConfig = EncoderConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    diffusion_train: DiffusionTrainConfig = DiffusionTrainConfig()
    schedule_steps: int = 100
    # stretch the linear betas so short chains still end at noise
    scaled_schedule: bool = True

    def schedule(self) -> NoiseSchedule:
        if self.scaled_schedule:
            return NoiseSchedule.scaled(self.schedule_steps)
        return NoiseSchedule(self.schedule_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return config_from_dict(cls, d)


def config_from_dict(cls, d, base=None):
    """Nested dataclass from a (possibly partial) dict layered over ``base``
    (default ``cls()``); unknown keys are errors."""
    d = dict(d or {})
    base = cls() if base is None else base
    known = {f.name for f in fields(cls)}
    bad = sorted(set(d) - known)
    if bad:
        raise ValueError(f"unknown {cls.__name__} keys: {bad}")
    kwargs = {}
    for name, value in d.items():
        current = getattr(base, name)
        if is_dataclass(current):
            kwargs[name] = config_from_dict(type(current), value, current)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return replace(base, **kwargs)


@dataclass
class Pipeline:
    arae: ArAE
    bundle: DiffusionBundle
    curves: dict = field(default_factory=dict)


def train_point_encoder(assets, cfg: EncoderConfig, seed: int = 0) -> tuple[PointEncoder, list[float]]:
    enc = PointEncoder(cfg.width, seed=seed)
    curve = pretrain_point_encoder(enc, [a.mesh for a in assets], cfg.pretrain_steps, cfg.n_points, cfg.lr, seed)
    return enc, curve


def train_pipeline(assets, cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                   encoder: PointEncoder | None = None) -> Pipeline:
    """ArAE first, then the frozen point encoder, then the latent denoiser."""
    assets = list(assets)
    arae, arae_curve = train_arae(ArAE(cfg.arae, seed=seed), assets, cfg.arae_train, seed)
    curves = {"arae": arae_curve}
    if encoder is None:
        encoder, curves["encoder"] = train_point_encoder(assets, cfg.encoder, seed)
    den_cfg = DenoiserConfig(**{**asdict(cfg.denoiser), "rows": cfg.arae.n_queries,
                                "latent_width": cfg.arae.width, "cond_width": encoder.width})
    bundle = DiffusionBundle(Denoiser(den_cfg, seed=seed), encoder, cfg.schedule(), cfg.diffusion_train.n_points)
    curves["diffusion"] = train_diffusion(bundle, arae, assets, cfg.diffusion_train, seed)
    return Pipeline(arae, bundle, curves)


# -- checkpoints ----------------------------------------------------------------

def save_arae(path, model: ArAE, extra: dict | None = None) -> None:
    header = {"kind": "arae", "config": model.cfg.to_dict(), **(extra or {})}
    checkpoint.save(path, header, state_arrays(model))


def load_arae(path) -> ArAE:
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "arae":
        raise checkpoint.CheckpointError(f"expected an arae checkpoint, found {header.get('kind')!r}")
    model = ArAE(ArAEConfig(**header["config"]))
    load_arrays(model, arrays)
    return model.eval()


def save_bundle(path, bundle: DiffusionBundle, extra: dict | None = None) -> None:
    s = bundle.schedule
    header = {
        "kind": "diffusion",
        "denoiser": bundle.denoiser.cfg.to_dict(),
        "schedule": {"steps": s.steps, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "encoder_width": bundle.point_encoder.width,
        "n_points": bundle.n_points,
        **(extra or {}),
    }
    arrays = {**checkpoint.prefixed("denoiser", state_arrays(bundle.denoiser)),
              **checkpoint.prefixed("encoder", state_arrays(bundle.point_encoder))}
    checkpoint.save(path, header, arrays)


def load_bundle(path) -> DiffusionBundle:
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "diffusion":
        raise checkpoint.CheckpointError(f"expected a diffusion checkpoint, found {header.get('kind')!r}")
    den = Denoiser(DenoiserConfig(**header["denoiser"]))
    load_arrays(den, checkpoint.strip_prefix("denoiser", arrays))
    enc = PointEncoder(header["encoder_width"])
    load_arrays(enc, checkpoint.strip_prefix("encoder", arrays))
    sched = NoiseSchedule(**header["schedule"])
    return DiffusionBundle(den.eval(), freeze(enc), sched, int(header["n_points"]))
