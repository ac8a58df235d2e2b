"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .ablation import METHODS, BenchmarkConfig, run_benchmark, synthetic_benchmark
from .arae import ArAE, train_arae
from .checkpoint import CheckpointError
from .deform import augment_pose
from .diffusion import (Denoiser, DenoiserConfig, DiffusionBundle, PredictionError, predict_skeleton,
                        train_diffusion)
from .gvb import compute_gvb_weights
from .metrics import MatchConfig, evaluate
from .mst import mst_connectivity
from .pipeline import (PipelineConfig, config_from_dict, load_arae, load_bundle, save_arae, save_bundle,
                       train_point_encoder)
from .skeleton import RigValidationError, bbox_transform, validate_mesh
from .synth import TEMPLATES, make_splits, synth_dataset, synth_rig
from .tokenizer import TokenFormatError, Vocab, detokenize, tokenize_skeleton
from .transfer import FitConfig, fit_sequence, retarget

log = logging.getLogger("autorig")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (io.FormatError, RigValidationError, TokenFormatError, CheckpointError, FileNotFoundError,
               IsADirectoryError, json.JSONDecodeError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _config(args, cls):
    if not args.config:
        return cls()
    doc = json.loads(Path(args.config).read_text())
    return config_from_dict(cls, doc)


def _seeded(args):
    torch.manual_seed(args.seed)
    return np.random.default_rng(args.seed)


def _load_dataset(manifest_path, split="train"):
    entries = io.load_manifest(manifest_path)
    base = Path(manifest_path).parent
    return [io.load_rig(base / e["path"]) for e in entries if split is None or e["split"] == split]


# -- commands -----------------------------------------------------------------------

def cmd_synth(args):
    if args.n is None:
        io.save_rig(args.out, synth_rig(args.seed, args.k, args.template))
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assets = synth_dataset(args.seed, args.n, (args.k_min, args.k_max))
    entries = []
    for i, a in enumerate(assets):
        name = f"rig_{i:05d}.rig.json"
        io.save_rig(out / name, a)
        entries.append({"path": name, "category": a.category})
    io.save_manifest(out / "manifest.json", make_splits(entries, args.ratio, args.seed))


def cmd_tokenize(args):
    skel, _ = io.load_skeleton(args.inp)
    io.save_tokens(args.out, tokenize_skeleton(skel, Vocab(args.bins)).ids, args.binary)


def cmd_detokenize(args):
    ids = io.load_tokens(args.inp, args.binary)
    io.save_skeleton(args.out, detokenize(ids, Vocab(args.bins)))


def cmd_eval(args):
    if len(args.pred) != len(args.gt):
        raise UsageError("eval: --pred and --gt need the same number of files")
    cfg = MatchConfig(args.tau)
    rows = []
    for p, g in zip(args.pred, args.gt):
        pred, _ = io.load_skeleton(p)
        gt, _ = io.load_skeleton(g)
        rows.append((Path(g).name.split(".")[0], evaluate(pred, gt, cfg)))
    text = io.metrics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_augment(args):
    io.save_rig(args.out, augment_pose(io.load_rig(args.inp), args.seed, args.max_angle))


def cmd_skin(args):
    asset = io.load_rig(args.inp)
    diag = []
    skin = compute_gvb_weights(asset.mesh, asset.skeleton, args.resolution, args.falloff, args.max_influences,
                               diagnostics=diag)
    for d in diag:
        log.warning("%s", d)
    io.save_rig(args.out, asset.replace(skin=skin))


def cmd_mst(args):
    io.save_skeleton(args.out, mst_connectivity(io.load_joints(args.inp)))


def cmd_train_arae(args):
    cfg = _config(args, PipelineConfig)
    _seeded(args)
    assets = _load_dataset(args.data)
    model, curve = train_arae(ArAE(cfg.arae, seed=args.seed), assets, cfg.arae_train, args.seed)
    save_arae(args.out, model, {"final_loss": curve[-1] if curve else None})
    log.info("arae trained on %d assets, final loss %.5f", len(assets), curve[-1] if curve else float("nan"))


def cmd_train_diffusion(args):
    cfg = _config(args, PipelineConfig)
    _seeded(args)
    assets = _load_dataset(args.data)
    arae = load_arae(args.arae_ckpt)
    encoder, _ = train_point_encoder(assets, cfg.encoder, args.seed)
    den_cfg = DenoiserConfig(**{**cfg.denoiser.to_dict(), "rows": arae.cfg.n_queries,
                                "latent_width": arae.cfg.width, "cond_width": encoder.width})
    bundle = DiffusionBundle(Denoiser(den_cfg, seed=args.seed), encoder, cfg.schedule(), cfg.diffusion_train.n_points)
    curve = train_diffusion(bundle, arae, assets, cfg.diffusion_train, args.seed)
    save_bundle(args.out, bundle, {"final_loss": curve[-1] if curve else None})


def cmd_predict(args):
    mesh = io.load_mesh(args.mesh)
    problems = validate_mesh(mesh)
    if problems:
        raise RigValidationError(problems)
    tf = bbox_transform(mesh.vertices)
    skel = predict_skeleton(mesh.with_vertices(tf.apply(mesh.vertices)), load_arae(args.arae_ckpt),
                            load_bundle(args.diff_ckpt), args.seed)
    io.save_skeleton(args.out, skel.with_joints(tf.invert(skel.joints)))


def cmd_transfer(args):
    target = io.load_rig(args.target)
    cmap = io.load_correspondence(args.correspondence)
    paths = sorted(p for p in Path(args.source_frames).iterdir() if p.suffix == ".obj")
    if not paths:
        raise FileNotFoundError(f"no .obj frames in {args.source_frames}")
    frames = [io.load_obj(p) for p in paths]
    cfg = _config(args, FitConfig)
    results = fit_sequence(target, frames, cmap, cfg)
    seq = retarget([r.transforms for r in results], target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = []
    for p, r, mesh in zip(paths, results, seq.frames):
        io.save_obj(out / p.name, mesh)
        record.append({"frame": p.name, "energy": io.round_sig(r.energy), "residual": io.round_sig(r.residual),
                       "converged": bool(r.converged), "reg": cfg.reg,
                       "rotations": [[io.round_sig(v) for v in t.rotation] for t in r.transforms],
                       "translations": [[io.round_sig(v) for v in t.translation] for t in r.transforms]})
    (out / "transforms.json").write_text(json.dumps(record, indent=1) + "\n")


def cmd_ablate(args):
    cfg = _config(args, BenchmarkConfig)
    _seeded(args)
    if args.data:
        entries = io.load_manifest(args.data)
        base = Path(args.data).parent
        train = [io.load_rig(base / e["path"]) for e in entries if e["split"] == "train"]
        test = [io.load_rig(base / e["path"]) for e in entries if e["split"] == "test"]
    else:
        train, test = synthetic_benchmark(args.seed, args.n)
    res = run_benchmark(train, test, cfg, args.seed, tuple(args.methods))
    text = io.metrics_csv([(r["method"], r) for r in res.rows()])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autorig", description="Skeleton generation, skinning and motion transfer tools.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file overriding the command's config dataclass")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic rig, or a dataset with --n")
    s.add_argument("--k", type=int, default=6)
    s.add_argument("--template", choices=TEMPLATES, default="chain")
    s.add_argument("--n", type=int, help="dataset size; --out is then a directory")
    s.add_argument("--k-min", type=int, default=3)
    s.add_argument("--k-max", type=int, default=8)
    s.add_argument("--ratio", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("tokenize", cmd_tokenize, "rig JSON -> token file"),
                              ("detokenize", cmd_detokenize, "token file -> skeleton rig JSON")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--in", dest="inp", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--binary", action="store_true", help="uint16 little-endian instead of text")
        s.add_argument("--bins", type=int, default=256)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="metrics CSV for prediction/ground-truth pairs")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("augment", help="random re-pose of a skinned rig")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-angle", type=float, default=30.0)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("skin", help="geodesic voxel skin weights")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--falloff", type=float, default=2.0)
    s.add_argument("--max-influences", type=int, default=4)
    s.set_defaults(func=cmd_skin)

    s = sub.add_parser("mst", help="joints JSON list -> MST skeleton")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mst)

    s = sub.add_parser("train-arae", help="train the autoregressive auto-encoder")
    s.add_argument("--data", required=True, help="dataset manifest JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_arae)

    s = sub.add_parser("train-diffusion", help="train the point-conditioned latent denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--arae-ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("predict", help="mesh -> skeleton")
    s.add_argument("--mesh", required=True, help="OBJ file or rig JSON with a mesh")
    s.add_argument("--arae-ckpt", required=True)
    s.add_argument("--diff-ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("transfer", help="retarget a source mesh sequence onto a rigged target")
    s.add_argument("--target", required=True)
    s.add_argument("--source-frames", required=True, help="directory of .obj frames, sorted by name")
    s.add_argument("--correspondence", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("ablate", help="full model against the two ablation paths")
    s.add_argument("--data", help="manifest; default is a synthetic set of --n assets")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except PredictionError as exc:
        sys.stderr.write(f"error: prediction failed: {exc}\n")
        return EXIT_RUNTIME
    except DATA_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
