"""File formats: rig JSON, OBJ meshes, token files, manifests, correspondences, metric CSV."""
from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .metrics import MetricsReport
from .skeleton import (CATEGORIES, Mesh, RigAsset, RigValidationError, Skeleton, SkinWeights, require_valid,
                       validate_skeleton)
from .tokenizer import from_bytes, from_text, to_bytes, to_text
from .transfer import CorrespondenceMap

RIG_FORMAT_VERSION = 1
SIG_DIGITS = 9
RIG_KEYS = ("format_version", "category", "joints", "parents", "mesh", "skin")


class FormatError(ValueError):
    """A file that cannot be parsed; ``where`` is a JSON path or ``line N``."""

    def __init__(self, where: str, message: str):
        self.where = where
        super().__init__(f"{where}: {message}")


def round_sig(x: float) -> float:
    return float(f"{float(x):.{SIG_DIGITS}g}")


def _rows(a) -> list:
    return [[round_sig(v) for v in row] for row in np.asarray(a, dtype=np.float64)]


# -- rig JSON ---------------------------------------------------------------------

def skeleton_document(skel: Skeleton, category: str = "other", extra: dict | None = None) -> dict:
    doc = dict(extra or {})
    doc.update({"format_version": RIG_FORMAT_VERSION, "category": category,
                "joints": _rows(skel.joints), "parents": [int(p) for p in skel.parents]})
    return doc


def rig_document(asset: RigAsset) -> dict:
    doc = skeleton_document(asset.skeleton, asset.category, asset.extra)
    doc["mesh"] = {"vertices": _rows(asset.mesh.vertices),
                   "faces": [[int(i) for i in f] for f in asset.mesh.faces]}
    if asset.skin is not None:
        doc["skin"] = [[[j, round_sig(w)] for j, w in row] for row in asset.skin.rows()]
    return doc


def _dump(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def save_rig(path, asset: RigAsset) -> None:
    require_valid(asset)
    _dump(rig_document(asset), path)


def save_skeleton(path, skel: Skeleton, category: str = "other") -> None:
    """Skeleton-only rig document (no mesh), used for predictions and MST output."""
    problems = validate_skeleton(skel)
    if problems:
        raise RigValidationError(problems)
    _dump(skeleton_document(skel, category), path)


def _require(doc, key, where):
    if not isinstance(doc, dict):
        raise FormatError(where, "expected an object")
    if key not in doc:
        raise FormatError(f"{where}.{key}", "missing field")
    return doc[key]


def _vec_array(value, where, width, kind=float) -> np.ndarray:
    if not isinstance(value, list):
        raise FormatError(where, "expected an array")
    out = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != width:
            raise FormatError(f"{where}[{i}]", f"expected an array of {width} numbers")
        for j, v in enumerate(row):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
                raise FormatError(f"{where}[{i}][{j}]", f"expected {'an integer' if kind is int else 'a number'}")
        out.append(row)
    return np.array(out, dtype=np.float64 if kind is float else np.int64).reshape(-1, width)


def _parse_skeleton(doc: dict) -> tuple[Skeleton, str]:
    version = _require(doc, "format_version", "$")
    if version != RIG_FORMAT_VERSION:
        raise FormatError("$.format_version", f"unsupported version {version!r}")
    joints = _vec_array(_require(doc, "joints", "$"), "$.joints", 3)
    parents = _require(doc, "parents", "$")
    if not isinstance(parents, list) or not all(isinstance(p, int) and not isinstance(p, bool) for p in parents):
        raise FormatError("$.parents", "expected an array of integers")
    category = doc.get("category", "other")
    if not isinstance(category, str):
        raise FormatError("$.category", "expected a string")
    if category not in CATEGORIES:
        raise FormatError("$.category", f"unknown category {category!r}")
    return Skeleton(joints, np.array(parents, dtype=np.int64)), category


def rig_from_document(doc: dict) -> RigAsset:
    skel, category = _parse_skeleton(doc)
    mesh_doc = _require(doc, "mesh", "$")
    verts = _vec_array(_require(mesh_doc, "vertices", "$.mesh"), "$.mesh.vertices", 3)
    faces = _vec_array(_require(mesh_doc, "faces", "$.mesh"), "$.mesh.faces", 3, int)
    skin = None
    if doc.get("skin") is not None:
        rows = doc["skin"]
        if not isinstance(rows, list):
            raise FormatError("$.skin", "expected an array")
        for i, row in enumerate(rows):
            where = f"$.skin[{i}]"
            if not isinstance(row, list):
                raise FormatError(where, "expected an array of [joint, weight] pairs")
            for n, pair in enumerate(row):
                ok = (isinstance(pair, list) and len(pair) == 2 and isinstance(pair[0], int)
                      and isinstance(pair[1], (int, float)) and 0 <= pair[0] < skel.k)
                if not ok:
                    raise FormatError(f"{where}[{n}]", "expected [joint index, weight]")
        skin = SkinWeights.from_rows(rows, skel.k)
    extra = {k: v for k, v in doc.items() if k not in RIG_KEYS}
    asset = RigAsset(Mesh(verts, faces), skel, skin, category, extra)
    require_valid(asset)
    return asset


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from exc


def load_rig(path) -> RigAsset:
    return rig_from_document(_read_json(path))


def load_skeleton(path) -> tuple[Skeleton, str]:
    """Skeleton and category from any rig document, with or without a mesh."""
    skel, category = _parse_skeleton(_read_json(path))
    problems = validate_skeleton(skel)
    if problems:
        raise RigValidationError(problems)
    return skel, category


def load_joints(path) -> np.ndarray:
    """A bare JSON list of [x, y, z] joints."""
    return _vec_array(_read_json(path), "$", 3)


# -- OBJ --------------------------------------------------------------------------

def parse_obj(text: str) -> Mesh:
    """``v`` and ``f`` records only; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, fields = parts[0], parts[1:]
        if tag == "v":
            if len(fields) < 3:
                raise FormatError(f"line {lineno}", "vertex needs 3 coordinates")
            try:
                xyz = [float(s) for s in fields[:3]]
            except ValueError:
                raise FormatError(f"line {lineno}", f"malformed number in {raw.strip()!r}") from None
            if not all(math.isfinite(c) for c in xyz):
                raise FormatError(f"line {lineno}", "non-finite vertex coordinate")
            verts.append(xyz)
        elif tag == "f":
            if len(fields) < 3:
                raise FormatError(f"line {lineno}", "face with fewer than 3 vertices")
            idx = []
            for s in fields:
                try:
                    i = int(s.split("/")[0])
                except ValueError:
                    raise FormatError(f"line {lineno}", f"malformed index {s!r}") from None
                if i == 0:
                    raise FormatError(f"line {lineno}", "vertex index 0 is not valid")
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise FormatError(f"line {lineno}", f"vertex index {s} out of range")
                idx.append(i)
            faces += [[idx[0], idx[n], idx[n + 1]] for n in range(1, len(idx) - 1)]
    if not faces:
        raise FormatError("obj", "no faces")
    return Mesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


def load_obj(path) -> Mesh:
    return parse_obj(Path(path).read_text())


def save_obj(path, mesh: Mesh) -> None:
    buf = _io.StringIO()
    for v in mesh.vertices:
        buf.write("v {} {} {}\n".format(*(repr(round_sig(c)) for c in v)))
    for f in mesh.faces:
        buf.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))
    Path(path).write_text(buf.getvalue())


def load_mesh(path) -> Mesh:
    """OBJ by extension, otherwise the mesh of a rig document."""
    if str(path).lower().endswith(".obj"):
        return load_obj(path)
    doc = _read_json(path)
    mesh_doc = _require(doc, "mesh", "$")
    return Mesh(_vec_array(_require(mesh_doc, "vertices", "$.mesh"), "$.mesh.vertices", 3),
                _vec_array(_require(mesh_doc, "faces", "$.mesh"), "$.mesh.faces", 3, int))


# -- tokens -----------------------------------------------------------------------

def save_tokens(path, ids, binary: bool = False) -> None:
    if binary:
        Path(path).write_bytes(to_bytes(ids))
    else:
        Path(path).write_text(to_text(ids))


def load_tokens(path, binary: bool = False) -> np.ndarray:
    if binary:
        return from_bytes(Path(path).read_bytes())
    return from_text(Path(path).read_text())


# -- manifest / correspondences -----------------------------------------------------

def save_manifest(path, manifest) -> None:
    Path(path).write_text(json.dumps(list(manifest), indent=1) + "\n")


def load_manifest(path, check_paths: bool = True) -> list[dict]:
    entries = _read_json(path)
    if not isinstance(entries, list):
        raise FormatError("$", "expected an array")
    base = Path(path).parent
    for i, e in enumerate(entries):
        for key in ("path", "split", "category"):
            _require(e, key, f"$[{i}]")
        if e["split"] not in ("train", "test"):
            raise FormatError(f"$[{i}].split", f"unknown split {e['split']!r}")
        if check_paths and not (base / e["path"]).exists():
            raise FormatError(f"$[{i}].path", f"no such file {e['path']!r}")
    return entries


def load_correspondence(path) -> CorrespondenceMap:
    """``{"n_target": N, "rows": [[[target, weight], ...], ...]}``."""
    doc = _read_json(path)
    n_target = _require(doc, "n_target", "$")
    rows = _require(doc, "rows", "$")
    try:
        return CorrespondenceMap.from_rows(rows, int(n_target))
    except (TypeError, ValueError) as exc:
        raise FormatError("$.rows", str(exc)) from exc


def save_correspondence(path, cmap: CorrespondenceMap) -> None:
    doc = {"n_target": cmap.n_target, "rows": [[[j, round_sig(w)] for j, w in r] for r in cmap.rows()]}
    Path(path).write_text(json.dumps(doc) + "\n")


# -- metrics CSV ------------------------------------------------------------------

METRIC_COLUMNS = ("id", "iou", "precision", "recall", "cd_j2j", "cd_j2b", "cd_b2b")


def metrics_csv(rows) -> str:
    """``rows`` are (id, MetricsReport) pairs; values get 6 decimals."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for ident, rep in rows:
        d = rep.as_dict() if isinstance(rep, MetricsReport) else rep
        w.writerow([ident] + [f"{d[c]:.6f}" for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(_io.StringIO(text)))
    return [{k: (v if k == "id" else float(v)) for k, v in r.items()} for r in rows]
