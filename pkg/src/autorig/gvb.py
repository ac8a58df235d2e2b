"""Geodesic voxel binding: skin weights from shortest-path distances through
the voxelized volume of the mesh.

Weights are attached to the joint that drives a bone (its parent end), which
is the joint whose rotation moves that bone under forward kinematics. A joint
with several children is bound to the union of its child bones; leaf joints
drive nothing and receive no weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .metrics import point_segment_distance
from .skeleton import ROOT, Mesh, Skeleton, SkinWeights, require_valid

log = logging.getLogger(__name__)

_EPS_BOX = 1e-9


class BoneOutsideVolume(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    resolution: int
    origin: np.ndarray  # corner of voxel (0, 0, 0)
    voxel_size: float
    surface: np.ndarray
    interior: np.ndarray

    @property
    def exterior(self) -> np.ndarray:
        return ~(self.surface | self.interior)

    @property
    def solid(self) -> np.ndarray:
        return self.surface | self.interior

    def centers(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def volume_estimate(self) -> float:
        """Interior cells count fully, shell cells count half."""
        n = self.interior.sum() + 0.5 * self.surface.sum()
        return float(n) * self.voxel_size ** 3


def grid_frame(resolution: int) -> tuple[np.ndarray, float]:
    """Cells cover [-1 - h, 1 + h]^3, one spare cell on every side of the
    normalized box, and the layout is mirror-symmetric about the origin."""
    h = 2.0 / (resolution - 2)
    return np.full(3, -1.0 - h), h


def tri_box_overlap(centers, half, tris) -> np.ndarray:
    """Separating-axis triangle/AABB test, vectorized over pairs.

    centers: (p, 3) box centers; half: scalar half size; tris: (p, 3, 3).
    """
    v = tris - centers[:, None, :]
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    h = half + _EPS_BOX
    hit = np.ones(len(centers), dtype=bool)
    # box face normals
    hit &= np.all(v.min(axis=1) <= h, axis=1) & np.all(v.max(axis=1) >= -h, axis=1)
    # triangle plane
    n = np.cross(e[:, 0], e[:, 1])
    r = h * np.abs(n).sum(axis=1)
    s = np.einsum("pa,pa->p", n, v[:, 0])
    hit &= np.abs(s) <= r
    # edge x box-axis cross products
    eye = np.eye(3)
    for i in range(3):
        for a in range(3):
            axis = np.cross(e[:, i], eye[a])
            proj = np.einsum("pa,pva->pv", axis, v)
            rad = h * np.abs(axis).sum(axis=1)
            hit &= (proj.min(axis=1) <= rad) & (proj.max(axis=1) >= -rad)
    return hit


def _cell_range(lo, hi, origin, h, R):
    a = np.floor((lo - origin) / h - _EPS_BOX).astype(np.int64)
    b = np.floor((hi - origin) / h + _EPS_BOX).astype(np.int64)
    return np.clip(a, 0, R - 1), np.clip(b, 0, R - 1)


def voxelize(mesh: Mesh, resolution: int = 64, chunk: int = 2_000_000) -> VoxelGrid:
    if resolution < 4:
        raise ValueError("voxel resolution must be at least 4")
    R = resolution
    origin, h = grid_frame(R)
    surface = np.zeros((R, R, R), dtype=bool)
    tris = mesh.triangles()
    lo, hi = _cell_range(tris.min(axis=1), tris.max(axis=1), origin, h, R)
    ext = hi - lo + 1
    counts = ext.prod(axis=1)
    start = 0
    while start < len(tris):
        # group triangles so each batch has at most ~chunk candidate cells
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, chunk, side="right")))
        sl = slice(start, stop)
        c = counts[sl]
        tri_id = np.repeat(np.arange(start, stop), c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        ex = ext[tri_id]
        ix = local % ex[:, 0]
        iy = (local // ex[:, 0]) % ex[:, 1]
        iz = local // (ex[:, 0] * ex[:, 1])
        cells = lo[tri_id] + np.stack([ix, iy, iz], axis=1)
        hit = tri_box_overlap(origin + (cells + 0.5) * h, 0.5 * h, tris[tri_id])
        cx = cells[hit]
        surface[cx[:, 0], cx[:, 1], cx[:, 2]] = True
        start = stop
    filled = ndimage.binary_fill_holes(surface)
    return VoxelGrid(R, origin, h, surface, filled & ~surface)


_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                     if (dx, dy, dz) > (0, 0, 0)])


class GeodesicSolver:
    """26-connected voxel graph over the solid cells of a grid."""

    def __init__(self, grid: VoxelGrid):
        self.grid = grid
        solid = grid.solid
        self.cells = np.argwhere(solid)
        if len(self.cells) == 0:
            raise ValueError("voxel grid has no solid cells")
        R = grid.resolution
        index = np.full((R, R, R), -1, dtype=np.int64)
        index[tuple(self.cells.T)] = np.arange(len(self.cells))
        self.index = index
        rows, cols, vals = [], [], []
        for off in _OFFSETS:
            nb = self.cells + off
            ok = np.all((nb >= 0) & (nb < R), axis=1)
            src = np.flatnonzero(ok)
            dst = index[tuple(nb[ok].T)]
            keep = dst >= 0
            rows.append(src[keep])
            cols.append(dst[keep])
            vals.append(np.full(keep.sum(), grid.voxel_size * np.linalg.norm(off)))
        n = len(self.cells)
        self.graph = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    def segment_sources(self, a, b) -> np.ndarray:
        """Indices of solid cells whose box touches segment ab (slab test)."""
        g = self.grid
        lo, hi = _cell_range(np.minimum(a, b), np.maximum(a, b), g.origin, g.voxel_size, g.resolution)
        rng = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
        cells = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
        idx = self.index[tuple(cells.T)]
        cells, idx = cells[idx >= 0], idx[idx >= 0]
        if len(cells) == 0:
            return idx
        bmin = g.origin + cells * g.voxel_size - _EPS_BOX
        bmax = bmin + g.voxel_size + 2 * _EPS_BOX
        d = np.asarray(b, dtype=np.float64) - a
        t0 = np.zeros(len(cells))
        t1 = np.ones(len(cells))
        for ax in range(3):
            if abs(d[ax]) < 1e-15:
                inside = (a[ax] >= bmin[:, ax]) & (a[ax] <= bmax[:, ax])
                t0 = np.where(inside, t0, 1.0)
                t1 = np.where(inside, t1, 0.0)
            else:
                ta = (bmin[:, ax] - a[ax]) / d[ax]
                tb = (bmax[:, ax] - a[ax]) / d[ax]
                t0 = np.maximum(t0, np.minimum(ta, tb))
                t1 = np.minimum(t1, np.maximum(ta, tb))
        return idx[t0 <= t1]

    def distance_from(self, sources) -> np.ndarray:
        """Multi-source shortest-path distance to every solid cell."""
        sources = np.unique(np.asarray(sources, dtype=np.int64))
        if len(sources) == 0:
            raise BoneOutsideVolume("bone outside volume")
        return dijkstra(self.graph, directed=False, indices=sources, min_only=True)

    def to_volume(self, values) -> np.ndarray:
        R = self.grid.resolution
        out = np.full((R, R, R), np.inf)
        out[tuple(self.cells.T)] = values
        return out


def geodesic_distance_field(grid: VoxelGrid, bone, solver: GeodesicSolver | None = None) -> np.ndarray:
    """(R, R, R) distances from the voxels touching ``bone`` (a pair of
    points); +inf outside the solid or where unreachable."""
    solver = solver or GeodesicSolver(grid)
    a, b = (np.asarray(p, dtype=np.float64) for p in bone)
    return solver.to_volume(solver.distance_from(solver.segment_sources(a, b)))


def driving_groups(skel: Skeleton) -> dict[int, list[tuple[int, int]]]:
    """Joint -> its outgoing bones (joint, child), for joints with children."""
    groups: dict[int, list[tuple[int, int]]] = {}
    for c, p in enumerate(skel.parents):
        if p != ROOT:
            groups.setdefault(int(p), []).append((int(p), c))
    return dict(sorted(groups.items()))


def _group_euclid(points, skel, bones) -> np.ndarray:
    idx = np.array(bones)
    return point_segment_distance(points, skel.joints[idx[:, 0]], skel.joints[idx[:, 1]]).min(axis=1)


def compute_gvb_weights(mesh: Mesh, skel: Skeleton, resolution: int = 64, falloff: float = 2.0,
                        max_influences: int = 4, eps: float = 1e-4,
                        diagnostics: list | None = None) -> SkinWeights:
    """Inverse-power geodesic falloff weights, pruned to the strongest
    ``max_influences`` joints per vertex and renormalized."""
    require_valid(skel)
    if diagnostics is None:
        diagnostics = []
    grid = voxelize(mesh, resolution)
    solver = GeodesicSolver(grid)
    groups = driving_groups(skel)
    gids = list(groups)
    V = mesh.vertices
    n, G = len(V), len(gids)
    h = grid.voxel_size
    R = grid.resolution

    # candidate cells: the 2x2x2 block of cell centers around each vertex
    base = np.floor((V - grid.origin) / h - 0.5).astype(np.int64)
    corners = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    block = base[:, None, :] + corners[None]
    inb = np.all((block >= 0) & (block < R), axis=-1)
    cell = np.full(block.shape[:2], -1, dtype=np.int64)
    cell[inb] = solver.index[tuple(block[inb].T)]
    lonely = np.flatnonzero(np.all(cell < 0, axis=1))
    if len(lonely):
        tree = cKDTree(grid.centers(solver.cells))
        _, nearest = tree.query(V[lonely])
        cell[lonely, 0] = nearest
    has = cell >= 0
    safe = np.where(has, cell, 0)
    hop = np.linalg.norm(V[:, None, :] - grid.centers(solver.cells[safe]), axis=-1)

    dist = np.full((n, G), np.inf)
    euclid = np.empty((n, G))
    for gi, j in enumerate(gids):
        bones = groups[j]
        euclid[:, gi] = _group_euclid(V, skel, bones)
        src = np.concatenate([solver.segment_sources(skel.joints[a], skel.joints[b]) for a, b in bones])
        if len(src) == 0:
            diagnostics.append(("bone_outside_volume", j))
            dist[:, gi] = euclid[:, gi]
            continue
        field = solver.distance_from(src)
        is_src = np.zeros(len(solver.cells), dtype=bool)
        is_src[src] = True
        cand = np.where(is_src[safe], euclid[:, gi][:, None], field[safe] + hop)
        dist[:, gi] = np.where(has, cand, np.inf).min(axis=1)

    stranded = np.flatnonzero(~np.isfinite(dist).any(axis=1))
    for v in stranded:
        diagnostics.append(("euclidean_fallback", int(v)))
    dist[stranded] = euclid[stranded]
    if len(stranded):
        log.info("GVB: %d vertices fell back to Euclidean distance", len(stranded))

    with np.errstate(divide="ignore"):
        raw = np.where(np.isfinite(dist), 1.0 / (dist + eps) ** falloff, 0.0)
    keep = min(max_influences, G)
    top = np.argsort(-raw, axis=1, kind="stable")[:, :keep]
    pruned = np.zeros_like(raw)
    rows = np.arange(n)[:, None]
    pruned[rows, top] = raw[rows, top]
    pruned /= pruned.sum(axis=1, keepdims=True)
    W = np.zeros((n, skel.k))
    W[:, gids] = pruned
    return SkinWeights(W)


def reachable_counts(mesh: Mesh, skel: Skeleton, resolution: int) -> np.ndarray:
    """Number of driving joints reachable through the volume, per solid cell
    containing a vertex (used for resolution monotonicity checks)."""
    grid = voxelize(mesh, resolution)
    solver = GeodesicSolver(grid)
    groups = driving_groups(skel)
    fields = []
    for j, bones in groups.items():
        src = np.concatenate([solver.segment_sources(skel.joints[a], skel.joints[b]) for a, b in bones])
        fields.append(np.isfinite(solver.distance_from(src)) if len(src) else np.zeros(len(solver.cells), bool))
    reach = np.sum(fields, axis=0)
    idx = np.floor((mesh.vertices - grid.origin) / grid.voxel_size).astype(np.int64)
    idx = np.clip(idx, 0, resolution - 1)
    cell = solver.index[tuple(idx.T)]
    return np.where(cell >= 0, reach[np.maximum(cell, 0)], 0)
