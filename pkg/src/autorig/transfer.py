"""Motion transfer onto a rigged target through vertex correspondences.

Each source frame is explained by per-joint rigid transforms of the target
rig: the target rest mesh is skinned with those transforms, pushed through the
source<-target correspondence, and compared to the source vertices. The
transforms are then replayed on the target itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import sparse
from scipy.spatial.transform import Rotation

from .deform import JointTransform, linear_blend_skinning
from .skeleton import MAX_INFLUENCES, ROW_SUM_TOL, Mesh, RigAsset, SkinWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrespondenceMap:
    """Row-stochastic (n_source, n_target) sparse matrix."""

    matrix: sparse.csr_matrix

    def __post_init__(self):
        m = sparse.csr_matrix(self.matrix, dtype=np.float64)
        if m.nnz and m.data.min() < 0:
            raise ValueError("correspondence weights must be >= 0")
        sums = np.asarray(m.sum(axis=1)).ravel()
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise ValueError("correspondence rows must sum to 1")
        object.__setattr__(self, "matrix", m)

    @property
    def n_source(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_target(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_rows(cls, rows, n_target: int) -> "CorrespondenceMap":
        r, c, v = [], [], []
        for i, row in enumerate(rows):
            for j, w in row:
                if not 0 <= int(j) < n_target:
                    raise ValueError(f"row {i}: target index {j} out of range")
                r.append(i)
                c.append(int(j))
                v.append(float(w))
        return cls(sparse.csr_matrix((v, (r, c)), shape=(len(rows), n_target)))

    @classmethod
    def identity(cls, n: int) -> "CorrespondenceMap":
        return cls(sparse.identity(n, format="csr"))

    def rows(self) -> list[list[tuple[int, float]]]:
        m = self.matrix
        return [list(zip(m.indices[m.indptr[i]:m.indptr[i + 1]].tolist(),
                         m.data[m.indptr[i]:m.indptr[i + 1]].tolist())) for i in range(m.shape[0])]


@dataclass(frozen=True)
class MotionSequence:
    frames: tuple

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValueError("a motion sequence needs at least one frame")

    def __len__(self):
        return len(self.frames)


def _prune_rows(W: np.ndarray, keep: int) -> np.ndarray:
    if W.shape[1] <= keep:
        return W
    drop = np.argsort(-W, axis=1, kind="stable")[:, keep:]
    W = W.copy()
    np.put_along_axis(W, drop, 0.0, axis=1)
    return W


def transfer_skinning(cmap: CorrespondenceMap, skin_target: SkinWeights) -> SkinWeights:
    """Source-side skin weights ``map @ skin``, renormalized."""
    if cmap.n_target != skin_target.n_vertices:
        raise ValueError(f"map has {cmap.n_target} target columns, skin has {skin_target.n_vertices} rows")
    W = np.asarray(cmap.matrix @ skin_target.matrix)
    W = _prune_rows(W, MAX_INFLUENCES)
    return SkinWeights(W / W.sum(axis=1, keepdims=True))


def estimate_joints_from_skin(vertices, skin: SkinWeights) -> np.ndarray:
    """Skin-weighted mean of the vertices for every joint."""
    V = np.asarray(vertices, dtype=np.float64)
    if skin.n_vertices != len(V):
        raise ValueError(f"{skin.n_vertices} skin rows for {len(V)} vertices")
    mass = skin.matrix.sum(axis=0)
    empty = np.flatnonzero(mass <= 0)
    if len(empty):
        raise ValueError(f"joints with zero total weight: {empty.tolist()}")
    return (skin.matrix.T @ V) / mass[:, None]


# -- optimization -------------------------------------------------------------

def rotvec_to_matrix(theta: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (k, 3) -> (k, 3, 3), smooth through zero."""
    a2 = (theta * theta).sum(-1)
    small = a2 < 1e-8
    a2s = torch.where(small, torch.ones_like(a2), a2)
    a = a2s.sqrt()
    A = torch.where(small, 1 - a2 / 6 + a2 * a2 / 120, torch.sin(a) / a)
    B = torch.where(small, 0.5 - a2 / 24 + a2 * a2 / 720, (1 - torch.cos(a)) / a2s)
    z = torch.zeros_like(theta[:, 0])
    K = torch.stack([
        torch.stack([z, -theta[:, 2], theta[:, 1]], -1),
        torch.stack([theta[:, 2], z, -theta[:, 0]], -1),
        torch.stack([-theta[:, 1], theta[:, 0], z], -1),
    ], -2)
    eye = torch.eye(3, dtype=theta.dtype).expand_as(K)
    return eye + A[:, None, None] * K + B[:, None, None] * (K @ K)


@dataclass(frozen=True)
class FitConfig:
    reg: float = 1e-3
    max_iter: int = 500
    gtol: float = 1e-10
    ftol: float = 1e-15
    memory: int = 10
    # on the mean squared per-vertex residual, so the regularizer cannot trip it
    residual_threshold: float = 1e-6


@dataclass
class FitResult:
    transforms: list
    energy: float
    converged: bool
    residual: float = 0.0
    history: list = field(default_factory=list)
    params: np.ndarray | None = None


class TransferProblem:
    """Energy over per-joint (axis-angle, translation) pairs; rotations act
    about each joint's rest position."""

    def __init__(self, target: RigAsset, frame_vertices, cmap: CorrespondenceMap, reg: float = 1e-3):
        if target.skin is None:
            raise ValueError("target rig needs skin weights")
        V = np.asarray(frame_vertices, dtype=np.float64)
        if cmap.n_target != target.mesh.n_vertices or cmap.n_source != len(V):
            raise ValueError("correspondence map does not fit target mesh and source frame")
        self.k = target.skeleton.k
        self.rest = torch.tensor(target.mesh.vertices)
        self.pivots = torch.tensor(target.skeleton.joints)
        self.W = torch.tensor(target.skin.matrix)
        coo = cmap.matrix.tocoo()
        self.M = torch.sparse_coo_tensor(np.vstack([coo.row, coo.col]), coo.data, coo.shape,
                                         check_invariants=False).coalesce()
        self.source = torch.tensor(V)
        self.reg = reg

    def posed(self, x: torch.Tensor) -> torch.Tensor:
        theta, trans = x[: 3 * self.k].view(self.k, 3), x[3 * self.k:].view(self.k, 3)
        R = rotvec_to_matrix(theta)
        local = self.rest[None] - self.pivots[:, None]
        per_joint = torch.einsum("kab,knb->kna", R, local) + (self.pivots + trans)[:, None]
        return torch.einsum("nk,kna->na", self.W, per_joint)

    def data_term(self, x: torch.Tensor) -> torch.Tensor:
        resid = torch.sparse.mm(self.M, self.posed(x)) - self.source
        return (resid * resid).sum()

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        theta = x[: 3 * self.k]
        return self.data_term(x) + self.reg * (theta * theta).sum()

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        xt = torch.as_tensor(x).clone().requires_grad_(True)
        e = self.energy(xt)
        (g,) = torch.autograd.grad(e, xt)
        return e.item(), g.numpy()

    def transforms(self, x) -> list[JointTransform]:
        x = np.asarray(x)
        theta, trans = x[: 3 * self.k].reshape(-1, 3), x[3 * self.k:].reshape(-1, 3)
        R = Rotation.from_rotvec(theta)
        p = self.pivots.numpy()
        t = p - R.apply(p) + trans
        return [JointTransform(q, tt) for q, tt in zip(R.as_quat(), t)]

    def params_from(self, transforms) -> np.ndarray:
        rots = Rotation.from_quat([t.rotation for t in transforms])
        p = self.pivots.numpy()
        trans = np.array([t.translation for t in transforms]) - (p - rots.apply(p))
        return np.concatenate([rots.as_rotvec().reshape(-1), trans.reshape(-1)])


def descend(fun, x0, cfg: FitConfig) -> tuple[np.ndarray, float, list[float], bool]:
    """Quasi-Newton (L-BFGS) directions with Armijo backtracking.

    Only steps that lower the energy are accepted, so the returned history is
    non-increasing.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    history = [f]
    s_hist, y_hist = [], []
    converged = False
    for _ in range(cfg.max_iter):
        if np.linalg.norm(g) < cfg.gtol:
            converged = True
            break
        q = g.copy()
        alphas = []
        for s, y in reversed(list(zip(s_hist, y_hist))):
            a = s @ q / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            q += s * (a - (y @ q) / (y @ s))
        d = -q
        if d @ g >= 0:
            d = -g
            s_hist.clear()
            y_hist.clear()
        step = 1.0
        accepted = False
        for _ in range(60):
            xn = x + step * d
            fn, gn = fun(xn)
            if fn <= f + 1e-4 * step * (d @ g):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no representable descent left
            break
        s, y = xn - x, gn - g
        if s @ y > 1e-300:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        done = abs(f - fn) <= cfg.ftol * max(1.0, abs(f))
        x, f, g = xn, fn, gn
        history.append(f)
        if done:
            converged = True
            break
    return x, f, history, converged


def initial_transforms(target: RigAsset, frame: Mesh, cmap: CorrespondenceMap) -> list[JointTransform]:
    """Per-joint weighted Procrustes between the mapped rest mesh and the
    source frame. Joints without skin influence start at identity."""
    src_skin = transfer_skinning(cmap, target.skin)
    mapped_rest = np.asarray(cmap.matrix @ target.mesh.vertices)
    V = frame.vertices
    mass = src_skin.matrix.sum(axis=0)
    live = np.flatnonzero(mass > 0)
    out = [JointTransform.identity() for _ in range(target.skeleton.k)]
    if not len(live):
        return out
    sub = SkinWeights(src_skin.matrix[:, live])
    # weighted means on both sides are the skin-weighted joint estimates
    c_src = estimate_joints_from_skin(V, sub)
    c_rest = estimate_joints_from_skin(mapped_rest, sub)
    for n, j in enumerate(live):
        w = src_skin.matrix[:, j][:, None]
        H = ((mapped_rest - c_rest[n]) * w).T @ (V - c_src[n])
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
        R = Vt.T @ D @ U.T
        q = Rotation.from_matrix(R).as_quat()
        out[j] = JointTransform(q / np.linalg.norm(q), c_src[n] - R @ c_rest[n])
    return out


def fit_joint_transforms(target: RigAsset, frame: Mesh, cmap: CorrespondenceMap, init=None,
                         cfg: FitConfig = FitConfig()) -> FitResult:
    prob = TransferProblem(target, frame.vertices, cmap, cfg.reg)
    if init is None:
        init = [JointTransform.identity() for _ in range(prob.k)]
    x0 = prob.params_from(init)
    x, f, history, converged = descend(prob.value_and_grad, x0, cfg)
    with torch.no_grad():
        residual = prob.data_term(torch.as_tensor(x)).item() / len(frame.vertices)
    converged = converged and residual <= cfg.residual_threshold
    if not converged:
        log.warning("transform fit stopped at energy %.3e (residual %.3e)", f, residual)
    return FitResult(prob.transforms(x), f, converged, residual, history, x)


def fit_sequence(target: RigAsset, frames, cmaps, cfg: FitConfig = FitConfig(),
                 warm_start: bool = True) -> list[FitResult]:
    """Fit every frame in order; each frame starts from the previous solution.
    The first frame starts from the Procrustes estimate."""
    frames = list(frames)
    if isinstance(cmaps, CorrespondenceMap):
        cmaps = [cmaps] * len(frames)
    results = []
    prev = None
    for frame, cmap in zip(frames, cmaps):
        init = prev if (warm_start and prev is not None) else initial_transforms(target, frame, cmap)
        res = fit_joint_transforms(target, frame, cmap, init, cfg)
        results.append(res)
        prev = res.transforms
    return results


def retarget(transforms_per_frame, target: RigAsset) -> MotionSequence:
    if target.skin is None:
        raise ValueError("target rig needs skin weights")
    frames = []
    for i, tfs in enumerate(transforms_per_frame):
        if len(tfs) != target.skeleton.k:
            raise ValueError(f"frame {i}: {len(tfs)} transforms for {target.skeleton.k} joints")
        frames.append(linear_blend_skinning(target.mesh, target.skin, tfs))
    return MotionSequence(frames)
