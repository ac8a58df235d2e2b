"""Autoregressive auto-encoder over skeleton tokens.

A cross-attention joints encoder compresses a padded joint set into ``m``
latent rows. A causal transformer decoder sees those rows as a fully visible
prefix, then BOS and the skeleton tokens, and predicts the next token.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .deform import augment_pose
from .layers import Block
from .skeleton import K_MAX, Skeleton, traversal_order
from .tokenizer import TOKENS_PER_JOINT, TokenSequence, Vocab, tokenize_skeleton

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArAEConfig:
    n_queries: int = 16
    width: int = 64
    layers: int = 4
    heads: int = 4
    freq_bands: int = 8
    bins: int = 256
    k_max: int = K_MAX

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.n_queries < 1:
            raise ValueError("need at least one query")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.bins)

    @property
    def max_seq(self) -> int:
        return TOKENS_PER_JOINT * self.k_max + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    augment: bool = True
    max_angle: float = 30.0
    latent_noise: float = 0.0
    log_every: int = 0


def freq_embed(points, bands: int):
    """Per coordinate ``[c, sin(2^0 pi c), cos(2^0 pi c), ...]``; width 3 (1 + 2 bands)."""
    p = torch.as_tensor(points, dtype=torch.float64)
    scales = (2.0 ** torch.arange(bands, dtype=torch.float64)) * math.pi
    ang = p[..., None] * scales
    parts = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return torch.cat([p[..., None], parts], dim=-1).flatten(-2)


class JointsEncoder(nn.Module):
    def __init__(self, cfg: ArAEConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.embed = nn.Linear(3 * (1 + 2 * cfg.freq_bands), d)
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.02)
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.cross = Block(d, cfg.heads, ctx_width=d)
        self.ln_out = nn.LayerNorm(d)

    def forward(self, joints, mask):
        """joints (B, K, 3); mask (B, K) True for real joints."""
        B = joints.shape[0]
        kv = self.ln_kv(self.embed(freq_embed(joints, self.cfg.freq_bands)))
        q = self.queries.unsqueeze(0).expand(B, -1, -1)
        allowed = mask[:, None, :].expand(-1, self.cfg.n_queries, -1)
        x = self.cross(self.ln_q(q), ctx=kv, ctx_allowed=allowed)
        return self.ln_out(x)


class TokenDecoder(nn.Module):
    def __init__(self, cfg: ArAEConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.tok = nn.Embedding(cfg.vocab.size, d)
        self.pos = nn.Parameter(torch.randn(cfg.max_seq, d) * 0.02)
        self.latent_pos = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.02)
        self.blocks = nn.ModuleList([Block(d, cfg.heads) for _ in range(cfg.layers)])
        self.ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab.size)

    def attention_mask(self, m: int, n: int) -> torch.Tensor:
        """Latent rows see only latents; token rows see latents and earlier tokens."""
        allowed = torch.zeros(m + n, m + n, dtype=torch.bool)
        allowed[:, :m] = True
        allowed[m:, m:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        return allowed

    def forward(self, latent, prefix):
        """latent (B, m, d); prefix (B, P) token ids. Returns (B, P + 1, V)."""
        B, m, _ = latent.shape
        bos = torch.full((B, 1), self.cfg.vocab.bos, dtype=torch.long)
        ids = torch.cat([bos, prefix.long()], dim=1)
        n = ids.shape[1]
        if n > self.cfg.max_seq:
            raise ValueError(f"sequence of {n} tokens exceeds max {self.cfg.max_seq}")
        x = torch.cat([latent + self.latent_pos, self.tok(ids) + self.pos[:n]], dim=1)
        allowed = self.attention_mask(m, n).unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, allowed=allowed)
        return self.head(self.ln(x[:, m:]))


class ArAE(nn.Module):
    def __init__(self, cfg: ArAEConfig = ArAEConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.encoder = JointsEncoder(cfg)
        self.decoder = TokenDecoder(cfg)
        self.double()

    def forward(self, joints, mask, prefix):
        return self.decoder(self.encoder(joints, mask), prefix)


# -- data plumbing ----------------------------------------------------------

def ordered_joints(skel: Skeleton) -> np.ndarray:
    return skel.joints[traversal_order(skel)]


def target_tokens(skel: Skeleton, vocab: Vocab) -> np.ndarray:
    return np.append(tokenize_skeleton(skel, vocab).ids, vocab.eos)


def pad_joints(joint_sets, k_max: int = K_MAX):
    """Stack variable-length joint arrays into (B, K, 3) zeros plus a mask."""
    K = max(len(j) for j in joint_sets)
    if K > k_max:
        raise ValueError(f"{K} joints exceed k_max={k_max}")
    out = torch.zeros(len(joint_sets), K, 3, dtype=torch.float64)
    mask = torch.zeros(len(joint_sets), K, dtype=torch.bool)
    for i, j in enumerate(joint_sets):
        if len(j) < 2:
            raise ValueError("need at least two joints")
        out[i, : len(j)] = torch.as_tensor(np.asarray(j, dtype=np.float64))
        mask[i, : len(j)] = True
    return out, mask


def pad_tokens(seqs, pad: int) -> torch.Tensor:
    L = max(len(s) for s in seqs)
    out = torch.full((len(seqs), L), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(np.asarray(s, dtype=np.int64))
    return out


@dataclass
class Batch:
    joints: torch.Tensor
    mask: torch.Tensor
    targets: torch.Tensor  # (B, n) tokens incl. EOS, PAD-filled

    @property
    def prefix(self) -> torch.Tensor:
        return self.targets[:, :-1]


def make_batch(skeletons, vocab: Vocab, k_max: int = K_MAX) -> Batch:
    joints, mask = pad_joints([ordered_joints(s) for s in skeletons], k_max)
    return Batch(joints, mask, pad_tokens([target_tokens(s, vocab) for s in skeletons], vocab.pad))


# -- model surface ----------------------------------------------------------

def encode_joints(model: ArAE, joints, mask=None) -> torch.Tensor:
    """Latent embedding (B, m, d) of padded joints; a 2-D input is one item."""
    joints = torch.as_tensor(joints, dtype=torch.float64)
    single = joints.dim() == 2
    if single:
        joints = joints[None]
    if mask is None:
        mask = torch.ones(joints.shape[:2], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool).reshape(joints.shape[:2])
    if int(mask.sum(dim=1).max()) > model.cfg.k_max:
        raise ValueError(f"more than k_max={model.cfg.k_max} joints")
    if int(mask.sum(dim=1).min()) < 2:
        raise ValueError("need at least two joints")
    z = model.encoder(joints, mask)
    return z[0] if single else z


def decode_logits(model: ArAE, latent, prefix) -> torch.Tensor:
    latent = torch.as_tensor(latent, dtype=torch.float64)
    prefix = torch.as_tensor(np.asarray(prefix), dtype=torch.long)
    single = latent.dim() == 2
    if single:
        latent, prefix = latent[None], prefix.reshape(1, -1)
    out = model.decoder(latent, prefix)
    return out[0] if single else out


def sequence_loss(logits, targets, pad: int) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad)


def arae_loss(model: ArAE, batch: Batch, latent_noise: float = 0.0) -> torch.Tensor:
    """Mean next-token cross-entropy over non-PAD targets (EOS included).

    ``latent_noise`` adds isotropic Gaussian noise of that std to the latent
    before decoding, which keeps nearby latents decoding to nearby skeletons.
    """
    if batch.joints.shape[0] != batch.targets.shape[0]:
        raise ValueError("joints and token batches differ in size")
    latent = model.encoder(batch.joints, batch.mask)
    if latent_noise > 0:
        latent = latent + latent_noise * torch.randn_like(latent)
    logits = model.decoder(latent, batch.prefix)
    return sequence_loss(logits, batch.targets, model.cfg.vocab.pad)


def token_accuracy(model: ArAE, batch: Batch) -> float:
    with torch.no_grad():
        logits = model(batch.joints, batch.mask, batch.prefix)
    keep = batch.targets != model.cfg.vocab.pad
    hit = (logits.argmax(-1) == batch.targets) & keep
    return float(hit.sum()) / float(keep.sum())


def training_skeletons(assets, rng, augment: bool, max_angle: float):
    if not augment:
        return [a.skeleton for a in assets]
    return [augment_pose(a, int(rng.integers(2**63)), max_angle).skeleton for a in assets]


def train_arae(model: ArAE, assets, cfg: TrainConfig = TrainConfig(), seed: int = 0,
               batch_fn=make_batch) -> tuple[ArAE, list[float]]:
    """Adam on next-token cross-entropy; returns the model and per-epoch mean loss."""
    assets = list(assets)
    if not assets:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    vocab = model.cfg.vocab
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(assets))
        total, count = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            chunk = [assets[i] for i in perm[s: s + cfg.batch_size]]
            skels = training_skeletons(chunk, rng, cfg.augment, cfg.max_angle)
            batch = batch_fn(skels, vocab, model.cfg.k_max)
            loss = arae_loss(model, batch, cfg.latent_noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        curve.append(total / count)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.info("arae epoch %d loss %.5f", epoch + 1, curve[-1])
    return model, curve


def _grammar_mask(vocab: Vocab, position: int) -> torch.Tensor:
    """Tokens allowed at payload ``position``: coordinate bins, plus EOS
    on a joint boundary. BOS and PAD are never generated."""
    allowed = torch.zeros(vocab.size, dtype=torch.bool)
    allowed[: vocab.bins] = True
    if position % TOKENS_PER_JOINT == 0 and position > 0:
        allowed[vocab.eos] = True
    return allowed


def generate_tokens(model: ArAE, latent, max_len: int | None = None, temperature: float = 0.0,
                    seed: int = 0) -> list[TokenSequence]:
    """Decode payloads from latents (B, m, d), greedy unless ``temperature > 0``.

    Generation stops at EOS or ``max_len`` payload tokens; each payload is
    cut to a whole number of joints.
    """
    latent = torch.as_tensor(latent, dtype=torch.float64)
    if latent.dim() == 2:
        latent = latent[None]
    vocab = model.cfg.vocab
    max_len = min(max_len or vocab.max_payload, model.cfg.max_seq - 2)
    gen = torch.Generator().manual_seed(seed)
    B = latent.shape[0]
    seqs = torch.zeros(B, 0, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    with torch.no_grad():
        for pos in range(max_len + 1):
            logits = model.decoder(latent, seqs)[:, -1]
            allowed = _grammar_mask(vocab, pos)
            if pos == max_len:
                allowed = torch.zeros_like(allowed)
                allowed[vocab.eos] = True
            logits = logits.masked_fill(~allowed, float("-inf"))
            if temperature > 0:
                probs = torch.softmax(logits / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=gen)[:, 0]
            else:
                nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, vocab.pad), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            done |= nxt == vocab.eos
            if bool(done.all()):
                break
    out = []
    for row in seqs.numpy():
        stop = np.flatnonzero(row >= vocab.bins)
        payload = row[: stop[0]] if len(stop) else row
        payload = payload[: len(payload) - len(payload) % TOKENS_PER_JOINT]
        out.append(TokenSequence(payload))
    return out


def grad_check(model: ArAE, batch: Batch, eps: float = 1e-5, n_coords: int = 200,
               seed: int = 0, atol: float = 1e-6) -> float:
    """Max relative error between autograd and central differences of
    :func:`arae_loss` over a random subset of parameter coordinates."""
    return finite_difference_check(lambda: arae_loss(model, batch), list(model.parameters()),
                                   eps=eps, n_coords=n_coords, seed=seed, atol=atol)


def finite_difference_check(loss_fn, params, eps=1e-5, n_coords=200, seed=0, atol=1e-6) -> float:
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            i = int(f - offsets[pi])
            view = params[pi].view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = float(loss_fn())
            view[i] = orig - eps
            down = float(loss_fn())
            view[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(grads[pi].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), atol))
    return worst
