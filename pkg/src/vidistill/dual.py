"""Two-tower contrastive video-text model and its trainer.

The video tower runs joint space-time attention over all ``T*N`` patch tokens;
the text tower is a causal transformer read out at its final token.  Both
project to a shared space and are L2-normalised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .optim import Optimizer, OptimizerConfig
from .tensor import Tensor, no_grad
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

MAX_TEXT_LEN = 77


@dataclass
class DualConfig:
    vocab_size: int = 512
    width: int = 32
    heads: int = 2
    video_layers: int = 2
    text_layers: int = 2
    ff_hidden: int = 64
    embed_dim: int = 16
    patch: int = 4
    frame_size: int = 16
    n_frames: int = 8
    fps: float = 2.0  # 8 frames span 0-3.5 s of a 4 s clip, so both actions and their speed are visible
    max_text_len: int = MAX_TEXT_LEN
    init_temperature: float = 0.07
    # fixed input standardisation; defaults are the pixel statistics of the synthetic world's videos
    pixel_mean: float = 0.29
    pixel_std: float = 0.07

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch) ** 2


def build_pe(pe_t: Tensor, pe_s: Tensor) -> Tensor:
    """``PE[i, j] = PE_t[i] + PE_s[j]`` as a differentiable ``(T, N, D)`` tensor."""
    if pe_t.shape[-1] != pe_s.shape[-1]:
        raise ValueError(f"width mismatch: PE_t {pe_t.shape} vs PE_s {pe_s.shape}")
    return pe_t.reshape(pe_t.shape[0], 1, pe_t.shape[1]) + pe_s.reshape(1, *pe_s.shape)


class VideoTower(nn.Module):
    def __init__(self, rng, cfg: DualConfig):
        c, n = cfg.width, cfg.tokens_per_frame
        self.patch_embed = nn.Linear(rng, 3 * cfg.patch * cfg.patch, c)
        self.pe_t = nn.param(nn.normal(rng, (cfg.n_frames, c), 0.02))
        # spatial table fixed at construction, then trained
        self.pe_s = nn.param(nn.sinusoid_table(n, c) * 0.1)
        self.blocks = [nn.EncoderBlock(rng, c, cfg.heads, cfg.ff_hidden) for _ in range(cfg.video_layers)]
        self.ln = nn.LayerNorm(c)
        self.proj = nn.Linear(rng, c, cfg.embed_dim, bias=False)
        self.cfg = cfg

    def __call__(self, frames: np.ndarray) -> Tensor:
        """``(B, T, 3, H, W)`` -> unit vectors ``(B, D_e)``."""
        b, t = frames.shape[:2]
        if t != self.cfg.n_frames:
            raise ValueError(f"video tower expects T={self.cfg.n_frames} frames, got {t}")
        x = (np.asarray(frames, dtype=T.DTYPE) - self.cfg.pixel_mean) / self.cfg.pixel_std
        patches = nn.patchify(x, self.cfg.patch)  # (B, T, N, P)
        n = patches.shape[2]
        x = self.patch_embed(Tensor(patches)) + build_pe(self.pe_t, self.pe_s)
        x = x.reshape(b, t * n, -1)
        for blk in self.blocks:
            x = blk(x)
        pooled = T.mean(self.ln(x), axis=1)
        return T.l2_normalize(self.proj(pooled), axis=-1)


class TextTower(nn.Module):
    def __init__(self, rng, cfg: DualConfig):
        c = cfg.width
        self.embed = nn.param(nn.normal(rng, (cfg.vocab_size, c), 0.3))
        self.pos = nn.param(nn.normal(rng, (cfg.max_text_len, c), 0.02))
        self.blocks = [nn.EncoderBlock(rng, c, cfg.heads, cfg.ff_hidden) for _ in range(cfg.text_layers)]
        self.ln = nn.LayerNorm(c)
        self.proj = nn.Linear(rng, c, cfg.embed_dim, bias=False)
        self.cfg = cfg

    def __call__(self, ids: Sequence[Sequence[int]], pad_id: int = 0) -> Tensor:
        """Padded id lists -> unit vectors ``(B, D_e)`` read at each sequence's last token."""
        lengths = [len(s) for s in ids]
        if max(lengths) > self.cfg.max_text_len:
            raise ValueError(f"text of {max(lengths)} tokens exceeds the {self.cfg.max_text_len}-token cap")
        if min(lengths) == 0:
            raise ValueError("empty token sequence")
        L = max(lengths)
        arr = np.full((len(ids), L), pad_id, dtype=np.int64)
        for i, s in enumerate(ids):
            arr[i, : len(s)] = s
        x = T.embedding(self.embed, arr) + self.pos[:L]
        mask = nn.causal_mask(L)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        x = self.ln(x)
        last = T.slice_(x, (np.arange(len(ids)), np.asarray(lengths) - 1))
        return T.l2_normalize(self.proj(last), axis=-1)


class DualEncoder(nn.Module):
    def __init__(self, cfg: DualConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.video = VideoTower(rng, cfg)
        self.text = TextTower(rng, cfg)
        self.log_scale = nn.param(np.asarray(math.log(1.0 / cfg.init_temperature)))

    @property
    def temperature(self) -> float:
        return float(np.exp(-self.log_scale.data))


def embed_video(model: DualEncoder, frames: np.ndarray) -> Tensor:
    frames = np.asarray(frames)
    return model.video(frames[None] if frames.ndim == 4 else frames)


def embed_text(model: DualEncoder, ids) -> Tensor:
    if len(ids) and isinstance(ids[0], (int, np.integer)):
        ids = [ids]
    return model.text(ids)


def info_nce(U: Tensor, V: Tensor, log_scale: Tensor | float) -> Tensor:
    """Symmetric cross-entropy over ``exp(log_scale) * U V^T`` with matches on the diagonal."""
    b = U.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    if V.shape[0] != b:
        raise ValueError(f"{b} video rows vs {V.shape[0]} text rows")
    if not isinstance(log_scale, Tensor):
        log_scale = Tensor(np.asarray(float(log_scale)))
    logits = (U @ T.swap_last(V)) * T.exp(log_scale)
    diag = np.arange(b)
    rows = T.cross_entropy_logits(logits, diag)
    cols = T.cross_entropy_logits(T.swap_last(logits), diag)
    return T.scale(rows + cols, 0.5 / b)


@dataclass
class DualTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        kind="adamw", lr=2e-3, weight_decay=0.01, warmup_steps=20))
    momentum_lr: float = 0.1  # learning rate used when the SGD recipe is selected
    min_steps: int = 0  # small corpora train for more epochs until this many optimiser steps


@dataclass
class DualTrainResult:
    model: DualEncoder
    loss_curve: list[float]
    steps: int


def caption_choices(n_clips: int, n_captions: Sequence[int], epoch: int, seed: int) -> np.ndarray:
    """Caption index per clip for one epoch, uniform over that clip's captions."""
    rng = np.random.default_rng([seed, epoch, 1])
    u = rng.random(n_clips)
    return np.minimum((u * np.asarray(n_captions)).astype(np.int64), np.asarray(n_captions) - 1)


def train_dual(frames: np.ndarray, captions: Sequence[Sequence[str]], tok: Tokenizer, cfg: DualConfig,
               train_cfg: DualTrainConfig, seed: int, clip_ids: Sequence[str] | None = None) -> DualTrainResult:
    """Minibatch InfoNCE over ``(clip, caption)`` pairs, re-drawing one caption per clip every epoch.

    ``frames`` is ``(n_clips, T, 3, H, W)`` already sampled for the video tower.
    """
    n = len(frames)
    if len(captions) != n:
        raise ValueError("one caption list per clip required")
    for i, caps in enumerate(captions):
        if not caps:
            name = clip_ids[i] if clip_ids is not None else str(i)
            raise ValueError(f"clip {name} has no captions of the requested source")
    if n < 2:
        raise ValueError("need at least 2 clips")
    encoded = [[tok.encode(c, cfg.max_text_len) for c in caps] for caps in captions]
    counts = [len(c) for c in encoded]
    model = DualEncoder(cfg, seed)
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = n // bs
    epochs = max(train_cfg.epochs, -(-train_cfg.min_steps // steps_per_epoch))
    opt_cfg = train_cfg.optimizer
    total = max(steps_per_epoch * epochs, 1)
    opt_cfg = OptimizerConfig(**{**asdict(opt_cfg), "total_steps": total})
    if opt_cfg.kind == "sgd-momentum":
        opt_cfg.lr = train_cfg.momentum_lr
    opt = Optimizer(dict(model.named_parameters()), opt_cfg)
    rng = np.random.default_rng([seed, 2])
    curve = []
    for epoch in range(epochs):
        choice = caption_choices(n, counts, epoch, seed)
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * bs : (s + 1) * bs]
            opt.zero_grad()
            u = model.video(frames[idx])
            v = model.text([encoded[i][choice[i]] for i in idx])
            loss = info_nce(u, v, model.log_scale)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        log.debug("dual epoch %d loss %.4f", epoch, curve[-1])
    return DualTrainResult(model, curve, steps_per_epoch * epochs)


def encode_gallery(model: DualEncoder, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.video(frames[i : i + batch]).data for i in range(0, len(frames), batch)])


def encode_texts(model: DualEncoder, texts: Sequence[str], tok: Tokenizer, batch: int = 128) -> np.ndarray:
    ids = [tok.encode(t, model.cfg.max_text_len) for t in texts]
    with no_grad():
        return np.concatenate([model.text(ids[i : i + batch]).data for i in range(0, len(ids), batch)])
