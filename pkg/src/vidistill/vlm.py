"""Toy vision-language model: per-frame visual encoder + encoder-decoder language model.

Parameters live in two groups, ``visual`` (the frame encoder) and ``language``
(embeddings, text encoder, decoder, output head), which is what the two
adaptation stages freeze and unfreeze.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, no_grad
from .tokenizer import Tokenizer

GROUPS = ("visual", "language")


@dataclass
class VlmConfig:
    vocab_size: int = 512
    width: int = 32
    heads: int = 2
    visual_layers: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_hidden: int = 64
    patch: int = 4
    frame_size: int = 16
    max_instruction_len: int = 24
    max_output_len: int = 24
    max_frames: int = 16
    time_code_scale: float = 1.0

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_size // self.patch) ** 2


@dataclass
class VisualTokens:
    tokens: Tensor  # (B, T*N, C)
    T: int
    N: int
    C: int


class VisualEncoder(nn.Module):
    """Patchify each frame, add spatial position codes, self-attend within the frame only."""

    def __init__(self, rng, cfg: VlmConfig):
        n, c = cfg.tokens_per_frame, cfg.width
        self.patch_embed = nn.Linear(rng, 3 * cfg.patch * cfg.patch, c)
        self.pos = nn.param(nn.normal(rng, (n, c), 0.02))
        self.blocks = [nn.EncoderBlock(rng, c, cfg.heads, cfg.ff_hidden) for _ in range(cfg.visual_layers)]
        self.ln = nn.LayerNorm(c)
        self.patch = cfg.patch

    def __call__(self, frames: np.ndarray) -> Tensor:
        """``frames`` ``(B, T, 3, H, W)`` -> ``(B, T*N, C)``; no attention crosses frames."""
        b, t = frames.shape[:2]
        patches = nn.patchify(np.asarray(frames, dtype=T.DTYPE), self.patch)  # (B, T, N, P)
        n = patches.shape[2]
        x = self.patch_embed(Tensor(patches.reshape(b * t, n, -1))) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return x.reshape(b, t * n, x.shape[-1])


class LanguageModel(nn.Module):
    def __init__(self, rng, cfg: VlmConfig):
        c = cfg.width
        self.embed = nn.param(nn.normal(rng, (cfg.vocab_size, c), 0.3))
        self.instr_pos = nn.param(nn.normal(rng, (cfg.max_instruction_len, c), 0.02))
        self.dec_pos = nn.param(nn.normal(rng, (cfg.max_output_len, c), 0.02))
        self.encoder = [nn.EncoderBlock(rng, c, cfg.heads, cfg.ff_hidden) for _ in range(cfg.encoder_layers)]
        self.enc_ln = nn.LayerNorm(c)
        self.decoder = [nn.DecoderBlock(rng, c, cfg.heads, cfg.ff_hidden) for _ in range(cfg.decoder_layers)]
        self.dec_ln = nn.LayerNorm(c)
        self.head = nn.Linear(rng, c, cfg.vocab_size)
        # parameter-free frame-index code, identical for all N tokens of a frame
        self.time_code = nn.sinusoid_table(cfg.max_frames, c) * cfg.time_code_scale
        self.cfg = cfg

    def encode(self, visual: Tensor, n_frames: int, instr: np.ndarray, instr_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, tn, c = visual.shape
        n = tn // n_frames
        code = np.repeat(self.time_code[:n_frames], n, axis=0)[None]
        v = visual + Tensor(code)
        ly = instr.shape[1]
        y = T.embedding(self.embed, instr) + self.instr_pos[:ly]
        x = T.concat([v, y], axis=1)
        valid = np.concatenate([np.ones((b, tn), dtype=bool), instr_valid], axis=1)
        mask = nn.key_padding_mask(valid)
        for blk in self.encoder:
            x = blk(x, mask=mask)
        return self.enc_ln(x), mask

    def decode(self, memory: Tensor, memory_mask: np.ndarray, prefix: np.ndarray) -> Tensor:
        """Logits ``(B, L, |S|)`` for every prefix position."""
        lz = prefix.shape[1]
        if lz > self.cfg.max_output_len:
            raise ValueError(f"decoder input length {lz} exceeds {self.cfg.max_output_len}")
        x = T.embedding(self.embed, prefix) + self.dec_pos[:lz]
        causal = nn.causal_mask(lz)
        for blk in self.decoder:
            x = blk(x, memory, causal, memory_mask)
        return self.head(self.dec_ln(x))


class VlmModel(nn.Module):
    def __init__(self, cfg: VlmConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.visual = VisualEncoder(rng, cfg)
        self.language = LanguageModel(rng, cfg)

    def named_groups(self) -> dict[str, str]:
        return {name: name.split(".", 1)[0] for name, _ in self.named_parameters()}

    def group_parameters(self, group: str) -> dict[str, Tensor]:
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        return {n: p for n, p in self.named_parameters() if n.startswith(group + ".")}

    def zero_output_head(self) -> None:
        self.language.head.weight.data[:] = 0.0
        self.language.head.bias.data[:] = 0.0


def _pad(seqs: Sequence[Sequence[int]], pad: int, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def encode_frames(model: VlmModel, frames: np.ndarray) -> VisualTokens:
    """Visual tokens for ``(T, 3, H, W)`` or batched ``(B, T, 3, H, W)`` frames."""
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[None]
    if frames.shape[1] == 0:
        raise ValueError("encode_frames needs at least one frame")
    tokens = model.visual(frames)
    return VisualTokens(tokens, frames.shape[1], model.cfg.tokens_per_frame, model.cfg.width)


def caption_loss_batch(model: VlmModel, visual: VisualTokens, instructions: Sequence[Sequence[int]],
                       outputs: Sequence[Sequence[int]], bos_id: int, pad_id: int) -> Tensor:
    """Batch mean of per-example summed NLL of ``outputs`` given frames and instruction."""
    if any(len(z) == 0 for z in outputs):
        raise ValueError("caption_loss needs a non-empty target sequence")
    instr, instr_valid = _pad(instructions, pad_id)
    memory, mmask = model.language.encode(visual.tokens, visual.T, instr, instr_valid)
    targets, tvalid = _pad(outputs, pad_id)
    prefix = np.concatenate([np.full((len(outputs), 1), bos_id), targets[:, :-1]], axis=1)
    logits = model.language.decode(memory, mmask, prefix)
    tgt = np.where(tvalid, targets, -1)
    total = T.cross_entropy_logits(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-1)
    return T.scale(total, 1.0 / len(outputs))


def caption_loss(model: VlmModel, visual: VisualTokens, y: Sequence[int], z: Sequence[int], tok: Tokenizer) -> Tensor:
    """Summed NLL of output ``z`` (ending in ``</s>``) for a single example."""
    if len(z) == 0:
        raise ValueError("caption_loss needs a non-empty target sequence")
    if z[-1] != tok.vocab.eos_id:
        raise ValueError("target sequence must end with </s>")
    return caption_loss_batch(model, visual, [y], [z], tok.vocab.bos_id, tok.vocab.pad_id)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def nucleus_filter(probs: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix whose mass reaches ``p`` (crossing token kept).

    Returns ``(token_ids, renormalised_probs)``.
    """
    if not 0 < p <= 1:
        raise ValueError(f"nucleus p must lie in (0, 1], got {p}")
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p * cum[-1], side="left")) + 1
    k = min(k, len(order))
    keep = order[:k]
    q = probs[keep]
    return keep, q / q.sum()


@dataclass
class DecodeMode:
    kind: str = "nucleus"  # "greedy" | "nucleus"
    p: float = 0.9

    def __post_init__(self):
        if self.kind not in ("greedy", "nucleus"):
            raise ValueError(f"unknown decoding mode {self.kind!r}")
        if self.kind == "nucleus" and not 0 < self.p <= 1:
            raise ValueError(f"nucleus p must lie in (0, 1], got {self.p}")


def _banned(tok: Tokenizer) -> list[int]:
    v = tok.vocab
    return [v.pad_id, v.bos_id, v.unk_id]


def decode_batch(model: VlmModel, frames: np.ndarray, instructions: Sequence[Sequence[int]], tok: Tokenizer,
                 mode: DecodeMode, rngs: Sequence[np.random.Generator] | None, max_len: int = 24,
                 hook: Callable[[float, float], None] | None = None) -> list[list[int]]:
    """Autoregressive decoding for a batch of ``(frames, instruction)`` rows.

    Returns generated id lists (``</s>`` included when reached, never ``<s>``).
    """
    max_len = min(max_len, model.cfg.max_output_len)
    v = tok.vocab
    banned = _banned(tok)
    with no_grad():
        vis = encode_frames(model, frames)
        instr, ivalid = _pad(instructions, v.pad_id)
        memory, mmask = model.language.encode(vis.tokens, vis.T, instr, ivalid)
        b = len(instructions)
        prefix = np.full((b, 1), v.bos_id, dtype=np.int64)
        outs: list[list[int]] = [[] for _ in range(b)]
        alive = np.ones(b, dtype=bool)
        for _ in range(max_len):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            logits = model.language.decode(
                Tensor(memory.data[idx]), mmask[idx], prefix[idx]
            ).data[:, -1, :]
            logits[:, banned] = -np.inf
            z = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=1, keepdims=True)
            nxt = np.full(b, v.pad_id, dtype=np.int64)
            for row, i in enumerate(idx):
                pr = probs[row]
                if mode.kind == "greedy":
                    t = int(np.argmax(pr))
                else:
                    keep, q = nucleus_filter(pr, mode.p)
                    if hook is not None:
                        hook(float(pr[keep].sum()), mode.p)
                    t = int(keep[0]) if len(keep) == 1 else int(keep[rngs[i].choice(len(keep), p=q)])
                nxt[i] = t
                outs[i].append(t)
                if t == v.eos_id:
                    alive[i] = False
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outs


def generate(model: VlmModel, frames: np.ndarray, y: Sequence[int], tok: Tokenizer, mode: DecodeMode,
             k_samples: int = 4, max_len: int = 24, seed: int = 0,
             hook: Callable[[float, float], None] | None = None) -> list[str]:
    """``k_samples`` decoded strings for one clip; sample ``j`` uses a generator derived from ``(seed, j)``."""
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    frames = np.asarray(frames)
    batch = np.repeat(frames[None], k_samples, axis=0)
    rngs = [np.random.default_rng([seed, j]) for j in range(k_samples)]
    ids = decode_batch(model, batch, [list(y)] * k_samples, tok, mode, rngs, max_len, hook)
    return [tok.decode(s) for s in ids]


def config_dict(cfg: VlmConfig) -> dict:
    return asdict(cfg)
