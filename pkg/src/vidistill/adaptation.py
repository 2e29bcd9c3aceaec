"""Two-stage adaptation of the captioner and pseudo-caption distillation.

Stage 1 tunes only the visual encoder on short ground-truth captions under the
fixed alt-text prompt; stage 2 tunes only the language model on instruction
triplets.  The base model both stages start from is pretrained on clean frame
sequences, so stage 1 is a camera-domain adaptation of the frame encoder.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .instruct import CAPTION_PROMPT, InstructionPair, to_training_example
from .optim import Optimizer, OptimizerConfig
from .tensor import Tensor, no_grad
from .tokenizer import Tokenizer
from .vlm import GROUPS, DecodeMode, VisualTokens, VlmModel, caption_loss_batch, decode_batch, encode_frames

log = logging.getLogger(__name__)


class AdaptationError(ValueError):
    pass


@dataclass
class TrainerConfig:
    epochs: int = 30
    batch_size: int = 16
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=3e-3, warmup_steps=50))


@dataclass
class SelfTrainingConfig:
    enabled: bool = False
    labeled_fraction: float = 0.5


# ---------------------------------------------------------------------------
# Freezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FreezePlan:
    trainable: frozenset
    stage: str = ""

    def __post_init__(self):
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter group(s) {sorted(unknown)}; expected a subset of {GROUPS}")

    @classmethod
    def only(cls, *groups: str, stage: str = "") -> FreezePlan:
        return cls(frozenset(groups), stage)


VISUAL_ONLY = FreezePlan.only("visual", stage="stage1")
LANGUAGE_ONLY = FreezePlan.only("language", stage="stage2")
EVERYTHING = FreezePlan.only(*GROUPS, stage="pretrain")


def apply_freeze(model: VlmModel, plan: FreezePlan) -> VlmModel:
    """Mark frozen groups as not requiring gradients; backprop then never reaches them."""
    for group in GROUPS:
        for p in model.group_parameters(group).values():
            p.requires_grad = group in plan.trainable
            p.grad = None
    return model


def trainable_parameters(model: VlmModel) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


# ---------------------------------------------------------------------------
# Datasets and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionItem:
    clip_id: str
    caption: str


@dataclass
class TrainingBatch:
    labeled: list[CaptionItem]
    unlabeled: list[CaptionItem]

    @property
    def items(self) -> list[CaptionItem]:
        return self.labeled + self.unlabeled

    def __len__(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


def mix_batch(D_l: Sequence[CaptionItem], D_u: Sequence[CaptionItem], batch_size: int,
              labeled_fraction: float, seed: int) -> TrainingBatch:
    """``round(fraction * batch_size)`` labeled items plus unlabeled items from other clips."""
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in [0, 1], got {labeled_fraction}")
    n_l = int(round(labeled_fraction * batch_size))
    n_u = batch_size - n_l
    if n_l > len(D_l):
        raise ValueError(f"batch needs {n_l} labeled items but only {len(D_l)} exist")
    rng = np.random.default_rng(seed)
    labeled = [D_l[i] for i in rng.choice(len(D_l), n_l, replace=False)] if n_l else []
    taken = {it.clip_id for it in labeled}
    pool = [i for i, it in enumerate(D_u) if it.clip_id not in taken]
    if n_u > len(pool):
        raise ValueError(f"batch needs {n_u} unlabeled items but only {len(pool)} are available")
    unlabeled = [D_u[pool[i]] for i in rng.choice(len(pool), n_u, replace=False)] if n_u else []
    return TrainingBatch(labeled, unlabeled)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    stage: str
    loss_curve: list[float]  # per-epoch mean of the batch loss
    steps: int
    seconds: float


def _fit(model: VlmModel, plan: FreezePlan, n_items: int, batch_loss: Callable[[np.ndarray, int], Tensor],
         cfg: TrainerConfig, seed: int) -> TrainResult:
    if n_items == 0:
        raise AdaptationError(f"{plan.stage or 'training'}: empty dataset")
    apply_freeze(model, plan)
    named = trainable_parameters(model)
    bs = min(cfg.batch_size, n_items)
    per_epoch = max(n_items // bs, 1)
    total = per_epoch * cfg.epochs
    opt = Optimizer(named, replace(cfg.optimizer, total_steps=max(total, 1)))
    rng = np.random.default_rng([seed, 7])
    curve: list[float] = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        losses = []
        for s in range(per_epoch):
            idx = order[s * bs : (s + 1) * bs]
            if named:
                opt.zero_grad()
                loss = batch_loss(idx, step)
                loss.backward()
                opt.step()
            else:
                with no_grad():
                    loss = batch_loss(idx, step)
            losses.append(loss.item())
            step += 1
        curve.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d loss %.4f", plan.stage, epoch + 1, cfg.epochs, curve[-1])
    return TrainResult(plan.stage, curve, total, time.perf_counter() - t0)


def _targets(tok: Tokenizer, texts: Sequence[str], max_len: int) -> list[list[int]]:
    # encode adds <s>; the decoder target starts after it
    return [tok.encode(t, max_len + 1)[1:] for t in texts]


def pretrain_base(model: VlmModel, frames: np.ndarray, captions: Sequence[str], tok: Tokenizer,
                  cfg: TrainerConfig, seed: int) -> TrainResult:
    """Train every parameter to caption clean frame sequences under the alt-text prompt."""
    if len(frames) != len(captions):
        raise ValueError(f"{len(frames)} sequences for {len(captions)} captions")
    y = tok.encode(CAPTION_PROMPT)
    z = _targets(tok, captions, model.cfg.max_output_len)
    v = tok.vocab

    def batch_loss(idx, _step):
        vis = encode_frames(model, frames[idx])
        return caption_loss_batch(model, vis, [y] * len(idx), [z[i] for i in idx], v.bos_id, v.pad_id)

    return _fit(model, EVERYTHING, len(frames), batch_loss, cfg, seed)


def stage1_visual_adapt(model: VlmModel, frames: Mapping[str, np.ndarray], items: Sequence[CaptionItem],
                        tok: Tokenizer, cfg: TrainerConfig, seed: int,
                        unlabeled: Sequence[CaptionItem] = (),
                        self_training: SelfTrainingConfig | None = None) -> TrainResult:
    """Visual-only tuning on ``(clip, caption)`` items with the instruction fixed to the alt-text prompt.

    With self-training enabled each batch mixes labeled ``items`` and
    pseudo-captioned ``unlabeled`` items via :func:`mix_batch`.
    """
    if not items:
        raise AdaptationError("stage 1: empty dataset")
    y = tok.encode(CAPTION_PROMPT)
    v = tok.vocab
    mixing = self_training is not None and self_training.enabled
    if mixing and not unlabeled:
        raise AdaptationError("stage 1: self-training enabled but no pseudo-captioned clips given")
    cache: dict[CaptionItem, list[int]] = {}

    def target(it: CaptionItem) -> list[int]:
        if it not in cache:
            cache[it] = _targets(tok, [it.caption], model.cfg.max_output_len)[0]
        return cache[it]

    def batch_loss(idx, step):
        if mixing:
            chosen = mix_batch(items, unlabeled, len(idx), self_training.labeled_fraction, seed * 1_000_003 + step).items
        else:
            chosen = [items[i] for i in idx]
        vis = encode_frames(model, np.stack([frames[it.clip_id] for it in chosen]))
        return caption_loss_batch(model, vis, [y] * len(chosen), [target(it) for it in chosen], v.bos_id, v.pad_id)

    return _fit(model, VISUAL_ONLY, len(items), batch_loss, cfg, seed)


def stage2_language_adapt(model: VlmModel, frames: Mapping[str, np.ndarray], pairs: Sequence[InstructionPair],
                          tok: Tokenizer, cfg: TrainerConfig, seed: int) -> TrainResult:
    """Language-only tuning on instruction triplets; visual tokens are computed once since F_V is frozen."""
    if not pairs:
        raise AdaptationError("stage 2: empty instruction dataset")
    for p in pairs:
        if not p.question.strip():
            raise AdaptationError(f"stage 2: triplet for clip {p.clip_id!r} has an empty instruction")
        if p.clip_id not in frames:
            raise AdaptationError(f"stage 2: no frames for clip {p.clip_id!r}")
    mcfg = model.cfg
    limit = min(mcfg.max_instruction_len, mcfg.max_output_len)
    examples = [to_training_example(p, tok, limit) for p in pairs]
    ids = sorted({p.clip_id for p in pairs})
    row = {cid: i for i, cid in enumerate(ids)}
    with no_grad():
        tokens = np.concatenate([encode_frames(model, np.stack([frames[c] for c in ids[i : i + 64]])).tokens.data
                                 for i in range(0, len(ids), 64)])
    n_frames = next(iter(frames.values())).shape[0]
    v = tok.vocab

    def batch_loss(idx, _step):
        vis = VisualTokens(Tensor(tokens[[row[pairs[i].clip_id] for i in idx]]), n_frames, mcfg.tokens_per_frame, mcfg.width)
        return caption_loss_batch(model, vis, [examples[i][0] for i in idx], [examples[i][1] for i in idx],
                                  v.bos_id, v.pad_id)

    return _fit(model, LANGUAGE_ONLY, len(pairs), batch_loss, cfg, seed)


# ---------------------------------------------------------------------------
# Distillation and probes
# ---------------------------------------------------------------------------


def clip_rng_seed(seed: int, clip_id: str) -> int:
    """Per-clip sampling seed, independent of the clip's position in any list."""
    return int(np.random.SeedSequence([seed, zlib.crc32(clip_id.encode())]).generate_state(1)[0])


def sample_captions(model: VlmModel, frames: Mapping[str, np.ndarray], clip_ids: Sequence[str], tok: Tokenizer,
                    instruction: str, mode: DecodeMode, k: int, seed: int, max_len: int = 24,
                    batch_clips: int = 16) -> dict[str, list[str]]:
    """``k`` decoded strings per clip; sample ``j`` of a clip draws from ``rng([clip seed, j])``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    y = tok.encode(instruction, model.cfg.max_instruction_len)
    out: dict[str, list[str]] = {}
    for s in range(0, len(clip_ids), batch_clips):
        chunk = list(clip_ids[s : s + batch_clips])
        try:
            batch = np.stack([frames[c] for c in chunk for _ in range(k)])
        except KeyError as exc:
            raise AdaptationError(f"no frames for clip {exc.args[0]!r}") from exc
        rngs = [np.random.default_rng([clip_rng_seed(seed, c), j]) for c in chunk for j in range(k)]
        ids = decode_batch(model, batch, [y] * len(rngs), tok, mode, rngs, max_len)
        for ci, c in enumerate(chunk):
            out[c] = [tok.decode(ids[ci * k + j]) for j in range(k)]
    return out


def distill_dataset(model: VlmModel, records: Sequence[dict], frames: Mapping[str, np.ndarray], tok: Tokenizer,
                    k_samples: int, p: float, seed: int, max_len: int = 24) -> list[dict]:
    """Copies of ``records`` with ``k_samples`` nucleus-sampled pseudo-captions appended to each."""
    ids = [r["id"] for r in records]
    caps = sample_captions(model, frames, ids, tok, CAPTION_PROMPT, DecodeMode("nucleus", p), k_samples, seed, max_len)
    out = []
    for r in records:
        rec = dict(r)
        kept = [c for c in r["captions"] if c["source"] != "pseudo"]
        rec["captions"] = kept + [{"text": t, "source": "pseudo", "sample": j} for j, t in enumerate(caps[r["id"]])]
        out.append(rec)
    return out


def verb_hit_rate(captions: Mapping[str, Sequence[str]], records: Sequence[dict]) -> float:
    """Fraction of captions that contain the clip's first scripted action verb."""
    hits = total = 0
    for r in records:
        verb = r["script"]["actions"][0]["verb"]
        for c in captions[r["id"]]:
            hits += verb in c
            total += 1
    if total == 0:
        raise ValueError("no captions to score")
    return hits / total


def answer_questions(model: VlmModel, frames: Mapping[str, np.ndarray], pairs: Sequence[InstructionPair],
                     tok: Tokenizer, max_len: int = 8, batch: int = 64) -> list[str]:
    """Greedy answers for each pair's question (task prompt included as in training)."""
    out = []
    for s in range(0, len(pairs), batch):
        chunk = pairs[s : s + batch]
        ys = [to_training_example(p, tok, model.cfg.max_instruction_len)[0] for p in chunk]
        ids = decode_batch(model, np.stack([frames[p.clip_id] for p in chunk]), ys, tok, DecodeMode("greedy"), None, max_len)
        out += [tok.decode(i) for i in ids]
    return out


def probe_records(records: Sequence[dict], n: int) -> list[dict]:
    """The fixed probe: the first ``n`` records in id order."""
    return sorted(records, key=lambda r: r["id"])[:n]
