"""End-to-end orchestration with content-keyed stage caching, plus the scaling experiment.

A run lives in ``<out>/seed-<seed>/`` with one subdirectory per stage.  Each
stage records a ``stage.json`` holding its cache key (a hash of the config
subtree it reads and the output digests of the stages it depends on) and the
digests of what it wrote.  A stage whose key is unchanged is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import instruct as I
from . import tensor as T
from . import world as W
from .adaptation import (CaptionItem, TrainResult, answer_questions, distill_dataset, pretrain_base, probe_records,
                         sample_captions, stage1_visual_adapt, stage2_language_adapt, verb_hit_rate)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, config_hash, digest
from .dual import DualConfig, DualEncoder, encode_gallery, encode_texts, train_dual
from .metrics import EvalReport, Taxonomy, caption_stats, cider, exact_match, recall_at_k, wups, zeroshot_classify
from .plotting import plot_loss_curves, plot_scaling
from .tokenizer import Tokenizer, Vocabulary, bpe_train, word_units
from .vlm import DecodeMode, VlmConfig, VlmModel

log = logging.getLogger(__name__)

STAGES = ("world", "instructions", "adapt", "distill", "dual", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, directory: Path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}; partial outputs in {directory}")
        self.stage = stage
        self.directory = directory


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------


def save_vlm(path, model: VlmModel, **meta) -> Path:
    return save_checkpoint(path, model.state_dict(), {"vlm": asdict(model.cfg), **meta})


def load_vlm(path) -> VlmModel:
    state, meta = load_checkpoint(path)
    model = VlmModel(VlmConfig(**meta["vlm"]))
    model.load_state_dict(state)
    return model


def save_dual(path, model: DualEncoder, **meta) -> Path:
    return save_checkpoint(path, model.state_dict(), {"dual": asdict(model.cfg), **meta})


def load_dual(path) -> DualEncoder:
    state, meta = load_checkpoint(path)
    model = DualEncoder(DualConfig(**meta["dual"]))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------


@dataclass
class StageSpec:
    name: str
    deps: tuple[str, ...]
    subtree: Callable[[PipelineConfig], dict]
    run: Callable[["Run", Path], dict]


def _sub(cfg: PipelineConfig, *names: str) -> dict:
    d = cfg.to_dict()
    out = {"seed": d["seed"]}
    for n in names:
        head, _, tail = n.partition(".")
        out[n] = d[head][tail] if tail else d[head]
    return out


def _instructions_subtree(cfg: PipelineConfig) -> dict:
    return _sub(cfg, "llm", "instructions") | {"endpoint": I.resolve_endpoint(cfg.llm.endpoint)}


class Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.out) / f"seed-{cfg.seed}"
        self.config_hash = config_hash(cfg)
        self.dtype = np.float32 if cfg.precision == "float32" else np.float64

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def _stage_file(self, stage: str) -> Path:
        return self.dir(stage) / "stage.json"

    def fingerprint(self, stage: str) -> str:
        meta = json.loads(self._stage_file(stage).read_text())
        return digest(meta["outputs"])

    def key(self, spec: StageSpec) -> str:
        upstream = {d: self.fingerprint(d) for d in spec.deps}
        return digest({"stage": spec.name, "version": __version__, "config": spec.subtree(self.cfg),
                       "upstream": upstream})

    def is_current(self, spec: StageSpec) -> bool:
        f = self._stage_file(spec.name)
        if not f.exists():
            return False
        meta = json.loads(f.read_text())
        if meta.get("key") != self.key(spec):
            return False
        return all((self.dir(spec.name) / rel).exists() for rel in meta["outputs"])

    def ensure(self, name: str) -> None:
        spec = SPECS[name]
        for dep in spec.deps:
            self.ensure(dep)
        if self.is_current(spec):
            log.debug("stage %s: cached", name)
            return
        d = self.dir(name)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        key = self.key(spec)
        t0 = time.perf_counter()
        log.info("stage %s: running", name)
        try:
            summary = spec.run(self, d)
        except Exception as exc:
            raise StageError(name, d, exc) from exc
        outputs = {str(p.relative_to(d)): file_digest(p) for p in sorted(d.rglob("*")) if p.is_file()}
        write_json(self._stage_file(name), {"stage": name, "key": key, "config_hash": self.config_hash,
                                             "outputs": outputs, "summary": summary})
        log.info("stage %s: done in %.1fs", name, time.perf_counter() - t0)

    # -- shared inputs ------------------------------------------------------
    @cached_property
    def records(self) -> list[dict]:
        return W.load_manifest(self.dir("world") / "manifest.jsonl")

    @cached_property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(Vocabulary.load(self.dir("world") / "tokenizer.json"))

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    @cached_property
    def _full_frames(self) -> dict[str, np.ndarray]:
        root = self.dir("world")
        return {r["id"]: W.read_frames(root / r["frames_path"]).astype(np.float32) for r in self.records}

    def sampled_frames(self, n_frames: int, fps: float) -> dict[str, np.ndarray]:
        out = {}
        for cid, full in self._full_frames.items():
            idx = W.sample_indices(np.arange(len(full)) / W.SOURCE_FPS, n_frames, fps)
            out[cid] = full[idx]
        return out

    @cached_property
    def vlm_frames(self) -> dict[str, np.ndarray]:
        return self.sampled_frames(self.cfg.adapt.n_frames, self.cfg.adapt.fps)

    @cached_property
    def dual_frames(self) -> dict[str, np.ndarray]:
        return self.sampled_frames(self.cfg.dual.model.n_frames, self.cfg.dual.model.fps)

    def instruction_pairs(self, which: str) -> list[I.InstructionPair]:
        return I.read_corpus(self.dir("instructions") / f"{which}.jsonl")

    @cached_property
    def heldout_short_qa(self) -> list[I.InstructionPair]:
        return [p for p in self.instruction_pairs("heldout") if p.kind == "short-qa"]

    def final_vlm(self) -> VlmModel:
        with T.precision(self.dtype):
            return load_vlm(self.dir("adapt") / "final.vdck")

    def probe(self) -> list[dict]:
        return probe_records(self.split("test"), self.cfg.eval.probe_clips)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _world_stage(run: Run, d: Path) -> dict:
    cfg = run.cfg
    params = W.WorldParams(**asdict(cfg.world))
    manifest = W.gen_world(cfg.seed, cfg.world.n_clips, params)
    W.materialize(manifest, d)
    W.write_manifest(manifest.records, d / "manifest.jsonl")
    texts = [c["text"] for r in manifest.records for c in r["captions"]] + I.lexicon_texts()
    vocab = bpe_train(word_units(texts), cfg.tokenizer.vocab_size)
    vocab.save(d / "tokenizer.json")
    counts = {s: len(manifest.split(s)) for s in cfg.world.split_fractions}
    return {"clips": len(manifest), "splits": counts, "vocab_size": vocab.size}


def _instructions_stage(run: Run, d: Path) -> dict:
    cfg = run.cfg
    icfg = I.InstructionConfig(cfg.llm.endpoint, cfg.instructions.preset, cfg.instructions.pairs_per_clip,
                               cfg.llm.max_tokens)
    train = I.generate_instructions(run.split("adapt"), icfg, cfg.seed)
    heldout = I.generate_instructions(run.split("test"), icfg, cfg.seed + 1)
    I.write_corpus(train, d / "train.jsonl")
    I.write_corpus(heldout, d / "heldout.jsonl")
    kinds = {k: sum(p.kind == k for p in train) for k in sorted({p.kind for p in train})}
    return {"train": len(train), "heldout": len(heldout), "train_kinds": kinds}


def _probe_model(run: Run, model: VlmModel) -> dict:
    cfg, tok = run.cfg, run.tokenizer
    probe = run.probe()
    mode = DecodeMode("nucleus", cfg.decoding.p)
    caps = sample_captions(model, run.vlm_frames, [r["id"] for r in probe], tok, I.CAPTION_PROMPT, mode,
                           cfg.decoding.k, cfg.seed, cfg.decoding.max_len)
    qa = run.heldout_short_qa
    answers = answer_questions(model, run.vlm_frames, qa, tok)
    length, _ = caption_stats([c for cs in caps.values() for c in cs])
    return {"verb_hit": verb_hit_rate(caps, probe), "caption_length": length,
            "exact_match": exact_match(answers, [p.answer for p in qa]) if qa else 0.0}


def _adapt_stage(run: Run, d: Path) -> dict:
    cfg, tok = run.cfg, run.tokenizer
    a = cfg.adapt
    frames = run.vlm_frames
    adapt_recs = run.split("adapt")
    results: dict[str, TrainResult] = {}
    probes: dict[str, dict] = {}
    with T.precision(run.dtype):
        model = VlmModel(replace(cfg.vlm, vocab_size=tok.size), cfg.seed)
        bursts, burst_caps = W.gen_bursts(cfg.seed, a.pretrain_sequences, a.n_frames, a.fps,
                                          cfg.world.p_two_objects, cfg.world.p_two_actions)
        results["pretrain"] = pretrain_base(model, bursts, burst_caps, tok, a.pretrain, cfg.seed)
        del bursts
        save_vlm(d / "base.vdck", model, stage="base")
        probes["base"] = _probe_model(run, model)
        order = ("stage1", "stage2") if a.order == "visual-language" else ("stage2", "stage1")
        for stage in order:
            if stage == "stage1":
                items = [CaptionItem(r["id"], W.captions_of(r, "ground-truth")[0]) for r in adapt_recs]
                unlabeled: list[CaptionItem] = []
                if a.self_training.enabled:
                    corpus = run.split("corpus")
                    pseudo = sample_captions(model, frames, [r["id"] for r in corpus], tok, I.CAPTION_PROMPT,
                                             DecodeMode("nucleus", cfg.decoding.p), 1, cfg.seed, cfg.decoding.max_len)
                    unlabeled = [CaptionItem(cid, cs[0]) for cid, cs in pseudo.items() if cs[0].strip()]
                results[stage] = stage1_visual_adapt(model, frames, items, tok, a.stage1, cfg.seed,
                                                     unlabeled, a.self_training)
            else:
                results[stage] = stage2_language_adapt(model, frames, run.instruction_pairs("train"), tok,
                                                       a.stage2, cfg.seed)
            save_vlm(d / f"{stage}.vdck", model, stage=stage)
            probes[stage] = _probe_model(run, model)
        save_vlm(d / "final.vdck", model, stage=order[-1])
    curves = {k: r.loss_curve for k, r in results.items()}
    write_json(d / "curves.json", {"config_hash": run.config_hash, "curves": curves,
                                   "steps": {k: r.steps for k, r in results.items()}})
    write_json(d / "probes.json", {"config_hash": run.config_hash, "probes": probes})
    plot_loss_curves(curves, d / "losses.png", "captioner training")
    return {"seconds": {k: round(r.seconds, 1) for k, r in results.items()}}


def _distill_stage(run: Run, d: Path) -> dict:
    cfg = run.cfg
    model = run.final_vlm()
    with T.precision(run.dtype):
        out = distill_dataset(model, run.split("corpus"), run.vlm_frames, run.tokenizer, cfg.decoding.k,
                              cfg.decoding.p, cfg.seed, cfg.decoding.max_len)
    W.write_manifest(out, d / "pseudo.jsonl")
    return {"clips": len(out), "captions": sum(len(W.captions_of(r, "pseudo")) for r in out)}


def corpus_records(run: Run, source: str) -> list[dict]:
    if source == "pseudo":
        return W.load_manifest(run.dir("distill") / "pseudo.jsonl")
    return run.split("corpus")


def _dual_model_cfg(run: Run) -> DualConfig:
    return replace(run.cfg.dual.model, vocab_size=run.tokenizer.size)


def fit_dual(run: Run, records: Sequence[dict], source: str):
    frames = run.dual_frames
    ids = [r["id"] for r in records]
    caps = [W.captions_of(r, source) for r in records]
    with T.precision(run.dtype):
        return train_dual(np.stack([frames[i] for i in ids]), caps, run.tokenizer, _dual_model_cfg(run),
                          run.cfg.dual.train, run.cfg.seed, ids)


def _dual_stage(run: Run, d: Path) -> dict:
    source = run.cfg.dual.caption_source
    t0 = time.perf_counter()
    res = fit_dual(run, corpus_records(run, source), source)
    seconds = time.perf_counter() - t0
    save_dual(d / "model.vdck", res.model, source=source)
    write_json(d / "curve.json", {"config_hash": run.config_hash, "loss_curve": res.loss_curve, "steps": res.steps})
    write_json(d / "timing.json", {"train_seconds": round(seconds, 1)})
    plot_loss_curves({source: res.loss_curve}, d / "loss.png", "dual encoder InfoNCE")
    return {"steps": res.steps}


def score_dual(run: Run, model: DualEncoder) -> dict[str, float]:
    """Held-out text-to-video retrieval with ground-truth caption queries, and zero-shot verb classification."""
    test = run.split("test")
    tok = run.tokenizer
    with T.precision(run.dtype):
        gallery = encode_gallery(model, np.stack([run.dual_frames[r["id"]] for r in test]))
        queries = encode_texts(model, [W.captions_of(r, "ground-truth")[0] for r in test], tok)
        sim = queries.astype(np.float64) @ gallery.astype(np.float64).T
        gt = np.arange(len(test))
        out = {f"r_at_{k}": recall_at_k(sim, gt, min(k, len(test))) for k in (1, 5, 10)}
        labels = [W.VERBS.index(r["script"]["actions"][0]["verb"]) for r in test]
        out["top1"], out["top5"] = zeroshot_classify(gallery, labels, W.VERBS,
                                                     lambda name: encode_texts(model, [name], tok)[0])
    return out


def _eval_stage(run: Run, d: Path) -> dict:
    cfg, tok = run.cfg, run.tokenizer
    metrics = score_dual(run, load_dual(run.dir("dual") / "model.vdck"))
    test = run.split("test")
    vlm = run.final_vlm()
    with T.precision(run.dtype):
        greedy = sample_captions(vlm, run.vlm_frames, [r["id"] for r in test], tok, I.CAPTION_PROMPT,
                                 DecodeMode("greedy"), 1, cfg.seed, cfg.decoding.max_len)
        qa = run.heldout_short_qa
        answers = answer_questions(vlm, run.vlm_frames, qa, tok)
    metrics["cider"] = cider({k: v[0] for k, v in greedy.items()},
                             {r["id"]: W.captions_of(r, "ground-truth") for r in test})
    if qa:
        gold = [p.answer for p in qa]
        metrics["exact_match"] = exact_match(answers, gold)
        metrics["wups"] = wups(answers, gold, Taxonomy.mini(), cfg.eval.wups_threshold)
    probes = json.loads((run.dir("adapt") / "probes.json").read_text())["probes"]
    for stage, vals in probes.items():
        metrics[f"verb_hit_{stage}"] = vals["verb_hit"]
        metrics[f"exact_match_{stage}"] = vals["exact_match"]
        metrics[f"caption_length_{stage}"] = vals["caption_length"]
    pseudo = corpus_records(run, "pseudo")
    for source, recs in (("pseudo", pseudo), ("alt_text", run.split("corpus"))):
        length, vocab = caption_stats([c for r in recs for c in W.captions_of(r, source.replace("_", "-"))])
        metrics[f"corpus_length_{source}"] = length
        metrics[f"corpus_vocab_{source}"] = float(vocab)
    config = cfg.to_dict()
    config.pop("out")
    report = EvalReport(metrics, config, cfg.seed,
                        {"test_clips": len(test), "short_qa": len(qa), "probe_clips": len(run.probe()),
                         "corpus_clips": len(pseudo)}, run.config_hash)
    report.write(d / "report")
    return {"r_at_1": metrics["r_at_1"]}


SPECS = {
    "world": StageSpec("world", (), lambda c: _sub(c, "world", "tokenizer"), _world_stage),
    "instructions": StageSpec("instructions", ("world",), _instructions_subtree, _instructions_stage),
    "adapt": StageSpec("adapt", ("world", "instructions"),
                       lambda c: _sub(c, "precision", "vlm", "adapt", "decoding", "eval.probe_clips"), _adapt_stage),
    "distill": StageSpec("distill", ("world", "adapt"), lambda c: _sub(c, "precision", "decoding"), _distill_stage),
    "dual": StageSpec("dual", ("world", "distill"), lambda c: _sub(c, "precision", "dual"), _dual_stage),
    "eval": StageSpec("eval", ("world", "instructions", "adapt", "distill", "dual"),
                      lambda c: _sub(c, "precision", "eval", "decoding"), _eval_stage),
}


def run_pipeline(cfg: PipelineConfig, until: str = "eval") -> Path:
    """Run (or reuse) every stage up to ``until``; returns the run directory."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; expected one of {STAGES}")
    run = Run(cfg)
    run.ensure(until)
    return run.root


def read_report(run_dir) -> EvalReport:
    return EvalReport.from_json((Path(run_dir) / "eval" / "report.json").read_text())


# ---------------------------------------------------------------------------
# Scaling experiment
# ---------------------------------------------------------------------------

# text-to-video R@1 (%) against thousands of pretraining clips, from the full-scale study
REFERENCE_SERIES = {
    "alt-text": ((7, 30.3), (70, 33.4), (700, 33.5), (7000, 33.5)),
    "image-caption+llm": ((7, 30.6), (70, 33.1), (700, 34.0), (7000, 34.8)),
    "pseudo": ((7, 35.2), (70, 38.6), (700, 41.3), (7000, 42.1)),
}

SCALING_COLUMNS = ("source", "fraction", "n_train", "r_at_1", "r_at_5", "r_at_10", "top1", "top5",
                   "runtime_s", "config_hash")


@dataclass
class ScalingRow:
    source: str
    fraction: float
    n_train: int
    r_at_1: float
    r_at_5: float
    r_at_10: float
    top1: float
    top5: float
    runtime_s: float


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    config_hash: str
    reference: dict = field(default_factory=lambda: {k: [list(p) for p in v] for k, v in REFERENCE_SERIES.items()})

    def series(self, source: str) -> list[ScalingRow]:
        return sorted((r for r in self.rows if r.source == source), key=lambda r: r.fraction)

    @property
    def sources(self) -> list[str]:
        return sorted({r.source for r in self.rows})

    def monotone(self, source: str) -> bool:
        """R@1 non-decreasing in the data fraction."""
        ys = [r.r_at_1 for r in self.series(source)]
        return all(b >= a for a, b in zip(ys, ys[1:]))

    def dominates(self, better: str, worse: str) -> dict[float, bool]:
        other = {r.fraction: r.r_at_1 for r in self.series(worse)}
        return {r.fraction: r.r_at_1 > other[r.fraction] for r in self.series(better) if r.fraction in other}

    def verdict(self) -> dict:
        out = {"monotone": {s: self.monotone(s) for s in self.sources}}
        if {"pseudo", "alt-text"} <= set(self.sources):
            beats = self.dominates("pseudo", "alt-text")
            out["pseudo_beats_alt_text"] = {str(k): v for k, v in beats.items()}
            out["pseudo_beats_alt_text_everywhere"] = all(beats.values())
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCALING_COLUMNS)
        for r in sorted(self.rows, key=lambda r: (r.source, r.fraction)):
            w.writerow([r.source, f"{r.fraction:g}", r.n_train, *(f"{getattr(r, c):.6f}" for c in SCALING_COLUMNS[3:8]),
                        f"{r.runtime_s:.1f}", self.config_hash])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {"config_hash": self.config_hash, "rows": [asdict(r) for r in self.rows],
               "verdict": self.verdict(), "reference": self.reference}
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"csv": directory / "scaling.csv", "json": directory / "scaling.json", "png": directory / "scaling.png"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(self.to_json())
        series = {s: [(r.n_train, r.r_at_1) for r in self.series(s)] for s in self.sources}
        plot_scaling(series, paths["png"], self.reference)
        return paths


def scaling_subset(records: Sequence[dict], fraction: float, seed: int) -> list[dict]:
    """Nested subsets: a seeded ordering truncated to the fraction, returned in manifest order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]: not that much data available")
    n = int(round(fraction * len(records)))
    if n < 2:
        raise ValueError(f"fraction {fraction} of {len(records)} clips leaves fewer than 2 for training")
    order = np.random.default_rng([seed, 11]).permutation(len(records))
    keep = np.sort(order[:n])
    return [records[i] for i in keep]


def run_scaling_experiment(cfg: PipelineConfig, fractions: Sequence[float] | None = None,
                           sources: Sequence[str] | None = None, out_dir=None) -> ScalingReport:
    """One dual encoder per (source, fraction) on identically seeded subsets, scored on the test split."""
    fractions = list(cfg.scaling.fractions if fractions is None else fractions)
    sources = list(cfg.scaling.sources if sources is None else sources)
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError(f"fractions must be strictly increasing, got {fractions}")
    for s in sources:
        if s not in W.CAPTION_SOURCES:
            raise ValueError(f"unknown caption source {s!r}")
    run = Run(cfg)
    run.ensure("dual" if cfg.dual.caption_source in sources and 1.0 in fractions else "distill")
    rows = []
    for source in sources:
        records = corpus_records(run, source)
        for f in fractions:
            subset = scaling_subset(records, f, cfg.seed)
            if f == 1.0 and source == cfg.dual.caption_source:
                # identical to the pipeline's own dual stage
                model = load_dual(run.dir("dual") / "model.vdck")
                seconds = json.loads((run.dir("dual") / "timing.json").read_text())["train_seconds"]
            else:
                t0 = time.perf_counter()
                model = fit_dual(run, subset, source).model
                seconds = time.perf_counter() - t0
            scores = score_dual(run, model)
            rows.append(ScalingRow(source, f, len(subset), runtime_s=seconds, **scores))
            log.info("scaling %s @ %g: R@1 %.3f", source, f, scores["r_at_1"])
    report = ScalingReport(rows, run.config_hash)
    report.write(out_dir or Path(cfg.out) / f"scaling-seed-{cfg.seed}")
    return report
