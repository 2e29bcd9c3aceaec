"""Command-line entry point: ``vidistill <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from . import world as W
from .adaptation import CaptionItem, distill_dataset, stage1_visual_adapt, stage2_language_adapt
from .config import ConfigError, PipelineConfig, config_hash, load_config, merge
from .dual import train_dual
from .metrics import EvalReport, Taxonomy, cider, exact_match, recall_at_k, true_ranks, wups
from .pipeline import (Run, StageError, load_vlm, read_report, run_pipeline, run_scaling_experiment, save_dual,
                       save_vlm)
from .tokenizer import Tokenizer, Vocabulary

log = logging.getLogger("vidistill")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    if getattr(args, "source", None):
        overrides["dual"] = {"caption_source": args.source}
    return merge(cfg, overrides) if overrides else cfg


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def _until(stage: str):
    def run(args) -> int:
        root = run_pipeline(_config(args), until=stage)
        print(root / stage)
        return 0

    return run


def cmd_adapt(args) -> int:
    cfg = _config(args)
    if args.stage is None:
        return _until("adapt")(args)
    if not args.checkpoint or not args.save:
        raise SystemExit("adapt --stage needs --checkpoint (input) and --save (output)")
    run = Run(cfg)
    run.ensure("instructions")
    tok = run.tokenizer
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with T.precision(dtype):
        model = load_vlm(args.checkpoint)
        if args.stage == 1:
            items = [CaptionItem(r["id"], W.captions_of(r, "ground-truth")[0]) for r in run.split("adapt")]
            res = stage1_visual_adapt(model, run.vlm_frames, items, tok, cfg.adapt.stage1, cfg.seed)
        else:
            res = stage2_language_adapt(model, run.vlm_frames, run.instruction_pairs("train"), tok,
                                        cfg.adapt.stage2, cfg.seed)
        save_vlm(args.save, model, stage=f"stage{args.stage}", config_hash=config_hash(cfg))
    print(json.dumps({"stage": args.stage, "loss_curve": res.loss_curve, "steps": res.steps}))
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    manifest = Path(args.manifest)
    root = Path(args.frames_root) if args.frames_root else manifest.parent
    tok_path = Path(args.tokenizer) if args.tokenizer else manifest.parent / "tokenizer.json"
    tok = Tokenizer(Vocabulary.load(tok_path))
    records = W.load_manifest(manifest)
    frames = {}
    for r in records:
        try:
            clip = W.load_clip(r, root)
        except OSError as exc:
            raise OSError(f"clip {r['id']}: cannot read frames: {exc}") from exc
        frames[r["id"]] = W.sample_frames(clip, cfg.adapt.n_frames, cfg.adapt.fps)
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with T.precision(dtype):
        model = load_vlm(args.checkpoint)
        out = distill_dataset(model, records, frames, tok, args.k, args.p, cfg.seed, cfg.decoding.max_len)
    W.write_manifest(out, args.distill_out)
    print(args.distill_out)
    return 0


def cmd_train_dual(args) -> int:
    cfg = _config(args)
    if args.manifest is None:
        return _until("dual")(args)
    if not args.save:
        raise SystemExit("train-dual --manifest needs --save (output checkpoint)")
    manifest = Path(args.manifest)
    root = Path(args.frames_root) if args.frames_root else manifest.parent
    tok_path = Path(args.tokenizer) if args.tokenizer else manifest.parent / "tokenizer.json"
    tok = Tokenizer(Vocabulary.load(tok_path))
    records = W.load_manifest(manifest)
    source = cfg.dual.caption_source
    m = cfg.dual.model
    frames = np.stack([W.sample_frames(W.load_clip(r, root), m.n_frames, m.fps) for r in records])
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with T.precision(dtype):
        res = train_dual(frames, [W.captions_of(r, source) for r in records], tok,
                         replace(m, vocab_size=tok.size), cfg.dual.train, cfg.seed, [r["id"] for r in records])
        save_dual(args.save, res.model, source=source, config_hash=config_hash(cfg))
    print(json.dumps({"source": source, "loss_curve": res.loss_curve, "steps": res.steps}))
    return 0


def _eval_task(args) -> EvalReport:
    preds = _read_jsonl(args.predictions)
    refs = _read_jsonl(args.references)
    metrics: dict[str, float] = {}
    if args.task == "caption":
        cand = {p["id"]: p["caption"] for p in preds}
        metrics["cider"] = cider(cand, {r["id"]: r["references"] for r in refs})
    elif args.task == "qa":
        gold = {r["id"]: r["answer"] for r in refs}
        ids = [p["id"] for p in preds]
        answers = [p["answer"] for p in preds]
        metrics["exact_match"] = exact_match(answers, [gold[i] for i in ids])
        tax = Taxonomy.load(args.taxonomy) if args.taxonomy else Taxonomy.mini()
        metrics["wups"] = wups(answers, [gold[i] for i in ids], tax, args.wups_threshold)
    elif args.task == "retrieval":
        target = {r["query"]: r["target"] for r in refs}
        rows = sorted(preds, key=lambda p: p["query"])
        sim = np.array([p["scores"] for p in rows], dtype=float)
        gt = [target[p["query"]] for p in rows]
        for k in (1, 5, 10):
            metrics[f"r_at_{k}"] = recall_at_k(sim, gt, min(k, sim.shape[1]))
    else:
        label = {r["id"]: r["label"] for r in refs}
        sim = np.array([p["scores"] for p in preds], dtype=float)
        if sim.shape[1] < 2:
            raise ValueError("zero-shot classification needs at least 2 classes")
        ranks = true_ranks(sim, [label[p["id"]] for p in preds])
        metrics["top1"] = float((ranks < 1).mean())
        metrics["top5"] = float((ranks < min(5, sim.shape[1])).mean())
    return EvalReport(metrics, {"task": args.task}, 0, {"items": len(preds)})


def cmd_eval(args) -> int:
    if args.task:
        if not args.predictions or not args.references:
            raise SystemExit("eval --task needs --predictions and --references")
        report = _eval_task(args)
        if args.report:
            report.write(args.report)
        sys.stdout.write(report.to_json())
        return 0
    root = run_pipeline(_config(args), until="eval")
    sys.stdout.write(read_report(root).to_json())
    return 0


def cmd_scaling(args) -> int:
    cfg = _config(args)
    report = run_scaling_experiment(cfg, args.fractions, args.sources)
    sys.stdout.write(report.to_csv())
    print(json.dumps(report.verdict(), sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    root = run_pipeline(_config(args))
    print(root)
    sys.stdout.write(read_report(root).to_csv())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override the output root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vidistill", description="Video captioner adaptation and distillation.")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen-world", parents=[common], help="generate and render the synthetic world").set_defaults(
        fn=_until("world"))
    sub.add_parser("gen-instructions", parents=[common], help="build the instruction corpus").set_defaults(
        fn=_until("instructions"))

    p = sub.add_parser("adapt", parents=[common], help="run the adaptation stage, or one stage on a checkpoint")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--checkpoint", type=Path, help="input checkpoint for --stage")
    p.add_argument("--save", type=Path, help="output checkpoint for --stage")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("distill", parents=[common], help="pseudo-caption a manifest with a captioner checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--frames-root", type=Path, help="directory frame paths are relative to (default: manifest dir)")
    p.add_argument("--tokenizer", type=Path, help="tokenizer JSON (default: tokenizer.json next to the manifest)")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--distill-out", "--output", dest="distill_out", type=Path, required=True,
                   help="output JSONL manifest")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("train-dual", parents=[common],
                       help="run the dual-encoder stage, or train on a standalone manifest")
    p.add_argument("--source", "--caption-source", dest="source", choices=W.CAPTION_SOURCES)
    p.add_argument("--manifest", type=Path, help="train on this JSONL manifest instead of the run's corpus")
    p.add_argument("--frames-root", type=Path, help="directory frame paths are relative to (default: manifest dir)")
    p.add_argument("--tokenizer", type=Path, help="tokenizer JSON (default: tokenizer.json next to the manifest)")
    p.add_argument("--save", type=Path, help="output checkpoint for --manifest")
    p.set_defaults(fn=cmd_train_dual)

    p = sub.add_parser("eval", parents=[common], help="score the run, or score prediction/reference JSONL files")
    p.add_argument("--task", choices=("retrieval", "classify", "caption", "qa"))
    p.add_argument("--predictions", type=Path)
    p.add_argument("--references", type=Path)
    p.add_argument("--taxonomy", type=Path)
    p.add_argument("--wups-threshold", type=float, default=0.9)
    p.add_argument("--report", type=Path, help="write <stem>.json and <stem>.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("scaling", parents=[common], help="caption-source by data-fraction experiment")
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--sources", nargs="+", choices=W.CAPTION_SOURCES)
    p.set_defaults(fn=cmd_scaling)

    sub.add_parser("pipeline", parents=[common], help="run every stage").set_defaults(fn=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, StageError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
