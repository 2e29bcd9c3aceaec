"""Retrieval, classification, captioning and QA metrics, plus the evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# Retrieval and classification
# ---------------------------------------------------------------------------


def true_ranks(sim: np.ndarray, ground_truth: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's true item; ties go to the lower gallery index."""
    sim = np.asarray(sim, dtype=float)
    gt = np.asarray(ground_truth, dtype=np.int64)
    q, g = sim.shape
    if gt.shape != (q,):
        raise ValueError(f"ground truth has {gt.shape} entries for {q} queries")
    if gt.size and (gt.min() < 0 or gt.max() >= g):
        raise IndexError(f"ground-truth index out of range [0, {g})")
    true = sim[np.arange(q), gt][:, None]
    cols = np.arange(g)[None, :]
    better = (sim > true) | ((sim == true) & (cols < gt[:, None]))
    return better.sum(axis=1)


def recall_at_k(sim: np.ndarray, ground_truth: Sequence[int], k: int) -> float:
    """Fraction of queries whose true gallery item is among the top ``k``."""
    sim = np.asarray(sim)
    if not 1 <= k <= sim.shape[1]:
        raise ValueError(f"k={k} must lie in [1, {sim.shape[1]}]")
    return float((true_ranks(sim, ground_truth) < k).mean())


def zeroshot_classify(video_embs: np.ndarray, labels: Sequence[int], class_names: Sequence[str],
                      embed_text: Callable[[str], np.ndarray]) -> tuple[float, float]:
    """Top-1/top-5 accuracy assigning each video to the most similar class-name embedding.

    With fewer than five classes top-5 covers every class and is 1.0.
    """
    if len(class_names) < 2:
        raise ValueError("zero-shot classification needs at least 2 classes")
    text = np.stack([np.asarray(embed_text(c), dtype=float) for c in class_names])
    sim = np.asarray(video_embs, dtype=float) @ text.T
    ranks = true_ranks(sim, labels)
    return float((ranks < 1).mean()), float((ranks < min(5, len(class_names))).mean())


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s'-]")


def caption_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace after stripping punctuation."""
    return _PUNCT.sub(" ", text.lower()).split()


def _ngrams(words: Sequence[str], n_max: int) -> list[Counter]:
    return [Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1)) for n in range(1, n_max + 1)]


@dataclass
class CiderResult:
    score: float
    per_id: dict[str, float]
    empty: list[str] = field(default_factory=list)


def cider_scores(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
                 n_max: int = 4, sigma: float = 6.0) -> CiderResult:
    """CIDEr-D with per-id document frequencies, clipped tf-idf cosine and a Gaussian length penalty."""
    ids = sorted(candidates)
    if len(ids) < 2:
        raise ValueError("CIDEr needs at least 2 ids for document frequencies")
    for i in ids:
        if not references.get(i):
            raise ValueError(f"candidate {i!r} has no references")
    refs = {i: [_ngrams(caption_tokens(r), n_max) for r in references[i]] for i in ids}
    df: Counter = Counter()
    for i in ids:
        seen = set()
        for grams in refs[i]:
            for c in grams:
                seen.update(c)
        df.update(seen)
    log_n = math.log(len(ids))

    def vec(grams: list[Counter]) -> tuple[list[dict], list[float], int]:
        vs, norms = [], []
        for c in grams:
            v = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in c.items()}
            vs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vs, norms, sum(grams[0].values())

    per_id: dict[str, float] = {}
    empty = []
    for i in ids:
        words = caption_tokens(candidates[i])
        if not words:
            empty.append(i)
            per_id[i] = 0.0
            continue
        hv, hn, hl = vec(_ngrams(words, n_max))
        total = np.zeros(n_max)
        for grams in refs[i]:
            rv, rn, rl = vec(grams)
            penalty = math.exp(-((hl - rl) ** 2) / (2 * sigma**2))
            for n in range(n_max):
                if hn[n] == 0 or rn[n] == 0:
                    continue
                dot = sum(min(x, rv[n][g]) * rv[n][g] for g, x in hv[n].items() if g in rv[n])
                total[n] += dot / (hn[n] * rn[n]) * penalty
        per_id[i] = float(total.mean() / len(refs[i]) * 10.0)
    return CiderResult(float(np.mean([per_id[i] for i in ids])), per_id, empty)


def cider(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> float:
    return cider_scores(candidates, references).score


# ---------------------------------------------------------------------------
# WUPS
# ---------------------------------------------------------------------------


class Taxonomy:
    """Single-rooted parent map; the root has depth 1."""

    def __init__(self, parent: Mapping[str, str], root: str):
        self.parent = {k.lower(): v.lower() for k, v in parent.items()}
        self.root = root.lower()
        if self.root in self.parent:
            raise ValueError("root must not have a parent")
        self._depth: dict[str, int] = {self.root: 1}
        for node in self.parent:
            self.depth(node)

    @classmethod
    def from_json(cls, obj: dict) -> Taxonomy:
        return cls(obj["parent"], obj["root"])

    @classmethod
    def load(cls, path) -> Taxonomy:
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def mini(cls) -> Taxonomy:
        """The bundled taxonomy over the synthetic world's lexicon."""
        text = resources.files("vidistill.data").joinpath("mini_taxonomy.json").read_text()
        return cls.from_json(json.loads(text))

    def __contains__(self, word: str) -> bool:
        return word in self._depth

    def path(self, node: str) -> list[str]:
        out, seen = [node], {node}
        while out[-1] != self.root:
            nxt = self.parent.get(out[-1])
            if nxt is None:
                raise ValueError(f"{node!r} does not reach the root")
            if nxt in seen:
                raise ValueError(f"cycle through {nxt!r}")
            out.append(nxt)
            seen.add(nxt)
        return out

    def depth(self, node: str) -> int:
        if node not in self._depth:
            self._depth[node] = len(self.path(node))
        return self._depth[node]

    def wup(self, a: str, b: str) -> float:
        if a not in self or b not in self:
            return 1.0 if a == b else 0.0
        ancestors = set(self.path(a))
        lca = next(n for n in self.path(b) if n in ancestors)
        return 2.0 * self.depth(lca) / (self.depth(a) + self.depth(b))


def _wups_item(pred: list[str], ans: list[str], tax: Taxonomy, threshold: float) -> float:
    def sim(a: str, b: str) -> float:
        s = tax.wup(a, b)
        return s if s >= threshold else 0.1 * s

    def directed(src: list[str], dst: list[str]) -> float:
        prod = 1.0
        for a in src:
            prod *= max((sim(a, b) for b in dst), default=0.0)
        return prod

    return min(directed(pred, ans), directed(ans, pred))


def wups(predictions: Sequence[str], answers: Sequence[str], taxonomy: Taxonomy, threshold: float = 0.9) -> float:
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if len(predictions) != len(answers):
        raise ValueError("predictions and answers differ in length")
    scores = []
    for p, a in zip(predictions, answers):
        at = caption_tokens(a)
        if not at:
            raise ValueError("empty answer")
        scores.append(_wups_item(caption_tokens(p), at, taxonomy, threshold))
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# QA accuracy and caption statistics
# ---------------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def exact_match(predictions: Sequence[str], answers: Sequence[str]) -> float:
    if len(predictions) != len(answers):
        raise ValueError(f"{len(predictions)} predictions for {len(answers)} answers")
    if not answers:
        return 0.0
    return float(np.mean([normalize_answer(p) == normalize_answer(a) for p, a in zip(predictions, answers)]))


def caption_stats(captions: Sequence[str]) -> tuple[float, int]:
    """Mean whitespace-token length and number of distinct lowercased tokens."""
    toks = [c.split() for c in captions]
    if not toks:
        return 0.0, 0
    return float(np.mean([len(t) for t in toks])), len({w.lower() for t in toks for w in t})


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_BOUNDED = ("r_at_", "top1", "top5", "exact_match", "wups", "verb_hit")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    config: dict
    seed: int
    counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite")
            if name.startswith(_BOUNDED) and not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name}={value} outside [0, 1]")
            if name.startswith("cider") and not 0.0 <= value <= 10.0:
                raise ValueError(f"metric {name}={value} outside [0, 10]")

    def to_json(self) -> str:
        obj = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metrics": {k: round(v, 10) for k, v in sorted(self.metrics.items())},
            "counts": dict(sorted(self.counts.items())),
            "config": self.config,
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "config_hash"])
        for k, v in sorted(self.metrics.items()):
            w.writerow([k, f"{v:.10g}", self.config_hash])
        return buf.getvalue()

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
        js.write_text(self.to_json())
        cs.write_text(self.to_csv())
        return js, cs

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        obj = json.loads(text)
        return cls(obj["metrics"], obj["config"], obj["seed"], obj["counts"], obj["config_hash"])
