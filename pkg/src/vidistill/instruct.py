"""Instruction-following data from captions: few-shot prompts, an LLM hook and a grammar mock.

Prompt headers and few-shot examples are the published appendix tables,
rendered the way LaTeX typesets them: a source line break is a space,
``\\newline`` is a newline, ``\\textbackslash n`` is a literal newline and
``\\{\\}`` is a fill-in slot.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import world as W
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

KINDS = ("temporal", "causal", "short-qa")
CAPTION_KIND = "caption"
CAPTION_PROMPT = "Generate the alt-text:"
QA_PROMPT = "Answer in en:"
ENDPOINT_ENV = "VIDISTILL_LLM_ENDPOINT"

_INTRO = (
    "You are an AI visual assistant that can analyze a single video. You receive a few sentences, "
    "each describing the same video you are observing. The task is to use the provided caption, "
    "create a plausible question about the video, and "
)
_REASONING = (
    "To answer such questions, one should require first understanding the visual content, then based on "
    "the background knowledge or reasoning, either explain why the things are happening that way, or "
    "provide guides and help to user's request.  Make the question challenging by not including the visual "
    "content details in the question so that the user needs to reason about that first.\n"
    "Always answer as if you are directly looking at the video.\n"
)
_SLOTS = (
    "(1) Captions:\n{}\n\n"
    "Generated QA:\n{}\n\n"
    "(2) Captions:\n{}\n\n"
    "Generated QA:\n{}\n\n"
    "(3) Captions:\n{}\n\n"
    "Generated QA:\n"
)

HEADERS = {
    "temporal": _INTRO + "provide the answer in detail.\n"
    "Create questions that requires reasoning about temporal relationships between actions, determined by "
    "order of occurrence. The questions can also cover interactions between different persons or objects.\n"
    + _REASONING,
    "causal": _INTRO + "provide the answer in detail.\n"
    "Create questions that explain actions, either uncovering the intentions of the previously occurring "
    "actions or stating causes for subsequent actions.\n"
    + _REASONING,
    "short-qa": _INTRO + "provide a short answer with less than three words.\n" + _REASONING,
}

TEMPLATES = {kind: header + _SLOTS for kind, header in HEADERS.items()}

_EGG = (
    "A baby girl on the left side wearing a grey t-shirt is carrying an egg then she throws the egg at the "
    "head of the man, then the egg falls on the ground and it breaks on a grey surface.",
    "A man wearing a red t-shirt sitting on his knees is talking with the baby girl on a grey surface.",
    "In the background, there is a grey car, a grey surface, a brown mat, and people speaking and crying "
    "sounds are audible.",
)
_POOL = (
    "A boy wearing black shorts is standing on the side of the swimming pool over small rocks and then he "
    "performs a backflip and injured himself.",
    "In the background, there is a swimming pool, rocks, trees, and people's voices and water splashing "
    "sound is audible.",
)
_BIKE = (
    "A boy wearing a black t-shirt rides a black bicycle in a backward direction and falls on a gray surface.",
    "A girl wearing a black cloth is moving on a gray surface, stops, and looks back toward the boy.",
    "In the background, there are gray surfaces, buildings, metallic barrier poles, trees, boats, and the sky "
    "is visible, and sounds of people speaking and the wind are audible.",
)


@dataclass(frozen=True)
class FewShot:
    captions: tuple[str, ...]
    question: str
    answer: str

    def caption_block(self) -> str:
        return "\n".join(self.captions)

    def qa_block(self) -> str:
        return format_qa(self.question, self.answer)


FEW_SHOT = {
    "temporal": (
        FewShot(_EGG, "What did the baby girl on the left side wearing a grey t-shirt do with the egg after she "
                "is carrying it?", "The girl throws the egg at the head of the man."),
        FewShot(_POOL, "What was the boy wearing black shorts doing before he performing a backflip?",
                "The boy is standing on the side of the swimming pool over small rocks. Then he performs a "
                "backflip and injured himself."),
        FewShot(_BIKE, "What did the girl do after the boy wearing a black t-shirt rides a black bicycle in a "
                "backward direction and falls on a gray surface?",
                "The girl wearing a black cloth is moving on a gray surface. After the boy falls on a gray "
                "surface, she stops and looks back toward the boy."),
    ),
    "causal": (
        FewShot(_EGG, "Why did the egg fall on the ground and breaks?",
                "The egg was thrown by the girl at the head of the man sitting on his knees. However, it did "
                "not hit the man. Therefore, the egg falls on the ground and breaks on a grey surface."),
        FewShot(_POOL, "How did the boy standing on the side of the swimming pool over small rocks injure himself?",
                "The boy standing on the side of the swimming pool over small rocks perform a backflip. Instead "
                "of falling into the water, he hit on the small rocks. That is why he injured himself."),
        FewShot(_BIKE, "How did the boy wearing a black t-shirt fall on a gray surface?",
                "The boy wearing a black t-shirt rides a black bicycle in a backward direction. Riding a black "
                "bicycle backward is slow and hard to balance. Also, the boy is not good at riding a black "
                "bicycle backward. As a result, he fell on a gray surface."),
    ),
    "short-qa": (
        FewShot(_EGG, "who throws the egg at the man", "baby girl"),
        FewShot(_POOL, "what kind of pool is in the background", "swimming"),
        FewShot(_BIKE, "what happens when the man loses control", "falls down"),
    ),
}


class InstructionParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class TransportError(RuntimeError):
    """Network-level failure talking to a live LLM endpoint; safe to retry."""


@dataclass
class InstructionPair:
    question: str
    answer: str
    kind: str
    clip_id: str = ""

    def __post_init__(self):
        if self.kind == "short-qa" and len(self.answer.split()) > 3:
            raise ValueError(f"short-qa answer has more than three words: {self.answer!r}")

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "kind": self.kind, "question": self.question, "answer": self.answer}


def format_qa(question: str, answer: str) -> str:
    return f"Question: {question}\nAnswer: {answer}"


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}; expected one of {KINDS}")


def build_prompt(kind: str, captions: str, seed: int) -> str:
    """Header, two of the three few-shot examples (seeded, pool order kept), then the target captions."""
    _check_kind(kind)
    if not captions.strip():
        raise ValueError("build_prompt needs non-empty captions")
    rng = np.random.default_rng(seed)
    pick = sorted(rng.choice(len(FEW_SHOT[kind]), size=2, replace=False).tolist())
    shots = [FEW_SHOT[kind][i] for i in pick]
    return TEMPLATES[kind].format(shots[0].caption_block(), shots[0].qa_block(),
                                  shots[1].caption_block(), shots[1].qa_block(), captions)


# ---------------------------------------------------------------------------
# LLM endpoints
# ---------------------------------------------------------------------------

_BASE_FORM = {"moves": "move", "spins": "spin", "stays": "stay"}


def base_form(verb: str) -> str:
    head, *rest = verb.split(" ")
    return " ".join([_BASE_FORM.get(head, head), *rest])


def prompt_kind(prompt: str) -> str:
    for kind, header in HEADERS.items():
        if prompt.startswith(header):
            return kind
    raise ValueError("prompt does not start with a known template header")


def target_captions(prompt: str) -> str:
    """The captions filled into the final slot of a built prompt."""
    head, sep, tail = prompt.rpartition("(3) Captions:\n")
    if not sep:
        raise ValueError("prompt has no target caption slot")
    body, sep, _ = tail.rpartition("\n\nGenerated QA:\n")
    return body if sep else tail


def mock_qa(kind: str, caption: str, seed: int) -> tuple[str, str] | None:
    """Grammar-derived QA pair, or ``None`` when the caption cannot support one."""
    script = W.parse_caption(caption)
    if script is None:
        return None
    a = script.actor
    if kind == "temporal":
        if len(script.actions) < 2:
            return None
        return f"What did the {a.color} {a.shape} do after it {script.actions[0].verb}?", script.actions[1].phrase
    if kind == "causal":
        if len(script.actions) < 2:
            return None
        cause = W.CAUSE_RULES[script.actions[0].verb]
        return f"Why did the {a.color} {a.shape} {base_form(script.actions[1].verb)}?", W.CAUSE_PHRASES[cause]
    if np.random.default_rng(seed).random() < 0.5:
        return f"what color is the {a.shape}", a.color
    return f"what shape is the {a.color} object", a.shape


def mock_complete(prompt: str, seed: int) -> str:
    kind = prompt_kind(prompt)
    for line in target_captions(prompt).split("\n"):
        qa = mock_qa(kind, line, seed)
        if qa is not None:
            return format_qa(*qa)
    return ""


def resolve_endpoint(configured: str) -> str:
    return os.environ.get(ENDPOINT_ENV) or configured


def http_complete(endpoint: str, prompt: str, max_tokens: int, seed: int, timeout: float = 30.0,
                  retries: int = 3, backoff: float = 0.5) -> str:
    """POST ``{endpoint}/complete``; transport failures and empty bodies raise :class:`TransportError`."""
    body = json.dumps({"prompt": prompt, "max_tokens": max_tokens, "seed": seed}).encode()
    url = endpoint.rstrip("/") + "/complete"
    last: Exception | None = None
    for attempt in range(retries):
        try:
            req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                raw = resp.read()
            if not raw.strip():
                raise TransportError(f"{url} returned an empty body")
            text = json.loads(raw)["text"]
            if not isinstance(text, str):
                raise TransportError(f"{url} returned a non-string completion")
            return text
        except (urllib.error.URLError, OSError, TransportError, json.JSONDecodeError, KeyError) as exc:
            last = exc
            log.warning("LLM request %d/%d failed: %s", attempt + 1, retries, exc)
            time.sleep(backoff * (2**attempt))
    raise TransportError(f"LLM endpoint {url} failed after {retries} attempts: {last}")


def llm_complete(endpoint: str, prompt: str, max_tokens: int, seed: int) -> str:
    if endpoint == "mock":
        return mock_complete(prompt, seed)
    return http_complete(endpoint, prompt, max_tokens, seed)


_QA_RE = re.compile(r"Question:(.*?)\n\s*Answer:(.*?)(?=\n\s*Question:|\Z)", re.S)


def parse_qa(completion: str, kind: str = "temporal", clip_id: str = "") -> list[InstructionPair]:
    pairs = []
    for q, a in _QA_RE.findall(completion):
        q, a = q.strip(), a.strip()
        if q and a:
            pairs.append(InstructionPair(q, a, kind, clip_id))
    if not pairs:
        raise InstructionParseError("no Question/Answer pairs in completion", completion)
    return pairs


def to_training_example(pair: InstructionPair, tok: Tokenizer, max_len: int | None = None) -> tuple[list[int], list[int]]:
    """``(y, z)`` ids: short-qa questions get the QA task prompt; ``z`` ends with ``</s>`` and has no ``<s>``."""
    y = f"{QA_PROMPT} {pair.question}" if pair.kind == "short-qa" else pair.question
    return tok.encode(y, max_len), tok.encode(pair.answer, max_len)[1:]


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

PRESETS = {
    "reasoning-only": ("temporal", "causal"),
    "+captions": ("temporal", "causal", CAPTION_KIND),
    "+short-qa": ("temporal", "causal", CAPTION_KIND, "short-qa"),
}


@dataclass
class InstructionConfig:
    endpoint: str = "mock"
    preset: str = "+short-qa"
    pairs_per_clip: int = 1
    max_tokens: int = 128

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {tuple(PRESETS)}")


def _prompt_seed(seed: int, clip_index: int, kind_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, clip_index, kind_index, rep]).generate_state(1)[0])


def generate_instructions(records: Sequence[dict], cfg: InstructionConfig, seed: int,
                          source: str = "ground-truth") -> list[InstructionPair]:
    """One pass over ``records`` producing the preset's pair kinds for each clip's captions."""
    endpoint = resolve_endpoint(cfg.endpoint)
    kinds = PRESETS[cfg.preset]
    pairs: list[InstructionPair] = []
    skipped = 0
    for ci, rec in enumerate(records):
        caps = W.captions_of(rec, source)
        if not caps:
            continue
        for ki, kind in enumerate(kinds):
            if kind == CAPTION_KIND:
                pairs.append(InstructionPair(CAPTION_PROMPT, caps[0], CAPTION_KIND, rec["id"]))
                continue
            for rep in range(cfg.pairs_per_clip):
                s = _prompt_seed(seed, ci, ki, rep)
                text = llm_complete(endpoint, build_prompt(kind, "\n".join(caps), s), cfg.max_tokens, s)
                try:
                    found = parse_qa(text, kind, rec["id"])
                except InstructionParseError:
                    skipped += 1
                    continue
                pairs.append(found[0])
    if skipped:
        log.warning("skipped %d prompts whose captions gave no usable QA", skipped)
    return pairs


def lexicon_texts() -> list[str]:
    """Representative prompt/question strings, for building the shared tokenizer's corpus."""
    out = [CAPTION_PROMPT, QA_PROMPT, *W.CAUSE_PHRASES.values()]
    for v in W.VERBS:
        out.append(f"What did the red circle do after it {v}?")
        out.append(f"Why did the red circle {base_form(v)}?")
    for shape in W.SHAPES:
        out.append(f"{QA_PROMPT} what color is the {shape}")
    for color in W.COLORS:
        out.append(f"{QA_PROMPT} what shape is the {color} object")
    return out


def write_corpus(pairs: Iterable[InstructionPair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_corpus(path) -> list[InstructionPair]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(InstructionPair(obj["question"], obj["answer"], obj["kind"], obj["clip_id"]))
    return out


def config_dict(cfg: InstructionConfig) -> dict:
    return asdict(cfg)
