"""Byte-level BPE shared by the captioning model and the text tower.

Merge rules are keyed on token byte strings, so training, encoding and a
vocabulary reloaded from JSON always agree on ids.  Ids are dense: the four
specials, then the 256 bytes, then one id per distinct merged string in rank
order.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
N_SPECIAL = len(SPECIALS)
N_BASE = N_SPECIAL + 256
REPLACEMENT = "�"


def _merge(seq: list[bytes], a: bytes, b: bytes) -> list[bytes]:
    out: list[bytes] = []
    i, n = 0, len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


@dataclass
class Vocabulary:
    merges: list[tuple[bytes, bytes]] = field(default_factory=list)
    truncated: bool = False  # training corpus ran out of pairs before the target size

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __post_init__(self):
        self.tokens: list[bytes] = [s.encode() for s in SPECIALS] + [bytes([i]) for i in range(256)]
        self.index: dict[bytes, int] = {t: i for i, t in enumerate(self.tokens) if i >= N_SPECIAL}
        self.rank: dict[tuple[bytes, bytes], int] = {}
        for r, (a, b) in enumerate(self.merges):
            if a not in self.index or b not in self.index:
                raise ValueError(f"merge {r} references a token not constructible at its rank: {a!r} + {b!r}")
            self.rank.setdefault((a, b), r)
            if a + b not in self.index:
                self.index[a + b] = len(self.tokens)
                self.tokens.append(a + b)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        # latin-1 maps each byte to one code point, so strings round-trip exactly
        return {
            "merges": [[a.decode("latin-1"), b.decode("latin-1")] for a, b in self.merges],
            "specials": {name: i for i, name in enumerate(SPECIALS)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        specials = obj.get("specials")
        if specials is not None and specials != {name: i for i, name in enumerate(SPECIALS)}:
            raise ValueError(f"unsupported special-token layout {specials}")
        return cls([(a.encode("latin-1"), b.encode("latin-1")) for a, b in obj["merges"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls.from_json(json.loads(Path(path).read_text()))


def word_units(texts) -> list[str]:
    """Split texts at spaces, each later piece keeping its leading space.

    Training BPE on these pieces keeps merges inside words, so captions stay
    compositional instead of collapsing into whole-phrase tokens.  Encoding is
    unaffected: full strings are still encoded byte-by-byte.
    """
    units: list[str] = []
    for t in texts:
        pieces = t.split(" ")
        units.append(pieces[0])
        units.extend(" " + w for w in pieces[1:])
    return [u for u in units if u]


def bpe_train(corpus: list[str], target_vocab_size: int = 512) -> Vocabulary:
    """Greedy highest-count pair merging over whole strings (no pre-tokenisation).

    Ties are broken by the lexicographically smallest ``(left, right)`` byte pair.
    If the corpus runs out of pairs first, the smaller vocabulary is returned
    with ``truncated=True``.
    """
    if not corpus:
        raise ValueError("bpe_train needs a non-empty corpus")
    if target_vocab_size <= N_BASE:
        raise ValueError(f"target size {target_vocab_size} must exceed the {N_BASE} base symbols")
    counts = Counter(corpus)
    words = {w: [bytes([b]) for b in w.encode("utf-8")] for w in counts}
    merges: list[tuple[bytes, bytes]] = []
    known = {bytes([i]) for i in range(256)}
    size = N_BASE
    while size < target_vocab_size:
        pairs: Counter = Counter()
        for w, seq in words.items():
            c = counts[w]
            for pair in zip(seq, seq[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best, _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merges.append(best)
        joined = best[0] + best[1]
        if joined not in known:
            known.add(joined)
            size += 1
        for w in words:
            words[w] = _merge(words[w], *best)
    vocab = Vocabulary(merges)
    if vocab.size < target_vocab_size:
        vocab.truncated = True
        log.warning("BPE stopped at %d tokens (target %d): no pairs left", vocab.size, target_vocab_size)
    return vocab


class Tokenizer:
    """Encode/decode with ``<s> ... </s>`` framing."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._body = lru_cache(maxsize=65536)(self._encode_body)

    @property
    def size(self) -> int:
        return self.vocab.size

    def _encode_body(self, text: str) -> tuple[int, ...]:
        seq = [bytes([b]) for b in text.encode("utf-8")]
        rank = self.vocab.rank
        while len(seq) > 1:
            best = min(zip(seq, seq[1:]), key=lambda p: rank.get(p, 1 << 62))
            if best not in rank:
                break
            seq = _merge(seq, *best)
        index = self.vocab.index
        return tuple(index.get(t, self.vocab.unk_id) for t in seq)

    def encode_body(self, text: str) -> list[int]:
        return list(self._body(text))

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """``[<s>] + body + [</s>]``, truncated to ``max_len`` keeping ``</s>`` last."""
        ids = [self.vocab.bos_id, *self._body(text), self.vocab.eos_id]
        if max_len is not None and len(ids) > max_len:
            if max_len < 2:
                raise ValueError(f"max_len={max_len} cannot hold <s> and </s>")
            ids = ids[: max_len - 1] + [self.vocab.eos_id]
        return ids

    def decode(self, ids) -> str:
        """Inverse of :meth:`encode`; specials dropped, ``<unk>`` shown as U+FFFD."""
        buf = bytearray()
        for i in ids:
            i = int(i)
            if not 0 <= i < self.vocab.size:
                raise IndexError(f"token id {i} outside vocabulary of size {self.vocab.size}")
            if i == self.vocab.unk_id:
                buf += REPLACEMENT.encode("utf-8")
            elif i >= N_SPECIAL:
                buf += self.vocab.tokens[i]
        return buf.decode("utf-8", errors="replace")
