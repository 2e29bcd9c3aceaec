from __future__ import annotations

import numpy as np
import pytest

from vidistill import world as W
from vidistill.instruct import lexicon_texts
from vidistill.tokenizer import Tokenizer, bpe_train, word_units


@pytest.fixture(scope="session")
def tokenizer() -> Tokenizer:
    manifest = W.gen_world(0, 200)
    texts = [c["text"] for r in manifest.records for c in r["captions"]] + lexicon_texts()
    return Tokenizer(bpe_train(word_units(texts), 512))


@pytest.fixture(scope="session")
def small_world() -> W.DatasetManifest:
    return W.gen_world(3, 60)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_overrides(out) -> dict:
    """A complete pipeline small enough to run in a few seconds."""
    trainer = {"epochs": 1, "batch_size": 8}
    return {
        "out": str(out),
        "world": {"n_clips": 40},
        "tokenizer": {"vocab_size": 300},
        "vlm": {"ff_hidden": 32, "max_output_len": 12, "visual_layers": 1, "encoder_layers": 1, "decoder_layers": 1},
        "adapt": {"n_frames": 2, "pretrain_sequences": 16, "pretrain": trainer, "stage1": trainer, "stage2": trainer},
        "decoding": {"k": 2, "max_len": 8},
        "dual": {"model": {"ff_hidden": 32, "video_layers": 1, "text_layers": 1, "n_frames": 2},
                 "train": {"epochs": 2, "batch_size": 8}},
        "eval": {"probe_clips": 4},
    }


@pytest.fixture
def tiny_config(tmp_path):
    from vidistill.config import PipelineConfig, merge

    return merge(PipelineConfig(), tiny_overrides(tmp_path / "out"))


# pass/fail lines from the acceptance gate, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
