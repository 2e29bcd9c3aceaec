from __future__ import annotations

import math

import numpy as np
import pytest

from vidistill import world as W
from vidistill.dual import (DualConfig, DualEncoder, DualTrainConfig, build_pe, caption_choices, embed_text,
                            embed_video, encode_gallery, encode_texts, info_nce, train_dual)
from vidistill.gradcheck import grad_check
from vidistill.tensor import Tensor, parameter
from vidistill.vlm import VlmConfig, VlmModel


@pytest.fixture
def cfg(tokenizer):
    return DualConfig(vocab_size=tokenizer.size, ff_hidden=32, n_frames=4)


@pytest.fixture
def model(cfg):
    return DualEncoder(cfg, seed=0)


@pytest.fixture
def video(small_world):
    out = []
    for r in small_world.records[:6]:
        clip = W.render_clip(W.SceneScript.from_json(r["script"]), r["seed"])
        out.append(W.sample_frames(clip, 4, 2.0))
    return np.stack(out)


def _unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestPositionEmbedding:
    def test_zero_temporal_gives_spatial_slices(self, rng):
        pe_s = rng.normal(size=(16, 32))
        pe = build_pe(Tensor(np.zeros((4, 32))), Tensor(pe_s)).data
        assert pe.shape == (4, 16, 32)
        for t in range(4):
            np.testing.assert_array_equal(pe[t], pe_s)

    def test_broadcast_formula(self, rng):
        pe_t, pe_s = rng.normal(size=(4, 32)), rng.normal(size=(16, 32))
        np.testing.assert_array_equal(build_pe(Tensor(pe_t), Tensor(pe_s)).data[2, 5], pe_t[2] + pe_s[5])

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            build_pe(Tensor(np.zeros((4, 8))), Tensor(np.zeros((16, 9))))

    def test_temporal_init_scale(self, cfg):
        pe_t = DualEncoder(cfg, seed=3).video.pe_t.data
        assert pe_t.shape == (cfg.n_frames, 32) and 0.01 < pe_t.std() < 0.03


class TestTowers:
    def test_video_embedding_is_unit(self, model, video):
        u = embed_video(model, video).data
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-9)

    def test_frame_order_matters(self, model, video):
        i = int(np.argmax(np.abs(video[:, 0] - video[:, -1]).reshape(len(video), -1).sum(1)))
        assert not np.array_equal(video[i, 0], video[i, -1])
        u = embed_video(model, video[i:i + 1]).data
        v = embed_video(model, video[i:i + 1, ::-1]).data
        assert not np.allclose(u, v)

    def test_equivariance_with_zero_temporal_codes(self, model, video):
        model.video.pe_t.data[:] = 0.0
        u = embed_video(model, video[1:2]).data
        v = embed_video(model, video[1:2, [2, 0, 3, 1]]).data
        np.testing.assert_allclose(u, v, atol=1e-10)

    def test_wrong_frame_count(self, model, video):
        with pytest.raises(ValueError):
            embed_video(model, video[:, :3])

    def test_text_embedding(self, model, tokenizer):
        a = embed_text(model, tokenizer.encode("a red circle spins slowly")).data
        b = embed_text(model, tokenizer.encode("a red circle spins slowly")).data
        np.testing.assert_allclose(np.linalg.norm(a), 1.0, atol=1e-9)
        np.testing.assert_array_equal(a, b)

    def test_text_cap(self, model):
        embed_text(model, [5] * 77)
        with pytest.raises(ValueError):
            embed_text(model, [5] * 78)

    def test_batched_encoders_match_single(self, model, video, tokenizer):
        texts = ["a red circle spins slowly", "a blue square moves up quickly"]
        np.testing.assert_allclose(encode_texts(model, texts, tokenizer, batch=1),
                                   encode_texts(model, texts, tokenizer), atol=1e-12)
        np.testing.assert_allclose(encode_gallery(model, video, batch=2), encode_gallery(model, video), atol=1e-12)

    def test_shares_nothing_with_captioner(self, model):
        vlm = VlmModel(VlmConfig(vocab_size=model.cfg.vocab_size), seed=0)
        ours = {id(p.data) for p in model.parameters()}
        assert not ours & {id(p.data) for p in vlm.parameters()}

    def test_temperature_positive(self, model):
        assert model.temperature == pytest.approx(0.07)
        model.log_scale.data[...] = -50.0
        assert model.temperature > 0


class TestInfoNce:
    def test_uniform_similarity_is_log_b(self):
        for b in (2, 5, 32):
            U = Tensor(np.tile([[1.0, 0.0]], (b, 1)))
            assert info_nce(U, U, math.log(1 / 0.07)).item() == pytest.approx(math.log(b), abs=1e-12)

    def test_hand_value(self):
        assert info_nce(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.0).item() == pytest.approx(math.log(1 + math.exp(-1)))
        assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=1e-4)

    def test_perfect_alignment_limit(self):
        assert info_nce(Tensor(np.eye(4)), Tensor(np.eye(4)), math.log(1e4)).item() < 1e-12

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            info_nce(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 0.0)

    def test_permutation_invariant(self, rng):
        U, V = _unit_rows(rng, 6, 4), _unit_rows(rng, 6, 4)
        perm = rng.permutation(6)
        a = info_nce(Tensor(U), Tensor(V), 1.3).item()
        assert info_nce(Tensor(U[perm]), Tensor(V[perm]), 1.3).item() == pytest.approx(a, abs=1e-12)

    def test_grad_check_on_embeddings_and_scale(self, rng):
        U, V, s = parameter(_unit_rows(rng, 4, 3)), parameter(_unit_rows(rng, 4, 3)), parameter(np.asarray(0.7))
        assert grad_check(lambda: info_nce(U, V, s), [U, V, s]) < 1e-4


class TestTraining:
    def test_caption_draws_are_uniform(self):
        counts = np.bincount([caption_choices(1, [4], e, 0)[0] for e in range(1000)], minlength=4)
        assert np.all(np.abs(counts - 250) <= 50)

    def test_missing_captions_name_the_clip(self, video, tokenizer, cfg):
        with pytest.raises(ValueError, match="clip00003"):
            train_dual(video[:4], [["a"], ["b"], ["c"], []], tokenizer, cfg, DualTrainConfig(epochs=1), 0,
                       clip_ids=[f"clip{i:05d}" for i in range(4)])

    def test_loss_falls_on_a_fixed_batch(self, video, tokenizer, cfg, small_world):
        caps = [W.captions_of(r, "ground-truth") for r in small_world.records[:6]]
        res = train_dual(video, caps, tokenizer, cfg, DualTrainConfig(epochs=15, batch_size=6), 0)
        assert res.loss_curve[-1] < 0.5 * res.loss_curve[0]

    def test_min_steps_extends_small_corpora(self, video, tokenizer, cfg, small_world):
        caps = [W.captions_of(r, "ground-truth") for r in small_world.records[:6]]
        res = train_dual(video, caps, tokenizer, cfg, DualTrainConfig(epochs=1, batch_size=3, min_steps=7), 0)
        assert res.steps == 8 and len(res.loss_curve) == 4

    def test_seeded_training_is_reproducible(self, video, tokenizer, cfg, small_world):
        caps = [W.captions_of(r, "ground-truth") for r in small_world.records[:6]]
        train = DualTrainConfig(epochs=2, batch_size=3)
        a = train_dual(video, caps, tokenizer, cfg, train, 1)
        b = train_dual(video, caps, tokenizer, cfg, train, 1)
        assert a.loss_curve == b.loss_curve
        for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_pe_identity_after_training(self, video, tokenizer, cfg, small_world):
        caps = [W.captions_of(r, "ground-truth") for r in small_world.records[:6]]
        m = train_dual(video, caps, tokenizer, cfg, DualTrainConfig(epochs=1, batch_size=3), 2).model
        pe = build_pe(m.video.pe_t, m.video.pe_s).data
        np.testing.assert_array_equal(pe[1, 7], m.video.pe_t.data[1] + m.video.pe_s.data[7])

    def test_temperature_is_trained(self, video, tokenizer, cfg, small_world):
        caps = [W.captions_of(r, "ground-truth") for r in small_world.records[:6]]
        m = train_dual(video, caps, tokenizer, cfg, DualTrainConfig(epochs=1, batch_size=3), 2).model
        assert m.temperature != pytest.approx(0.07, abs=1e-9)
