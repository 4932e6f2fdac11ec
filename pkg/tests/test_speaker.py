import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unit_s2st.audio import MelSpectrogram, mel_spectrogram
from unit_s2st.corpus import SpeakerParams, synthesize_symbol_speech
from unit_s2st.errors import InvalidConfigError, InvalidInputError
from unit_s2st.nnet import grad_check
from unit_s2st.speaker import (
    AdapterConfig,
    EmbeddingProjector,
    Ge2eConfig,
    Ge2eEncoder,
    SpeakerAdapter,
    SpeakerEmbedding,
    adapter_embed,
    cosine,
    equal_error_rate,
    ge2e_embed,
    ge2e_loss,
    load_embeddings,
    save_embeddings,
    train_ge2e,
)

TOY_ADAPTER = AdapterConfig(channels=(32, 32, 96), kernels=(5, 3, 1), dilations=(1, 2, 1),
                            groups=(1, 1, 1), attention_channels=16, embed_dim=24)


def toy_mel(f0=150.0, symbols=("ba", "de", "gi"), seed=0):
    w = synthesize_symbol_speech(list(symbols), SpeakerParams(f0_base=f0), seed=seed)
    return mel_spectrogram(w)


class TestAdapter:
    def test_embedding_dim_is_length_invariant(self):
        torch.manual_seed(0)
        adapter = SpeakerAdapter(TOY_ADAPTER).eval()
        for t in (50, 120):
            emb = adapter(torch.randn(t, 80))
            assert emb.shape == (24,)

    def test_eval_determinism(self):
        torch.manual_seed(1)
        adapter = SpeakerAdapter(TOY_ADAPTER).eval()
        x = torch.randn(60, 80)
        assert torch.equal(adapter(x), adapter(x))

    def test_too_short_input_reports_minimum(self):
        adapter = SpeakerAdapter(TOY_ADAPTER)
        with pytest.raises(InvalidInputError, match=str(TOY_ADAPTER.min_frames)):
            adapter(torch.randn(TOY_ADAPTER.min_frames - 1, 80))

    def test_wrapper_returns_embedding(self):
        torch.manual_seed(2)
        adapter = SpeakerAdapter(TOY_ADAPTER).eval()
        emb = adapter_embed(toy_mel(), adapter)
        assert isinstance(emb, SpeakerEmbedding)
        assert emb.source_tag == "adapter"
        assert emb.vector.shape == (24,)

    def test_default_config_matches_declared_architecture(self):
        cfg = AdapterConfig()
        assert cfg.channels == (1024, 1024, 1024, 1024, 3072)
        assert cfg.attention_channels == 128
        assert cfg.min_frames == 1 + 4 * 1 + 2 * 2 + 2 * 3 + 2 * 4 + 0

    def test_mismatched_config_lists_rejected(self):
        with pytest.raises(InvalidConfigError):
            AdapterConfig(channels=(8, 8), kernels=(3,), dilations=(1, 1), groups=(1, 1))

    @given(t=st.integers(min_value=30, max_value=200))
    @settings(max_examples=10, deadline=None)
    def test_random_lengths_all_give_same_dim(self, t):
        torch.manual_seed(3)
        adapter = SpeakerAdapter(TOY_ADAPTER).eval()
        assert adapter(torch.randn(t, 80)).shape == (24,)


class TestGe2eEncoder:
    def test_output_is_unit_norm(self):
        torch.manual_seed(4)
        enc = Ge2eEncoder(Ge2eConfig(hidden=32, embed=16, layers=2)).eval()
        with torch.no_grad():
            emb = enc(torch.randn(40, 80))
        assert abs(float(emb.norm()) - 1.0) <= 1e-6

    def test_eval_determinism(self):
        torch.manual_seed(5)
        enc = Ge2eEncoder(Ge2eConfig(hidden=32, embed=16, layers=2)).eval()
        x = torch.randn(30, 80)
        assert torch.equal(enc(x), enc(x))

    def test_wrapper_tag(self):
        torch.manual_seed(6)
        enc = Ge2eEncoder(Ge2eConfig(hidden=32, embed=16, layers=1)).eval()
        assert ge2e_embed(toy_mel(), enc).source_tag == "ge2e"


class TestGe2eLoss:
    def test_identical_embeddings_give_log_n(self):
        for n in (2, 4):
            embs = torch.ones(n, 3, 8) / math.sqrt(8)
            loss = ge2e_loss(embs, torch.tensor(1.0), torch.tensor(0.0))
            assert abs(float(loss) - math.log(n)) <= 1e-6

    def test_orthogonal_clusters_approach_zero(self):
        embs = torch.zeros(2, 3, 8)
        embs[0, :, 0] = 1.0
        embs[1, :, 1] = 1.0
        loss = ge2e_loss(embs, torch.tensor(30.0), torch.tensor(0.0))
        assert float(loss) <= 0.01

    def test_single_speaker_rejected(self):
        with pytest.raises(InvalidInputError):
            ge2e_loss(torch.ones(1, 3, 8), torch.tensor(1.0), torch.tensor(0.0))

    def test_gradient_check(self):
        torch.manual_seed(7)
        raw = torch.randn(2, 2, 5, dtype=torch.float64)
        w = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(-1.0, dtype=torch.float64, requires_grad=True)

        def fn(raw):
            embs = raw / raw.norm(dim=-1, keepdim=True)
            return ge2e_loss(embs, w, b)

        assert grad_check(fn, [raw], params=[w, b]) <= 1e-4

    def test_loss_decreases_on_separable_clusters(self):
        torch.manual_seed(8)
        base = torch.randn(3, 1, 6)
        raw = (base + 0.3 * torch.randn(3, 4, 6)).requires_grad_(True)
        w = torch.tensor(5.0)
        b = torch.tensor(0.0)
        losses = []
        for _ in range(10):
            embs = raw / raw.norm(dim=-1, keepdim=True)
            loss = ge2e_loss(embs, w, b)
            losses.append(float(loss))
            (grad,) = torch.autograd.grad(loss, raw)
            with torch.no_grad():
                raw -= 0.5 * grad
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestCosine:
    def test_trivial_values(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0])
        assert cosine(a, a) == pytest.approx(1.0)
        assert cosine(a, b) == pytest.approx(0.0)
        assert cosine(a, -a) == pytest.approx(-1.0)

    @given(seed=st.integers(0, 500), c=st.floats(min_value=0.1, max_value=100.0))
    @settings(max_examples=40, deadline=None)
    def test_symmetric_and_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert cosine(a, b) == pytest.approx(cosine(b, a))
        assert cosine(c * a, b) == pytest.approx(cosine(a, b), abs=1e-9)


class TestProjection:
    def test_zero_vector_maps_to_bias(self):
        torch.manual_seed(9)
        proj = EmbeddingProjector(embed_dim=24, hidden=512)
        out = proj(torch.zeros(24))
        assert torch.allclose(out, proj.proj.bias)
        assert out.shape == (512,)

    def test_linearity_about_bias(self):
        torch.manual_seed(10)
        proj = EmbeddingProjector(embed_dim=16, hidden=512)
        a, b = torch.randn(16), torch.randn(16)
        zero = proj(torch.zeros(16))
        lhs = proj(a + b) - zero
        rhs = (proj(a) - zero) + (proj(b) - zero)
        assert torch.allclose(lhs, rhs, atol=1e-5)

    def test_default_output_dim_is_512(self):
        assert EmbeddingProjector().proj.out_features == 512


class TestEer:
    def test_perfect_separation_is_zero(self):
        scores = np.array([0.9, 0.8, 0.1, 0.2])
        labels = np.array([1, 1, 0, 0])
        assert equal_error_rate(scores, labels) == 0.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=2000)
        labels = rng.integers(0, 2, size=2000)
        assert 0.4 <= equal_error_rate(scores, labels) <= 0.6


class TestTrainedGe2e:
    def test_eer_on_toy_speakers(self):
        # six synthetic voices, a dozen short utterances each
        speakers = {
            f"s{i}": SpeakerParams(f0_base=float(f0))
            for i, f0 in enumerate([105, 135, 170, 210, 260, 320])
        }
        mels = {
            sid: [toy_mel(sp.f0_base, seed=j).frames for j in range(12)]
            for sid, sp in speakers.items()
        }
        enc = Ge2eEncoder(Ge2eConfig(hidden=48, embed=24, layers=1))
        train_ge2e(enc, mels, steps=120, n_speakers=4, m_utts=3, crop_frames=30, seed=0)

        embs = {sid: [ge2e_embed(MelSpectrogram(frames=m), enc) for m in mel_list[:6]]
                for sid, mel_list in mels.items()}
        scores, labels = [], []
        sids = sorted(embs)
        for i, si in enumerate(sids):
            for j, sj in enumerate(sids):
                if j < i:
                    continue
                for a in range(3):
                    for b in range(3, 6):
                        scores.append(cosine(embs[si][a], embs[sj][b]))
                        labels.append(1 if si == sj else 0)
        assert equal_error_rate(np.array(scores), np.array(labels)) <= 0.15


class TestEmbeddingFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        data = {
            "utt1": SpeakerEmbedding(vector=rng.normal(size=8), source_tag="ge2e"),
            "utt2": SpeakerEmbedding(vector=rng.normal(size=8), source_tag="ge2e"),
        }
        path = tmp_path / "emb.txt"
        save_embeddings(path, data)
        back = load_embeddings(path)
        assert set(back) == {"utt1", "utt2"}
        assert np.allclose(back["utt1"].vector, data["utt1"].vector, atol=1e-7)
        assert back["utt1"].source_tag == "external"
