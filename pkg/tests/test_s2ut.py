import math

import numpy as np
import pytest
import torch

from unit_s2st.errors import InvalidConfigError, InvalidInputError
from unit_s2st.quantizer import UnitSequence
from unit_s2st.s2ut import (
    AcousticEncoder,
    CharVocab,
    S2UT,
    S2utConfig,
    label_smoothed_ce,
    s2ut_loss,
    save_hypotheses,
    smoothed_ce_floor,
    teacher_forced_accuracy,
    translate_units,
)

TOY = S2utConfig(
    codebook_size=12,
    encoder_blocks=1,
    decoder_blocks=2,
    hidden=16,
    heads=2,
    dropout=0.0,
    encoder_kernel=5,
    ffn_mult=2,
    input_dim=8,
    ctc_layer=1,
    ctc_weight=0.3,
)

VOCAB = CharVocab.from_transcripts([["ba", "de"], ["gi"]])


def toy_model(seed=0, cfg=TOY):
    torch.manual_seed(seed)
    return S2UT(cfg, char_vocab_size=len(VOCAB)).eval()


def toy_items(n=3, seed=0, t_src=20, t_units=(4, 9)):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        feats = rng.normal(size=(t_src, TOY.input_dim)).astype(np.float32)
        units = UnitSequence(
            units=rng.integers(0, TOY.codebook_size, size=int(rng.integers(*t_units))),
            codebook_size=TOY.codebook_size,
        )
        items.append((feats, units, ["ba", "de"]))
    return items


class TestConfig:
    def test_vocab_layout(self):
        cfg = S2utConfig()
        assert cfg.unit_vocab == 103
        assert (cfg.pad_id, cfg.bos_id, cfg.eos_id) == (100, 101, 102)

    def test_ctc_layer_must_be_within_decoder(self):
        with pytest.raises(InvalidConfigError):
            S2utConfig(decoder_blocks=2, ctc_layer=3)


class TestAcousticEncoder:
    def test_subsample_1_preserves_length(self):
        torch.manual_seed(1)
        enc = AcousticEncoder(TOY).eval()
        assert enc(torch.randn(33, 8)).shape == (33, 16)

    @pytest.mark.parametrize("t", [10, 11, 1])
    def test_subsample_2_halves_with_ceil(self, t):
        torch.manual_seed(2)
        cfg = S2utConfig(**{**TOY.__dict__, "subsample": 2})
        enc = AcousticEncoder(cfg).eval()
        assert enc(torch.randn(t, 8)).shape == (math.ceil(t / 2), 16)

    def test_external_feature_dim_projection(self):
        torch.manual_seed(3)
        cfg = S2utConfig(**{**TOY.__dict__, "input_dim": 24})
        enc = AcousticEncoder(cfg).eval()
        assert enc(torch.randn(15, 24)).shape == (15, 16)

    def test_wrong_dim_rejected(self):
        enc = AcousticEncoder(TOY)
        with pytest.raises(InvalidInputError):
            enc(torch.randn(10, 9))


class TestSmoothedCE:
    def test_floor_reached_by_smoothed_distribution(self):
        vocab, eps, gold = 103, 0.1, 5
        q = np.full(vocab, eps / vocab)
        q[gold] += 1.0 - eps
        logits = torch.log(torch.as_tensor(q)).expand(4, vocab)
        targets = torch.full((4,), gold, dtype=torch.long)
        ce = float(label_smoothed_ce(logits, targets, eps))
        floor_oracle = float(-(q * np.log(q)).sum())
        assert ce == pytest.approx(floor_oracle, abs=1e-9)
        assert smoothed_ce_floor(vocab, eps) == pytest.approx(floor_oracle, abs=1e-12)

    def test_pad_positions_are_masked(self):
        torch.manual_seed(4)
        logits = torch.randn(6, 10)
        targets = torch.tensor([1, 2, 9, 9, 3, 9])  # 9 = pad
        base = float(label_smoothed_ce(logits, targets, 0.1, pad_id=9))
        noisy = logits.clone()
        noisy[targets == 9] += torch.randn(3, 10) * 100
        perturbed = float(label_smoothed_ce(noisy, targets, 0.1, pad_id=9))
        assert abs(base - perturbed) <= 1e-7

    def test_all_pad_rejected(self):
        with pytest.raises(InvalidInputError):
            label_smoothed_ce(torch.randn(2, 5), torch.tensor([4, 4]), 0.1, pad_id=4)


class TestLoss:
    def test_zero_ctc_weight_makes_total_equal_ce(self):
        model = toy_model(cfg=S2utConfig(**{**TOY.__dict__, "ctc_weight": 0.0}))
        ce, ctc, total = s2ut_loss(model, toy_items(), VOCAB)
        assert torch.equal(total, ce)
        assert float(ctc.detach()) > 0

    def test_total_combines_ce_and_ctc(self):
        model = toy_model()
        with torch.no_grad():
            ce, ctc, total = s2ut_loss(model, toy_items(), VOCAB)
        assert float(total) == pytest.approx(float(ce) + 0.3 * float(ctc), rel=1e-6)

    def test_unknown_transcript_chars_listed(self):
        model = toy_model()
        items = [(np.zeros((20, 8), dtype=np.float32),
                  UnitSequence(units=np.array([1, 2]), codebook_size=12), ["zz"])]
        with pytest.raises(InvalidInputError, match="z"):
            s2ut_loss(model, items, VOCAB)

    def test_loss_decreases_on_memorization_set(self):
        torch.manual_seed(5)
        model = S2UT(TOY, char_vocab_size=len(VOCAB))
        items = toy_items(n=10, seed=1)
        opt = torch.optim.Adam(model.parameters(), lr=3e-3)
        first = None
        last = None
        for _ in range(50):
            _, _, total = s2ut_loss(model, items, VOCAB)
            opt.zero_grad()
            total.backward()
            opt.step()
            first = float(total.detach()) if first is None else first
            last = float(total.detach())
        assert last < first


class TestDecoding:
    def test_beam_one_equals_greedy(self):
        model = toy_model(seed=6)
        feats = np.random.default_rng(0).normal(size=(18, 8)).astype(np.float32)
        greedy = translate_units(feats, model, mode="greedy", max_len=20)
        beam1 = translate_units(feats, model, mode="beam", beam_width=1, max_len=20)
        assert np.array_equal(greedy.units.units, beam1.units.units)
        assert greedy.score == pytest.approx(beam1.score)

    def test_rigged_eos_decoder_gives_empty_hypothesis(self):
        model = toy_model(seed=7)
        with torch.no_grad():
            model.decoder.out.bias[model.cfg.eos_id] = 100.0
        hyp = translate_units(np.zeros((10, 8), dtype=np.float32), model)
        assert len(hyp.units) == 0
        assert not hyp.truncated

    def test_max_len_without_eos_sets_truncated(self):
        model = toy_model(seed=8)
        with torch.no_grad():
            model.decoder.out.bias[3] = 100.0
        hyp = translate_units(np.zeros((10, 8), dtype=np.float32), model, max_len=7)
        assert hyp.truncated
        assert hyp.units.units.tolist() == [3] * 7

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_beam_score_not_below_greedy(self, seed):
        model = toy_model(seed=seed)
        feats = np.random.default_rng(seed).normal(size=(15, 8)).astype(np.float32)
        greedy = translate_units(feats, model, mode="greedy", max_len=15)
        beam = translate_units(feats, model, mode="beam", beam_width=4, max_len=15)
        assert beam.score >= greedy.score - 1e-9

    def test_specials_never_leak(self):
        for seed in range(4):
            model = toy_model(seed=seed)
            feats = np.random.default_rng(seed).normal(size=(12, 8)).astype(np.float32)
            hyp = translate_units(feats, model, max_len=12)
            assert all(0 <= u < 12 for u in hyp.units.units)

    def test_teacher_forced_accuracy_bounds(self):
        model = toy_model(seed=9)
        acc = teacher_forced_accuracy(model, toy_items(n=2, seed=2))
        assert 0.0 <= acc <= 1.0


class TestCharVocab:
    def test_blank_first_and_round_trip(self, tmp_path):
        VOCAB.save(tmp_path / "chars.txt")
        back = CharVocab.load(tmp_path / "chars.txt")
        assert back.symbols[0] == CharVocab.BLANK
        assert back.symbols == VOCAB.symbols

    def test_encode_includes_token_separator(self):
        ids = VOCAB.encode(["ba", "de"])
        text = "ba de"
        assert len(ids) == len(text)
        assert all(i != 0 for i in ids)

    def test_unknown_char_rejected(self):
        with pytest.raises(InvalidInputError):
            VOCAB.encode(["qq"])


def test_hypothesis_dump_format(tmp_path):
    hyp = {
        "utt1": __import__("unit_s2st.s2ut", fromlist=["TranslationHypothesis"]).TranslationHypothesis(
            units=UnitSequence(units=np.array([3, 1, 4]), codebook_size=12), score=-0.25
        )
    }
    path = tmp_path / "hyps.tsv"
    save_hypotheses(path, hyp)
    line = path.read_text().strip()
    utt_id, score, units = line.split("\t")
    assert utt_id == "utt1" and float(score) == pytest.approx(-0.25)
    assert units == "3 1 4"
