import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unit_s2st.audio import Waveform, f0_autocorr, read_wav
from unit_s2st.corpus import (
    REFERENCE_SPEAKER_ID,
    ParallelPair,
    SpeakerParams,
    ToyCorpusSpec,
    Utterance,
    generate_toy_corpus,
    load_manifest,
    load_pairs,
    save_manifest,
    split_halves,
    synthesize_symbol_speech,
)
from unit_s2st.errors import InvalidConfigError, InvalidInputError, ManifestError, SkipUtterance


def small_spec(**kw):
    defaults = dict(n_speakers=3, n_pairs=10, dev_pairs=2, test_pairs=2, seed=7,
                    symbols_per_utt=(3, 5), symbol_dur=(0.08, 0.12))
    defaults.update(kw)
    return ToyCorpusSpec(**defaults)


class TestSynthesis:
    def test_empty_symbols_rejected(self):
        with pytest.raises(InvalidInputError):
            synthesize_symbol_speech([], SpeakerParams(f0_base=150.0), seed=0)

    def test_unknown_symbol_rejected(self):
        with pytest.raises(InvalidInputError):
            synthesize_symbol_speech(["xx"], SpeakerParams(f0_base=150.0), seed=0,
                                     vocab=("ba", "de"))

    def test_determinism(self):
        sp = SpeakerParams(f0_base=150.0)
        a = synthesize_symbol_speech(["ba", "de"], sp, seed=3)
        b = synthesize_symbol_speech(["ba", "de"], sp, seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_octave_speakers_measured_factor_two(self):
        lo = SpeakerParams(f0_base=110.0)
        hi = SpeakerParams(f0_base=220.0)
        syms = ["ba", "de", "gi", "ko", "lu", "me"]
        w_lo = synthesize_symbol_speech(syms, lo, seed=5)
        w_hi = synthesize_symbol_speech(syms, hi, seed=5)
        m_lo = float(np.nanmedian(f0_autocorr(w_lo)))
        m_hi = float(np.nanmedian(f0_autocorr(w_hi)))
        assert abs(m_hi / m_lo - 2.0) <= 0.1

    def test_samples_stay_in_range(self):
        w = synthesize_symbol_speech(["ta", "vo"], SpeakerParams(f0_base=300.0), seed=1)
        assert np.max(np.abs(w.samples)) <= 1.0


class TestSpeakerParams:
    def test_f0_out_of_range_rejected(self):
        with pytest.raises(InvalidConfigError):
            SpeakerParams(f0_base=50.0)

    def test_non_increasing_formants_rejected(self):
        with pytest.raises(InvalidConfigError):
            SpeakerParams(f0_base=150.0, formants=(1200.0, 700.0, 2600.0))


class TestSplitHalves:
    def test_even_split(self):
        w = Waveform(samples=np.arange(16000) / 16000.0)
        a, b = split_halves(w)
        assert len(a.samples) == 8000 and len(b.samples) == 8000

    def test_odd_length_uses_floor(self):
        w = Waveform(samples=np.arange(16001) / 16001.0)
        a, b = split_halves(w)
        assert len(a.samples) == 8000 and len(b.samples) == 8001

    def test_too_short_signals_skip(self):
        with pytest.raises(SkipUtterance):
            split_halves(Waveform(samples=np.zeros(8000)), min_seconds=1.0)

    @given(n=st.integers(min_value=16000, max_value=50000))
    @settings(max_examples=30, deadline=None)
    def test_concatenation_identity(self, n):
        rng = np.random.default_rng(n)
        x = rng.uniform(-1, 1, size=n)
        a, b = split_halves(Waveform(samples=x))
        assert np.array_equal(np.concatenate([a.samples, b.samples]), x)


class TestManifest:
    def rows(self):
        return [
            Utterance(id=f"u{i}", wav_path=f"/tmp/u{i}.wav", rate=16000, speaker_id="spk00",
                      transcript=["ba", "de"], language="src", pair_id=f"p{i}")
            for i in range(3)
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rows = self.rows()
        save_manifest(rows, path)
        assert load_manifest(path) == rows

    def test_unknown_fields_preserved(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rows = self.rows()
        rows[1].extras["note"] = "keep me"
        save_manifest(rows, path)
        back = load_manifest(path)
        assert back[1].extras == {"note": "keep me"}
        save_manifest(back, tmp_path / "m2.jsonl")
        assert json.loads((tmp_path / "m2.jsonl").read_text().splitlines()[1])["note"] == "keep me"

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = self.rows()[0].to_row()
        bad = dict(good)
        bad.pop("wav_path")
        bad["id"] = "u9"
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert err.value.line_no == 2

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert err.value.line_no == 1

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        row = self.rows()[0].to_row()
        path.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_empty_file_is_empty_sequence(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert load_manifest(path) == []

    def test_pair_requires_distinct_languages(self):
        u = self.rows()[0]
        with pytest.raises(InvalidInputError):
            ParallelPair(source=u, target=u, pair_id="p0")


class TestToyCorpus:
    def test_too_few_speakers_rejected(self):
        with pytest.raises(InvalidConfigError):
            ToyCorpusSpec(n_speakers=1)

    def test_mapping_must_be_bijection(self):
        with pytest.raises(InvalidConfigError):
            ToyCorpusSpec(vocab_src=("a", "b"), vocab_tgt=("x", "y"),
                          mapping={"a": "x", "b": "x"})

    def test_row_counts_and_disjoint_ids(self, tmp_path):
        manifests = generate_toy_corpus(small_spec(), tmp_path)
        ids = set()
        for key in ("train_src", "train_tgt_c", "train_tgt_t"):
            rows = load_manifest(manifests[key])
            assert len(rows) == 10
            ids.update(r.id for r in rows)
        assert len(ids) == 30

    def test_c_style_targets_use_reference_speaker(self, tmp_path):
        manifests = generate_toy_corpus(small_spec(), tmp_path)
        for row in load_manifest(manifests["train_tgt_c"]):
            assert row.speaker_id == REFERENCE_SPEAKER_ID

    def test_t_style_targets_share_source_speaker(self, tmp_path):
        manifests = generate_toy_corpus(small_spec(), tmp_path)
        pairs = load_pairs(manifests["train_src"], manifests["train_tgt_t"])
        assert len(pairs) == 10
        for p in pairs:
            assert p.source.speaker_id == p.target.speaker_id

    def test_target_transcript_is_mapped_source(self, tmp_path):
        spec = small_spec()
        manifests = generate_toy_corpus(spec, tmp_path)
        mapping = spec.resolved_mapping()
        for p in load_pairs(manifests["train_src"], manifests["train_tgt_c"]):
            assert p.target.transcript == [mapping[s] for s in p.source.transcript]

    def test_generation_is_reproducible(self, tmp_path):
        spec = small_spec(n_pairs=4, dev_pairs=1, test_pairs=1)
        m1 = generate_toy_corpus(spec, tmp_path / "a")
        m2 = generate_toy_corpus(spec, tmp_path / "b")
        text1 = (tmp_path / "a" / "manifests" / "train_src.jsonl").read_text()
        text2 = (tmp_path / "b" / "manifests" / "train_src.jsonl").read_text()
        assert text1.replace(str(tmp_path / "a"), "") == text2.replace(str(tmp_path / "b"), "")
        for r1, r2 in zip(load_manifest(m1["dev_src"]), load_manifest(m2["dev_src"])):
            assert np.array_equal(read_wav(r1.wav_path).samples, read_wav(r2.wav_path).samples)

    def test_wav_tree_layout(self, tmp_path):
        manifests = generate_toy_corpus(small_spec(n_pairs=2, dev_pairs=1, test_pairs=1), tmp_path)
        row = load_manifest(manifests["test_src"])[0]
        assert row.wav_path.endswith(f"corpus/test/{row.id}.wav")
        assert read_wav(row.wav_path).rate == 16000
