import json

import pytest

from unit_s2st.config import (
    ENV_DATA_DIR,
    RunConfig,
    default_toy_config,
    load_run_config,
    save_run_config,
)
from unit_s2st.errors import InvalidConfigError, MissingFileError


def write_config(tmp_path, mutate=None, name="run.json"):
    cfg = default_toy_config(out_dir=str(tmp_path / "out"))
    path = tmp_path / name
    save_run_config(cfg, path)
    if mutate:
        data = json.loads(path.read_text())
        mutate(data)
        path.write_text(json.dumps(data))
    return path


class TestLoading:
    def test_round_trip(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_run_config(path)
        assert cfg.units.k == 100
        assert cfg.corpus.n_speakers == 20
        assert cfg.u2m.fusion == "cross_attention"
        assert cfg.stages["s2ut"].steps == 2500

    def test_unknown_top_level_key_rejected_with_path(self, tmp_path):
        path = write_config(tmp_path, lambda d: d.update(bogus=1))
        with pytest.raises(InvalidConfigError, match="bogus"):
            load_run_config(path)

    def test_unknown_nested_key_rejected_with_path(self, tmp_path):
        def mutate(d):
            d["stages"]["pretrain_a"]["lrr"] = 0.1

        path = write_config(tmp_path, mutate)
        with pytest.raises(InvalidConfigError, match=r"stages\.pretrain_a\.lrr"):
            load_run_config(path)

    def test_unknown_stage_rejected(self, tmp_path):
        def mutate(d):
            d["stages"]["warmup_c"] = {}

        path = write_config(tmp_path, mutate)
        with pytest.raises(InvalidConfigError, match=r"stages\.warmup_c"):
            load_run_config(path)

    def test_tuples_coerced_from_json_lists(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_run_config(path)
        assert isinstance(cfg.corpus.vocab_src, tuple)
        assert isinstance(cfg.u2m.adapter.channels, tuple)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json_reports_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(InvalidConfigError):
            load_run_config(path)

    def test_stage_key_contradiction_rejected(self, tmp_path):
        def mutate(d):
            d["stages"]["pretrain_a"]["stage"] = "pretrain_b"

        path = write_config(tmp_path, mutate)
        with pytest.raises(InvalidConfigError):
            load_run_config(path)


class TestDefaults:
    def test_stage_config_fills_manifests_and_codebook(self, tmp_path):
        cfg = default_toy_config(out_dir=str(tmp_path / "out"))
        sc = cfg.stage_config("pretrain_a")
        assert sc.manifest.endswith("train_tgt_c.jsonl")
        assert sc.codebook.endswith("codebook.bin")
        s2ut = cfg.stage_config("s2ut")
        assert s2ut.src_manifest.endswith("train_src.jsonl")
        assert s2ut.tgt_manifest.endswith("train_tgt_c.jsonl")

    def test_finetune_defaults_point_at_both_checkpoints(self, tmp_path):
        cfg = default_toy_config(out_dir=str(tmp_path / "out"))
        sc = cfg.stage_config("finetune")
        assert len(sc.init_from) == 2
        assert sc.init_from[0].endswith("pretrain_a.ckpt")
        assert sc.init_from[1].endswith("pretrain_b.ckpt")
        assert sc.data_fraction == 0.25

    def test_env_var_sets_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_DATA_DIR, str(tmp_path / "shared_data"))
        cfg = RunConfig(out_dir=str(tmp_path / "out"))
        assert str(cfg.resolved_data_dir()) == str(tmp_path / "shared_data")

    def test_explicit_data_dir_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_DATA_DIR, str(tmp_path / "env"))
        cfg = RunConfig(out_dir=str(tmp_path / "out"), data_dir=str(tmp_path / "explicit"))
        assert str(cfg.resolved_data_dir()) == str(tmp_path / "explicit")

    def test_default_without_env_is_under_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.delenv(ENV_DATA_DIR, raising=False)
        cfg = RunConfig(out_dir=str(tmp_path / "out"))
        assert str(cfg.resolved_data_dir()) == str(tmp_path / "out" / "data")
