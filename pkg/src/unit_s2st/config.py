"""Run configuration: one JSON tree wiring corpus, models, stages and eval.

Parsing is strict: any key that does not correspond to a dataclass field is
rejected with its full dotted path, so typos never silently fall back to
defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .audio import MelConfig
from .corpus import ToyCorpusSpec
from .errors import InvalidConfigError, MissingFileError
from .s2ut import S2utConfig
from .trainer import STAGES, StageConfig
from .u2m import U2mConfig

ENV_DATA_DIR = "SCS2UT_DATA_DIR"


@dataclass(frozen=True)
class UnitsConfig:
    k: int = 100
    seed: int = 0
    max_frames: int = 50000


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    n_pairs: int = 0  # 0 = every pair in the split
    max_len: int = 400
    min_run: int = 2  # transition-frame filter for toy transcription
    warmup: int = 3
    similarity_pairs: int = 50
    griffin_lim_iters: int = 30


def _coerce(value, target_type, path: str):
    origin = typing.get_origin(target_type)
    if dataclasses.is_dataclass(target_type) and isinstance(value, dict):
        return build_dataclass(target_type, value, path)
    if origin is tuple and isinstance(value, list):
        args = typing.get_args(target_type)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) == len(value):
            return tuple(_coerce(v, t, f"{path}[{i}]")
                         for i, (v, t) in enumerate(zip(value, args)))
        return tuple(value)
    if origin is typing.Union:
        for arg in typing.get_args(target_type):
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except (TypeError, ValueError):
                continue
        return value
    return value


def build_dataclass(cls, data: dict, path: str = ""):
    """Strictly construct a dataclass from a plain dict tree."""
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise InvalidConfigError(f"unknown config key {path + '.' if path else ''}{key}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints.get(key, type(value)),
                              f"{path + '.' if path else ''}{key}")
    return cls(**kwargs)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    data_dir: str = ""  # empty: $SCS2UT_DATA_DIR, else <out_dir>/data
    corpus: ToyCorpusSpec = field(default_factory=ToyCorpusSpec)
    mel: MelConfig = field(default_factory=MelConfig)
    units: UnitsConfig = field(default_factory=UnitsConfig)
    u2m: U2mConfig = field(default_factory=U2mConfig)
    s2ut: S2utConfig = field(default_factory=S2utConfig)
    stages: dict = field(default_factory=dict)  # stage name -> StageConfig
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved_data_dir(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        env = os.environ.get(ENV_DATA_DIR, "")
        if env:
            return Path(env)
        return Path(self.out_dir) / "data"

    def manifest_path(self, name: str) -> Path:
        return self.resolved_data_dir() / "manifests" / f"{name}.jsonl"

    def codebook_path(self) -> Path:
        return Path(self.out_dir) / "units" / "codebook.bin"

    def checkpoint_path(self, stage: str) -> Path:
        return Path(self.out_dir) / "checkpoints" / f"{stage}.ckpt"

    def stage_config(self, stage: str) -> StageConfig:
        """The stage's config with manifest/codebook defaults filled in."""
        if stage not in STAGES:
            raise InvalidConfigError(f"unknown stage {stage!r}")
        cfg = self.stages.get(stage)
        if cfg is None:
            cfg = StageConfig(stage=stage)
        defaults = {
            "pretrain_a": {"manifest": str(self.manifest_path("train_tgt_c"))},
            "pretrain_b": {"manifest": str(self.manifest_path("train_src"))},
            "finetune": {"manifest": str(self.manifest_path("train_tgt_t"))},
            "s2ut": {
                "src_manifest": str(self.manifest_path("train_src")),
                "tgt_manifest": str(self.manifest_path("train_tgt_c")),
                "dev_src_manifest": str(self.manifest_path("dev_src")),
                "dev_tgt_manifest": str(self.manifest_path("dev_tgt_c")),
            },
        }[stage]
        updates = {}
        for key, value in defaults.items():
            if not getattr(cfg, key):
                updates[key] = value
        if stage == "finetune" and not cfg.init_from:
            updates["init_from"] = (str(self.checkpoint_path("pretrain_a")),
                                    str(self.checkpoint_path("pretrain_b")))
        if not cfg.codebook:
            updates["codebook"] = str(self.codebook_path())
        if updates:
            cfg = dataclasses.replace(cfg, **updates)
        return cfg


def _build_stages(data: dict, path: str) -> dict:
    stages = {}
    for name, body in data.items():
        if name not in STAGES:
            raise InvalidConfigError(f"unknown config key {path}.{name}")
        if not isinstance(body, dict):
            raise InvalidConfigError(f"{path}.{name}: expected an object")
        if "stage" in body and body["stage"] != name:
            raise InvalidConfigError(
                f"{path}.{name}.stage contradicts its key ({body['stage']!r})"
            )
        body = {**body, "stage": name}
        stages[name] = build_dataclass(StageConfig, body, f"{path}.{name}")
    return stages


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be an object")
    stages_raw = data.pop("stages", {})
    cfg = build_dataclass(RunConfig, data)
    cfg.stages = _build_stages(stages_raw, "stages")
    return cfg


def default_toy_config(out_dir: str = "runs/toy", seed: int = 0) -> RunConfig:
    """Desk-scale defaults: a compact model that trains on CPU in minutes.

    The table-default model sizes (hidden 512, six blocks per stack) remain
    the dataclass defaults; this profile shrinks widths/depths for the toy
    corpus while keeping every architectural element in place.
    """
    from .speaker import AdapterConfig

    adapter = AdapterConfig(channels=(64, 64, 64, 64, 192), kernels=(5, 3, 3, 3, 1),
                            dilations=(1, 2, 3, 4, 1), groups=(1, 1, 1, 1, 1),
                            attention_channels=24, embed_dim=48)
    u2m = U2mConfig(codebook_size=100, encoder_blocks=2, decoder_blocks=2, hidden=96,
                    heads=4, encoder_kernel=15, dropout=0.1, ffn_mult=2, n_mels=80,
                    fusion="cross_attention", adapter=adapter)
    s2ut = S2utConfig(codebook_size=100, encoder_blocks=2, decoder_blocks=2, hidden=96,
                      heads=4, dropout=0.1, encoder_kernel=15, ffn_mult=2, input_dim=80,
                      subsample=2, ctc_layer=1, ctc_weight=0.3)
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        corpus=ToyCorpusSpec(n_speakers=20, n_pairs=600, dev_pairs=40, test_pairs=40,
                             symbols_per_utt=(4, 7), seed=seed),
        mel=MelConfig(win=512),
        units=UnitsConfig(k=100, seed=seed),
        u2m=u2m,
        s2ut=s2ut,
        stages={
            "pretrain_a": StageConfig(stage="pretrain_a", steps=800, batch_size=8,
                                      lr=1e-3, warmup=200, seed=seed),
            "pretrain_b": StageConfig(stage="pretrain_b", steps=800, batch_size=8,
                                      lr=1e-3, warmup=200, seed=seed),
            "finetune": StageConfig(stage="finetune", steps=400, batch_size=8, lr=5e-4,
                                    warmup=100, seed=seed, data_fraction=0.25),
            "s2ut": StageConfig(stage="s2ut", steps=2500, batch_size=12, lr=2e-3,
                                warmup=300, seed=seed, eval_every=500),
        },
        eval=EvalConfig(),
    )


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dataclasses.asdict(cfg)
    data["stages"] = {name: dataclasses.asdict(sc) for name, sc in cfg.stages.items()}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
