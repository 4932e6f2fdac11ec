"""Command-line entry point wiring the pipeline into reproducible runs.

Exit codes: 0 success, 2 bad configuration or usage, 3 missing file,
1 any other runtime failure. Failures print one machine-parsable line to
stderr: `[<category>] <message>`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .audio import (
    MelConfig,
    MelSpectrogram,
    Waveform,
    f0_autocorr,
    griffin_lim,
    mel_spectrogram,
    read_mel,
    read_wav,
    write_mel,
    write_wav,
)
from .config import EvalConfig, RunConfig, default_toy_config, load_run_config, save_run_config
from .corpus import generate_toy_corpus, load_manifest, load_pairs
from .errors import InvalidConfigError, InvalidInputError, MissingFileError
from .evalsuite import (
    EvalReport,
    bleu,
    calibrate_unit_to_symbol,
    measure_efficiency,
    speaker_similarity,
    transcribe_toy,
)
from .quantizer import encode, load_codebook, save_codebook, save_units
from .s2ut import save_hypotheses, translate_units
from .speaker import SpeakerEmbedding, adapter_embed
from .trainer import (
    fit_codebook,
    finetune,
    load_checkpoint,
    pretrain_a,
    pretrain_b,
    restore_s2ut,
    restore_sru2m,
    train_s2ut,
)
from .u2m import sr_u2m_forward


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def cmd_init_config(args) -> int:
    cfg = default_toy_config(out_dir=args.out_dir or "runs/toy",
                             seed=args.seed if args.seed is not None else 0)
    save_run_config(cfg, args.config)
    print(f"wrote {args.config}")
    return 0


def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    data_dir = cfg.resolved_data_dir()
    manifests = generate_toy_corpus(cfg.corpus, data_dir)
    for key in sorted(manifests):
        print(f"{key}: {manifests[key]}")
    return 0


def cmd_fit_units(args) -> int:
    if args.config:
        cfg = _load_config(args)
        mel_cfg, out_dir = cfg.mel, Path(cfg.out_dir)
        k = args.k if args.k is not None else cfg.units.k
        seed = cfg.units.seed
        max_frames = cfg.units.max_frames
    else:
        mel_cfg, out_dir = MelConfig(), Path(args.out_dir or "runs/units")
        k = args.k if args.k is not None else 100
        seed = args.seed if args.seed is not None else 0
        max_frames = 50000
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise MissingFileError(str(manifest))
    codebook = fit_codebook(manifest, mel_cfg, k=k, seed=seed, max_frames=max_frames)
    cb_path = out_dir / "units" / "codebook.bin"
    save_codebook(cb_path, codebook)
    units = {}
    for row in load_manifest(manifest, require_audio=True):
        units[row.id] = encode(mel_spectrogram(read_wav(row.wav_path), mel_cfg), codebook)
    units_path = out_dir / "units" / f"{manifest.stem}.units"
    save_units(units_path, units)
    print(f"codebook: {cb_path}")
    print(f"units: {units_path}")
    return 0


def _run_stage(args, stage: str) -> int:
    cfg = _load_config(args)
    stage_cfg = cfg.stage_config(stage)
    if args.seed is not None:
        stage_cfg = dataclasses.replace(stage_cfg, seed=args.seed)
    out_dir = Path(cfg.out_dir) / "checkpoints"
    if stage == "pretrain_a":
        _, log = pretrain_a(stage_cfg, cfg.u2m, cfg.mel, out_dir=out_dir)
    elif stage == "pretrain_b":
        _, log = pretrain_b(stage_cfg, cfg.u2m, cfg.mel, out_dir=out_dir)
    elif stage == "finetune":
        _, log = finetune(stage_cfg, cfg.u2m, cfg.mel, out_dir=out_dir)
    else:
        _, log = train_s2ut(stage_cfg, cfg.s2ut, cfg.mel, out_dir=out_dir)
    print(f"{stage}: final loss {log[-1]['loss']:.4f} after {stage_cfg.steps} steps")
    print(f"checkpoint: {out_dir / (stage + '.ckpt')}")
    return 0


class TranslationPipeline:
    """Full inference path: source wav -> units -> mel -> waveform."""

    def __init__(self, cfg: RunConfig, max_len: int | None = None,
                 griffin_lim_iters: int | None = None):
        self.cfg = cfg
        self.mel_cfg = cfg.mel
        self.codebook = load_codebook(cfg.codebook_path())
        s2ut_ckpt = load_checkpoint(cfg.checkpoint_path("s2ut"))
        self.s2ut_model, self.char_vocab = restore_s2ut(s2ut_ckpt, cfg.s2ut)
        u2m_ckpt = load_checkpoint(cfg.checkpoint_path("finetune"))
        self.u2m_model = restore_sru2m(u2m_ckpt, cfg.u2m)
        self.max_len = max_len or cfg.eval.max_len
        self.gl_iters = griffin_lim_iters or cfg.eval.griffin_lim_iters

    def __call__(self, source: Waveform):
        src_mel = mel_spectrogram(source, self.mel_cfg)
        hyp = translate_units(src_mel.frames.astype(np.float32), self.s2ut_model,
                              max_len=self.max_len)
        if len(hyp.units) == 0:
            return {"hypothesis": hyp, "mel": None, "waveform": None, "n_tokens": 0}
        mel = sr_u2m_forward(hyp.units, source, self.u2m_model, self.mel_cfg)
        wav = griffin_lim(mel, self.mel_cfg, iters=self.gl_iters, rate=source.rate)
        return {"hypothesis": hyp, "mel": mel, "waveform": wav,
                "n_tokens": len(hyp.units)}


def cmd_translate(args) -> int:
    cfg = _load_config(args)
    source = read_wav(args.infile)
    pipeline = TranslationPipeline(cfg)
    result = pipeline(source)
    out = Path(args.outfile)
    hyp = result["hypothesis"]
    save_hypotheses(out.with_suffix(".units"), {out.stem: hyp})
    if result["waveform"] is None:
        print("empty translation; no audio written")
        return 0
    write_mel(out.with_suffix(".mel"), result["mel"])
    write_wav(out, result["waveform"])
    print(f"wrote {out} ({len(hyp.units)} units, score {hyp.score:.3f})")
    return 0


def _toy_unit_symbol_map(cfg: RunConfig, codebook, max_rows: int = 500) -> dict[int, str]:
    """Majority-vote calibration on the C-style training split, cached."""
    cache = Path(cfg.out_dir) / "eval" / "unit_symbol_map.json"
    if cache.exists():
        raw = json.loads(cache.read_text(encoding="utf-8"))
        return {int(k): v for k, v in raw.items()}
    rows = load_manifest(cfg.manifest_path("train_tgt_c"), require_audio=True)[:max_rows]
    examples = []
    for row in rows:
        units = encode(mel_spectrogram(read_wav(row.wav_path), cfg.mel), codebook)
        spans = row.extras.get("symbol_spans")
        if spans is None:
            raise InvalidInputError(
                f"{row.id}: manifest lacks symbol_spans; cannot calibrate toy transcription"
            )
        examples.append((units, list(row.transcript), spans))
    mapping = calibrate_unit_to_symbol(examples, hop=cfg.mel.hop)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(json.dumps({str(k): v for k, v in mapping.items()}, sort_keys=True),
                     encoding="utf-8")
    return mapping


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    ev: EvalConfig = cfg.eval
    pipeline = TranslationPipeline(cfg)
    mapping = _toy_unit_symbol_map(cfg, pipeline.codebook)

    pairs = load_pairs(cfg.manifest_path(f"{ev.split}_src"),
                       cfg.manifest_path(f"{ev.split}_tgt_c"))
    if ev.n_pairs:
        pairs = pairs[: ev.n_pairs]
    hyps, refs = [], []
    src_wavs, gen_wavs = [], []
    for pair in pairs:
        source = read_wav(pair.source.wav_path)
        result = pipeline(source)
        tokens = (transcribe_toy(result["hypothesis"].units, mapping, min_run=ev.min_run)
                  if result["n_tokens"] else [])
        hyps.append(tokens)
        refs.append(list(pair.target.transcript))
        if result["waveform"] is not None and len(src_wavs) < ev.similarity_pairs:
            src_wavs.append(source)
            gen_wavs.append(result["waveform"])

    report = EvalReport(bleu_report=bleu(hyps, refs))

    adapter = pipeline.u2m_model.speaker_adapter

    def embedder(w: Waveform) -> SpeakerEmbedding:
        return adapter_embed(mel_spectrogram(w, cfg.mel), adapter)

    if src_wavs:
        mean, per_pair = speaker_similarity(src_wavs, gen_wavs, embedder)
        report.similarity_mean = mean
        report.similarity_pairs = per_pair

    bench_utts = [read_wav(p.source.wav_path) for p in pairs[: ev.warmup + 5]]
    if len(bench_utts) > ev.warmup:
        report.efficiency = measure_efficiency(pipeline, bench_utts, warmup=ev.warmup)

    text_path, records_path = report.save(Path(cfg.out_dir) / "eval")
    for line in report.summary_lines():
        print(line)
    print(f"report: {text_path}")
    print(f"records: {records_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    pipeline = TranslationPipeline(cfg)
    rows = load_manifest(cfg.manifest_path(f"{cfg.eval.split}_src"), require_audio=True)
    runs = args.runs if args.runs is not None else 20
    warmup = args.warmup if args.warmup is not None else cfg.eval.warmup
    wavs = [read_wav(r.wav_path) for r in rows[: warmup + runs]]
    report = measure_efficiency(pipeline, wavs, warmup=warmup)
    print(f"{report.mean_inference_seconds:.4f} s/utt  rtf {report.rtf:.4f}  "
          f"{report.tokens_per_sec:.2f} tokens/s  over {report.n_utts} utterances")
    out = EvalReport(efficiency=report)
    out.save(Path(cfg.out_dir) / "eval", name="bench")
    return 0


def cmd_plot_mel(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.infile)
    if not path.exists():
        raise MissingFileError(str(path))
    mel_cfg = MelConfig()
    f0 = None
    if path.suffix.lower() == ".wav":
        wav = read_wav(path)
        mel = mel_spectrogram(wav, mel_cfg)
        if args.f0:
            f0 = f0_autocorr(wav)
    else:
        mel = read_mel(path)
        if args.f0:
            raise InvalidConfigError("--f0 requires a waveform input, not a mel file")

    fig, ax = plt.subplots(figsize=(10, 4))
    im = ax.imshow(mel.frames.T, origin="lower", aspect="auto", cmap="magma",
                   extent=[0, mel.n_frames * mel.hop_seconds, 0, mel.n_mels])
    ax.set_xlabel("seconds")
    ax.set_ylabel("mel band")
    fig.colorbar(im, ax=ax, label="log amplitude")
    if f0 is not None:
        ax2 = ax.twinx()
        t = np.arange(len(f0)) * mel.hop_seconds
        ax2.plot(t, f0, color="red", linewidth=1.5)
        ax2.set_ylabel("F0 (Hz)", color="red")
        ax2.set_ylim(0, 450)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unit-s2st",
        description="Speaker-preserving speech-to-speech translation via discrete units",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_positional=True):
        if config_positional:
            p.add_argument("config", help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=None, help="override output directory")

    p = sub.add_parser("init-config", help="write a desk-scale default config")
    p.add_argument("config", help="path to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_init_config)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus + manifests")
    add_common(p)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("fit-units", help="fit the k-means codebook and encode units")
    p.add_argument("manifest", help="utterance manifest to fit on")
    p.add_argument("--k", type=int, default=None, help="codebook size (default 100)")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_fit_units)

    for stage, name in (("pretrain_a", "pretrain-a"), ("pretrain_b", "pretrain-b"),
                        ("finetune", "finetune"), ("s2ut", "train-s2ut")):
        p = sub.add_parser(name, help=f"run the {name} stage")
        add_common(p)
        p.set_defaults(fn=lambda args, stage=stage: _run_stage(args, stage))

    p = sub.add_parser("translate", help="translate one waveform, preserving its speaker")
    add_common(p)
    p.add_argument("--in", dest="infile", required=True, help="source wav")
    p.add_argument("--out", dest="outfile", required=True, help="output wav")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="run the metric suite on a split")
    add_common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench", help="efficiency measurement only")
    add_common(p)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--runs", type=int, default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("plot-mel", help="mel image with optional F0 overlay")
    p.add_argument("infile", help="wav or binary mel file")
    p.add_argument("--f0", action="store_true", help="overlay the F0 contour")
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(fn=cmd_plot_mel)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (InvalidConfigError,) as e:
        print(f"[config-error] {e}", file=sys.stderr)
        return 2
    except (MissingFileError, FileNotFoundError) as e:
        print(f"[missing-file] {e}", file=sys.stderr)
        return 3
    except InvalidInputError as e:
        print(f"[invalid-input] {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures map to exit 1
        print(f"[runtime-error] {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
