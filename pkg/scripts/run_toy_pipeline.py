#!/usr/bin/env python3
"""End-to-end toy experiment: corpus -> units -> three-stage training ->
translation model -> evaluation -> figures.

Everything goes through the CLI so the run is identical to what a user would
type; one flag scales the whole thing down for a quick smoke pass.

    python3 scripts/run_toy_pipeline.py --out-dir runs/toy
    python3 scripts/run_toy_pipeline.py --out-dir runs/smoke --smoke
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from unit_s2st.cli import main as cli
from unit_s2st.config import default_toy_config, save_run_config
from unit_s2st.corpus import ToyCorpusSpec, load_manifest
from unit_s2st.speaker import AdapterConfig
from unit_s2st.u2m import U2mConfig
from unit_s2st.s2ut import S2utConfig


def smoke_profile(cfg):
    cfg.corpus = ToyCorpusSpec(n_speakers=4, n_pairs=40, dev_pairs=6, test_pairs=6,
                               seed=cfg.seed)
    adapter = AdapterConfig(channels=(24, 24, 64), kernels=(5, 3, 1), dilations=(1, 2, 1),
                            groups=(1, 1, 1), attention_channels=8, embed_dim=16)
    cfg.u2m = U2mConfig(codebook_size=50, encoder_blocks=1, decoder_blocks=1, hidden=32,
                        heads=2, encoder_kernel=5, dropout=0.0, ffn_mult=2, n_mels=80,
                        fusion="cross_attention", adapter=adapter)
    cfg.s2ut = S2utConfig(codebook_size=50, encoder_blocks=1, decoder_blocks=1, hidden=32,
                          heads=2, dropout=0.0, encoder_kernel=5, ffn_mult=2, input_dim=80,
                          subsample=2, ctc_layer=1)
    cfg.units = dataclasses.replace(cfg.units, k=50)
    for name in cfg.stages:
        cfg.stages[name] = dataclasses.replace(cfg.stages[name], steps=60, warmup=20,
                                               batch_size=4)
    return cfg


def run(argv):
    print("+ unit-s2st " + " ".join(argv), flush=True)
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/toy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--smoke", action="store_true", help="tiny models, 60 steps")
    args = parser.parse_args()

    out_dir = Path(args.out_dir)
    cfg = default_toy_config(out_dir=str(out_dir), seed=args.seed)
    if args.smoke:
        cfg = smoke_profile(cfg)
    config_path = out_dir / "run.json"
    save_run_config(cfg, config_path)
    print(f"config: {config_path}")

    run(["gen-corpus", str(config_path)])
    run(["fit-units", str(cfg.manifest_path("train_tgt_c")), "--config", str(config_path)])
    run(["pretrain-a", str(config_path)])
    run(["pretrain-b", str(config_path)])
    run(["finetune", str(config_path)])
    run(["train-s2ut", str(config_path)])
    run(["evaluate", str(config_path)])

    test_row = load_manifest(cfg.manifest_path("test_src"))[0]
    translated = out_dir / "sample" / "translated.wav"
    run(["translate", str(config_path), "--in", test_row.wav_path, "--out", str(translated)])
    run(["plot-mel", test_row.wav_path, "--f0", "--out", str(out_dir / "sample" / "source.png")])
    run(["plot-mel", str(translated), "--f0", "--out",
         str(out_dir / "sample" / "translated.png")])
    print(f"done; outputs under {out_dir}")


if __name__ == "__main__":
    main()
