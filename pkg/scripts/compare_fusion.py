#!/usr/bin/env python3
"""Train the unit-to-mel stage once per fusion strategy and compare
reconstruction quality plus speaker-swap sensitivity.

    python3 scripts/compare_fusion.py --out-dir runs/fusion --steps 300
"""

import argparse
import dataclasses
from pathlib import Path

import torch

from unit_s2st.config import default_toy_config
from unit_s2st.corpus import ToyCorpusSpec, generate_toy_corpus
from unit_s2st.quantizer import save_codebook
from unit_s2st.trainer import (
    StageConfig,
    evaluate_reconstruction,
    fit_codebook,
    load_codebook_file,
    prepare_split_examples,
    pretrain_a,
    restore_sru2m,
)
from unit_s2st.u2m import reconstruction_loss


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/fusion")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--pairs", type=int, default=150)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    base = default_toy_config(out_dir=str(out), seed=args.seed)
    spec = ToyCorpusSpec(n_speakers=8, n_pairs=args.pairs, dev_pairs=20, test_pairs=0,
                         seed=args.seed)
    manifests = generate_toy_corpus(spec, out / "data")
    mel_cfg = base.mel
    codebook = fit_codebook(manifests["train_tgt_c"], mel_cfg, k=base.units.k,
                            seed=args.seed)
    cb_path = out / "codebook.bin"
    save_codebook(cb_path, codebook)

    results = {}
    for kind in ("simple_ffn", "glu", "cross_attention"):
        u2m = dataclasses.replace(base.u2m, fusion=kind)
        cfg = StageConfig(stage="pretrain_a", manifest=str(manifests["train_tgt_c"]),
                          steps=args.steps, batch_size=8, lr=1e-3, warmup=100,
                          seed=args.seed, codebook=str(cb_path))
        ckpt, log = pretrain_a(cfg, u2m, mel_cfg)
        model = restore_sru2m(ckpt, u2m)
        dev = prepare_split_examples(manifests["dev_tgt_c"], load_codebook_file(cb_path),
                                     mel_cfg, 1.0, u2m.adapter.min_frames)
        l1 = evaluate_reconstruction(model, dev.examples, limit=20)

        # sensitivity of the output to swapping the conditioning speaker
        torch.manual_seed(0)
        ex = dev.examples[0]
        with torch.no_grad():
            a = model(torch.as_tensor(ex.units), torch.as_tensor(ex.speaker_mel))
            other = dev.examples[1]
            b = model(torch.as_tensor(ex.units), torch.as_tensor(other.speaker_mel))
            swap = float(reconstruction_loss(a, b))
        results[kind] = {"dev_l1": l1, "swap_delta": swap, "final_train": log[-1]["loss"]}
        print(f"{kind:16s} dev L1 {l1:.4f}  swap delta {swap:.4f}  "
              f"train loss {log[-1]['loss']:.4f}")

    best = min(results, key=lambda k: results[k]["dev_l1"])
    print(f"best by dev reconstruction: {best}")


if __name__ == "__main__":
    main()
