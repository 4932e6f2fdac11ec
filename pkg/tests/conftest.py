"""Shared fixtures: a small smoke corpus and codebook reused across test modules."""

import pytest

from unit_s2st.audio import MelConfig
from unit_s2st.corpus import ToyCorpusSpec, generate_toy_corpus
from unit_s2st.quantizer import save_codebook
from unit_s2st.speaker import AdapterConfig
from unit_s2st.trainer import fit_codebook
from unit_s2st.u2m import U2mConfig

MEL_CFG = MelConfig()

SMOKE_ADAPTER = AdapterConfig(channels=(24, 24, 48), kernels=(3, 3, 1), dilations=(1, 1, 1),
                              groups=(1, 1, 1), attention_channels=8, embed_dim=16)

SMOKE_U2M = U2mConfig(
    codebook_size=16,
    encoder_blocks=1,
    decoder_blocks=1,
    hidden=16,
    heads=2,
    encoder_kernel=5,
    dropout=0.0,
    ffn_mult=2,
    n_mels=80,
    fusion="cross_attention",
    adapter=SMOKE_ADAPTER,
)


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    """24 train pairs, 4 speakers, short utterances; shared by trainer/cli tests."""
    out = tmp_path_factory.mktemp("smoke_corpus")
    spec = ToyCorpusSpec(
        n_speakers=4,
        n_pairs=24,
        dev_pairs=4,
        test_pairs=4,
        symbols_per_utt=(4, 6),
        symbol_dur=(0.12, 0.16),
        seed=11,
    )
    manifests = generate_toy_corpus(spec, out)
    return {"spec": spec, "manifests": manifests, "dir": out}


@pytest.fixture(scope="session")
def smoke_codebook(smoke_corpus, tmp_path_factory):
    """K=16 codebook fit once on the smoke corpus C-style training mels."""
    cb = fit_codebook(smoke_corpus["manifests"]["train_tgt_c"], MEL_CFG, k=16, seed=0)
    path = tmp_path_factory.mktemp("smoke_cb") / "codebook.bin"
    save_codebook(path, cb)
    return {"codebook": cb, "path": path}
