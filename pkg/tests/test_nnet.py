import itertools
import math

import numpy as np
import pytest
import torch

from unit_s2st.errors import InvalidConfigError, InvalidInputError
from unit_s2st.nnet import (
    BlockConfig,
    ConformerBlock,
    MultiHeadAttention,
    TransformerDecoderBlock,
    TransformerEncoderBlock,
    causal_mask,
    ctc_loss,
    grad_check,
    sinusoidal_positions,
)

torch.manual_seed(0)

SMALL = BlockConfig(hidden=16, heads=2, dropout=0.0, conv_kernel=5, ffn_mult=2)


def brute_force_ctc(log_probs: np.ndarray, targets: list[int], blank: int = 0) -> float:
    """Sum path probabilities over every alignment that collapses to targets."""

    def collapse(path):
        deduped = [k for i, k in enumerate(path) if i == 0 or k != path[i - 1]]
        return [k for k in deduped if k != blank]

    t_len, vocab = log_probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path) == list(targets):
            total += math.exp(sum(log_probs[t, path[t]] for t in range(t_len)))
    return math.inf if total == 0.0 else -math.log(total)


class TestAttention:
    def test_singleton_key_weights_are_one_and_output_constant(self):
        attn = MultiHeadAttention(16, 2).eval()
        q = torch.randn(5, 16)
        k = torch.randn(1, 16)
        out, weights = attn(q, k, k, return_weights=True)
        assert torch.all(weights == 1.0)
        assert out.shape == (5, 16)
        assert torch.allclose(out, out[0].expand_as(out))

    def test_causal_mask_blocks_future(self):
        attn = MultiHeadAttention(16, 2).eval()
        x = torch.randn(3, 16)
        mask = causal_mask(3)
        base = attn(x, x, x, mask=mask)
        perturbed = x.clone()
        perturbed[1:] += torch.randn(2, 16)
        moved = attn(perturbed, perturbed, perturbed, mask=mask)
        assert torch.allclose(base[0], moved[0], atol=1e-6)

    def test_rows_sum_to_one(self):
        attn = MultiHeadAttention(16, 4).eval()
        q, k = torch.randn(6, 16), torch.randn(9, 16)
        _, weights = attn(q, k, k, return_weights=True)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(4, 6), atol=1e-6)

    def test_shape_mismatch_raises(self):
        attn = MultiHeadAttention(16, 2)
        with pytest.raises(InvalidInputError):
            attn(torch.randn(4, 8), torch.randn(4, 16), torch.randn(4, 16))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        attn = MultiHeadAttention(8, 2).double().eval()
        q, k, v = (torch.randn(3, 8, dtype=torch.float64) for _ in range(3))

        def fn(q, k, v):
            return attn(q, k, v).pow(2).sum()

        assert grad_check(fn, [q, k, v]) <= 1e-4


class TestBlocks:
    @pytest.mark.parametrize("t", [1, 7, 53])
    @pytest.mark.parametrize("kind", ["encoder", "decoder", "conformer"])
    def test_output_shape_equals_input_shape(self, t, kind):
        torch.manual_seed(2)
        x = torch.randn(t, SMALL.hidden)
        if kind == "encoder":
            out = TransformerEncoderBlock(SMALL).eval()(x)
        elif kind == "conformer":
            out = ConformerBlock(SMALL).eval()(x)
        else:
            memory = torch.randn(4, SMALL.hidden)
            out = TransformerDecoderBlock(SMALL).eval()(x, memory)
        assert out.shape == x.shape

    def test_eval_mode_deterministic_repeat(self):
        torch.manual_seed(3)
        block = ConformerBlock(SMALL).eval()
        x = torch.randn(9, SMALL.hidden)
        assert torch.equal(block(x), block(x))

    def test_dim_mismatch_raises_before_compute(self):
        with pytest.raises(InvalidInputError):
            TransformerEncoderBlock(SMALL)(torch.randn(5, 12))
        with pytest.raises(InvalidInputError):
            ConformerBlock(SMALL)(torch.randn(5, 12))

    def test_batched_and_unbatched_agree(self):
        torch.manual_seed(4)
        block = TransformerEncoderBlock(SMALL).eval()
        x = torch.randn(6, SMALL.hidden)
        assert torch.allclose(block(x), block(x.unsqueeze(0)).squeeze(0), atol=1e-6)

    def test_encoder_block_gradients(self):
        torch.manual_seed(5)
        cfg = BlockConfig(hidden=8, heads=2, dropout=0.0, conv_kernel=3, ffn_mult=2)
        block = TransformerEncoderBlock(cfg).double().eval()
        x = torch.randn(4, 8, dtype=torch.float64)
        assert grad_check(lambda x: block(x).pow(2).sum(), [x]) <= 1e-4

    def test_conformer_block_gradients(self):
        torch.manual_seed(6)
        cfg = BlockConfig(hidden=8, heads=2, dropout=0.0, conv_kernel=3, ffn_mult=2)
        block = ConformerBlock(cfg).double().eval()
        x = torch.randn(4, 8, dtype=torch.float64)
        assert grad_check(lambda x: block(x).pow(2).sum(), [x]) <= 1e-4

    def test_decoder_block_gradients(self):
        torch.manual_seed(7)
        cfg = BlockConfig(hidden=8, heads=2, dropout=0.0, conv_kernel=3, ffn_mult=2)
        block = TransformerDecoderBlock(cfg).double().eval()
        x = torch.randn(3, 8, dtype=torch.float64)
        memory = torch.randn(4, 8, dtype=torch.float64)
        assert grad_check(lambda x, m: block(x, m).pow(2).sum(), [x, memory]) <= 1e-4


class TestBlockConfig:
    def test_indivisible_heads_rejected(self):
        with pytest.raises(InvalidConfigError):
            BlockConfig(hidden=10, heads=3)

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidConfigError):
            BlockConfig(conv_kernel=30)


class TestCtc:
    def test_single_frame_single_label(self):
        lp = torch.log_softmax(torch.randn(1, 3, dtype=torch.float64), dim=-1)
        loss = ctc_loss(lp, [2])
        assert torch.isclose(loss, -lp[0, 2])

    def test_two_frames_uniform_half(self):
        lp = torch.full((2, 2), math.log(0.5), dtype=torch.float64)
        loss = ctc_loss(lp, [1])
        assert abs(float(loss) - (-math.log(0.75))) < 1e-12

    def test_repeated_label_needs_three_frames(self):
        lp = torch.log_softmax(torch.randn(2, 3, dtype=torch.float64), dim=-1)
        assert torch.isinf(ctc_loss(lp, [1, 1]))

    def test_empty_target_is_all_blank_path(self):
        lp = torch.log_softmax(torch.randn(3, 4, dtype=torch.float64), dim=-1)
        loss = ctc_loss(lp, [])
        assert torch.isclose(loss, -lp[:, 0].sum())

    def test_blank_in_targets_rejected(self):
        lp = torch.zeros(2, 3)
        with pytest.raises(InvalidInputError):
            ctc_loss(lp, [0])

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(0)
        torch.manual_seed(8)
        for t_len in range(1, 7):
            for vocab in range(2, 5):
                for tgt_len in range(0, 4):
                    targets = rng.integers(1, vocab, size=tgt_len).tolist()
                    lp = torch.log_softmax(
                        torch.randn(t_len, vocab, dtype=torch.float64), dim=-1
                    )
                    got = float(ctc_loss(lp, targets))
                    want = brute_force_ctc(lp.numpy(), targets)
                    if math.isinf(want):
                        assert math.isinf(got)
                    else:
                        assert abs(got - want) <= 1e-6

    def test_gradient_check(self):
        torch.manual_seed(9)
        raw = torch.randn(4, 3, dtype=torch.float64)

        def fn(raw):
            return ctc_loss(torch.log_softmax(raw, dim=-1), [1, 2])

        assert grad_check(fn, [raw]) <= 1e-4


class TestGradCheck:
    def test_sum_of_squares_is_nearly_exact(self):
        x = torch.randn(5, dtype=torch.float64)
        assert grad_check(lambda x: (x**2).sum(), [x]) <= 1e-7

    def test_rejects_non_scalar(self):
        with pytest.raises(InvalidInputError):
            grad_check(lambda x: x, [torch.randn(3, dtype=torch.float64)])

    def test_params_argument_checked_too(self):
        w = torch.randn(4, dtype=torch.float64, requires_grad=True)
        x = torch.randn(4, dtype=torch.float64)
        assert grad_check(lambda x: (w * x).sum().exp(), [x], params=[w]) <= 1e-6


def test_sinusoidal_positions_shape_and_range():
    pe = sinusoidal_positions(11, 16)
    assert pe.shape == (11, 16)
    assert torch.all(pe <= 1.0) and torch.all(pe >= -1.0)
    assert not torch.equal(pe[1], pe[2])
