import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import module_gradcheck, weighted_sum
from dualground.layers import TemporalEncoder, layer_norm
from dualground.sentence_path import AdaptiveCrossAttention, DummyEncoder, SentencePath



def setup_module():
    torch.set_default_dtype(torch.float64)


def teardown_module():
    torch.set_default_dtype(torch.float32)


def set_identity(linear):
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.weight.shape[0]))
        linear.bias.zero_()


def test_dummy_encoder_rows_and_verbatim_eos():
    enc = DummyEncoder(8, 2, num_dummies=3)
    eos = torch.randn(2, 8)
    keys = enc(eos)
    assert keys.shape == (2, 4, 8)
    assert torch.equal(keys[:, -1], eos)


def test_dummy_encoder_residual_identity():
    enc = DummyEncoder(8, 2, num_dummies=3)
    for layer in enc.layers:
        layer.zero_residual_branches()
    keys = enc(torch.randn(1, 8))
    # with zeroed branches each post-norm layer reduces to its two layer norms (unit affine)
    expected = enc.dummies.detach()
    for _ in range(2 * len(enc.layers)):
        expected = layer_norm(expected)
    torch.testing.assert_close(keys[0, :3], expected)


def test_single_key_gives_full_alpha():
    path = SentencePath(8, heads=2, num_dummies=0)
    out = path(torch.randn(2, 5, 8), torch.ones(2, 5, dtype=torch.bool), torch.randn(2, 8))
    torch.testing.assert_close(out["alpha"], torch.ones(2, 5))


def hand_aca():
    aca = AdaptiveCrossAttention(2, 1)
    for lin in (aca.q_proj, aca.k_proj, aca.v_proj, aca.out_proj):
        set_identity(lin)
    return aca


def test_symmetric_logits_give_half():
    aca = hand_aca()
    keys = torch.tensor([[[0.0, 0.0], [0.0, 0.0]]])
    _, _, alpha = aca(torch.tensor([[[1.0, 0.0]]]), keys)
    assert alpha.item() == pytest.approx(0.5)


def test_hand_case_three_quarters():
    aca = hand_aca()
    # clip (1, 0); [EOS] key (sqrt(2) ln 3, 0) gives logit ln 3 after the 1/sqrt(head_dim) scale
    eos = torch.tensor([math.sqrt(2) * math.log(3), 0.0])
    keys = torch.stack([torch.zeros(2), eos])[None]
    out, weights, alpha = aca(torch.tensor([[[1.0, 0.0]]]), keys)
    assert alpha.item() == pytest.approx(0.75, abs=1e-12)
    torch.testing.assert_close(out[0, 0], 0.75 * eos)


def test_alpha_shift_invariant():
    torch.manual_seed(0)
    aca = AdaptiveCrossAttention(8, 2)
    clips, keys = torch.randn(1, 4, 8), torch.randn(1, 3, 8)
    _, _, a = aca(clips, keys)
    with torch.no_grad():
        # a shared key offset adds the same constant to every key logit of a clip
        aca.k_proj.bias += torch.randn(8)
    _, _, b = aca(clips, keys)
    torch.testing.assert_close(a, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 4), st.integers(1, 6), st.sampled_from([1, 2, 4]))
def test_aca_rows_are_distributions(seed, n_dummies, T, heads):
    torch.manual_seed(seed)
    path = SentencePath(8, heads=heads, num_dummies=n_dummies, aca_layers=1)
    out = path(torch.randn(2, T, 8), torch.ones(2, T, dtype=torch.bool), torch.randn(2, 8))
    w = out["aca_weights"]
    assert w.shape == (2, heads, T, n_dummies + 1)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(2, heads, T), atol=1e-5, rtol=0)
    assert ((out["alpha"] >= 0) & (out["alpha"] <= 1)).all()


def test_alpha_zero_on_padded_clips():
    path = SentencePath(8, heads=2)
    mask = torch.tensor([[True, True, False]])
    out = path(torch.randn(1, 3, 8), mask, torch.randn(1, 8))
    assert out["alpha"][0, 2] == 0
    assert (out["v_s"][0, 2] == 0).all()


def test_temporal_single_clip():
    enc = TemporalEncoder(8, 2, 2)
    out = enc(torch.randn(1, 1, 8), torch.ones(1, 1, dtype=torch.bool))
    assert out.shape == (1, 1, 8) and torch.isfinite(out).all()


def test_temporal_permutation_equivariance():
    torch.manual_seed(1)
    enc = TemporalEncoder(8, 2, 2)
    x, pos = torch.randn(1, 4, 8), torch.randn(4, 8)
    mask = torch.tensor([[True, True, False, True]])
    perm = torch.tensor([2, 0, 3, 1])
    a = enc(x, mask, pos)
    b = enc(x[:, perm], mask[:, perm], pos[perm])
    torch.testing.assert_close(a[:, perm], b)


def test_temporal_mask_equivalence():
    torch.manual_seed(2)
    enc = TemporalEncoder(8, 2, 2)
    x = torch.randn(1, 4, 8)
    mask = torch.tensor([[False, False, True, False]])
    torch.testing.assert_close(enc(x, mask)[:, 2], enc(x[:, 2:3], mask[:, 2:3])[:, 0])


def test_gradients_match_finite_differences():
    torch.manual_seed(3)
    path = SentencePath(4, heads=2, num_dummies=2, enc_layers=1, aca_layers=2, temporal_layers=1)
    video, eos = torch.randn(1, 3, 4), torch.randn(1, 4)
    f = weighted_sum(0)
    g = weighted_sum(1)

    class Align(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.path = path

        def forward(self, video, eos):
            x, _, alpha, _ = self.path.align(video, eos)
            return x, alpha

    module_gradcheck(Align(), lambda out: f(out[0]) + g(out[1]), video, eos)
    mask = torch.ones(1, 3, dtype=torch.bool)
    module_gradcheck(path, lambda out: f(out["v_s"]), video, kwargs={"clip_mask": mask, "eos": eos})
    module_gradcheck(path, lambda out: f(out["v_s"]) + g(out["alpha"]), eos,
                     kwargs={"video": video, "clip_mask": mask}, input_names=["eos"])
