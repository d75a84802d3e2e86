import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualground.grounding_head import (ConfigError, Fusion, MomentCandidate, MomentHead, RawMomentPredictions,
                                       SaliencyHead, TemporalPyramid, decode_predictions, decode_sample,
                                       downsample_mask, interval_iou, nms, pyramid_lengths)


def test_add_with_zero_phrase_rep():
    v_s = torch.randn(2, 5, 8)
    assert torch.equal(Fusion(8, "add")(v_s, torch.zeros_like(v_s)), v_s)


def test_hadamard_with_ones():
    v_s = torch.randn(2, 5, 8)
    assert torch.equal(Fusion(8, "hadamard")(v_s, torch.ones_like(v_s)), v_s)


def test_gate_saturates_to_phrase_rep():
    fusion = Fusion(8, "gate")
    with torch.no_grad():
        fusion.gate.weight.zero_()
        fusion.gate.bias.fill_(-30.0)
    v_s, v_p = torch.randn(1, 4, 8), torch.randn(1, 4, 8)
    torch.testing.assert_close(fusion(v_s, v_p), v_p, atol=1e-3, rtol=0)


def test_concat_mlp_shape():
    assert Fusion(8, "concat_mlp")(torch.randn(1, 4, 8), torch.randn(1, 4, 8)).shape == (1, 4, 8)


def test_add_is_commutative():
    a, b = torch.randn(1, 4, 8), torch.randn(1, 4, 8)
    assert torch.equal(Fusion(8)(a, b), Fusion(8)(b, a))


def test_unknown_fusion():
    with pytest.raises(ConfigError):
        Fusion(8, "max")


def test_pyramid_lengths():
    assert pyramid_lengths(64, 4) == [64, 32, 16, 8]
    assert pyramid_lengths(64, 1) == [64]
    levels, masks = TemporalPyramid(8, 4)(torch.randn(1, 64, 8), torch.ones(1, 64, dtype=torch.bool))
    assert [x.shape[1] for x in levels] == [64, 32, 16, 8]
    assert [m.shape[1] for m in masks] == [64, 32, 16, 8]


def test_pyramid_mask_any_pooling():
    mask = torch.tensor([[True] * 5 + [False] * 3])
    assert downsample_mask(mask).tolist() == [[True, True, True, False]]
    _, masks = TemporalPyramid(8, 2)(torch.randn(1, 8, 8), mask)
    assert masks[1].sum().item() == 3


def test_pyramid_masks_padded_positions():
    mask = torch.tensor([[True] * 5 + [False] * 3])
    levels, masks = TemporalPyramid(8, 2)(torch.randn(1, 8, 8), mask)
    for x, m in zip(levels, masks):
        assert (x[~m] == 0).all()


def test_pyramid_too_short():
    with pytest.raises(ConfigError, match="T=8"):
        TemporalPyramid(8, 4)(torch.randn(1, 5, 8), torch.ones(1, 5, dtype=torch.bool))


def test_prediction_count_and_bookkeeping():
    levels, masks = TemporalPyramid(8, 4)(torch.randn(2, 64, 8), torch.ones(2, 64, dtype=torch.bool))
    raw = MomentHead(8)(levels, masks)
    assert raw.logits.shape == (2, 120)
    assert raw.offsets.shape == (2, 120, 2)
    assert (raw.offsets >= 0).all()
    assert raw.centers[64].item() == 1.0 and raw.strides[64].item() == 2.0
    torch.testing.assert_close(raw.offsets, raw.offsets_norm * raw.strides[None, :, None])


def raw_with(centers, offsets, logits=None):
    P = len(centers)
    offsets = torch.tensor([offsets], dtype=torch.float32)
    return RawMomentPredictions(
        logits=torch.zeros(1, P) if logits is None else torch.tensor([logits]),
        offsets_norm=offsets, offsets=offsets,
        centers=torch.tensor(centers), strides=torch.ones(P), levels=torch.zeros(P, dtype=torch.long),
        mask=torch.ones(1, P, dtype=torch.bool))


def test_center_plus_offsets_span():
    raw = raw_with([10.0], [[4.0, 6.0]])
    assert raw.spans()[0, 0].tolist() == [6.0, 16.0]


def test_zero_offsets_are_rejected_by_decode():
    raw = raw_with([10.0, 5.0], [[0.0, 0.0], [1.0, 1.0]])
    cands = decode_predictions(raw, [20])[0]
    assert len(cands) == 1
    assert (cands[0].start, cands[0].end) == (4 / 20, 6 / 20)


def test_decode_clamps_to_video():
    raw = raw_with([1.0], [[5.0, 30.0]])
    c = decode_predictions(raw, [16])[0][0]
    assert (c.start, c.end) == (0.0, 1.0)


def test_saliency_hand_case():
    head = SaliencyHead(2)
    with torch.no_grad():
        head.score.weight.copy_(torch.tensor([[1.0, 1.0]]))
        head.score.bias.zero_()
    s = head(torch.tensor([[[3.0, 4.0]]]), torch.tensor([[1.0, 2.0]]))
    assert s.item() == pytest.approx(11 / math.sqrt(2))
    assert s.item() == pytest.approx(7.7782, abs=1e-4)


def test_saliency_zero_global_gives_bias():
    head = SaliencyHead(4)
    s = head(torch.randn(1, 5, 4), torch.zeros(1, 4))
    torch.testing.assert_close(s, head.score.bias.detach().expand(1, 5))


def test_saliency_is_pointwise():
    head = SaliencyHead(4)
    f = torch.randn(1, 3, 4)
    f[0, 2] = f[0, 0]
    s = head(f, torch.randn(1, 4))
    assert s[0, 0] == s[0, 2]


def C(s, e, c):
    return MomentCandidate(s, e, c)


def test_nms_identical_spans():
    kept = nms([C(0.1, 0.5, 0.8), C(0.1, 0.5, 0.9)])
    assert kept == [C(0.1, 0.5, 0.9)]


def test_nms_disjoint_spans():
    assert len(nms([C(0.0, 0.2, 0.9), C(0.5, 0.7, 0.8)])) == 2


def test_nms_threshold_examples():
    # spans [0, 10] and [2, 10] on a 20-clip video: IoU 0.8
    assert interval_iou((0, 10), (2, 10)) == pytest.approx(0.8)
    assert nms([C(0.0, 0.5, 0.9), C(0.1, 0.5, 0.8)], 0.7) == [C(0.0, 0.5, 0.9)]
    # [0, 10] and [5, 15]: IoU 1/3
    assert interval_iou((0, 10), (5, 15)) == pytest.approx(1 / 3)
    assert len(nms([C(0.0, 0.5, 0.9), C(0.25, 0.75, 0.8)], 0.7)) == 2


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.sampled_from([0.2, 0.5, 0.9])), max_size=12),
       st.randoms(use_true_random=False))
def test_nms_ties_are_order_independent(items, rnd):
    cands = [C(min(a, b), max(a, b), c) for a, b, c in items if abs(a - b) > 1e-3]
    shuffled = cands[:]
    rnd.shuffle(shuffled)
    assert nms(cands, 0.7) == nms(shuffled, 0.7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 40))
def test_decoded_candidates_are_well_formed(seed, T):
    torch.manual_seed(seed)
    P = 2 * T
    spans = torch.rand(P, 2) * (T + 4) - 2
    cands = decode_sample(spans, torch.randn(P), torch.ones(P, dtype=torch.bool), T, 0.7, 10)
    assert len(cands) <= 10
    assert all(0 <= c.start < c.end <= 1 for c in cands)
    confs = [c.confidence for c in cands]
    assert confs == sorted(confs, reverse=True)


def test_candidate_seconds():
    assert C(0.25, 0.5, 1.0).seconds(10, 2.0) == (5.0, 10.0)
