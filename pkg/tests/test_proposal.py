import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sact import tensor as T
from sact.proposal import (
    AnchorSpec,
    EventProposal,
    ProposalHead,
    anchor_targets,
    nms,
    propose,
    proposal_loss,
    proposal_loss_terms,
    proposal_window,
    select_and_mask,
    temporal_iou,
)
from sact.tensor import Tensor, backward, finite_diff_grad, relative_error


def head(dim=4, lengths=(2, 4), seed=0, zero=False):
    h = ProposalHead.create(np.random.default_rng(seed), dim, AnchorSpec(lengths))
    if zero:
        for k in h.kernels:
            k.data[...] = 0.0
    return h


def memory(t=16, dim=4, seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=(t, dim)))


def prop(score, center, length, anchor_id=0, frames=20):
    return EventProposal(score, center, length, anchor_id, int(center), frames)


def test_zero_weights_give_neutral_proposals():
    pset = propose(memory(), head(zero=True))
    assert len(pset) == 32
    for p in pset.proposals:
        assert p.score == 0.5
        assert p.center == p.position
        assert p.length == (2, 4)[p.anchor_id]


def test_anchors_longer_than_clip_are_skipped():
    assert len(propose(memory(t=3), head())) == 3
    assert len(propose(memory(t=1), head(lengths=(2, 4)))) == 0


def test_anchor_spec_validation():
    with pytest.raises(ValueError):
        AnchorSpec((4, 2))
    with pytest.raises(ValueError):
        AnchorSpec((0, 2))


def test_score_gradient_wrt_memory():
    h = head(seed=2)
    H = Tensor(memory(t=8, seed=3).data, requires_grad=True)
    w = np.random.default_rng(4).normal(size=16)

    def f(x):
        return T.reduce_sum(T.mul(propose(x, h).scores, w))

    backward(f(H))
    fd = finite_diff_grad(f, H, 1e-5)
    assert relative_error(H.grad, fd.data).max() < 1e-4


def test_segment_is_clipped_to_clip():
    p = prop(0.9, 1.0, 6.0, frames=10)
    assert p.segment == (0.0, 4.0)
    q = prop(0.9, 9.0, 6.0, frames=10)
    assert q.segment == (6.0, 10.0)


def test_nms_keeps_one_of_identical_pair():
    kept = nms([prop(0.8, 5, 4), prop(0.8, 5, 4)], 0.7)
    assert len(kept) == 1


def test_nms_suppresses_by_overlap_only():
    a, b, c = prop(0.9, 5, 4), prop(0.8, 5.2, 4), prop(0.7, 15, 4)
    kept = nms([c, b, a], 0.7)
    assert kept == [a, c]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_nms_independent_of_input_order(seed):
    rng = np.random.default_rng(seed)
    items = [
        prop(float(rng.choice([0.5, 0.7, 0.9])), float(rng.integers(0, 20)), float(rng.choice([2, 4, 8])),
             int(rng.integers(0, 3)))
        for _ in range(12)
    ]
    ref = nms(items, 0.5)
    shuffled = [items[i] for i in rng.permutation(len(items))]
    got = nms(shuffled, 0.5)
    assert [(p.score, p.center, p.length, p.anchor_id) for p in got] == [
        (p.score, p.center, p.length, p.anchor_id) for p in ref
    ]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0.1, 20), st.floats(0, 50), st.floats(0.1, 20))
def test_tiou_symmetric_and_bounded(s1, l1, s2, l2):
    a, b = (s1, s1 + l1), (s2, s2 + l2)
    assert temporal_iou(a, b) == temporal_iou(b, a)
    assert 0.0 <= temporal_iou(a, b) <= 1.0


def test_tiou_examples():
    assert temporal_iou((0, 4), (0, 4)) == 1.0
    assert temporal_iou((0, 4), (2, 6)) == pytest.approx(2 / 6)
    assert temporal_iou((0, 2), (3, 5)) == 0.0


def test_full_span_window_peaks_at_center():
    R = proposal_window(prop(1.0, 10.0, 20.0), None, 20).data
    assert R[9] == pytest.approx(1.0, abs=1e-2) and R[10] == pytest.approx(1.0, abs=1e-2)
    assert np.all(np.diff(R[:10]) > 0) and np.all(np.diff(R[10:]) < 0)
    assert R.min() >= math.exp(-2.0) - 1e-12  # ends sit two standard deviations out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_mask_in_unit_interval(seed):
    pset = propose(memory(t=12, seed=seed % 1000), head(seed=seed % 7))
    for training in (False, True):
        _, R = select_and_mask(pset, 0.0, 0.7, training=training)
        assert R.shape == (12,) and np.all(R.data >= 0) and np.all(R.data <= 1)


def test_training_mode_keeps_top_k():
    pset = propose(memory(t=16), head(seed=5))
    kept, _ = select_and_mask(pset, training=True, top_k=3)
    assert len(kept) == 3
    kept, R = select_and_mask(pset, score_threshold=1.1)
    assert kept == [] and np.all(R.data == 0)


def test_mask_is_differentiable_wrt_head():
    h = head(seed=6)
    H = memory(t=10, seed=7)

    def f():
        _, R = select_and_mask(propose(H, h), training=True, top_k=2)
        return T.reduce_sum(R)

    backward(f())
    kept, _ = select_and_mask(propose(H, h), training=True, top_k=2)
    for a, (k, b) in enumerate(zip(h.kernels, h.biases)):
        for p in (k, b):
            fd = finite_diff_grad(lambda _: f(), p, 1e-6)
            assert relative_error(p.grad, fd.data).max() < 1e-4
            if any(q.anchor_id == a for q in kept):
                assert np.abs(fd.data).max() > 0


def perfect_set(segments, t=16):
    pset = propose(memory(t=t), head(zero=True))
    labels, match, _ = anchor_targets(pset, segments)
    seg = np.asarray(segments, dtype=float)[match]
    L = pset.anchor_lengths
    offset = np.clip((seg.mean(axis=1) - pset.positions) / L, -0.999, 0.999)
    pset.logits = Tensor(np.where(labels == 1, 20.0, -20.0))
    pset.raw_center = Tensor(np.arctanh(offset))
    pset.raw_length = Tensor(np.log((seg[:, 1] - seg[:, 0]) / L))
    return pset


def test_perfect_predictions_have_near_zero_loss():
    assert proposal_loss(perfect_set([(2, 6), (9, 13)]), [(2, 6), (9, 13)]).item() <= 1e-6


def test_neutral_scores_give_log_two():
    pset = propose(memory(), head(zero=True))
    bce, _ = proposal_loss_terms(pset, [(3, 7)])
    assert bce.item() == pytest.approx(math.log(2), rel=1e-12)


def test_best_anchor_always_positive():
    pset = propose(memory(), head(zero=True))
    labels, match, best = anchor_targets(pset, [(0.0, 3.0)])
    assert labels[best[0]] == 1 and match[best[0]] == 0


def test_no_events_means_all_negative():
    pset = propose(memory(), head(zero=True))
    bce, reg = proposal_loss_terms(pset, [])
    assert bce.item() == pytest.approx(math.log(2)) and reg.item() == 0.0
