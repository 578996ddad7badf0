"""Routing math on worked examples with independently computed constants."""

import math

import numpy as np
import pytest

from weakroute.routing import (
    LogitBundle,
    TargetBatch,
    average_loss_baseline,
    compose_weakest,
    log_softmax_bundle,
    mean_inference,
    pseudo_target,
    strong_inference,
    weakness,
    weakroute_loss,
)
from weakroute.tensor import ClassCountError, DimensionError, Tape, Tensor

# log_softmax([2, 0]) evaluated directly: 2 - log(e^2 + 1) and -log(e^2 + 1)
HI = -0.1269280110429727
LO = -2.1269280110429727
# the corresponding weakness shares of the row sum HI + LO
W_HI = 1.0563159358003271
W_LO = 1.9436840641996729


def crossed_bundle():
    """Two pathways, two classes: pathway 1 backs class 0, pathway 2 class 1."""
    return LogitBundle([Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]])])


def target0():
    return TargetBatch.from_labels([0], 2)


class TestLogSoftmaxBundle:
    def test_single_pathway(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[2.0, 0.0]])]))
        assert np.allclose(lp.values[0, :, 0], [HI, LO], atol=1e-9)

    def test_identical_pathways_give_identical_slices(self):
        t = Tensor([[1.0, -2.0, 0.5]])
        lp = log_softmax_bundle(LogitBundle([t, Tensor(t.data)]))
        assert np.array_equal(lp.values[:, :, 0], lp.values[:, :, 1])

    def test_crossed_case(self):
        lp = log_softmax_bundle(crossed_bundle())
        assert np.allclose(lp.values[0], [[HI, LO], [LO, HI]], atol=1e-9)

    def test_single_class_rejected(self):
        with pytest.raises(ClassCountError):
            LogitBundle([Tensor([[1.0]])])

    def test_mismatched_pathways_rejected(self):
        with pytest.raises(DimensionError):
            LogitBundle([Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]])])


class TestWeakness:
    def test_single_pathway_extremes(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[2.0, 0.0]])]))
        w = weakness(lp, target0())
        assert w.values[0, 0, 0] == 2.0  # positive class, ratio exactly 1
        assert w.values[0, 1, 0] == -1.0

    def test_positive_class_row(self):
        lp = log_softmax_bundle(crossed_bundle())
        w = weakness(lp, target0())
        assert np.allclose(w.values[0, 0], [W_HI, W_LO], atol=1e-6)

    def test_negative_class_row(self):
        lp = log_softmax_bundle(crossed_bundle())
        w = weakness(lp, target0())
        assert np.allclose(w.values[0, 1], [-(W_LO - 1.0), -(W_HI - 1.0)], atol=1e-6)

    def test_detached_from_tape(self):
        with Tape() as tape:
            lp = log_softmax_bundle(crossed_bundle())
            weakness(lp, target0())
        kinds = {node.kind for node in tape.nodes}
        assert "log_softmax_rows" in kinds
        # nothing involving the weakness ratios got recorded
        assert not kinds & {"mul", "add"}


class TestComposeWeakest:
    def test_crossed_case_selects_pathway_two(self):
        comp = compose_weakest(log_softmax_bundle(crossed_bundle()), target0())
        assert np.array_equal(comp.selection.indices, [[1, 1]])
        assert np.allclose(comp.logits.data, [[LO, HI]], atol=1e-6)
        assert comp.mode == "train_weakest"

    def test_single_pathway_identity(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[2.0, 0.0]])]))
        comp = compose_weakest(lp, target0())
        assert np.array_equal(comp.selection.indices, [[0, 0]])
        assert np.array_equal(comp.logits.data, lp.values[:, :, 0])

    def test_identical_pathways_tie_to_first(self):
        t = Tensor([[1.0, -1.0]])
        lp = log_softmax_bundle(LogitBundle([t, Tensor(t.data), Tensor(t.data)]))
        comp = compose_weakest(lp, target0())
        assert np.array_equal(comp.selection.indices, [[0, 0]])
        assert np.array_equal(comp.logits.data, lp.values[:, :, 0])

    def test_composed_entries_equal_selected_log_probs(self):
        rng = np.random.default_rng(7)
        bundle = LogitBundle([Tensor(rng.normal(size=(4, 3))) for _ in range(3)])
        lp = log_softmax_bundle(bundle)
        comp = compose_weakest(lp, TargetBatch.from_labels(rng.integers(0, 3, 4), 3))
        for b in range(4):
            for i in range(3):
                assert comp.logits.data[b, i] == lp.values[b, i, comp.selection.indices[b, i]]


class TestPseudoTarget:
    def test_crossed_case_tie_breaks_to_lowest_class(self):
        # global max is attained by class 0 (pathway 1) and class 1 (pathway 2)
        guess = pseudo_target(log_softmax_bundle(crossed_bundle()))
        assert np.array_equal(guess.labels, [0])
        assert np.array_equal(guess.one_hot, [[1.0, 0.0]])

    def test_unique_maximum(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[3.0, 0.0]]), Tensor([[0.0, 1.0]])]))
        assert np.array_equal(pseudo_target(lp).labels, [0])

    def test_single_pathway_argmax(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[0.0, 4.0, 1.0]])]))
        assert np.array_equal(pseudo_target(lp).labels, [1])


class TestStrongInference:
    def test_crossed_case_selects_pathway_one(self):
        comp = strong_inference(log_softmax_bundle(crossed_bundle()))
        assert np.array_equal(comp.selection.indices, [[0, 0]])
        assert np.allclose(comp.logits.data, [[HI, LO]], atol=1e-6)
        assert comp.logits.data[0].argmax() == 0

    def test_single_pathway_identity(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[2.0, 0.0]])]))
        assert np.array_equal(strong_inference(lp).logits.data, lp.values[:, :, 0])

    def test_identical_pathways(self):
        t = Tensor([[1.0, -1.0, 0.0]])
        lp = log_softmax_bundle(LogitBundle([t, Tensor(t.data)]))
        assert np.array_equal(strong_inference(lp).logits.data, lp.values[:, :, 0])


class TestMeanInference:
    def test_crossed_case(self):
        comp = mean_inference(log_softmax_bundle(crossed_bundle()))
        assert np.allclose(comp.logits.data, [[(HI + LO) / 2, (HI + LO) / 2]], atol=1e-6)
        assert comp.selection is None

    def test_single_pathway_identity(self):
        lp = log_softmax_bundle(LogitBundle([Tensor([[2.0, 0.0]])]))
        assert np.allclose(comp_data := mean_inference(lp).logits.data, lp.values[:, :, 0])
        assert comp_data.shape == (1, 2)

    def test_identical_pathways(self):
        t = Tensor([[0.3, -0.7]])
        lp = log_softmax_bundle(LogitBundle([t, Tensor(t.data), Tensor(t.data)]))
        assert np.allclose(mean_inference(lp).logits.data, lp.values[:, :, 0], atol=1e-12)


class TestLosses:
    def test_uniform_single_pathway_loss_is_ln2(self):
        bundle = LogitBundle([Tensor([[0.0, 0.0]])])
        loss = weakroute_loss(bundle, target0())
        assert abs(float(loss.data) - math.log(2)) < 1e-12

    def test_crossed_case_loss_value(self):
        # composed v = [LO, HI]; softmax-CE against class 0 evaluates to
        # logsumexp(v) - v[0] = 2.1269280110429727 (v is already normalized)
        loss = weakroute_loss(crossed_bundle(), target0())
        assert abs(float(loss.data) - 2.1269280110429727) < 1e-9

    def test_renormalize_off_uses_nll_directly(self):
        bundle = LogitBundle([Tensor([[1.0, -1.0, 0.0]]), Tensor([[0.5, 0.5, -2.0]])])
        target = TargetBatch.from_labels([2], 3)
        lp = log_softmax_bundle(bundle)
        composed = compose_weakest(lp, target)
        expected = -composed.logits.data[0, 2]
        loss = weakroute_loss(bundle, target, renormalize=False)
        assert abs(float(loss.data) - expected) < 1e-12

    def test_baseline_single_pathway_is_plain_cross_entropy(self):
        bundle = LogitBundle([Tensor([[2.0, 0.0]])])
        loss = average_loss_baseline(bundle, target0())
        expected = math.log(math.exp(2.0) + 1.0) - 2.0
        assert abs(float(loss.data) - expected) < 1e-12

    def test_baseline_crossed_case_is_symmetric(self):
        loss = average_loss_baseline(crossed_bundle(), target0())
        assert abs(float(loss.data) - math.log(2)) < 1e-12

    def test_baseline_gradient_splits_equally(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(2, 4))
        single = Tensor(raw, grad_enabled=True)
        with Tape() as tape:
            loss = average_loss_baseline(
                LogitBundle([single]), TargetBatch.from_labels([1, 3], 4)
            )
        tape.backward(loss)
        single_grad = single.grad.copy()

        copies = [Tensor(raw, grad_enabled=True) for _ in range(3)]
        with Tape() as tape:
            loss = average_loss_baseline(
                LogitBundle(copies), TargetBatch.from_labels([1, 3], 4)
            )
        tape.backward(loss)
        for t in copies:
            assert np.allclose(t.grad, single_grad / 3.0, atol=1e-12)

    def test_identical_pathways_loss_matches_single(self):
        t = Tensor([[0.0, 0.0]])
        loss = weakroute_loss(LogitBundle([t, Tensor(t.data)]), target0())
        assert abs(float(loss.data) - math.log(2)) < 1e-12

    def test_loss_gradient_masks_unselected_pathway(self):
        p1 = Tensor([[2.0, 0.0]], grad_enabled=True)
        p2 = Tensor([[0.0, 2.0]], grad_enabled=True)
        with Tape() as tape:
            loss = weakroute_loss(LogitBundle([p1, p2]), target0())
        tape.backward(loss)
        assert np.all(p1.grad == 0.0)  # never selected
        assert np.any(p2.grad != 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            weakroute_loss(crossed_bundle(), TargetBatch.from_labels([0, 1], 2))
