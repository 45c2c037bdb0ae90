"""Tests for the training objective and its gradients."""

import math

import numpy as np
import pytest

import msood.autodiff as ad
from msood.alignment import PredictionSet
from msood.bundle import ImageEmbeddings
from msood.config import AblationFlags, TrainConfig
from msood.errors import ContractViolation
from msood.hierarchy import ModelParams
from msood.objective import (
    PROB_FLOOR,
    batch_loss,
    batch_loss_and_grads,
    finite_difference_check,
    forward_image,
    loss_id,
    loss_ood,
)
from msood.pseudo_ood import PseudoOodSet
from reference_impl import ref_loss_id, ref_loss_ood, ref_predict


def make_item(rng, d, n, num_classes, item_id="item-0"):
    return ImageEmbeddings(
        item_id=item_id,
        label=int(rng.integers(0, num_classes)),
        v_global=rng.normal(size=d),
        v_mid=rng.normal(size=(n * n, d)),
        v_high=rng.normal(size=(4 * n * n, d)),
    )


def make_setup(seed, d=5, n=2, num_classes=3, tau=0.25, batch_size=2, **cfg_kwargs):
    rng = np.random.default_rng(seed)
    params = ModelParams(
        w=0.1 * rng.normal(size=(d, d)),
        b0=0.1 * rng.normal(size=(d, num_classes)),
        b2=0.1 * rng.normal(size=(d, num_classes)),
    )
    t_base = rng.normal(size=(d, num_classes))
    batch = [
        make_item(rng, d, n, num_classes, item_id=f"item-{i}")
        for i in range(batch_size)
    ]
    cfg = TrainConfig(n=n, tau=tau, k=2, **cfg_kwargs)
    return params, t_base, batch, cfg


class TestLossId:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_reference(self, seed):
        params, t_base, batch, cfg = make_setup(seed)
        item = batch[0]
        pred, _, _ = forward_image(item, t_base, params, cfg, with_pseudo=False)
        node, scales = loss_id(pred, item.label)
        ref = ref_predict(
            item.v_global, item.v_mid, item.v_high,
            params.w, params.b0, params.b2, t_base, cfg.tau,
        )
        expected = ref_loss_id(ref, item.label)
        assert abs(float(ad.value_of(node)) - expected) <= 1e-12
        assert abs(sum(scales) - expected) <= 1e-12

    def test_floor_bounds_the_term(self):
        pred = PredictionSet(
            p0=np.array([1e-15, 1.0 - 1e-15]),
            p_mid=np.array([[0.5, 0.5]]),
            p_high=np.array([[0.5, 0.5]] * 4),
            h_mid=np.array([math.log(2)]),
            h_high=np.full(4, math.log(2)),
            h_bar_mid=math.log(2),
            h_bar_high=math.log(2),
            mask_mid=np.array([True]),
            mask_high=np.full(4, True),
            p1=np.array([0.5, 0.5]),
            p2=np.array([0.5, 0.5]),
        )
        node, scales = loss_id(pred, 0)
        assert scales[0] == pytest.approx(-math.log(PROB_FLOOR))

    def test_label_out_of_range_rejected(self):
        params, t_base, batch, cfg = make_setup(1)
        pred, _, _ = forward_image(batch[0], t_base, params, cfg, with_pseudo=False)
        with pytest.raises(ContractViolation):
            loss_id(pred, 3)
        with pytest.raises(ContractViolation):
            loss_id(pred, -1)


class TestLossOod:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_reference(self, seed):
        params, t_base, batch, cfg = make_setup(seed)
        _, pseudo, _ = forward_image(batch[0], t_base, params, cfg)
        node, scales = loss_ood(pseudo, t_base, params, cfg.tau)
        expected = ref_loss_ood(
            ad.value_of(pseudo.q0), ad.value_of(pseudo.q1), ad.value_of(pseudo.q2),
            t_base, params.b0, params.b2, cfg.tau,
        )
        assert abs(float(ad.value_of(node)) - expected) <= 1e-12
        assert abs(sum(scales) - float(ad.value_of(node))) <= 1e-12

    def test_bounds(self):
        for seed in range(5):
            params, t_base, batch, cfg = make_setup(30 + seed, num_classes=4)
            _, pseudo, _ = forward_image(batch[0], t_base, params, cfg)
            node, _ = loss_ood(pseudo, t_base, params, cfg.tau)
            value = float(ad.value_of(node))
            assert -3.0 * math.log(4) - 1e-9 <= value <= 1e-9

    def test_orthogonal_features_reach_the_minimum(self):
        # Features orthogonal to every text column align uniformly at all
        # scales, so the entropy term bottoms out at -3 ln C.
        t_base = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        params = ModelParams.zeros(3, 2)
        rows = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
        pseudo = PseudoOodSet(
            indices=np.array([0, 1]),
            gains=np.zeros(2),
            q2=rows, q1=rows, q0=rows,
        )
        node, scales = loss_ood(pseudo, t_base, params, tau=0.01)
        assert float(ad.value_of(node)) == pytest.approx(-3.0 * math.log(2), abs=1e-12)
        for term in scales:
            assert term == pytest.approx(-math.log(2), abs=1e-12)


class TestForwardImage:
    def test_pseudo_can_be_skipped(self):
        params, t_base, batch, cfg = make_setup(2)
        pred, pseudo, choices = forward_image(
            batch[0], t_base, params, cfg, with_pseudo=False
        )
        assert pseudo is None
        assert choices.indices is None
        assert choices.mask_mid.shape == (4,)

    def test_fusion_ablation_changes_patch_scales_only(self):
        params, t_base, batch, cfg = make_setup(3)
        cfg_off = TrainConfig(
            n=cfg.n, tau=cfg.tau, k=cfg.k,
            ablations=AblationFlags(disable_cross_scale_fusion=True),
        )
        pred_on, _, _ = forward_image(batch[0], t_base, params, cfg, with_pseudo=False)
        pred_off, _, _ = forward_image(
            batch[0], t_base, params, cfg_off, with_pseudo=False
        )
        np.testing.assert_array_equal(
            ad.value_of(pred_on.p0), ad.value_of(pred_off.p0)
        )
        assert not np.array_equal(
            ad.value_of(pred_on.p_mid), ad.value_of(pred_off.p_mid)
        )


class TestBatchLoss:
    @pytest.mark.parametrize("seed", range(8))
    def test_total_decomposes_bitwise(self, seed):
        params, t_base, batch, cfg = make_setup(seed, batch_size=3)
        breakdown, _ = batch_loss(batch, t_base, params, cfg)
        assert breakdown.total == breakdown.l_id + breakdown.l_ood

    def test_weight_scales_the_outlier_term_exactly(self):
        params, t_base, batch, _ = make_setup(4)
        one = TrainConfig(n=2, tau=0.25, k=2, lambda_ood=1.0)
        two = TrainConfig(n=2, tau=0.25, k=2, lambda_ood=2.0)
        b1, _ = batch_loss(batch, t_base, params, one)
        b2, _ = batch_loss(batch, t_base, params, two)
        assert b2.l_ood == 2.0 * b1.l_ood
        assert b2.l_id == b1.l_id

    def test_disabled_outlier_term_leaves_identification_only(self):
        params, t_base, batch, _ = make_setup(5)
        cfg = TrainConfig(
            n=2, tau=0.25, k=2, ablations=AblationFlags(disable_ood_loss=True)
        )
        breakdown, choices = batch_loss(batch, t_base, params, cfg)
        assert breakdown.l_ood == 0.0
        assert breakdown.total == breakdown.l_id
        assert all(choice.indices is None for choice in choices)
        np.testing.assert_array_equal(breakdown.per_scale_neg_entropy, np.zeros(3))

    def test_batch_mean_of_identical_items(self):
        params, t_base, batch, cfg = make_setup(6, batch_size=1)
        single, _ = batch_loss(batch, t_base, params, cfg)
        double, _ = batch_loss(batch * 2, t_base, params, cfg)
        assert double.total == single.total

    def test_value_mode_matches_graph_mode_bitwise(self):
        params, t_base, batch, cfg = make_setup(7, batch_size=3)
        plain, plain_choices = batch_loss(batch, t_base, params, cfg)
        graph, _, graph_choices = batch_loss_and_grads(batch, t_base, params, cfg)
        assert plain.total == graph.total
        assert plain.l_id == graph.l_id
        assert plain.l_ood == graph.l_ood
        for a, b in zip(plain_choices, graph_choices):
            np.testing.assert_array_equal(a.mask_mid, b.mask_mid)
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_frozen_choices_replay_bitwise(self):
        params, t_base, batch, cfg = make_setup(8, batch_size=2)
        first, choices = batch_loss(batch, t_base, params, cfg)
        replay, _ = batch_loss(batch, t_base, params, cfg, frozen=choices)
        assert replay.total == first.total

    def test_random_selection_is_rng_deterministic(self):
        params, t_base, batch, _ = make_setup(9, batch_size=2)
        cfg = TrainConfig(
            n=2, tau=0.25, k=2,
            ablations=AblationFlags(disable_entropy_gain_selection=True),
        )
        _, choices_a = batch_loss(
            batch, t_base, params, cfg, rng=np.random.default_rng(11)
        )
        _, choices_b = batch_loss(
            batch, t_base, params, cfg, rng=np.random.default_rng(11)
        )
        for a, b in zip(choices_a, choices_b):
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_validation_errors(self):
        params, t_base, batch, cfg = make_setup(10)
        with pytest.raises(ContractViolation):
            batch_loss([], t_base, params, cfg)
        unlabeled = ImageEmbeddings(
            item_id="u-0", label=-1,
            v_global=batch[0].v_global,
            v_mid=batch[0].v_mid,
            v_high=batch[0].v_high,
        )
        with pytest.raises(ContractViolation):
            batch_loss([unlabeled], t_base, params, cfg)
        _, choices = batch_loss(batch, t_base, params, cfg)
        with pytest.raises(ContractViolation):
            batch_loss(batch, t_base, params, cfg, frozen=choices[:1])


class TestGradients:
    def test_mid_scale_bias_gradients_match_exactly(self):
        # The mid text table adds (b0 + b2) / 2, so any loss that touches
        # only the mid scale must hand both biases the same gradient.
        params, t_base, batch, cfg = make_setup(12)
        item = batch[0]
        w = ad.Var(params.w)
        b0 = ad.Var(params.b0)
        b2 = ad.Var(params.b2)
        tracked = ModelParams(w=w, b0=b0, b2=b2)
        pred, _, _ = forward_image(item, t_base, tracked, cfg, with_pseudo=False)
        mid_only = ad.neg_log_pick(pred.p1, item.label, PROB_FLOOR)
        ad.backward(mid_only)
        assert np.any(b0.grad != 0.0)
        np.testing.assert_array_equal(b0.grad, b2.grad)

    def test_all_parameters_receive_gradient(self):
        params, t_base, batch, cfg = make_setup(13, batch_size=2)
        _, grads, _ = batch_loss_and_grads(batch, t_base, params, cfg)
        assert np.any(grads.w != 0.0)
        assert np.any(grads.b0 != 0.0)
        assert np.any(grads.b2 != 0.0)

    def test_finite_difference_gate_quick(self):
        assert finite_difference_check(seeds=3) <= 1e-5

    def test_gradients_shrink_with_the_outlier_weight(self):
        params, t_base, batch, _ = make_setup(14)
        on = TrainConfig(n=2, tau=0.25, k=2, lambda_ood=1.0)
        off = TrainConfig(
            n=2, tau=0.25, k=2,
            ablations=AblationFlags(disable_ood_loss=True),
        )
        _, g_on, _ = batch_loss_and_grads(batch, t_base, params, on)
        _, g_off, _ = batch_loss_and_grads(batch, t_base, params, off)
        assert not np.array_equal(g_on.w, g_off.w)
