"""Loss oracles: closed-form values, invariances, and gradient checks."""

import math

import numpy as np
import pytest

from critiq import autodiff as ad
from critiq import objectives as obj
from critiq.autodiff import Tensor, backward, finite_diff_check
from critiq.objectives import (AdapterState, LossWeights, adapt_embedding,
                               adapter_score, contrastive_loss, generative_loss,
                               pretraining_loss, rank_adapter_loss, score_images)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestContrastiveLoss:
    def test_single_pair_is_exactly_zero(self):
        x = Tensor(np.array([[0.6, 0.8]]), dtype=np.float64)
        assert float(contrastive_loss(x, x, 1.0).data) == 0.0

    def test_orthonormal_two_pair_closed_form(self):
        e = Tensor(np.eye(2), dtype=np.float64)
        loss = float(contrastive_loss(e, e, 1.0).data)
        assert abs(loss - 2 * math.log(1 + math.exp(-1))) < 1e-9

    def test_symmetric_under_exchange(self):
        rng = np.random.default_rng(0)
        x = Tensor(unit_rows(rng, 5, 8))
        y = Tensor(unit_rows(rng, 5, 8))
        a = float(contrastive_loss(x, y, 0.3).data)
        b = float(contrastive_loss(y, x, 0.3).data)
        assert abs(a - b) < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = Tensor(unit_rows(rng, 4, 6))
            y = Tensor(unit_rows(rng, 4, 6))
            assert float(contrastive_loss(x, y, 0.5).data) >= 0.0

    def test_rejects_bad_tau_and_empty_batch(self):
        x = Tensor(np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError, match="tau"):
            contrastive_loss(x, x, 0.0)
        with pytest.raises(ValueError, match="tau"):
            contrastive_loss(x, x, -1.0)
        empty = Tensor(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            contrastive_loss(empty, empty, 1.0)

    def test_rejects_non_unit_rows(self):
        x = Tensor(np.array([[3.0, 4.0]]))
        with pytest.raises(ValueError, match="unit-norm"):
            contrastive_loss(x, x, 1.0)

    def test_gradient_check_with_learnable_temperature(self):
        rng = np.random.default_rng(2)
        params = {
            "x": Tensor(unit_rows(rng, 4, 8), requires_grad=True, dtype=np.float64),
            "y": Tensor(unit_rows(rng, 4, 8), requires_grad=True, dtype=np.float64),
            "log_tau": Tensor(np.array(math.log(0.07)), requires_grad=True,
                              dtype=np.float64),
        }

        def f(ps):
            return contrastive_loss(ps["x"], ps["y"], ad.exp(ps["log_tau"]))

        report = finite_diff_check(f, params)
        assert report.ok, str(report)


class TestGenerativeLoss:
    def test_uniform_logits_closed_form(self):
        logits = Tensor(np.zeros((4, 16)), dtype=np.float64)
        targets = np.array([1, 2, 3, 4])
        mask = np.ones(4, dtype=bool)
        loss = float(generative_loss(logits, targets, mask).data)
        assert abs(loss - 4 * math.log(16)) < 1e-9

    def test_pad_positions_contribute_zero(self):
        logits = Tensor(np.zeros((4, 16)), dtype=np.float64)
        targets = np.array([1, 2, 3, 0])
        mask = np.array([True, True, True, False])
        loss = float(generative_loss(logits, targets, mask).data)
        assert abs(loss - 3 * math.log(16)) < 1e-9

    def test_perfect_prediction_limit(self):
        targets = np.array([2, 5])
        mask = np.ones(2, dtype=bool)
        logits = np.zeros((2, 8))
        logits[0, 2] = logits[1, 5] = 50.0
        loss = float(generative_loss(Tensor(logits, dtype=np.float64), targets, mask).data)
        assert loss < 1e-9

    def test_batched_mean_of_per_sample_sums(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(3, 5, 7))
        targets = rng.integers(0, 7, size=(3, 5))
        mask = rng.random((3, 5)) > 0.3
        mask[:, 0] = True
        batched = float(generative_loss(Tensor(logits, dtype=np.float64),
                                        targets, mask).data)
        singles = [float(generative_loss(Tensor(logits[i], dtype=np.float64),
                                         targets[i], mask[i]).data) for i in range(3)]
        assert abs(batched - np.mean(singles)) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            generative_loss(Tensor(np.zeros((3, 4))), np.zeros(2, dtype=int),
                            np.ones(2, dtype=bool))

    def test_gradient_check(self):
        rng = np.random.default_rng(4)
        targets = rng.integers(0, 6, size=5)
        mask = np.array([True, True, False, True, True])
        params = {"logits": Tensor(rng.normal(size=(5, 6)), requires_grad=True,
                                   dtype=np.float64)}
        report = finite_diff_check(
            lambda ps: generative_loss(ps["logits"], targets, mask), params)
        assert report.ok, str(report)


class TestPretrainingLoss:
    def test_weighted_sum(self):
        out = pretraining_loss(Tensor(np.array(0.5)), Tensor(np.array(1.0)),
                               LossWeights(alpha=1.0, beta=2.0))
        assert abs(float(out.data) - 2.5) < 1e-12

    def test_beta_zero_reduces_to_contrastive(self):
        out = pretraining_loss(Tensor(np.array(0.7)), Tensor(np.array(9.9)),
                               LossWeights(alpha=1.0, beta=0.0))
        assert abs(float(out.data) - 0.7) < 1e-12

    @pytest.mark.parametrize("alpha,beta", [(2.0, 1.0), (1.0, 1.0), (1.0, 2.0)])
    def test_ratio_sweep_supported(self, alpha, beta):
        w = LossWeights(alpha=alpha, beta=beta)
        out = pretraining_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0)), w)
        assert abs(float(out.data) - (alpha + beta)) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            pretraining_loss(Tensor(np.array(np.nan)), Tensor(np.array(1.0)),
                             LossWeights())

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0, beta=2.0)
        with pytest.raises(ValueError):
            LossWeights(alpha=0.0, beta=0.0)


def make_adapter(d=2, margin=0.1, use_residual=True, use_text_anchor=True,
                 anchor=None, dtype=np.float64):
    if anchor is None:
        anchor = np.zeros(d)
        anchor[0] = 1.0
    return AdapterState.zero_init(anchor, margin=margin, use_residual=use_residual,
                                  use_text_anchor=use_text_anchor, dtype=dtype)


class TestAdaptEmbedding:
    def test_zero_residual_is_normalization(self):
        adapter = make_adapter()
        v = Tensor(np.array([3.0, 4.0]), dtype=np.float64)
        out = adapt_embedding(v, adapter).data
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)

    def test_identity_projection_matches_normalization(self):
        adapter = make_adapter()
        adapter.residual.data = np.eye(2)
        v = Tensor(np.array([3.0, 4.0]), dtype=np.float64)
        out = adapt_embedding(v, adapter).data
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)

    def test_hand_case_two_dims(self):
        adapter = make_adapter()
        adapter.residual.data = np.array([[0.0, 1.0], [0.0, 0.0]])
        out = adapt_embedding(Tensor(np.array([1.0, 0.0]), dtype=np.float64),
                              adapter).data
        np.testing.assert_allclose(out, np.array([1.0, 1.0]) / math.sqrt(2), atol=1e-12)

    def test_without_residual_uses_projection_only(self):
        adapter = make_adapter(use_residual=False)
        adapter.residual.data = np.array([[0.0, 2.0], [0.0, 0.0]])
        out = adapt_embedding(Tensor(np.array([1.0, 0.0]), dtype=np.float64),
                              adapter).data
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    def test_degenerate_projection_rejected(self):
        adapter = make_adapter(use_residual=False)  # residual matrix is zero
        with pytest.raises(ad.DegenerateInputError):
            adapt_embedding(Tensor(np.array([1.0, 0.0]), dtype=np.float64), adapter)


class TestAdapterScore:
    def test_anchor_itself_scores_one(self):
        adapter = make_adapter()
        s = adapter_score(Tensor(np.array([1.0, 0.0]), dtype=np.float64), adapter)
        assert float(s.data) == 1.0

    def test_orthogonal_scores_zero(self):
        adapter = make_adapter()
        s = adapter_score(Tensor(np.array([0.0, 1.0]), dtype=np.float64), adapter)
        assert float(s.data) == 0.0

    def test_diagonal_hand_value(self):
        adapter = make_adapter()
        v = Tensor(np.array([1.0, 1.0]) / math.sqrt(2), dtype=np.float64)
        assert abs(float(adapter_score(v, adapter).data) - 1 / math.sqrt(2)) < 1e-12


class TestRankAdapterLoss:
    def test_all_tied_embeddings_give_exactly_margin(self):
        # one ordered pair and two ordered pairs: the mean is bitwise m
        for labels in ([2.0, 1.0], [3.0, 2.0, 2.0]):
            n = len(labels)
            v = Tensor(np.tile([[0.6, 0.8]], (n, 1)), dtype=np.float64)
            adapter = make_adapter(margin=0.1)
            loss = rank_adapter_loss(v, np.array(labels), adapter)
            assert float(loss.data) == 0.1

    def test_all_tied_dyadic_margin_three_pairs(self):
        v = Tensor(np.tile([[0.6, 0.8]], (3, 1)), dtype=np.float64)
        adapter = make_adapter(margin=0.125)
        loss = rank_adapter_loss(v, np.array([3.0, 2.0, 1.0]), adapter)
        assert float(loss.data) == 0.125

    def test_separated_pairs_give_zero(self):
        scores = [0.9, 0.5, 0.1]
        v = Tensor(np.array([[s, math.sqrt(1 - s * s)] for s in scores]),
                   dtype=np.float64)
        adapter = make_adapter(margin=0.1)
        assert float(rank_adapter_loss(v, np.array([3.0, 2.0, 1.0]), adapter).data) == 0.0

    def test_pair_enumeration_hand_case(self):
        scores = [0.9, 0.5, 0.45]
        v = Tensor(np.array([[s, math.sqrt(1 - s * s)] for s in scores]),
                   dtype=np.float64)
        adapter = make_adapter(margin=0.1)
        loss = float(rank_adapter_loss(v, np.array([3.0, 2.0, 1.0]), adapter).data)
        assert abs(loss - 0.05 / 3) < 1e-9

    def test_label_ties_contribute_no_pair(self):
        scores = [0.9, 0.2]
        v = Tensor(np.array([[s, math.sqrt(1 - s * s)] for s in scores]),
                   dtype=np.float64)
        adapter = make_adapter(margin=0.1)
        with pytest.raises(ValueError, match="all-tied"):
            rank_adapter_loss(v, np.array([2.0, 2.0]), adapter)

    def test_monotone_label_transform_invariance(self):
        rng = np.random.default_rng(5)
        v = Tensor(unit_rows(rng, 6, 4), dtype=np.float64)
        adapter = make_adapter(d=4)
        adapter.residual.data = rng.normal(size=(4, 4)) * 0.1
        labels = rng.normal(size=6)
        a = float(rank_adapter_loss(v, labels, adapter).data)
        b = float(rank_adapter_loss(v, np.exp(3 * labels) + 7, adapter).data)
        assert a == b

    def test_single_sample_rejected(self):
        adapter = make_adapter()
        with pytest.raises(ValueError, match="two samples"):
            rank_adapter_loss(Tensor(np.array([[1.0, 0.0]]), dtype=np.float64),
                              np.array([1.0]), adapter)

    def test_gradient_check_away_from_kinks(self):
        rng = np.random.default_rng(6)
        h = 1e-5
        for attempt in range(50):
            raw = rng.normal(size=(4, 3))
            labels = rng.normal(size=4)
            anchor = np.zeros(3)
            anchor[0] = 1.0
            residual = rng.normal(size=(3, 3)) * 0.2

            def make_f(raw, labels):
                def f(ps):
                    adapter = AdapterState(residual=ps["residual"], anchor=anchor,
                                           margin=0.1)
                    return rank_adapter_loss(Tensor(raw), labels, adapter)
                return f

            adapter = AdapterState(residual=Tensor(residual, dtype=np.float64),
                                   anchor=anchor, margin=0.1)
            with ad.no_grad():
                scores = score_images(Tensor(raw), adapter).data
            gaps = 0.1 - (scores[:, None] - scores[None, :])
            active = labels[:, None] > labels[None, :]
            if np.abs(gaps[active]).min() < 10 * h:
                continue  # pre-filter pairs near the hinge boundary
            params = {"residual": Tensor(residual, requires_grad=True,
                                         dtype=np.float64)}
            report = finite_diff_check(make_f(raw, labels), params, h=h)
            assert report.ok, str(report)
            return
        pytest.fail("no kink-free batch found")


class TestAdapterInitEquivalence:
    def test_zero_residual_reproduces_anchor_cosine_ranking(self):
        rng = np.random.default_rng(7)
        d = 16
        anchor = unit_rows(rng, 1, d)[0]
        adapter = make_adapter(d=d, anchor=anchor)
        v = rng.normal(size=(500, d)) * rng.uniform(0.5, 3.0, size=(500, 1))
        with ad.no_grad():
            scores = score_images(Tensor(v, dtype=np.float64), adapter).data
        cosines = (v / np.linalg.norm(v, axis=1, keepdims=True)) @ anchor
        assert np.array_equal(np.argsort(scores), np.argsort(cosines))

    def test_learnable_anchor_variant(self):
        rng = np.random.default_rng(8)
        adapter = AdapterState.zero_init(np.array([1.0, 0.0]), use_text_anchor=False,
                                         anchor_init_seed=3, dtype=np.float64)
        assert adapter.learnable_anchor is not None
        v = Tensor(unit_rows(rng, 3, 2), dtype=np.float64)
        loss = rank_adapter_loss(v, np.array([3.0, 1.0, 2.0]), adapter)
        backward(loss, leaves=adapter.trainable().values())
        assert adapter.learnable_anchor.grad is not None
        assert adapter.residual.grad is not None

    def test_anchor_must_be_unit(self):
        with pytest.raises(ValueError, match="unit-norm"):
            AdapterState.zero_init(np.array([3.0, 4.0]))
