import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients

from moelab.errors import ConfigError, DataError, NumericError
from moelab.gating import (RouterNetwork, gate, gate_top1, gate_topk_sequence,
                           gate_topk_token, load_balance_loss, pool_sequence,
                           softmax)

# closed-form oracle: e / (e + 1)
SIGMOID_1 = math.e / (math.e + 1.0)  # 0.7310585786300049


def oracle_softmax(values):
    """Independent plain-python softmax."""
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def oracle_double_softmax_topk(values, k):
    """Independent two-pass computation of the sequence gate."""
    p = oracle_softmax(values)
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
    weights = oracle_softmax([p[i] for i in order])
    return p, order, weights


class TestSoftmax:
    def test_uniform(self):
        out = softmax(torch.zeros(4, dtype=torch.float64))
        assert torch.allclose(out, torch.full((4,), 0.25, dtype=torch.float64))

    def test_two_logits_closed_form(self):
        out = softmax(torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert abs(out[0] - SIGMOID_1) < 1e-4
        assert abs(out[1] - (1 - SIGMOID_1)) < 1e-4

    def test_shift_invariance(self):
        h = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=torch.float64)
        for c in (-100.0, 3.7, 250.0):
            assert torch.allclose(softmax(h), softmax(h + c), atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            softmax(torch.tensor([1.0, float("nan")]))
        with pytest.raises(NumericError):
            softmax(torch.tensor([1.0, float("inf")]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_normalization_property(self, values):
        out = softmax(torch.tensor(values, dtype=torch.float64))
        assert abs(float(out.sum()) - 1.0) < 1e-6
        assert (out >= 0).all()


class TestGateTop1:
    def test_two_experts_closed_form(self):
        res = gate_top1(torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert res.selected.tolist() == [0]
        assert abs(float(res.combine_weights[0]) - SIGMOID_1) < 1e-4

    def test_uniform_tie_breaks_to_lowest_index(self):
        res = gate_top1(torch.zeros(4, dtype=torch.float64))
        assert res.selected.tolist() == [0]
        assert abs(float(res.combine_weights[0]) - 0.25) < 1e-12

    def test_argmax_shift_invariant(self):
        h = torch.tensor([0.1, 1.4, -0.5, 0.9], dtype=torch.float64)
        base = gate_top1(h).selected
        for c in (-10.0, 0.5, 1e3):
            assert torch.equal(gate_top1(h + c).selected, base)


class TestGateTopKToken:
    def test_closed_form_example(self):
        res = gate_topk_token(torch.tensor([2.0, 1.0, 0.0, 0.0], dtype=torch.float64), 2)
        assert res.selected.tolist() == [0, 1]
        expected = oracle_softmax([2.0, 1.0])
        assert abs(float(res.combine_weights[0]) - expected[0]) < 1e-4
        assert abs(float(res.combine_weights[1]) - expected[1]) < 1e-4
        assert abs(float(res.combine_weights[0]) - 0.7311) < 1e-4

    def test_k_equals_n_uniform(self):
        res = gate_topk_token(torch.zeros(2, dtype=torch.float64), 2)
        assert torch.allclose(res.combine_weights,
                              torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            gate_topk_token(torch.zeros(4), 5)
        with pytest.raises(ConfigError):
            gate_topk_token(torch.zeros(4), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.data())
    def test_weights_normalized(self, values, data):
        k = data.draw(st.integers(1, len(values)))
        res = gate_topk_token(torch.tensor(values, dtype=torch.float64), k)
        assert abs(float(res.combine_weights.sum()) - 1.0) < 1e-6
        assert (res.combine_weights > 0).all()


class TestGateTopKSequence:
    def test_double_softmax_example(self):
        h = [2.0, 1.0, 0.0, 0.0]
        res = gate_topk_sequence(torch.tensor(h, dtype=torch.float64), 2)
        p, order, weights = oracle_double_softmax_topk(h, 2)
        assert res.selected.tolist() == order == [0, 1]
        assert np.allclose(res.probabilities.numpy(), p, atol=1e-6)
        assert np.allclose(res.combine_weights.numpy(), weights, atol=1e-6)
        # frozen values from the oracle
        assert abs(p[0] - 0.6103) < 1e-4 and abs(p[1] - 0.2245) < 1e-4
        assert abs(weights[0] - 0.5953) < 1e-4 and abs(weights[1] - 0.4047) < 1e-4

    def test_uniform_survives_both_softmaxes(self):
        res = gate_topk_sequence(torch.zeros(2, dtype=torch.float64), 2)
        assert torch.allclose(res.combine_weights,
                              torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_k1_falls_back_to_top1(self):
        h = torch.tensor([0.4, 1.2, -0.3], dtype=torch.float64)
        seq = gate_topk_sequence(h, 1)
        top1 = gate_top1(h)
        assert torch.equal(seq.selected, top1.selected)
        assert torch.equal(seq.combine_weights, top1.combine_weights)

    def test_sequence_weights_closer_to_uniform_than_token(self):
        # second softmax sees inputs in [0, 1], so it compresses toward 0.5
        rng = np.random.default_rng(42)
        for _ in range(500):
            h = torch.tensor(rng.normal(0, 2.0, size=4), dtype=torch.float64)
            tok = gate_topk_token(h, 2)
            seq = gate_topk_sequence(h, 2)
            gap_tok = abs(float(tok.combine_weights[0]) - 0.5)
            gap_seq = abs(float(seq.combine_weights[0]) - 0.5)
            if gap_tok > 1e-9:  # ties give equal weights in both gates
                assert gap_seq < gap_tok

    def test_k_equals_n_is_softmax_of_softmax(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 5, 8):
            h = torch.tensor(rng.normal(0, 3.0, size=n), dtype=torch.float64)
            res = gate_topk_sequence(h, n)
            direct = softmax(softmax(h))
            combined = torch.zeros(n, dtype=torch.float64)
            combined[res.selected] = res.combine_weights
            assert torch.allclose(combined, direct, atol=1e-12)


class TestSelectionProperties:
    """Top-K selection invariants over random logit vectors."""

    def test_selected_are_k_largest_with_lowest_index_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            n = int(rng.integers(1, 9))
            k = int(rng.integers(1, n + 1))
            # quantized logits force frequent exact ties
            h = torch.tensor(np.round(rng.normal(0, 1, size=n), 1),
                             dtype=torch.float64)
            res = gate(h, k, "token" if rng.random() < 0.5 else "sequence")
            expected = sorted(range(n), key=lambda i: (-float(h[i]), i))[:k]
            assert abs(float(res.probabilities.sum()) - 1.0) < 1e-6
            assert res.selected.tolist() == expected
            assert (res.combine_weights > 0).all()

    def test_explicit_tie(self):
        res = gate_topk_token(torch.tensor([1.0, 2.0, 2.0, 0.0],
                                           dtype=torch.float64), 2)
        assert res.selected.tolist() == [1, 2]


class TestPoolSequence:
    def test_single_position_identity(self):
        x = torch.randn(1, 5, dtype=torch.float64)
        assert torch.equal(pool_sequence(x), x[0])

    def test_identical_rows_idempotent(self):
        row = torch.randn(6, dtype=torch.float64)
        x = torch.stack([row, row])
        assert torch.allclose(pool_sequence(x), row)

    def test_permutation_invariant(self):
        x = torch.randn(7, 4, dtype=torch.float64)
        perm = torch.randperm(7)
        assert torch.allclose(pool_sequence(x), pool_sequence(x[perm]))

    def test_mask_selects_positions(self):
        x = torch.tensor([[1.0, 1.0], [3.0, 3.0], [100.0, 100.0]])
        mask = torch.tensor([True, True, False])
        assert torch.allclose(pool_sequence(x, mask), torch.tensor([2.0, 2.0]))

    def test_all_masked_errors(self):
        with pytest.raises(DataError):
            pool_sequence(torch.randn(3, 2), torch.zeros(3, dtype=torch.bool))


class TestLoadBalanceLoss:
    def test_uniform_value(self):
        f = torch.full((4,), 0.25, dtype=torch.float64)
        loss = load_balance_loss(f, f.clone(), 0.01, 4)
        assert abs(float(loss) - 0.01) < 1e-12  # 0.01 * 4 * 4 * 0.0625

    def test_collapsed_value(self):
        f = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        loss = load_balance_loss(f, f.clone(), 0.01, 4)
        assert abs(float(loss) - 0.04) < 1e-12

    def test_zero_lambda(self):
        f = torch.rand(4)
        f = f / f.sum()
        assert float(load_balance_loss(f, f, 0.0, 4)) == 0.0

    def test_negative_entries_rejected(self):
        bad = torch.tensor([1.2, -0.2, 0.0, 0.0])
        good = torch.full((4,), 0.25)
        with pytest.raises(NumericError):
            load_balance_loss(bad, good, 0.01, 4)

    @pytest.mark.parametrize("n", [2, 3])
    def test_minimum_at_uniform_on_diagonal(self, n):
        # brute-force grid over the simplex with f = P (the realizable
        # coupling); the minimum value lambda sits at the uniform point
        lam = 0.01
        steps = 40
        best, best_point = float("inf"), None
        for combo in itertools.product(range(steps + 1), repeat=n - 1):
            if sum(combo) > steps:
                continue
            point = [c / steps for c in combo]
            point.append(1.0 - sum(point))
            f = torch.tensor(point, dtype=torch.float64)
            value = float(load_balance_loss(f, f, lam, n))
            if value < best:
                best, best_point = value, point
        assert abs(best - lam) < 1e-3
        assert all(abs(p - 1.0 / n) < 1.0 / steps + 1e-9 for p in best_point)


class TestCompositeGradients:
    """Gradients flow through combine weights to router weights."""

    @pytest.mark.parametrize("unit,k", [("token", 1), ("token", 2),
                                        ("sequence", 1), ("sequence", 2)])
    def test_router_and_expert_gradients_match_finite_differences(self, unit, k):
        torch.manual_seed(5)
        d, n = 8, 4
        x = torch.randn(d, dtype=torch.float64)
        w_router = (0.5 * torch.randn(n, d, dtype=torch.float64)).requires_grad_()
        experts = [(0.3 * torch.randn(d, d, dtype=torch.float64)).requires_grad_()
                   for _ in range(n)]
        target = torch.randn(d, dtype=torch.float64)

        def loss_fn():
            res = gate(w_router @ x, k, unit)
            y = torch.zeros(d, dtype=torch.float64)
            for j in range(k):
                y = y + res.combine_weights[j] * (experts[res.selected[j]] @ x)
            return ((y - target) ** 2).sum()

        rng = np.random.default_rng(11)
        res = gate((w_router @ x).detach(), k, unit)
        active = [experts[int(i)] for i in res.selected]
        check_gradients(loss_fn, [w_router, *active], rng, samples_per_tensor=6)


class TestRouterNetwork:
    def test_output_dimension_matches_experts(self):
        for depth in ("one_layer", "two_layer"):
            router = RouterNetwork(16, 4, depth=depth)
            out = router(torch.randn(10, 16))
            assert out.shape == (10, 4)

    def test_two_layer_default_hidden_is_d_model(self):
        router = RouterNetwork(16, 4, depth="two_layer")
        assert router.fc.weight.shape == (16, 16)

    def test_custom_hidden(self):
        router = RouterNetwork(16, 4, depth="two_layer", hidden=8)
        assert router.fc.weight.shape == (8, 16)
