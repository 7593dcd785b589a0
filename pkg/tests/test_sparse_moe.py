from __future__ import annotations

import math

import numpy as np
import pytest

from adaensemble import autograd as ag
from adaensemble.autograd import Tensor
from adaensemble.experts import ExpertConfig, make_expert
from adaensemble.gradcheck import check_gradients
from adaensemble.rng import make_rng
from adaensemble.sparse_moe import (
    AnnealSchedule,
    DispatchError,
    GateConfigError,
    GatingNetwork,
    LoadStats,
    SparseMoELayer,
    StatsError,
    anneal_k,
    combine,
    dispatch,
    load_balance_loss,
    load_distribution_loss,
    load_stats,
    top_k_gate,
)


def make_layer(F=3, D=4, kinds=("pin", "cross", "dense"), seed=0, targets=None):
    r = make_rng(seed, "init")
    experts = [make_expert(k, F, D, r, ExpertConfig(dense_hidden=6)) for k in kinds]
    gate = GatingNetwork(F * D, len(experts), r, reduction=2, hidden=5)
    return SparseMoELayer(experts, gate, F, D, targets)


def dense_loop(layer, x, x0):
    """out = layer_norm(x + sum_j softmax(g)_j E_j(x)) by explicit per-expert loop."""
    B = x.shape[0]
    g = layer.gate.scores(x0.reshape(B, -1))
    w = ag.softmax(g).data
    mix = np.zeros(x.shape)
    for j, e in enumerate(layer.experts):
        mix += w[:, j, None, None] * e.forward(x, x0).data
    z = (x.data + mix).reshape(B, -1)
    mu = z.mean(axis=1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
    normed = ((z - mu) / np.sqrt(var + layer.norm_eps)).reshape(x.shape)
    return normed * layer.norm["gain"].data + layer.norm["bias"].data


class TestGatingNetwork:
    def test_eval_mode_deterministic(self, rng):
        gate = GatingNetwork(12, 3, make_rng(0), reduction=4, hidden=5)
        x = Tensor(rng.normal(size=(4, 12)))
        np.testing.assert_array_equal(gate.scores(x).data, gate.scores(x).data)

    def test_jitter_changes_training_scores(self, rng):
        gate = GatingNetwork(12, 3, make_rng(0), reduction=4, hidden=5, jitter=0.1)
        x = Tensor(rng.normal(size=(4, 12)))
        assert not np.array_equal(gate.scores(x, train=True, rng=make_rng(0, "jitter")).data, gate.scores(x).data)

    def test_aligned_hidden_scores_inverse_temperature(self, rng):
        gate = GatingNetwork(6, 3, make_rng(0), reduction=2, hidden=4)
        x = Tensor(rng.normal(size=(1, 6)))
        h = gate.hidden_state(x, False, None).data[0]
        gate.params["embeddings"].data[1] = 2.5 * h
        s = gate.scores(x).data[0]
        tau = gate.temperature().item()
        assert math.isclose(tau, 1.0, rel_tol=1e-12)
        assert math.isclose(s[1], 1.0 / tau, rel_tol=1e-12)

    def test_temperature_floor(self):
        gate = GatingNetwork(6, 3, make_rng(0), tau_min=0.05)
        gate.params["tau_raw"].data = np.array(-1e3)
        assert gate.temperature().item() >= 0.05

    def test_score_gradients(self, rng):
        gate = GatingNetwork(8, 3, make_rng(1), reduction=2, hidden=4)
        x = Tensor(rng.normal(size=(3, 8)))
        w = Tensor(rng.normal(size=(3, 3)))
        err = check_gradients(lambda: ag.sum_(ag.softmax(gate.scores(x)) * w), list(gate.params.values()))
        assert err < 1e-3


class TestTopK:
    def test_hand_softmax(self):
        d = top_k_gate(Tensor(np.array([0.5, 0.2, -0.1])), 2)
        np.testing.assert_allclose(d.weights.data[0], [0.5744, 0.4256, 0.0], atol=1e-3)

    def test_k_equals_n_is_plain_softmax(self, rng):
        g = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(top_k_gate(g, 4).weights.data, ag.softmax(g).data, rtol=1e-15)

    def test_k_one_is_one_hot_argmax(self, rng):
        g = rng.normal(size=(6, 4))
        w = top_k_gate(Tensor(g), 1).weights.data
        np.testing.assert_array_equal(w, np.eye(4)[g.argmax(axis=1)])

    def test_ties_go_to_lower_index(self):
        d = top_k_gate(Tensor(np.array([[1.0, 2.0, 2.0, 2.0]])), 2)
        np.testing.assert_array_equal(d.support[0], [False, True, True, False])

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(GateConfigError):
            top_k_gate(Tensor(np.zeros((1, 3))), k)


class TestAnneal:
    def test_staircase(self):
        s = AnnealSchedule(5, 2, 3)
        assert [anneal_k(t, s) for t in range(5)] == [5, 4, 3, 2, 2]

    def test_endpoints_and_monotone(self):
        for n, kf, steps in [(3, 1, 10), (5, 5, 4), (7, 2, 1), (4, 2, 0)]:
            s = AnnealSchedule(n, kf, steps)
            ks = [s(t) for t in range(steps + 5)]
            if steps > 0:
                assert ks[0] == n
            assert ks[steps] == kf
            assert all(a >= b for a, b in zip(ks, ks[1:]))

    def test_invalid(self):
        with pytest.raises(GateConfigError):
            AnnealSchedule(3, 4, 10)


class TestDispatchCombine:
    def test_one_hot_to_first_expert(self):
        support = np.zeros((5, 3), dtype=bool)
        support[:, 0] = True
        plan = dispatch(support)
        assert plan.groups[0].tolist() == [0, 1, 2, 3, 4]
        assert all(g.size == 0 for g in plan.groups[1:])

    def test_dense_route(self):
        plan = dispatch(np.ones((4, 3), dtype=bool))
        assert all(g.tolist() == [0, 1, 2, 3] for g in plan.groups)

    def test_identity_round_trip(self, rng):
        for _ in range(20):
            B, N = rng.integers(1, 9), rng.integers(1, 5)
            support = rng.random((B, N)) < 0.5
            support[np.arange(B), rng.integers(0, N, B)] = True
            x = Tensor(rng.normal(size=(B, 3, 2)))
            plan = dispatch(support)
            assert np.array_equal(plan.occurrences(), support.sum(axis=1))
            weights = Tensor(support / support.sum(axis=1, keepdims=True))
            out = combine(plan.gather(x), plan, weights)
            np.testing.assert_allclose(out.data, x.data, rtol=1e-15, atol=1e-15)

    def test_unit_weight_passthrough(self, rng):
        a = Tensor(rng.normal(size=(3, 2, 2)))
        plan = dispatch(np.array([[True, False]] * 3))
        out = combine([a, None], plan, Tensor(np.array([[1.0, 0.0]] * 3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_midpoint(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
        plan = dispatch(np.ones((2, 2), dtype=bool))
        out = combine([a, b], plan, Tensor(np.full((2, 2), 0.5)))
        np.testing.assert_allclose(out.data, (a.data + b.data) / 2, rtol=1e-15)

    def test_plan_mismatch(self, rng):
        plan = dispatch(np.ones((2, 2), dtype=bool))
        with pytest.raises(DispatchError):
            combine([Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3)))], plan, Tensor(np.ones((2, 2))))
        with pytest.raises(DispatchError):
            combine([Tensor(np.zeros((2, 3)))], plan, Tensor(np.ones((2, 2))))


class TestLayer:
    def test_k_equals_n_matches_dense_loop(self, rng):
        layer = make_layer()
        for _ in range(10):
            x, x0 = Tensor(rng.normal(size=(6, 3, 4))), Tensor(rng.normal(size=(6, 3, 4)))
            out = layer.forward(x, x0, k=3).out.data
            np.testing.assert_allclose(out, dense_loop(layer, x, x0), rtol=0, atol=1e-9)

    def test_zero_experts_residual_passthrough(self, rng):
        layer = make_layer(kinds=("pin", "dense"))
        for e in layer.experts:
            for p in e.params.values():
                p.data = np.zeros_like(p.data)
        x = Tensor(rng.normal(size=(4, 3, 4)))
        out = layer.forward(x, x, k=2).out.data
        ref = ag.layer_norm(x, layer.norm["gain"], layer.norm["bias"], layer.norm_eps).data
        np.testing.assert_array_equal(out, ref)

    def test_unselected_experts_not_called(self, rng):
        layer = make_layer()
        x = Tensor(rng.normal(size=(16, 3, 4)))
        res = layer.forward(x, x, k=1)
        for j, e in enumerate(layer.experts):
            assert e.examples_seen == int(res.decision.support[:, j].sum())
            assert e.calls == int(res.decision.support[:, j].any())

    def test_flops_follow_selection(self, rng):
        layer = make_layer()
        x = Tensor(rng.normal(size=(8, 3, 4)))
        res = layer.forward(x, x, k=2)
        expect = layer.gate.flops + res.decision.support @ layer.expert_flops()
        np.testing.assert_array_equal(res.flops, expect)

    def test_duplicate_kinds_rejected(self):
        with pytest.raises(GateConfigError):
            make_layer(kinds=("pin", "pin"))

    def test_layer_gradients(self, rng):
        layer = make_layer(seed=3)
        x = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        x0 = Tensor(rng.normal(size=(3, 3, 4)))
        w = Tensor(rng.normal(size=(3, 3, 4)))
        params = [p for e in layer.experts for p in e.params.values()] + list(layer.gate.params.values())
        params += list(layer.norm.values())

        def fn():
            res = layer.forward(x, x0, k=2)
            return ag.sum_(res.out * w) + load_balance_loss(res.stats, 0.3)

        assert check_gradients(fn, [x, *params]) < 1e-3


def stats(f, P):
    return LoadStats(np.asarray(f, dtype=np.float64), Tensor(np.asarray(P, dtype=np.float64)), 10)


class TestLoadLosses:
    @pytest.mark.parametrize("n", [2, 3, 7])
    def test_uniform_balance_is_lambda(self, n):
        u = np.full(n, 1.0 / n)
        assert abs(load_balance_loss(stats(u, u), 0.37).item() - 0.37) < 1e-12

    def test_collapse_is_lambda_n(self):
        one = np.array([1.0, 0.0, 0.0, 0.0])
        assert abs(load_balance_loss(stats(one, one), 0.5).item() - 2.0) < 1e-12

    def test_balance_formula(self, rng):
        f, P = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert math.isclose(load_balance_loss(stats(f, P), 0.2).item(), 0.2 * 5 * float(np.dot(f, P)), rel_tol=1e-14)

    def test_distribution_fixed_point(self, rng):
        w = rng.dirichlet(np.ones(4))
        assert abs(load_distribution_loss(stats(w, w), w, 0.11).item() - 0.11) < 1e-12

    def test_distribution_formula(self, rng):
        f, P, w = (rng.dirichlet(np.ones(4)) for _ in range(3))
        expect = 0.3 * sum(fj * pj / wj for fj, pj, wj in zip(f, P, w))
        assert math.isclose(load_distribution_loss(stats(f, P), w, 0.3).item(), expect, rel_tol=1e-14)

    def test_distribution_perturbation_increases(self, rng):
        w = np.array([0.5, 0.3, 0.2])
        base = load_distribution_loss(stats(w, w), w, 1.0).item()
        for j in range(3):
            P = 0.9 * w + 0.1 * np.eye(3)[j]
            f = 0.9 * w + 0.1 * np.eye(3)[j]
            assert load_distribution_loss(stats(f, P), w, 1.0).item() > base

    def test_nonpositive_targets(self):
        with pytest.raises(GateConfigError):
            load_distribution_loss(stats([0.5, 0.5], [0.5, 0.5]), [1.0, 0.0], 1.0)

    def test_empty_batch(self):
        with pytest.raises(StatsError):
            load_stats(Tensor(np.zeros((0, 3))))

    def test_stats_definition(self):
        probs = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.6, 0.3, 0.1], [0.2, 0.2, 0.6]]))
        s = load_stats(probs)
        np.testing.assert_array_equal(s.f, [0.5, 0.25, 0.25])
        np.testing.assert_allclose(s.P.data, probs.data.mean(axis=0), rtol=1e-15)
