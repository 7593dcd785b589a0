from __future__ import annotations

import numpy as np
from conftest import tiny_model
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaensemble import autograd as ag
from adaensemble.autograd import Tensor
from adaensemble.depth import Estimator, dynamic_propagation
from adaensemble.experts import ExpertConfig, make_expert
from adaensemble.features import fit_bucketizer, log_square_transform
from adaensemble.metrics import auc, binary_cross_entropy
from adaensemble.rng import make_rng
from adaensemble.sparse_moe import (
    AnnealSchedule,
    GatingNetwork,
    SparseMoELayer,
    anneal_k,
    combine,
    dispatch,
    load_stats,
    top_k_gate,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def score_matrix(max_n=6):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(np.float64, st.tuples(st.integers(1, 5), st.just(n)), elements=finite)
    )


@given(score_matrix())
def test_softmax_is_probability_vector(g):
    p = ag.softmax(Tensor(g)).data
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0, atol=1e-12)


@given(score_matrix(), st.data())
def test_top_k_contract(g, data):
    k = data.draw(st.integers(1, g.shape[1]))
    dec = top_k_gate(Tensor(g), k)
    w = dec.weights.data
    assert np.all(dec.support.sum(-1) == k)
    assert np.all(w[~dec.support] == 0.0)
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    for row, sup in zip(g, dec.support):
        # every kept score is at least every dropped score
        if (~sup).any():
            assert row[sup].min() >= row[~sup].max()


@given(st.integers(1, 8), st.data())
def test_top_k_ties_prefer_lower_index(n, data):
    k = data.draw(st.integers(1, n))
    dec = top_k_gate(Tensor(np.zeros((1, n))), k)
    assert dec.indices[0].tolist() == list(range(k))


@given(st.integers(1, 10), st.data(), st.integers(0, 50))
def test_anneal_monotone_and_bounded(n, data, steps):
    kf = data.draw(st.integers(1, n))
    sched = AnnealSchedule(n, kf, steps)
    ks = [anneal_k(t, sched) for t in range(steps + 3)]
    assert ks[0] == (n if steps else kf)
    assert all(a >= b for a, b in zip(ks, ks[1:]))
    assert all(kf <= k <= n for k in ks)
    assert ks[-1] == kf


@given(arrays(np.bool_, st.tuples(st.integers(1, 8), st.integers(1, 5))), st.integers(0, 1000))
def test_dispatch_combine_round_trip(support, seed):
    rng = np.random.default_rng(seed)
    plan = dispatch(support)
    assert np.array_equal(plan.occurrences(), support.sum(-1))
    x = Tensor(rng.normal(size=(support.shape[0], 3)))
    weights = Tensor(np.where(support, 1.0, 0.0))
    outs = plan.gather(x)
    if not support.any():
        return
    # identity experts with unit weights give x times the number of selections
    back = combine(outs, plan, weights).data
    np.testing.assert_allclose(back, x.data * support.sum(-1, keepdims=True), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.integers(0, 100))
def test_gate_contract_and_load_stats(rows, seed):
    rng = make_rng(seed, "init")
    net = GatingNetwork(4, 3, rng, reduction=2, hidden=4)
    x = Tensor(np.resize(rows, (3, 4)))
    probs = ag.softmax(net.scores(x))
    stats = load_stats(probs)
    assert np.isclose(stats.f.sum(), 1.0) and np.isclose(stats.P.data.sum(), 1.0)
    assert np.all(stats.f >= 0) and np.all(stats.P.data >= 0)


@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e6, 1e6)), st.integers(2, 10))
def test_bucketizer_monotone(values, bins):
    b = fit_bucketizer(values, bins)
    assert list(b.boundaries) == sorted(set(b.boundaries))
    order = np.sort(values)
    buckets = b.bucket_many(order)
    assert np.all(np.diff(buckets) >= 0)
    assert buckets.min() >= 0 and buckets.max() <= bins - 1


@given(st.floats(1e-300, 1e300), st.floats(1e-300, 1e300))
def test_log_square_monotone_in_magnitude(a, b):
    lo, hi = sorted((a, b))
    assert log_square_transform(lo) <= log_square_transform(hi)
    assert log_square_transform(-a) == log_square_transform(a)


@given(st.integers(0, 10_000), st.lists(st.integers(1, 3), min_size=1, max_size=8))
def test_dynamic_propagation_matches_per_example(seed, depths):
    r = make_rng(seed, "init")
    F, D = 3, 2
    layers = []
    for _ in range(3):
        experts = [make_expert(k, F, D, r, ExpertConfig(dense_hidden=4)) for k in ("pin", "cross", "dense")]
        layers.append(SparseMoELayer(experts, GatingNetwork(F * D, 3, r, reduction=2, hidden=4), F, D))
    ests = [Estimator(F, D, r) for _ in range(3)]
    depths = np.array(depths)
    x0 = Tensor(np.random.default_rng(seed).normal(size=(len(depths), F, D)))
    preds, flops = dynamic_propagation(x0, depths, layers, ests, 2)
    for i, d in enumerate(depths):
        xi0 = ag.take(x0, [i], axis=0)
        x, total = xi0, 0
        for l in range(d):
            res = layers[l].forward(x, xi0, 2)
            x, total = res.out, total + int(res.flops[0])
        assert abs(preds.data[i] - ests[d - 1](x).item()) <= 1e-9
        assert flops[i] == total + ests[d - 1].flops


@given(st.integers(0, 10_000), st.floats(0.1, 100.0))
def test_no_nan_from_finite_inputs(seed, scale):
    m = tiny_model(num_layers=2)
    rng = np.random.default_rng(seed)
    for t in m.embedding.tables:
        t.data = t.data * scale
    idx = rng.integers(0, 6, size=(7, 3))
    out = m.forward_infer(idx)
    assert np.all(np.isfinite(out.preds)) and np.all((out.preds >= 0) & (out.preds <= 1))
    train = m.forward_train(idx, 0, make_rng(seed, "jitter"))
    ll = binary_cross_entropy(train.preds, rng.integers(0, 2, 7))
    assert np.isfinite(ll.item())


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1)), st.integers(0, 1000))
def test_auc_matches_pair_count(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, scores.size)
    if y.min() == y.max():
        return
    pos, neg = scores[y == 1], scores[y == 0]
    pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert abs(auc(scores, y) - pairs / (pos.size * neg.size)) <= 1e-12
