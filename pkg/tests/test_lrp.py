import numpy as np
import pytest

from lrploc import lrp
from lrploc.lrp import Rule, attribute, canonize_residual, default_rules, propagate_linear, propagate_wsquare
from lrploc.models import LocCnnConfig, build_loccnn
from lrploc.nn import (Conv1D, Dense, ElementwiseMultiply, GlobalAvgPool1D, LayerGraph, MaxPool1D, ReLU,
                       ResidualAdd, Sigmoid, StaleTraceError, forward, init_parameters)

from oracles import random_network


def _dense(w, b=None):
    w = np.asarray(w, dtype=float)
    layer = Dense("d", w.shape[0], w.shape[1])
    layer.params = {"weight": w, "bias": np.zeros(w.shape[1]) if b is None else np.asarray(b, float)}
    return layer


def test_identity_dense_epsilon_zero():
    g = LayerGraph((2,))
    g.add(_dense(np.eye(2)))
    _, trace = forward(g, np.array([2.0, 0.0]))
    r = attribute(g, trace, rules={"d": Rule("Epsilon", epsilon=0.0)})
    np.testing.assert_allclose(r.input_relevance, [2.0, 0.0], atol=1e-12)


def test_symmetric_two_input_neuron():
    # bias 2 makes the neuron's output (and so its relevance) 4 while z stays (1, 1)
    g = LayerGraph((2,))
    g.add(_dense([[1.0], [1.0]], [2.0]))
    _, trace = forward(g, np.array([1.0, 1.0]))
    r = attribute(g, trace, rules={"d": Rule("Epsilon", epsilon=0.0)})
    assert r.output_seed.tolist() == [4.0]
    np.testing.assert_allclose(r.input_relevance, [2.0, 2.0], rtol=1e-9)


def test_gamma_rule_hand_example():
    layer = _dense([[1.0], [-1.0]])
    r = propagate_linear(layer, np.array([[1.0, 1.0]]), np.array([[1.0]]), Rule("Gamma", gamma=0.25))
    # z = (1.25, -1), sum 0.25 -> (5, -4)
    np.testing.assert_allclose(r[0], [5.0, -4.0], rtol=1e-7)


def test_wsquare_hand_example_and_input_independence():
    conv = Conv1D("c", 2, 1, 1)
    conv.params["weight"] = np.array([[[3.0], [4.0]]])
    x = np.array([[[0.7, -2.0]]])
    r = propagate_wsquare(conv, x, np.array([[[1.0]]]))
    np.testing.assert_allclose(r[0, 0], [9 / 25, 16 / 25], rtol=1e-9)
    np.testing.assert_array_equal(propagate_wsquare(conv, 2 * x, np.array([[[1.0]]])), r)


def test_wsquare_conserves_with_padding():
    rng = np.random.default_rng(0)
    conv = Conv1D("c", 3, 4, 5)
    conv.params["weight"] = rng.standard_normal((4, 3, 5))
    x = rng.standard_normal((2, 11, 3))
    r_out = rng.standard_normal((2, 11, 4))
    r_in = propagate_wsquare(conv, x, r_out)
    np.testing.assert_allclose(r_in.sum(axis=(1, 2)), r_out.sum(axis=(1, 2)), rtol=1e-9)


def test_wsquare_zero_weight_unit_falls_back_to_uniform(caplog):
    layer = _dense([[0.0, 1.0], [0.0, 1.0]])
    with caplog.at_level("WARNING"):
        r = propagate_wsquare(layer, np.ones((1, 2)), np.array([[2.0, 0.0]]))
    assert "all-zero weights" in caplog.text
    np.testing.assert_allclose(r[0], [1.0, 1.0], rtol=1e-8)


def test_gamma_zero_equals_epsilon_zero():
    rng = np.random.default_rng(1)
    conv = Conv1D("c", 2, 3, 3)
    conv.params["weight"] = rng.standard_normal((3, 2, 3))
    x = rng.uniform(0, 1, (2, 9, 2))
    r_out = rng.standard_normal((2, 9, 3))
    a = propagate_linear(conv, x, r_out, Rule("Gamma", gamma=0.0))
    b = propagate_linear(conv, x, r_out, Rule("Epsilon", epsilon=0.0))
    np.testing.assert_array_equal(a, b)


def test_signal_takes_all():
    r = np.random.default_rng(2).standard_normal((1, 4, 3))
    rs, rg = lrp.propagate_signal_takes_all(r, (1, 3))
    assert rs is r and np.all(rg == 0) and rg.shape == (1, 3)


def test_residual_split_cases():
    rng = np.random.default_rng(3)
    r = rng.standard_normal((2, 5, 3))
    a = rng.uniform(0.1, 1, (2, 5, 3))
    main, skip = canonize_residual(a, np.zeros_like(a), r)
    np.testing.assert_allclose(main, r, rtol=1e-7) and np.testing.assert_array_equal(skip, 0)
    main, skip = canonize_residual(a, a, r)
    np.testing.assert_allclose(main, r / 2, rtol=1e-7)
    np.testing.assert_allclose(skip, r / 2, rtol=1e-7)
    am, ask = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
    main, skip = canonize_residual(am, ask, r)
    assert np.all(np.abs(main + skip - r) <= 1e-6 * np.abs(r) + 1e-12 * 0 + np.abs(r) * 1e-9 / np.abs(am + ask))


def test_passthrough_and_maxpool_routing():
    g = LayerGraph((4, 1))
    g.add(ReLU("r"))
    g.add(MaxPool1D("p", 2))
    g.add(_dense([[1.0], [1.0]]))
    g["d"].id = "d"
    x = np.array([[1.0], [3.0], [2.0], [0.5]])
    _, trace = forward(g, x)
    r = attribute(g, trace, rules={"r": Rule("PassThrough"), "p": Rule("PassThrough"),
                                   "d": Rule("Epsilon", epsilon=0.0)}, keep_layers=True)
    np.testing.assert_allclose(r.input_relevance.ravel(), [0, 3, 2, 0], atol=1e-8)
    np.testing.assert_array_equal(r.layers["r"], r.input_relevance)


def _se_pair(seed=4):
    """A tiny SE block with a saturated gate, and the same network without the gate."""
    rng = np.random.default_rng(seed)
    full = LayerGraph((12, 2))
    full.add(Conv1D("c0", 2, 3, 3))
    x = full.add(ReLU("r0"))
    full.add(Conv1D("c1", 3, 3, 3))
    main = full.add(ReLU("r1"))
    res = full.add(ResidualAdd("add"), [main, x], tags=["main", "skip"])
    full.add(GlobalAvgPool1D("sq"), res)
    full.add(Dense("se1", 3, 2))
    full.add(ReLU("se_r"))
    full.add(Dense("se2", 2, 3))
    gate = full.add(Sigmoid("gate"))
    full.add(ElementwiseMultiply("mul"), [res, gate], tags=["signal", "gate"])
    full.add(MaxPool1D("pool", 2))
    full.add(Dense("out", 18, 3))
    init_parameters(full, rng)
    full["se2"].params["weight"][:] = 0
    full["se2"].params["bias"][:] = 50.0
    full.touch()

    bare = LayerGraph((12, 2))
    bare.add(Conv1D("c0", 2, 3, 3))
    x = bare.add(ReLU("r0"))
    bare.add(Conv1D("c1", 3, 3, 3))
    main = bare.add(ReLU("r1"))
    bare.add(ResidualAdd("add"), [main, x], tags=["main", "skip"])
    bare.add(MaxPool1D("pool", 2))
    bare.add(Dense("out", 18, 3))
    bare.set_parameters({k: v for k, v in full.parameters().items() if k.split(".")[0] in
                         {"c0", "c1", "out"}})
    return full, bare


def test_saturated_gate_matches_removed_gate():
    full, bare = _se_pair()
    x = np.random.default_rng(5).standard_normal((12, 2))
    _, tf = forward(full, x)
    _, tb = forward(bare, x)
    rf = attribute(full, tf)
    rb = attribute(bare, tb)
    np.testing.assert_array_equal(rf.output_seed, rb.output_seed)
    np.testing.assert_allclose(rf.input_relevance, rb.input_relevance, rtol=1e-12, atol=1e-15)


def test_zero_input_window_gives_zero_relevance():
    g = build_loccnn(LocCnnConfig(channels=(3, 3, 3, 3, 3), hidden=6), seed=1)
    _, trace = forward(g, np.zeros((5120, 16)))
    r = attribute(g, trace)
    assert r.input_relevance.shape == (5120, 16) and np.all(r.input_relevance == 0)


@pytest.mark.parametrize("seed", range(10))
def test_conservation_on_random_networks(seed):
    g = random_network(np.random.default_rng(seed), with_bias=False)
    x = np.random.default_rng(100 + seed).standard_normal((3,) + g.input_shape)
    _, trace = forward(g, x)
    rules = default_rules(g, epsilon=0.0)
    for k in range(g.output_dim):
        r = attribute(g, trace, selector=k, rules=rules)
        assert np.all(r.conservation_error() < 1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_biased_networks_account_for_absorbed_relevance(seed):
    # a neuron driven only by its bias (all inputs zero) has nowhere to send its relevance;
    # whatever goes missing must show up in the per-layer absorption record
    g = random_network(np.random.default_rng(seed), with_bias=True)
    x = np.random.default_rng(100 + seed).standard_normal((3,) + g.input_shape)
    _, trace = forward(g, x)
    r = attribute(g, trace, rules=default_rules(g, epsilon=0.0))
    total = r.input_relevance.reshape(3, -1).sum(axis=1) + sum(r.absorbed.values())
    np.testing.assert_allclose(total, r.output_seed.sum(axis=1), rtol=1e-9, atol=1e-12)


def test_epsilon_absorbs_without_amplifying():
    # per output neuron: |sum_j R_j| = |R_k| |sum z| / (|sum z| + eps) <= |R_k|
    rng = np.random.default_rng(11)
    layer = _dense(rng.standard_normal((6, 4)))
    x = rng.standard_normal((5, 6))
    for k in range(4):
        r_out = np.zeros((5, 4))
        r_out[:, k] = rng.standard_normal(5)
        r_in = propagate_linear(layer, x, r_out, Rule("Epsilon", epsilon=0.1))
        assert np.all(np.abs(r_in.sum(axis=1)) <= np.abs(r_out[:, k]) * (1 + 1e-4))
    g = random_network(rng)
    _, trace = forward(g, rng.standard_normal((2,) + g.input_shape))
    r = attribute(g, trace, rules=default_rules(g, epsilon=0.1))
    assert set(r.absorbed) == {n.id for n in g.nodes}


def test_default_rule_assignment():
    g = random_network(np.random.default_rng(7))
    rules = default_rules(g)
    kinds = {n.id: n.layer.kind for n in g.nodes}
    convs = [n.id for n in g.nodes if kinds[n.id] == "Conv1D"]
    assert rules[convs[0]].kind == "WSquare"
    assert all(rules[c].kind == "Gamma" and rules[c].gamma == 0.25 for c in convs[1:])
    for nid, kind in kinds.items():
        expected = {"Dense": "Epsilon", "ElementwiseMultiply": "SignalTakesAll",
                    "ResidualAdd": "ResidualSplit"}.get(kind, rules[nid].kind)
        assert rules[nid].kind == expected
        if kind == "Dense":
            assert rules[nid].epsilon == 1e-6


def test_errors_and_determinism():
    g = random_network(np.random.default_rng(8))
    x = np.random.default_rng(9).standard_normal(g.input_shape)
    _, trace = forward(g, x)
    rules = default_rules(g)
    rules.pop(g.nodes[0].id)
    with pytest.raises(lrp.UnassignedLayerError):
        attribute(g, trace, rules=rules)
    a = attribute(g, trace).input_relevance
    assert a.tobytes() == attribute(g, trace).input_relevance.tobytes()
    _, ttrain = forward(g, x, training=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        attribute(g, ttrain)
    g.touch()
    with pytest.raises(StaleTraceError):
        attribute(g, trace)
    with pytest.raises(ValueError):
        Rule("Gamma", gamma=-1)
    with pytest.raises(ValueError):
        Rule("Nope")


def test_relevance_signal_concatenation():
    w = [np.full((5120, 16), i, dtype=float) for i in range(2)]
    sig = lrp.relevance_signal(w, n_windows=2)
    assert sig.shape == (10240, 16) and sig[5119, 0] == 0 and sig[5120, 0] == 1
    with pytest.raises(ValueError):
        lrp.relevance_signal(w, n_windows=3)
