import hashlib

import numpy as np
import pytest

from lrploc.nn import (Conv1D, Dense, Dropout, LayerGraph, MaxPool1D, NonFiniteError, ReLU, ShapeError,
                       StaleTraceError, TrainConfig, TrainingDiverged, backward, forward, init_parameters, load_training_state, load_weights,
                       predict, save_training_state, save_weights, train)
from lrploc.nn.checkpoint import (MAGIC, CheckpointError, FingerprintMismatch, TruncatedCheckpoint,
                                  VersionMismatch, read_checkpoint, write_checkpoint)
from lrploc.nn.layers import conv1d

from oracles import KINDS, central_difference, draw_layer, layer_gradient_check, rel_error


def _conv_ref(x, w, b, stride, pad):
    """Direct loop convolution (cross-correlation) used as an oracle."""
    B, L, C = x.shape
    Co, Ci, K = w.shape
    xp = np.pad(x, ((0, 0), pad, (0, 0)))
    Lout = (L + sum(pad) - K) // stride + 1
    y = np.zeros((B, Lout, Co))
    for bb in range(B):
        for t in range(Lout):
            for o in range(Co):
                y[bb, t, o] = np.sum(xp[bb, t * stride:t * stride + K, :].T * w[o]) + b[o]
    return y


@pytest.mark.parametrize("k,stride,padding", [(3, 1, "same"), (4, 1, "same"), (5, 2, "valid"), (3, 3, "valid")])
def test_conv1d_matches_loop_oracle(k, stride, padding):
    rng = np.random.default_rng(k * 10 + stride)
    layer = Conv1D("c", 3, 4, k, stride=stride, padding=padding)
    layer.params["weight"] = rng.standard_normal((4, 3, k))
    layer.params["bias"] = rng.standard_normal(4)
    x = rng.standard_normal((2, 17, 3))
    y, _ = layer.forward((x,))
    np.testing.assert_allclose(y, _conv_ref(x, layer.params["weight"], layer.params["bias"], stride, layer.pad),
                               rtol=1e-12, atol=1e-12)
    assert y.shape[1:] == layer.out_shape([(17, 3)])






@pytest.mark.parametrize("kind", KINDS)
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    worst = max(layer_gradient_check(*draw_layer(kind, rng)) for _ in range(10))
    assert worst < 1e-4


def test_two_layer_conv_net_gradients():
    rng = np.random.default_rng(3)
    g = LayerGraph((12, 2))
    g.add(Conv1D("c1", 2, 3, 3))
    g.add(ReLU("r1"))
    g.add(Conv1D("c2", 3, 2, 3))
    g.add(Dense("out", 24, 2))
    init_parameters(g, rng)
    for node in g.nodes:
        if "bias" in node.layer.params:
            node.layer.params["bias"] = rng.normal(0, 0.1, node.layer.params["bias"].shape)
    x = rng.standard_normal((3, 12, 2))
    target = rng.standard_normal((3, 2))
    out, trace = forward(g, x, training=True)
    grads = backward(g, trace, 2 * (out - target) / out.size)

    def loss():
        return float(np.mean((forward(g, x)[0] - target) ** 2))

    for name, p in g.parameters().items():
        assert rel_error(grads[name], central_difference(loss, p, 1e-6)) < 1e-4, name


def test_trivial_forward_backward_cases():
    g = LayerGraph((3,))
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(forward(g, x)[0], x)
    g.add(Dense("d", 3, 3))
    g["d"].params["weight"] = np.eye(3)
    assert np.array_equal(forward(g, x)[0], x)

    g = LayerGraph((1,))
    g.add(Dense("d", 1, 1))
    g["d"].params["weight"] = np.array([[3.0]])
    _, trace = forward(g, np.array([2.0]), training=True)
    assert backward(g, trace, np.array([1.0]))["d.weight"][0, 0] == 2.0

    relu = ReLU("r")
    (gx,), _ = relu.backward((np.array([-1.0]),), np.array([0.0]), None, np.array([5.0]))
    assert gx[0] == 0.0


def test_maxpool_routes_to_single_lowest_index_winner():
    pool = MaxPool1D("p", 3)
    x = np.array([[[1.0], [5.0], [5.0], [2.0], [2.0], [2.0], [9.0]]])  # trailing sample dropped
    y, idx = pool.forward((x,))
    assert y.ravel().tolist() == [5.0, 2.0]
    (gx,), _ = pool.backward((x,), y, idx, np.ones_like(y))
    assert gx.ravel().tolist() == [0, 1, 0, 1, 0, 0, 0]


def test_dropout_identity_at_inference_and_inverted_in_training():
    d = Dropout("d", 0.5)
    x = np.ones((4, 100, 2))
    assert np.array_equal(d.forward((x,))[0], x)
    y, _ = d.forward((x,), training=True, rng=np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        Dropout("bad", 1.0)


def test_shape_and_finiteness_errors():
    g = LayerGraph((8, 2))
    g.add(Conv1D("c", 2, 2, 3))
    with pytest.raises(ShapeError):
        forward(g, np.zeros((8, 3)))
    g["c"].params["bias"] = np.array([np.inf, 0.0])
    with pytest.raises(NonFiniteError) as exc:
        forward(g, np.zeros((8, 2)))
    assert "c" in str(exc.value)


def test_stale_trace_rejected():
    g = LayerGraph((2,))
    g.add(Dense("d", 2, 1))
    _, trace = forward(g, np.ones(2), training=True)
    g.set_parameters({"d.weight": np.ones((2, 1))})
    with pytest.raises(StaleTraceError):
        backward(g, trace, np.ones(1))


def test_inference_is_bit_identical():
    rng = np.random.default_rng(1)
    g = LayerGraph((16, 2))
    g.add(Conv1D("c", 2, 4, 3))
    g.add(ReLU("r"))
    g.add(Dense("out", 64, 3))
    init_parameters(g, rng)
    x = rng.standard_normal((5, 16, 2))
    assert forward(g, x)[0].tobytes() == forward(g, x)[0].tobytes()


def _tiny_graph(seed=0):
    g = LayerGraph((8, 2), name="tiny")
    g.add(Conv1D("c", 2, 3, 3))
    g.add(ReLU("r"))
    g.add(Dense("out", 24, 2))
    init_parameters(g, np.random.default_rng(seed))
    return g


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = _tiny_graph()
    x = np.random.default_rng(0).standard_normal((3, 8, 2))
    save_weights(g, tmp_path / "w.ckpt", {"note": "x"})
    h = _tiny_graph(seed=99)
    meta = load_weights(h, tmp_path / "w.ckpt")
    assert meta["note"] == "x"
    assert forward(g, x)[0].tobytes() == forward(h, x)[0].tobytes()
    assert (tmp_path / "w.ckpt").read_bytes()[:8] == MAGIC


def test_checkpoint_errors(tmp_path):
    g = _tiny_graph()
    path = tmp_path / "w.ckpt"
    save_weights(g, path)
    other = LayerGraph((8, 2))
    other.add(Conv1D("c", 2, 4, 3))
    with pytest.raises(FingerprintMismatch):
        load_weights(other, path)
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-1])
    before = {k: v.copy() for k, v in g.parameters().items()}
    with pytest.raises(TruncatedCheckpoint):
        load_weights(g, tmp_path / "t.ckpt")
    assert all(np.array_equal(before[k], v) for k, v in g.parameters().items())
    bumped = bytearray(data[:-32])
    bumped[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v.ckpt").write_bytes(bytes(bumped) + hashlib.sha256(bytes(bumped)).digest())
    with pytest.raises(VersionMismatch):
        load_weights(g, tmp_path / "v.ckpt")
    corrupt = bytearray(data)
    corrupt[-40] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(corrupt))
    with pytest.raises(CheckpointError):
        load_weights(g, tmp_path / "c.ckpt")


def test_checkpoint_dtypes_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5]), "c": np.arange(4)}
    write_checkpoint(tmp_path / "x", "00" * 32, arrays, {"k": 1})
    back, meta = read_checkpoint(tmp_path / "x", "00" * 32)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def _regression_data(seed, n=40):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 8, 2))
    y = np.stack([x[:, :, 0].mean(axis=1), x[:, :, 1].std(axis=1)], axis=1)
    return x, y


def test_overfits_single_example():
    g = _tiny_graph()
    x, y = _regression_data(0, 1)
    cfg = TrainConfig(batch_size=1, max_epochs=400, lr=1e-2, lr_patience=1000, stop_patience=1000)
    _, hist, _ = train(g, (x, y), (x, y), cfg)
    assert hist.epochs[-1]["train_mse"] < 1e-3


def test_zero_targets_with_zero_output_layer_start_at_zero_loss():
    g = _tiny_graph()
    g["out"].params["weight"][:] = 0
    x, _ = _regression_data(1, 5)
    y = np.zeros((5, 2))
    cfg = TrainConfig(batch_size=5, max_epochs=1, lr=1e-3)
    _, hist, _ = train(g, (x, y), (x, y), cfg)
    assert hist.epochs[0]["train_mse"] == 0.0


def test_plateau_halving_at_exact_patience():
    g = LayerGraph((2,))
    g.add(Dense("out", 2, 1))
    x = np.zeros((4, 2))  # gradients w.r.t. the weight vanish; the bias is already optimal
    y = np.zeros((4, 1))
    cfg = TrainConfig(batch_size=4, max_epochs=12, lr=1e-3, lr_patience=5, stop_patience=100)
    _, hist, state = train(g, (x, y), (x, y), cfg)
    halvings = [e for e in hist.events if e["event"] == "lr_halved"]
    # epoch 0 sets the best; epochs 1..5 fail to improve -> halve at epoch 5, again at 10
    assert [e["epoch"] for e in halvings] == [5, 10]
    assert state.lr == pytest.approx(2.5e-4)
    lrs = [r["lr"] for r in hist.epochs]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_early_stop_restores_best_parameters():
    g = _tiny_graph()
    x, y = _regression_data(2)
    xv, yv = _regression_data(3)
    cfg = TrainConfig(batch_size=8, max_epochs=60, lr=3e-2, lr_patience=2, stop_patience=4)
    g, hist, state = train(g, (x, y), (xv, yv), cfg)
    assert np.mean((predict(g, xv) - yv) ** 2) == pytest.approx(state.best_val, rel=1e-12)
    if any(e["event"] == "early_stop" for e in hist.events):
        assert hist.epochs[-1]["epoch"] - state.best_epoch == cfg.stop_patience


def test_seeded_training_is_reproducible_and_resumable(tmp_path):
    x, y = _regression_data(4)
    cfg = TrainConfig(batch_size=8, max_epochs=8, lr=1e-2, lr_patience=100, stop_patience=100, seed=5)
    _, full, _ = train(_tiny_graph(), (x, y), (x, y), cfg)
    _, again, _ = train(_tiny_graph(), (x, y), (x, y), cfg)
    assert full.epochs == again.epochs

    g = _tiny_graph()
    g, part, state = train(g, (x, y), (x, y), cfg, stop_after=3)
    save_training_state(tmp_path / "s.ckpt", g, state, part, cfg)
    g2 = _tiny_graph(seed=42)
    state2, hist2, cfg2 = load_training_state(tmp_path / "s.ckpt", g2)
    _, resumed, _ = train(g2, (x, y), (x, y), cfg2, state=state2, history=hist2)
    assert resumed.epochs == full.epochs


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    g = _tiny_graph()
    x, y = _regression_data(5)
    y = y * 1e200
    with pytest.raises((TrainingDiverged, NonFiniteError)):
        train(g, (x, y), (x, y), TrainConfig(batch_size=8, max_epochs=3, lr=1.0, init_output_bias=False))


def test_history_csv_columns(tmp_path):
    x, y = _regression_data(6)
    _, hist, _ = train(_tiny_graph(), (x, y), (x, y), TrainConfig(batch_size=8, max_epochs=2))
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse,lr" and len(lines) == 3


def test_conv1d_function_matches_layer():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((1, 10, 2)), rng.standard_normal((3, 2, 3))
    np.testing.assert_allclose(conv1d(x, w, 1, (1, 1)), _conv_ref(x, w, np.zeros(3), 1, (1, 1)), atol=1e-12)
