import numpy as np
import pytest

from lrploc.models import (LocCnnConfig, SampleCnnConfig, build_loccnn, build_model, build_samplecnn,
                           load_model_config, loccnn_param_count)
from lrploc.nn import ShapeError, forward


def _count_params(cfg: LocCnnConfig) -> int:
    """Independent count: walk the declared blocks by hand."""
    n, c, length = 0, cfg.n_channels, cfg.n_samples
    for i in range(cfg.n_blocks):
        n += cfg.channels[i] * c * cfg.kernel_sizes[i]  # kernel
        n += cfg.channels[i]                            # bias
        c = cfg.channels[i]
        length = length // cfg.pool_sizes[i]
    n += length * c * cfg.hidden + cfg.hidden
    n += cfg.hidden * cfg.output_dim + cfg.output_dim
    return n


def test_loccnn_default_contract():
    g = build_loccnn()
    kinds = [n.layer.kind for n in g.nodes]
    convs = [i for i, k in enumerate(kinds) if k == "Conv1D"]
    assert len(convs) == 5
    for i in convs:
        assert kinds[i + 1] == "ReLU" and kinds[i + 2] == "MaxPool1D"
    assert kinds[-1] == "Dense" and g.validate() == (3,)
    assert g.n_params() == loccnn_param_count(LocCnnConfig()) == _count_params(LocCnnConfig()) == 521235


def test_loccnn_zero_input_gives_zero_output():
    g = build_loccnn(LocCnnConfig(channels=(4, 4, 4, 4, 4), hidden=8))
    out, _ = forward(g, np.zeros((5120, 16)))
    assert out.shape == (3,) and np.all(out == 0)


def test_loccnn_shape_chain_break():
    with pytest.raises(ShapeError):
        build_loccnn(LocCnnConfig(n_samples=100))
    with pytest.raises(ValueError):
        build_loccnn(LocCnnConfig(channels=(4, 4)))


def test_loccnn_accepts_other_lengths():
    g = build_loccnn(LocCnnConfig(n_samples=7 * 7 * 7 * 3 * 2, channels=(2, 2, 2, 2, 2), hidden=4))
    assert forward(g, np.ones((2058, 16)))[0].shape == (3,)


def test_samplecnn_structure():
    g = build_samplecnn(SampleCnnConfig(stem_channels=8, channels=(8, 8, 16, 16, 16), se_ratio=4))
    kinds = [n.layer.kind for n in g.nodes]
    assert kinds.count("ResidualAdd") == 5 and kinds.count("ElementwiseMultiply") == 5
    assert "BatchNorm" not in kinds and kinds[-1] == "Dense" and g.validate() == (3,)
    for n in g.nodes:
        if n.layer.kind == "ElementwiseMultiply":
            assert list(n.tags) == ["signal", "gate"]
            assert g.node(n.inputs[1]).layer.kind == "Sigmoid"
            assert g.node(n.inputs[0]).layer.kind == "ResidualAdd"
        if n.layer.kind == "ResidualAdd":
            assert list(n.tags) == ["main", "skip"]


def test_samplecnn_default_output_length():
    g = build_samplecnn()
    assert g.validate() == (3,)
    assert forward(g, np.random.default_rng(0).standard_normal((5120, 16)).astype(np.float32))[0].shape == (3,)


def test_saturated_gate_equals_residual_branch():
    cfg = SampleCnnConfig(stem_channels=4, channels=(4, 4, 4, 4, 4), se_ratio=2, n_samples=729)
    g = build_samplecnn(cfg, seed=1)
    for node in g.nodes:
        if node.id.endswith("_se2"):
            node.layer.params["weight"][:] = 0
            node.layer.params["bias"][:] = 50.0  # sigmoid(50) == 1 in float64
    g.touch()
    x = np.random.default_rng(2).standard_normal((729, 16))
    _, trace = forward(g, x)
    for i in range(1, 6):
        np.testing.assert_array_equal(trace.output(f"b{i}_excite"), trace.output(f"b{i}_add"))


def test_configs_load_from_files_and_hash_into_fingerprint():
    assert load_model_config("loccnn") == LocCnnConfig()
    assert load_model_config("samplecnn") == SampleCnnConfig()
    a = build_model(LocCnnConfig(channels=(4, 4, 4, 4, 4), hidden=8))
    b = build_model({"model": "loccnn", "channels": [4, 4, 4, 4, 4], "hidden": 9})
    assert a.fingerprint() != b.fingerprint()
    with pytest.raises(ValueError):
        LocCnnConfig.load.__func__(LocCnnConfig, "samplecnn")
