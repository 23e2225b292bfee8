"""LocCNN and (modified) SampleCNN localisation networks as layer graphs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .nn import (Conv1D, Dense, Dropout, ElementwiseMultiply, GlobalAvgPool1D, LayerGraph, MaxPool1D,
                 ReLU, ResidualAdd, ShapeError, Sigmoid, init_parameters)


def _load_json(name_or_path) -> dict:
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    text = resources.files("lrploc.configs").joinpath(f"{name_or_path}.json").read_text()
    return json.loads(text)


def _from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known - {"model"}
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class LocCnnConfig:
    n_blocks: int = 5
    channels: tuple[int, ...] = (96, 96, 128, 128, 128)
    kernel_sizes: tuple[int, ...] = (7, 7, 7, 7, 7)
    pool_sizes: tuple[int, ...] = (7, 7, 7, 3, 2)
    hidden: int = 500
    dropout: float = 0.0
    n_samples: int = 5120
    n_channels: int = 16
    output_dim: int = 3

    @classmethod
    def load(cls, name_or_path="loccnn") -> "LocCnnConfig":
        return _from_dict(cls, _load_json(name_or_path))

    def to_dict(self) -> dict:
        return {"model": "loccnn", **asdict(self)}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class SampleCnnConfig:
    n_se_blocks: int = 5
    stem_channels: int = 128
    stem_kernel: int = 3
    stem_stride: int = 3
    channels: tuple[int, ...] = (128, 128, 256, 256, 512)
    kernel_size: int = 3
    pool_sizes: tuple[int, ...] = (3, 3, 3, 3, 3)
    se_ratio: int = 16
    dropout: float = 0.0
    n_samples: int = 5120
    n_channels: int = 16
    output_dim: int = 3

    @classmethod
    def load(cls, name_or_path="samplecnn") -> "SampleCnnConfig":
        return _from_dict(cls, _load_json(name_or_path))

    def to_dict(self) -> dict:
        return {"model": "samplecnn", **asdict(self)}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _check_lengths(cfg, *names):
    n = getattr(cfg, "n_blocks", None) or cfg.n_se_blocks
    for name in names:
        if len(getattr(cfg, name)) != n:
            raise ValueError(f"{name} must have {n} entries, got {len(getattr(cfg, name))}")


def build_loccnn(config: LocCnnConfig | None = None, seed: int | None = 0, dtype=np.float64) -> LayerGraph:
    """Conv1D -> ReLU -> MaxPool1D blocks, then Dense -> ReLU -> Dropout -> Dense(3)."""
    cfg = config or LocCnnConfig()
    _check_lengths(cfg, "channels", "kernel_sizes", "pool_sizes")
    g = LayerGraph((cfg.n_samples, cfg.n_channels), name="loccnn")
    cin, length = cfg.n_channels, cfg.n_samples
    for i, (cout, k, p) in enumerate(zip(cfg.channels, cfg.kernel_sizes, cfg.pool_sizes), 1):
        g.add(Conv1D(f"conv{i}", cin, cout, k))
        g.add(ReLU(f"relu{i}"))
        g.add(MaxPool1D(f"pool{i}", p))
        cin, length = cout, length // p
        if length < 1:
            raise ShapeError(f"block {i}: pooled length reached 0 (input {cfg.n_samples} samples)")
    g.add(Dense("fc1", length * cin, cfg.hidden))
    g.add(ReLU("relu_fc1"))
    g.add(Dropout("drop_fc1", cfg.dropout))
    g.add(Dense("out", cfg.hidden, cfg.output_dim))
    g.validate()
    g.meta.update(config=cfg.to_dict(), config_hash=cfg.config_hash())
    g.astype(dtype)
    if seed is not None:
        init_parameters(g, np.random.default_rng(seed))
    return g


def loccnn_param_count(cfg: LocCnnConfig) -> int:
    total, cin, length = 0, cfg.n_channels, cfg.n_samples
    for cout, k, p in zip(cfg.channels, cfg.kernel_sizes, cfg.pool_sizes):
        total += cout * cin * k + cout
        cin, length = cout, length // p
    return total + (length * cin + 1) * cfg.hidden + (cfg.hidden + 1) * cfg.output_dim


def build_samplecnn(config: SampleCnnConfig | None = None, seed: int | None = 0, dtype=np.float64) -> LayerGraph:
    """Strided stem, then residual squeeze-and-excitation blocks, then Dense(3).

    Block ``i``::

        x    = ReLU(Conv1D(prev))                    # channel change
        main = ReLU(Conv1D(x))
        r    = ResidualAdd(main, skip=x)
        gate = Sigmoid(Dense(ReLU(Dense(GlobalAvgPool1D(r)))))
        y    = MaxPool1D(ElementwiseMultiply(signal=r, gate=gate))
    """
    cfg = config or SampleCnnConfig()
    _check_lengths(cfg, "channels", "pool_sizes")
    g = LayerGraph((cfg.n_samples, cfg.n_channels), name="samplecnn")
    g.add(Conv1D("stem", cfg.n_channels, cfg.stem_channels, cfg.stem_kernel, stride=cfg.stem_stride,
                 padding="valid"))
    g.add(ReLU("stem_relu"))
    cin = cfg.stem_channels
    for i, (cout, p) in enumerate(zip(cfg.channels, cfg.pool_sizes), 1):
        b = f"b{i}"
        g.add(Conv1D(f"{b}_proj", cin, cout, cfg.kernel_size))
        x = g.add(ReLU(f"{b}_proj_relu"))
        g.add(Conv1D(f"{b}_conv", cout, cout, cfg.kernel_size))
        main = g.add(ReLU(f"{b}_relu"))
        res = g.add(ResidualAdd(f"{b}_add"), [main, x], tags=["main", "skip"])
        hidden = max(1, cout // cfg.se_ratio)
        g.add(GlobalAvgPool1D(f"{b}_squeeze"), res)
        g.add(Dense(f"{b}_se1", cout, hidden))
        g.add(ReLU(f"{b}_se_relu"))
        g.add(Dense(f"{b}_se2", hidden, cout))
        gate = g.add(Sigmoid(f"{b}_gate"))
        g.add(ElementwiseMultiply(f"{b}_excite"), [res, gate], tags=["signal", "gate"])
        g.add(MaxPool1D(f"{b}_pool", p))
        cin = cout
    shapes = g.static_shapes()
    g.add(Dropout("drop", cfg.dropout))
    g.add(Dense("out", int(np.prod(shapes[g.nodes[-2].id])), cfg.output_dim))
    g.validate()
    g.meta.update(config=cfg.to_dict(), config_hash=cfg.config_hash())
    g.astype(dtype)
    if seed is not None:
        init_parameters(g, np.random.default_rng(seed))
    return g


def build_model(config: dict | LocCnnConfig | SampleCnnConfig, seed: int | None = 0, dtype=np.float64) -> LayerGraph:
    if isinstance(config, dict):
        kind = config.get("model", "loccnn")
        config = _from_dict(LocCnnConfig if kind == "loccnn" else SampleCnnConfig, config)
    if isinstance(config, LocCnnConfig):
        return build_loccnn(config, seed, dtype)
    return build_samplecnn(config, seed, dtype)


def load_model_config(name_or_path) -> LocCnnConfig | SampleCnnConfig:
    data = _load_json(name_or_path)
    cls = SampleCnnConfig if data.get("model") == "samplecnn" else LocCnnConfig
    return _from_dict(cls, data)


__all__ = ["LocCnnConfig", "SampleCnnConfig", "build_loccnn", "build_samplecnn", "build_model",
           "load_model_config", "loccnn_param_count"]
