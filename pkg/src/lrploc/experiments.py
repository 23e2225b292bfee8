"""End-to-end experiments: dataset, training, attribution, manipulation, TDoA and STFT export.

Every command takes a :class:`RunConfig`, writes a frozen copy of it next to
its outputs (``<out>/configs/<command>.json``), and produces outputs that
depend only on that config. Output layout under ``RunConfig.out``::

    dataset/                                   built dataset (manifest + store)
    models/<model>/<condition>/weights.ckpt    best-validation weights
    models/<model>/<condition>/state.ckpt      optimiser state, for resuming
    models/<model>/<condition>/history.csv     per-epoch losses
    models/<model>/<condition>/metrics.json    test MAE and baseline
    relevance/<model>/<condition>/test_R.npy   (examples, 5120, 16) input relevance
    relevance/<model>/<condition>/audit.json   conservation audit
    relevance/<model>/<condition>/wav/         per (source, mic) relevance WAVs
    manipulation/<model>.csv                   MAE per strategy and fraction
    tdoa/anomaly_table.csv                     P_a per condition and spacing
    stft/*.json, gcc/*.json                    plot-ready spectrogram and GCC data
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lrp
from .data import DataError, Dataset, DatasetConfig, build_dataset, condition_key, predict_mean_baseline, write_wav
from .dsp import evaluate_tdoa, gcc_phat, max_lag_for, centered_pairs, stft
from .models import build_model, load_model_config
from .nn import (LayerGraph, TrainConfig, forward, load_training_state, load_weights, predict,
                 save_training_state, save_weights, train)

log = logging.getLogger(__name__)

MODELS = ("loccnn", "samplecnn")
STRATEGIES = ("random", "amplitude", "lrp")
TABLE_SOURCES = ("Signal", "LocCNN", "SampleCNN")
MODEL_LABEL = {"loccnn": "LocCNN", "samplecnn": "SampleCNN"}


class ConfigError(ValueError):
    pass


def _fractions(step=0.1, top=0.7):
    return [round(i * step, 10) for i in range(int(round(top / step)) + 1)]


@dataclass
class RunConfig:
    experiment: str = "default"
    scale: str = "desk"
    seed: int = 0
    out: str = "runs/default"
    dataset_dir: str | None = None
    corpus_dir: str | None = None
    conditions: list = field(default_factory=lambda: [[25.0, 0.15], [10.0, 0.6]])
    models: list = field(default_factory=lambda: ["loccnn"])
    model_overrides: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    learning_rates: dict = field(default_factory=lambda: {"loccnn": 1e-3, "samplecnn": 1e-2})
    surrogate_duration: list = field(default_factory=lambda: [2.9, 3.6])
    grid: dict = field(default_factory=dict)  # GridConfig overrides, e.g. {"train_shape": [4, 4]}
    pooled: bool = False
    dtype: str = "float32"
    lrp_gamma: float = 0.25
    lrp_epsilon: float = 1e-6
    lrp_selector: str = "sum"
    export_wav: bool = True
    fractions: list = field(default_factory=_fractions)
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    granularity: str = "sample"     # or "channel"
    mae_metric: str = "euclidean"   # or "l1"
    spacings: list = field(default_factory=lambda: [0.15, 0.45, 0.75])
    tdoa_margin: int = 2
    tdoa_concat: bool = False
    stft_nfft: int = 512
    stft_hop: int = 128
    stft_sources: list = field(default_factory=lambda: [0])  # indices into the test sources
    stft_mic: int = 0
    gcc_spacing: float = 0.15

    @classmethod
    def preset(cls, scale: str = "desk", **overrides) -> "RunConfig":
        if scale == "desk":
            cfg = cls(scale="desk",
                      train={"batch_size": 16, "max_epochs": 24, "lr_patience": 4, "stop_patience": 8})
        elif scale == "full":
            cfg = cls(scale="full", conditions=[[25.0, 0.15], [20.0, 0.3], [15.0, 0.4], [10.0, 0.6]],
                      models=list(MODELS),
                      train={"batch_size": 100, "max_epochs": 1000, "lr_patience": 100, "stop_patience": 200})
        else:
            raise ConfigError(f"unknown scale {scale!r}; expected desk or full")
        return cfg.updated(overrides)

    def updated(self, overrides: dict) -> "RunConfig":
        known = set(self.__dataclass_fields__)
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        new = copy.deepcopy(self)
        for k, v in overrides.items():
            if k == "train":
                new.train = {**new.train, **v}
            else:
                setattr(new, k, v)
        new.validate()
        return new

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        scale = overrides.pop("scale", None) or data.pop("scale", "desk")
        data.update(overrides)
        return cls.preset(scale, **data)

    def validate(self) -> None:
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be desk or full, got {self.scale!r}")
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"unknown model {m!r}")
        for f in self.fractions:
            if not 0 <= f < 1:
                raise ConfigError(f"manipulation fraction {f} outside [0, 1)")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown manipulation strategy {s!r}")
        if self.granularity not in ("sample", "channel"):
            raise ConfigError("granularity must be sample or channel")
        if self.mae_metric not in ("euclidean", "l1"):
            raise ConfigError("mae_metric must be euclidean or l1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lrp_selector not in ("sum", "x", "y", "z"):
            raise ConfigError("lrp_selector must be sum, x, y or z")
        if not self.conditions:
            raise ConfigError("at least one condition is required")
        unknown = set(self.train) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    # -- paths -----------------------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.out)

    @property
    def data_root(self) -> Path:
        return Path(self.dataset_dir) if self.dataset_dir else self.root / "dataset"

    def condition_keys(self) -> list[str]:
        return [condition_key(float(s), float(t)) for s, t in self.conditions]

    def model_keys(self) -> list[str]:
        """Training units: one per condition, or a single pooled unit."""
        return ["pooled"] if self.pooled else self.condition_keys()

    def model_dir(self, model: str, key: str) -> Path:
        return self.root / "models" / model / key

    def relevance_dir(self, model: str, key: str) -> Path:
        return self.root / "relevance" / model / key

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def freeze(cfg: RunConfig, command: str) -> Path:
    """Write the resolved config; rerunning with ``--config`` on this file reproduces the command."""
    path = cfg.root / "configs" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_text_atomic(path, json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return path


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def dataset_config(cfg: RunConfig) -> DatasetConfig:
    dc = DatasetConfig.preset(cfg.scale, cfg.seed)
    dc.grid = type(dc.grid)(**{**asdict(dc.grid), "seed": cfg.seed})
    dc.conditions = tuple((float(s), float(t)) for s, t in cfg.conditions)
    dc.corpus_dir = cfg.corpus_dir
    if cfg.grid:
        unknown = set(cfg.grid) - set(asdict(dc.grid))
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        dc.grid = type(dc.grid)(**{**asdict(dc.grid), **{k: tuple(v) if isinstance(v, list) else v
                                                         for k, v in cfg.grid.items()}})
    dc.surrogate = type(dc.surrogate)(**{**asdict(dc.surrogate), "duration": tuple(cfg.surrogate_duration)})
    return dc


def cmd_dataset(cfg: RunConfig) -> dict:
    freeze(cfg, "dataset")
    return build_dataset(dataset_config(cfg), cfg.data_root)


def open_dataset(cfg: RunConfig) -> Dataset:
    ds = Dataset(cfg.data_root)
    for key in cfg.condition_keys():
        ds.condition(key)
    return ds


class ScaledView:
    """Lazy ``X[idx] / scale`` over one or more stored arrays, cast to the model dtype."""

    def __init__(self, parts: list[np.ndarray], scale: float, dtype):
        self.parts = parts
        self.scale = scale
        self.dtype = dtype
        self.offsets = np.cumsum([0] + [len(p) for p in parts])

    def __len__(self):
        return int(self.offsets[-1])

    @property
    def shape(self):
        return (len(self),) + self.parts[0].shape[1:]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            idx = np.arange(len(self))[idx]
        idx = np.atleast_1d(np.asarray(idx))
        part = np.searchsorted(self.offsets, idx, side="right") - 1
        out = np.empty((len(idx),) + self.parts[0].shape[1:], dtype=self.dtype)
        for p in np.unique(part):
            sel = part == p
            out[sel] = np.asarray(self.parts[p][idx[sel] - self.offsets[p]], dtype=np.float64) / self.scale
        return out


def _gather(ds: Dataset, keys: list[str], split: str):
    splits = [ds.split(k, split) for k in keys]
    return splits, np.concatenate([s.y for s in splits])


def input_scale(parts: list[np.ndarray], chunk: int = 64) -> float:
    """RMS over every training sample, accumulated in float64."""
    total, count = 0.0, 0
    for p in parts:
        for i in range(0, len(p), chunk):
            x = np.asarray(p[i:i + chunk], dtype=np.float64)
            total += float(np.sum(x * x))
            count += x.size
    if total == 0:
        raise DataError("training inputs are all zero")
    return math.sqrt(total / count)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def model_config(cfg: RunConfig, model: str):
    mc = load_model_config(model)
    over = cfg.model_overrides.get(model, {})
    if over:
        data = {**mc.to_dict(), **over}
        mc = type(mc)(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k != "model"})
    return mc


def train_config(cfg: RunConfig, model: str) -> TrainConfig:
    return TrainConfig(**{"lr": cfg.learning_rates.get(model, 1e-3), "seed": cfg.seed, **cfg.train})


def _train_keys(cfg: RunConfig, key: str) -> list[str]:
    return cfg.condition_keys() if key == "pooled" else [key]


def cmd_train(cfg: RunConfig, resume: bool = False, stop_after: int | None = None) -> dict:
    """Train each requested model on each condition (or once, pooled)."""
    freeze(cfg, "train")
    ds = open_dataset(cfg)
    results = {}
    for model in cfg.models:
        for key in cfg.model_keys():
            results[(model, key)] = train_unit(cfg, ds, model, key, resume, stop_after)
    return results


def train_unit(cfg: RunConfig, ds: Dataset, model: str, key: str, resume: bool = False,
               stop_after: int | None = None) -> dict:
    keys = _train_keys(cfg, key)
    dtype = cfg.np_dtype()
    tr_parts, ytr = _gather(ds, keys, "train")
    va_parts, yva = _gather(ds, keys, "val")
    te_parts, yte = _gather(ds, keys, "test")
    scale = input_scale([p.X for p in tr_parts])
    graph = build_model(model_config(cfg, model), seed=cfg.seed, dtype=dtype)
    graph.meta["input_scale"] = scale
    tcfg = train_config(cfg, model)
    d = cfg.model_dir(model, key)
    d.mkdir(parents=True, exist_ok=True)
    state = history = None
    if resume and (d / "state.ckpt").exists():
        state, history, tcfg = load_training_state(d / "state.ckpt", graph)
    xtr = ScaledView([p.X for p in tr_parts], scale, dtype)
    xva = ScaledView([p.X for p in va_parts], scale, dtype)
    def report(row):
        log.info("%s/%s epoch %d: train %.4g, val %.4g, lr %g", model, key, row["epoch"], row["train_mse"],
                 row["val_mse"], row["lr"])
    graph, history, state = train(graph, (xtr, ytr), (xva, yva), tcfg, state=state, history=history,
                                  on_epoch=report, stop_after=stop_after)
    save_training_state(d / "state.ckpt", graph, state, history, tcfg)
    history.to_csv(d / "history.csv")
    if stop_after is not None and state.epoch < tcfg.max_epochs and not any(
            e["event"] == "early_stop" for e in history.events):
        return {"paused_at_epoch": state.epoch}
    save_weights(graph, d / "weights.ckpt", {"input_scale": scale, "model": model, "condition": key})
    pred = predict(graph, ScaledView([p.X for p in te_parts], scale, dtype))
    metrics = {
        "model": model, "condition": key, "epochs": state.epoch, "best_epoch": state.best_epoch,
        "best_val_mse": state.best_val, "test_mae": localization_error(pred, yte, cfg.mae_metric),
        "baseline_mae": predict_mean_baseline(ytr, yte) if cfg.mae_metric == "euclidean"
        else localization_error(np.broadcast_to(ytr.mean(axis=0), yte.shape), yte, "l1"),
        "input_scale": scale, "events": history.events,
    }
    _write_text_atomic(d / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def localization_error(pred: np.ndarray, target: np.ndarray, metric: str = "euclidean") -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if metric == "l1":
        return float(np.mean(np.abs(diff)))
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def load_trained(cfg: RunConfig, model: str, key: str) -> LayerGraph:
    path = cfg.model_dir(model, key) / "weights.ckpt"
    if not path.exists():
        raise DataError(f"no trained checkpoint at {path}; run `train` first")
    graph = build_model(model_config(cfg, model), seed=None, dtype=cfg.np_dtype())
    meta = load_weights(graph, path)
    graph.meta["input_scale"] = float(meta["input_scale"])
    return graph


# ---------------------------------------------------------------------------
# attribution
# ---------------------------------------------------------------------------

def _units(cfg: RunConfig):
    """(model, model key, condition key) triples: pooled models serve every condition."""
    for model in cfg.models:
        for cond in cfg.condition_keys():
            yield model, ("pooled" if cfg.pooled else cond), cond


def _lrp_rules(cfg: RunConfig, graph: LayerGraph):
    return lrp.default_rules(graph, gamma=cfg.lrp_gamma, epsilon=cfg.lrp_epsilon)


def attribute_examples(graph: LayerGraph, X, rules, selector="sum", batch_size: int = 8):
    """Input relevance for every example in ``X`` (already scaled), plus conservation errors."""
    rel = np.empty((len(X),) + tuple(X.shape[1:]), dtype=np.float64)
    errors = np.empty(len(X))
    for i in range(0, len(X), batch_size):
        xb = X[i:i + batch_size]
        _, trace = forward(graph, xb)
        rmap = lrp.attribute(graph, trace, selector=selector, rules=rules)
        rel[i:i + len(xb)] = rmap.input_relevance
        errors[i:i + len(xb)] = rmap.conservation_error()
    return rel, errors


def cmd_attribute(cfg: RunConfig) -> dict:
    freeze(cfg, "attribute")
    ds = open_dataset(cfg)
    audits = {}
    for model, mkey, cond in _units(cfg):
        graph = load_trained(cfg, model, mkey)
        _check_compatible(graph, ds)
        test = ds.split(cond, "test")
        X = ScaledView([test.X], graph.meta["input_scale"], cfg.np_dtype())
        rel, err = attribute_examples(graph, X, _lrp_rules(cfg, graph), cfg.lrp_selector)
        d = cfg.relevance_dir(model, cond)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "test_R.npy", rel.astype(np.float32))
        np.save(d / "test_src.npy", test.src)
        np.save(d / "test_win.npy", test.win)
        # conservation is only meaningful against an unregularised reference; report both
        audit = {"examples": int(len(rel)), "max_conservation_error": float(err.max()) if len(err) else 0.0,
                 "epsilon": cfg.lrp_epsilon, "selector": cfg.lrp_selector}
        _write_text_atomic(d / "audit.json", json.dumps(audit, indent=1, sort_keys=True))
        if cfg.export_wav:
            export_relevance_wavs(rel, test.src, test.win, d / "wav")
        audits[(model, cond)] = audit
    return audits


def _check_compatible(graph: LayerGraph, ds: Dataset) -> None:
    n_mics = len(ds.mic_positions)
    if tuple(graph.input_shape) != (5120, n_mics):
        raise DataError(f"model expects input {graph.input_shape}, dataset provides (5120, {n_mics})")


def source_signal(windows: np.ndarray, src: np.ndarray, win: np.ndarray, source_id: int) -> np.ndarray:
    """Concatenate one source's windows in time order into ``(n_windows * 5120, mics)``."""
    sel = np.nonzero(src == source_id)[0]
    if len(sel) == 0:
        raise DataError(f"source {source_id} has no windows")
    sel = sel[np.argsort(win[sel], kind="stable")]
    return lrp.relevance_signal([np.asarray(windows[i]) for i in sel], n_windows=len(sel))


def export_relevance_wavs(rel: np.ndarray, src: np.ndarray, win: np.ndarray, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in np.unique(src):
        sig = source_signal(rel, src, win, int(s))
        for m in range(sig.shape[1]):
            write_wav(out_dir / f"src{int(s):05d}_mic{m:02d}.wav", sig[:, m])


# ---------------------------------------------------------------------------
# manipulation
# ---------------------------------------------------------------------------

def ranking(strategy: str, x: np.ndarray, relevance: np.ndarray | None, rng: np.random.Generator,
            granularity: str = "sample") -> np.ndarray:
    """Order in which samples of ``x`` are zeroed (most important first).

    Sample granularity returns flat indices into ``x`` (N*M); channel
    granularity returns an ``(N, M)`` array of row indices per channel.
    Ties are broken by index (stable sort).
    """
    if strategy == "random":
        score = None
    elif strategy == "amplitude":
        score = np.abs(x)
    elif strategy == "lrp":
        if relevance is None:
            raise DataError("lrp strategy needs relevance")
        score = np.asarray(relevance, dtype=np.float64)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if granularity == "sample":
        if score is None:
            return rng.permutation(x.size)
        return np.argsort(-score.ravel(), kind="stable")
    if score is None:
        return np.stack([rng.permutation(x.shape[0]) for _ in range(x.shape[1])], axis=1)
    return np.argsort(-score, axis=0, kind="stable")


def zero_top(x: np.ndarray, order: np.ndarray, fraction: float, granularity: str = "sample") -> np.ndarray:
    """Copy of ``x`` with exactly ``ceil(fraction * N * M)`` samples (per channel: ``ceil(fraction * N)``) zeroed."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"fraction {fraction} outside [0, 1)")
    out = np.array(x, copy=True)
    if granularity == "sample":
        k = math.ceil(round(fraction * x.size, 9))
        out.reshape(-1)[order[:k]] = 0
    else:
        k = math.ceil(round(fraction * x.shape[0], 9))
        cols = np.broadcast_to(np.arange(x.shape[1]), (k, x.shape[1]))
        out[order[:k], cols] = 0
    return out


def manipulation_curves(graph: LayerGraph, X, y: np.ndarray, relevance: np.ndarray | None, cfg: RunConfig,
                        stream: int = 0) -> dict[str, list[float]]:
    """MAE per strategy and fraction on one condition's test set."""
    curves = {s: [] for s in cfg.strategies}
    for strategy in cfg.strategies:
        preds = {f: np.empty((len(y), 3)) for f in cfg.fractions}
        for e in range(len(y)):
            x = X[e][0]
            rng = np.random.default_rng([cfg.seed, stream, e])
            order = ranking(strategy, x, None if relevance is None else relevance[e], rng, cfg.granularity)
            batch = np.stack([zero_top(x, order, f, cfg.granularity) for f in cfg.fractions])
            out, _ = forward(graph, batch)
            for f, p in zip(cfg.fractions, out):
                preds[f][e] = p
        curves[strategy] = [localization_error(preds[f], y, cfg.mae_metric) for f in cfg.fractions]
    return curves


def cmd_manipulate(cfg: RunConfig) -> dict:
    """Average MAE curves over the configured conditions, per model."""
    freeze(cfg, "manipulate")
    ds = open_dataset(cfg)
    out_dir = cfg.root / "manipulation"
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for model in cfg.models:
        per_cond = {}
        for ci, cond in enumerate(cfg.condition_keys()):
            graph = load_trained(cfg, model, "pooled" if cfg.pooled else cond)
            test = ds.split(cond, "test")
            X = ScaledView([test.X], graph.meta["input_scale"], cfg.np_dtype())
            relevance = None
            if "lrp" in cfg.strategies:
                store = cfg.relevance_dir(model, cond) / "test_R.npy"
                if store.exists():
                    relevance = np.load(store, mmap_mode="r")
                else:
                    relevance, _ = attribute_examples(graph, X, _lrp_rules(cfg, graph), cfg.lrp_selector)
            per_cond[cond] = manipulation_curves(graph, X, test.y, relevance, cfg, stream=ci)
        mean = {s: [float(np.mean([per_cond[c][s][i] for c in per_cond])) for i in range(len(cfg.fractions))]
                for s in cfg.strategies}
        write_manipulation_csv(out_dir / f"{model}.csv", cfg.fractions, mean)
        for cond, curves in per_cond.items():
            write_manipulation_csv(out_dir / f"{model}_{cond}.csv", cfg.fractions, curves)
        results[model] = {"mean": mean, "per_condition": per_cond}
    return results


MANIPULATION_HEADER = ["strategy", "fraction", "mae_m"]


def write_manipulation_csv(path: Path, fractions, curves: dict[str, list[float]]) -> None:
    rows = [MANIPULATION_HEADER]
    for s, values in curves.items():
        rows += [[s, _fmt(f), _fmt(v)] for f, v in zip(fractions, values)]
    _write_csv(path, rows)


def _write_csv(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    os.replace(tmp, path)


def read_manipulation_csv(path) -> dict[str, list[tuple[float, float]]]:
    """Parse and validate a manipulation CSV; returns ``strategy -> [(fraction, mae)]``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIPULATION_HEADER:
        raise DataError(f"{path}: header must be {MANIPULATION_HEADER}")
    out: dict[str, list] = {}
    for r in rows[1:]:
        if len(r) != 3 or r[0] not in STRATEGIES:
            raise DataError(f"{path}: bad row {r}")
        f, v = float(r[1]), float(r[2])
        if not 0 <= f < 1 or not v >= 0:
            raise DataError(f"{path}: out-of-range values in {r}")
        out.setdefault(r[0], []).append((f, v))
    return out


# ---------------------------------------------------------------------------
# TDoA
# ---------------------------------------------------------------------------

def anomaly_table_header(spacings) -> list[str]:
    return ["snr_db", "t60_s"] + [f"d{d:g}_{src}" for d in spacings for src in TABLE_SOURCES]


def _tdoa_inputs(cfg, X, src, win, y, sct_of):
    if not cfg.tdoa_concat:
        return X, y, sct_of(src)
    ids = np.unique(src)
    signals = np.stack([source_signal(X, src, win, int(s)) for s in ids])
    pos = np.stack([y[np.nonzero(src == s)[0][0]] for s in ids])
    return signals, pos, sct_of(ids)


def cmd_tdoa(cfg: RunConfig) -> dict:
    """P_a (percent) for microphone and relevance signals; one table row per condition."""
    freeze(cfg, "tdoa")
    ds = open_dataset(cfg)
    mics = ds.mic_positions
    table = {}
    for snr, t60 in cfg.conditions:
        cond = condition_key(float(snr), float(t60))
        test = ds.split(cond, "test")
        row = {}
        sig, pos, sct = _tdoa_inputs(cfg, test.X, test.src, test.win, test.y, ds.sct)
        for d, st in evaluate_tdoa(sig, pos, mics, sct, cfg.spacings, margin=cfg.tdoa_margin).items():
            row[(d, "Signal")] = 100 * st.p_a
        for model in cfg.models:
            store = cfg.relevance_dir(model, cond) / "test_R.npy"
            if not store.exists():
                raise DataError(f"missing relevance store {store}; run `attribute` first")
            rel = np.load(store, mmap_mode="r")
            rsig, rpos, rsct = _tdoa_inputs(cfg, rel, test.src, test.win, test.y, ds.sct)
            for d, st in evaluate_tdoa(rsig, rpos, mics, rsct, cfg.spacings, margin=cfg.tdoa_margin).items():
                row[(d, MODEL_LABEL[model])] = 100 * st.p_a
        table[(float(snr), float(t60))] = row
    out = cfg.root / "tdoa"
    out.mkdir(parents=True, exist_ok=True)
    write_anomaly_table(out / "anomaly_table.csv", table, cfg.spacings)
    return table


def write_anomaly_table(path: Path, table: dict, spacings) -> None:
    rows = [anomaly_table_header(spacings)]
    for (snr, t60), row in table.items():
        cells = [_fmt(snr), _fmt(t60)]
        for d in spacings:
            for src in TABLE_SOURCES:
                v = row.get((d, src))
                cells.append("" if v is None else _fmt(v))
        rows.append(cells)
    _write_csv(path, rows)


def read_anomaly_table(path, spacings=(0.15, 0.45, 0.75)) -> dict:
    """Parse and validate an anomaly-table CSV. Empty cells (model not run) become ``None``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = anomaly_table_header(spacings)
    if not rows or rows[0] != header:
        raise DataError(f"{path}: header must be {header}")
    table = {}
    for r in rows[1:]:
        if len(r) != len(header):
            raise DataError(f"{path}: row has {len(r)} cells, expected {len(header)}")
        vals = {}
        for name, cell in zip(header[2:], r[2:]):
            if cell == "":
                vals[name] = None
                continue
            v = float(cell)
            if not 0 <= v <= 100:
                raise DataError(f"{path}: P_a {v} outside [0, 100]")
            vals[name] = v
        table[(float(r[0]), float(r[1]))] = vals
    return table


# ---------------------------------------------------------------------------
# STFT / GCC export
# ---------------------------------------------------------------------------

def spectrogram_payload(x: np.ndarray, cfg: RunConfig) -> dict:
    sp = stft(x, cfg.stft_nfft, cfg.stft_hop)
    return {"times_s": sp.times.tolist(), "freqs_hz": sp.freqs.tolist(),
            "magnitude_db": np.round(sp.magnitude_db(), 6).tolist()}


def cmd_stft_export(cfg: RunConfig) -> list[Path]:
    """Spectrograms of one microphone's signal and relevance, and GCC-PHAT curves, per chosen source."""
    freeze(cfg, "stft-export")
    ds = open_dataset(cfg)
    written = []
    sdir, gdir = cfg.root / "stft", cfg.root / "gcc"
    sdir.mkdir(parents=True, exist_ok=True)
    gdir.mkdir(parents=True, exist_ok=True)
    pitch = float(np.linalg.norm(ds.mic_positions[1] - ds.mic_positions[0]))
    i, j = centered_pairs(len(ds.mic_positions), pitch, [cfg.gcc_spacing])[cfg.gcc_spacing]
    maxlag = max_lag_for(cfg.gcc_spacing, margin=cfg.tdoa_margin)
    for cond in cfg.condition_keys():
        test = ds.split(cond, "test")
        ids = np.unique(test.src)
        for s_index in cfg.stft_sources:
            if not 0 <= s_index < len(ids):
                raise ConfigError(f"stft source index {s_index} out of range (0..{len(ids) - 1})")
            sid = int(ids[s_index])
            signals = {"Signal": source_signal(test.X, test.src, test.win, sid)}
            for model in cfg.models:
                store = cfg.relevance_dir(model, cond) / "test_R.npy"
                if not store.exists():
                    raise DataError(f"missing relevance store {store}; run `attribute` first")
                signals[MODEL_LABEL[model]] = source_signal(np.load(store, mmap_mode="r"), test.src, test.win, sid)
            for name, sig in signals.items():
                p = sdir / f"{cond}_src{sid:05d}_mic{cfg.stft_mic:02d}_{name}.json"
                payload = {"condition": cond, "source": sid, "mic": cfg.stft_mic, "signal": name,
                           **spectrogram_payload(sig[:, cfg.stft_mic], cfg)}
                _write_text_atomic(p, json.dumps(payload))
                written.append(p)
                curve = gcc_phat(sig[:, i], sig[:, j], maxlag)
                g = gdir / f"{cond}_src{sid:05d}_pair{i:02d}-{j:02d}_{name}.json"
                truth = (np.linalg.norm(ds.sources[sid]["position"] - ds.mic_positions[j])
                         - np.linalg.norm(ds.sources[sid]["position"] - ds.mic_positions[i])) / 343.0 * 16000
                _write_text_atomic(g, json.dumps({"condition": cond, "source": sid, "pair": [i, j],
                                                  "signal": name, "lags": curve.lags.tolist(),
                                                  "values": np.round(curve.values, 9).tolist(),
                                                  "peak_lag": curve.peak_lag, "true_lag": float(truth)}))
                written.append(g)
    return written


__all__ = ["RunConfig", "ConfigError", "freeze", "cmd_dataset", "cmd_train", "cmd_attribute", "cmd_manipulate",
           "cmd_tdoa", "cmd_stft_export", "ScaledView", "ranking", "zero_top", "manipulation_curves",
           "localization_error", "load_trained", "attribute_examples", "source_signal", "read_anomaly_table",
           "read_manipulation_csv", "write_anomaly_table", "anomaly_table_header", "train_unit", "open_dataset",
           "dataset_config", "input_scale"]
