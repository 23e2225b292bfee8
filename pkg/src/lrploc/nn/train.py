"""Mini-batch MSE training with Adam, plateau LR halving and early stopping."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .graph import LayerGraph, backward, forward, predict

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 100
    max_epochs: int = 1000
    lr: float = 1e-3
    lr_patience: int = 100
    stop_patience: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # set the output bias to the mean training target before the first step
    init_output_bias: bool = True


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    epoch: int = 0
    plateau: int = 0
    since_best: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)

    def counters(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "step", "epoch", "plateau", "since_best", "best_val", "best_epoch")}


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "lr"])
            for row in self.epochs:
                w.writerow([row["epoch"], repr(row["train_mse"]), repr(row["val_mse"]), repr(row["lr"])])


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def adam_step(graph: LayerGraph, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    params = graph.parameters()
    for name, g in grads.items():
        g = g.astype(np.float64)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        p = params[name]
        p -= (state.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
    graph.touch()


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(graph: LayerGraph, train_set, val_set, config: TrainConfig | None = None,
          state: OptimizerState | None = None, history: History | None = None,
          on_epoch=None, stop_after: int | None = None):
    """Fit ``graph`` to ``(X, y)`` pairs; return ``(graph, history, state)``.

    The graph ends up holding the parameters from the best validation epoch.
    Passing the ``state``/``history`` of an interrupted run resumes it; batch
    order and dropout masks are derived from ``(seed, epoch)`` only, so a
    resumed run reproduces the uninterrupted one exactly. ``stop_after``
    pauses after that many epochs (without restoring the best parameters).
    """
    cfg = config or TrainConfig()
    xtr, ytr = train_set
    xva, yva = val_set
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if cfg.lr <= 0:
        raise ValueError("learning rate must be positive")
    history = history or History()
    if state is None:
        state = OptimizerState(lr=cfg.lr)
        if cfg.init_output_bias:
            head = graph.nodes[-1].layer
            if head.kind == "Dense":
                head.params["bias"] = np.mean(ytr, axis=0).astype(head.params["bias"].dtype)
                graph.touch()
    n = len(xtr)
    ran = 0
    while state.epoch < cfg.max_epochs:
        epoch = state.epoch
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb, yb = xtr[idx], ytr[idx]
            out, trace = forward(graph, xb, training=True, rng=rng)
            diff = out.astype(np.float64) - yb
            sq_sum += float(np.sum(diff * diff))
            grad = (2.0 / diff.size) * diff
            grads = backward(graph, trace, grad.astype(out.dtype))
            adam_step(graph, grads, state, cfg)
        train_mse = sq_sum / (n * ytr.shape[1])
        val_mse = mse(predict(graph, xva), yva)
        if not np.isfinite(val_mse) or not np.isfinite(train_mse):
            raise TrainingDiverged(f"epoch {epoch}: train_mse={train_mse}, val_mse={val_mse}")
        history.epochs.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "lr": state.lr})
        if val_mse < state.best_val:
            state.best_val, state.best_epoch = val_mse, epoch
            state.best_params = {k: v.copy() for k, v in graph.parameters().items()}
            state.plateau = state.since_best = 0
        else:
            state.plateau += 1
            state.since_best += 1
            if state.plateau == cfg.lr_patience:
                state.lr /= 2
                state.plateau = 0
                history.events.append({"epoch": epoch, "event": "lr_halved", "lr": state.lr})
                log.info("epoch %d: learning rate halved to %g", epoch, state.lr)
        state.epoch += 1
        ran += 1
        if on_epoch is not None:
            on_epoch(history.epochs[-1])
        if state.since_best >= cfg.stop_patience:
            history.events.append({"epoch": epoch, "event": "early_stop"})
            break
        if stop_after is not None and ran >= stop_after:
            return graph, history, state
    if state.best_params:
        graph.set_parameters(state.best_params)
    return graph, history, state


def save_training_state(path, graph: LayerGraph, state: OptimizerState, history: History,
                        config: TrainConfig) -> None:
    arrays = dict(graph.parameters())
    arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    arrays.update({f"best.{k}": v for k, v in state.best_params.items()})
    meta = {"kind": "training_state", "counters": state.counters(), "config": asdict(config),
            "history": {"epochs": history.epochs, "events": history.events}}
    write_checkpoint(path, graph.fingerprint(), arrays, meta)


def load_training_state(path, graph: LayerGraph):
    arrays, meta = read_checkpoint(path, graph.fingerprint())
    own = graph.parameters()
    graph.set_parameters({k: v for k, v in arrays.items() if k in own})
    c = meta["counters"]
    state = OptimizerState(lr=c["lr"], step=c["step"], epoch=c["epoch"], plateau=c["plateau"],
                           since_best=c["since_best"], best_val=c["best_val"], best_epoch=c["best_epoch"])
    for k, v in arrays.items():
        for prefix, target in (("adam.m.", state.m), ("adam.v.", state.v), ("best.", state.best_params)):
            if k.startswith(prefix):
                target[k[len(prefix):]] = v
    history = History(epochs=meta["history"]["epochs"], events=meta["history"]["events"])
    return state, history, TrainConfig(**meta["config"])
