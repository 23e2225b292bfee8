"""Layer-wise relevance propagation over recorded forward traces.

Every linear step redistributes relevance as

    R_j = sum_k  z_jk / (sum_j z_jk)  R_k

with a rule-specific contribution ``z_jk``:

* ``WSquare``   z_jk = w_jk**2                 (input convolution; ignores the input values)
* ``Gamma``     z_jk = a_j (w_jk + gamma w_jk+)
* ``Epsilon``   z_jk = a_j w_jk, denominator pushed away from 0 by epsilon
* ``PassThrough`` activations and dropout hand relevance through unchanged;
  max pooling routes it to the winning sample, average pooling splits it
  in proportion to each input's share of the sum
* ``SignalTakesAll`` gating products send everything to the signal branch
* residual additions split relevance in proportion to each branch's activation

Biases never enter the denominators, so with ``epsilon = 0`` relevance is
conserved from the output seed down to the input up to the tiny stabiliser.
Propagation always runs in float64.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn.graph import INPUT, ForwardTrace, LayerGraph, StaleTraceError
from .nn.layers import conv1d, conv1d_transpose

log = logging.getLogger(__name__)

STABILIZER = 1e-9
RULE_KINDS = ("WSquare", "Gamma", "Epsilon", "PassThrough", "SignalTakesAll", "ResidualSplit")


class UnassignedLayerError(KeyError):
    pass


class NonFiniteRelevance(FloatingPointError):
    pass


@dataclass(frozen=True)
class Rule:
    kind: str
    gamma: float = 0.25
    epsilon: float = 1e-6
    stabilizer: float = STABILIZER

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule {self.kind!r}")
        if self.gamma < 0 or self.epsilon < 0:
            raise ValueError("gamma and epsilon must be non-negative")
        if self.stabilizer <= 0:
            raise ValueError("stabilizer must be positive")


def default_rules(graph: LayerGraph, gamma: float = 0.25, epsilon: float = 1e-6) -> dict[str, Rule]:
    """First Conv1D -> WSquare, other Conv1D -> Gamma, Dense -> Epsilon,
    gates -> SignalTakesAll, residual joins -> ResidualSplit, the rest -> PassThrough."""
    rules = {}
    first_conv = True
    for node in graph.nodes:
        kind = node.layer.kind
        if kind == "Conv1D":
            rules[node.id] = Rule("WSquare") if first_conv else Rule("Gamma", gamma=gamma)
            first_conv = False
        elif kind == "Dense":
            rules[node.id] = Rule("Epsilon", epsilon=epsilon)
        elif kind == "ElementwiseMultiply":
            rules[node.id] = Rule("SignalTakesAll")
        elif kind == "ResidualAdd":
            rules[node.id] = Rule("ResidualSplit")
        else:
            rules[node.id] = Rule("PassThrough")
    return rules


@dataclass
class RelevanceMap:
    input_relevance: np.ndarray
    output_seed: np.ndarray
    layers: dict[str, np.ndarray] = field(default_factory=dict)
    absorbed: dict[str, np.ndarray] = field(default_factory=dict)

    def conservation_error(self) -> np.ndarray:
        """Relative mismatch between summed input relevance and the output seed, per example."""
        axes = tuple(range(1, self.input_relevance.ndim)) if self.input_relevance.ndim > 2 else None
        r_in = self.input_relevance.sum(axis=axes) if axes else self.input_relevance.sum()
        seed = self.output_seed.sum(axis=-1)
        return np.abs(r_in - seed) / np.maximum(np.abs(seed), 1e-300)


def _stab(z: np.ndarray, extra: float) -> np.ndarray:
    sign = np.where(z >= 0, 1.0, -1.0)
    return z + sign * extra


# -- linear layers -------------------------------------------------------------

def _linear_ops(layer):
    if layer.kind == "Conv1D":
        def fwd(a, w):
            return conv1d(a, w, layer.stride, layer.pad)

        def adj(s, w, like):
            return conv1d_transpose(s, w, like.shape[1], layer.stride, layer.pad)
        return fwd, adj

    def fwd(a, w):
        return a.reshape(a.shape[0], -1) @ w

    def adj(s, w, like):
        return (s @ w.T).reshape(like.shape)
    return fwd, adj


def propagate_wsquare(layer, x: np.ndarray, r_out: np.ndarray, stabilizer: float = STABILIZER) -> np.ndarray:
    """Split relevance in proportion to squared weights; inputs only matter through their positions."""
    fwd, adj = _linear_ops(layer)
    w2 = np.asarray(layer.params["weight"], dtype=np.float64) ** 2
    out_axis = 0 if layer.kind == "Conv1D" else 1
    dead = np.moveaxis(w2, out_axis, 0).reshape(w2.shape[out_axis], -1).sum(axis=1) == 0
    if dead.any():
        log.warning("%s: %d output unit(s) with all-zero weights; splitting their relevance uniformly",
                    layer.id, int(dead.sum()))
        w2 = np.moveaxis(w2, out_axis, 0).copy()
        w2[dead] = 1.0
        w2 = np.moveaxis(w2, 0, out_axis)
    ones = np.ones_like(x, dtype=np.float64)
    z = fwd(ones, w2)
    return adj(r_out / _stab(z, stabilizer), w2, x)


def propagate_linear(layer, x: np.ndarray, r_out: np.ndarray, rule: Rule) -> np.ndarray:
    """Gamma / Epsilon rules for a Conv1D or Dense layer."""
    fwd, adj = _linear_ops(layer)
    w = np.asarray(layer.params["weight"], dtype=np.float64)
    if rule.kind == "Gamma":
        w = w + rule.gamma * np.maximum(w, 0)
        extra = rule.stabilizer
    else:
        extra = rule.epsilon + rule.stabilizer
    z = fwd(x, w)
    return x * adj(r_out / _stab(z, extra), w, x)


def propagate_signal_takes_all(r_out: np.ndarray, gate_shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    return r_out, np.zeros(gate_shape)


def canonize_residual(a_main: np.ndarray, a_skip: np.ndarray, r_out: np.ndarray,
                      stabilizer: float = STABILIZER) -> tuple[np.ndarray, np.ndarray]:
    """Share relevance between the two branches of a residual sum by their activations."""
    total = a_main + a_skip
    if np.any(total == 0):
        log.debug("residual split: zero branch sum, stabiliser absorbs the relevance there")
    s = r_out / _stab(total, stabilizer)
    return a_main * s, a_skip * s


# -- driver --------------------------------------------------------------------

SELECTORS = {"x": 0, "y": 1, "z": 2}


def output_seed(output: np.ndarray, selector="sum") -> np.ndarray:
    out = np.asarray(output, dtype=np.float64)
    if selector == "sum":
        return out.copy()
    k = SELECTORS[selector] if isinstance(selector, str) else int(selector)
    seed = np.zeros_like(out)
    seed[..., k] = out[..., k]
    return seed


def attribute(graph: LayerGraph, trace: ForwardTrace, selector="sum", rules: dict[str, Rule] | None = None,
              keep_layers: bool = False) -> RelevanceMap:
    """Propagate the selected output(s) back to the input of ``graph``."""
    if trace.version != graph.version:
        raise StaleTraceError("graph was modified after the forward pass")
    if trace.training:
        raise ValueError("relevance must be computed on an inference-mode trace")
    rules = rules if rules is not None else default_rules(graph)
    for node in graph.nodes:
        if node.id not in rules:
            raise UnassignedLayerError(f"no relevance rule assigned to layer {node.id!r}")

    seed = output_seed(trace.output(graph.output_id), selector)
    relevance: dict[str, np.ndarray] = {graph.output_id: seed}
    kept, absorbed = {}, {}
    for node in reversed(graph.nodes):
        layer, rule = node.layer, rules[node.id]
        ins, out = trace.activations[node.id]
        ins = [np.asarray(a, dtype=np.float64) for a in ins]
        r = relevance.pop(node.id, None)
        if r is None:
            r = np.zeros(out.shape)
        if keep_layers:
            kept[node.id] = r
        kind = layer.kind
        if kind in ("Conv1D", "Dense"):
            if rule.kind == "WSquare":
                r_ins = [propagate_wsquare(layer, ins[0], r, rule.stabilizer)]
            elif rule.kind in ("Gamma", "Epsilon"):
                r_ins = [propagate_linear(layer, ins[0], r, rule)]
            else:
                raise ValueError(f"{node.id}: rule {rule.kind} does not apply to {kind}")
        elif kind == "ElementwiseMultiply":
            if rule.kind != "SignalTakesAll":
                raise ValueError(f"{node.id}: gating node needs SignalTakesAll, got {rule.kind}")
            r_ins = list(propagate_signal_takes_all(r, ins[1].shape))
        elif kind == "ResidualAdd":
            r_ins = list(canonize_residual(ins[0], ins[1], r, rule.stabilizer))
        elif kind == "MaxPool1D":
            r_ins = [layer.route(ins[0].shape, trace.caches[node.id], r)]
        elif kind == "GlobalAvgPool1D":
            x = ins[0]
            r_ins = [x * (r / _stab(x.sum(axis=1), rule.stabilizer))[:, None, :]]
        else:  # ReLU, Sigmoid, Dropout
            r_ins = [r]
        for r_in in r_ins:
            if not np.all(np.isfinite(r_in)):
                raise NonFiniteRelevance(f"non-finite relevance below layer {node.id!r}")
        absorbed[node.id] = r.reshape(r.shape[0], -1).sum(axis=1) - sum(
            ri.reshape(ri.shape[0], -1).sum(axis=1) for ri in r_ins)
        for src, r_in in zip(node.inputs, r_ins):
            relevance[src] = r_in if src not in relevance else relevance[src] + r_in
    r_input = relevance.get(INPUT, np.zeros(trace.input.shape))
    if not trace.batched:
        r_input, seed = r_input[0], seed[0]
        kept = {k: v[0] for k, v in kept.items()}
        absorbed = {k: v[0] for k, v in absorbed.items()}
    return RelevanceMap(r_input, seed, kept, absorbed)


def relevance_signal(maps: list, n_windows: int | None = None) -> np.ndarray:
    """Concatenate per-window input relevances ``(N, M)`` into ``(n_windows * N, M)``."""
    windows = [m.input_relevance if isinstance(m, RelevanceMap) else np.asarray(m) for m in maps]
    if n_windows is not None and len(windows) != n_windows:
        raise ValueError(f"expected {n_windows} relevance windows, got {len(windows)}")
    if any(w.ndim != 2 for w in windows):
        raise ValueError("each window's relevance must be (samples, mics)")
    return np.concatenate(windows, axis=0)
