"""Layer graphs, recorded forward passes and reverse-mode gradients."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ShapeError

INPUT = "input"


class NonFiniteError(FloatingPointError):
    def __init__(self, layer_id: str, what: str = "activation"):
        super().__init__(f"non-finite {what} at layer {layer_id!r}")
        self.layer_id = layer_id


class StaleTraceError(RuntimeError):
    pass


@dataclass
class Node:
    layer: Layer
    inputs: list[str]
    tags: list[str] | None = None

    @property
    def id(self) -> str:
        return self.layer.id


class LayerGraph:
    """Topologically ordered DAG of layers with one input and one output.

    Nodes are appended in execution order; each names the node ids (or
    ``"input"``) it reads from. The last node is the output.
    """

    def __init__(self, input_shape: tuple[int, ...], name: str = "graph"):
        self.input_shape = tuple(input_shape)
        self.name = name
        self.nodes: list[Node] = []
        self._index: dict[str, Node] = {}
        self.version = 0
        self.meta: dict = {}

    # -- construction -----------------------------------------------------
    def add(self, layer: Layer, inputs: str | list[str] | None = None,
            tags: list[str] | None = None) -> str:
        if layer.id in self._index or layer.id == INPUT:
            raise ValueError(f"duplicate layer id {layer.id!r}")
        if inputs is None:
            inputs = [self.nodes[-1].id if self.nodes else INPUT]
        elif isinstance(inputs, str):
            inputs = [inputs]
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise ValueError(f"{layer.id}: unknown input {src!r} (graph must be built in topological order)")
        if len(inputs) != layer.n_inputs:
            raise ValueError(f"{layer.id}: {layer.kind} takes {layer.n_inputs} inputs, got {len(inputs)}")
        if layer.n_inputs == 2:
            tags = list(tags) if tags is not None else list(layer.tags)
            if sorted(tags) != sorted(layer.tags):
                raise ValueError(f"{layer.id}: inputs must be tagged {layer.tags}, got {tags}")
            # store inputs in canonical tag order
            order = [tags.index(t) for t in layer.tags]
            inputs = [inputs[i] for i in order]
            tags = list(layer.tags)
        node = Node(layer, list(inputs), tags)
        self.nodes.append(node)
        self._index[layer.id] = node
        self.version += 1
        return layer.id

    def node(self, id: str) -> Node:
        return self._index[id]

    def __getitem__(self, id: str) -> Layer:
        return self._index[id].layer

    def __len__(self):
        return len(self.nodes)

    @property
    def output_id(self) -> str:
        return self.nodes[-1].id if self.nodes else INPUT

    def consumers(self, id: str) -> list[Node]:
        return [n for n in self.nodes if id in n.inputs]

    # -- shapes -------------------------------------------------------------
    def static_shapes(self, input_shape: tuple[int, ...] | None = None) -> dict[str, tuple]:
        shapes = {INPUT: tuple(input_shape or self.input_shape)}
        for node in self.nodes:
            try:
                shapes[node.id] = tuple(node.layer.out_shape([shapes[s] for s in node.inputs]))
            except ShapeError:
                raise
            except Exception as exc:  # malformed hyperparameters
                raise ShapeError(f"{node.id}: {exc}") from exc
        return shapes

    def validate(self, input_shape=None) -> tuple:
        """Run static shape inference; return the output shape."""
        return self.static_shapes(input_shape)[self.output_id]

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.validate()))

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n.id}.{k}": v for n in self.nodes for k, v in n.layer.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        for name, v in values.items():
            if own[name].shape != v.shape:
                raise ShapeError(f"parameter {name}: shape {v.shape} != {own[name].shape}")
        for name, v in values.items():
            lid, key = name.rsplit(".", 1)
            self[lid].params[key] = np.array(v, copy=True)
        self.touch()

    def touch(self) -> None:
        """Mark parameters as mutated; traces recorded earlier become stale."""
        self.version += 1

    def astype(self, dtype) -> "LayerGraph":
        for n in self.nodes:
            for k, v in n.layer.params.items():
                n.layer.params[k] = v.astype(dtype)
        self.touch()
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return next(iter(params.values())).dtype if params else np.dtype(np.float64)

    # -- identity -------------------------------------------------------------
    def describe(self) -> list[dict]:
        return [
            {"id": n.id, "kind": n.layer.kind, "inputs": n.inputs, "tags": n.tags,
             "hyper": n.layer.hyper(),
             "params": {k: list(v.shape) for k, v in n.layer.params.items()}}
            for n in self.nodes
        ]

    def fingerprint(self) -> str:
        desc = {"input_shape": list(self.input_shape), "nodes": self.describe(),
                "config_hash": self.meta.get("config_hash")}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()

    def copy(self) -> "LayerGraph":
        import copy
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """Per-layer inputs and outputs of one (batched) forward pass."""

    input: np.ndarray
    activations: dict[str, tuple[tuple[np.ndarray, ...], np.ndarray]] = field(default_factory=dict)
    caches: dict[str, object] = field(default_factory=dict)
    training: bool = False
    version: int = 0
    batched: bool = True

    def output(self, id: str) -> np.ndarray:
        return self.input if id == INPUT else self.activations[id][1]


def _value(trace: ForwardTrace, id: str) -> np.ndarray:
    return trace.input if id == INPUT else trace.activations[id][1]


def forward(graph: LayerGraph, x: np.ndarray, training: bool = False, rng=None):
    """Evaluate ``graph`` on ``x`` (one example or a batch); return ``(output, trace)``."""
    x = np.asarray(x)
    batched = x.ndim == len(graph.input_shape) + 1
    if not batched:
        if tuple(x.shape) != graph.input_shape:
            raise ShapeError(f"input shape {x.shape} != graph input shape {graph.input_shape}")
        x = x[None]
    elif tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != graph input shape {graph.input_shape}")
    if graph.nodes:
        x = x.astype(graph.dtype, copy=False)
    trace = ForwardTrace(input=x, training=training, version=graph.version, batched=batched)
    for node in graph.nodes:
        ins = tuple(_value(trace, s) for s in node.inputs)
        out, cache = node.layer.forward(ins, training=training, rng=rng)
        if not np.isfinite(out).all():
            raise NonFiniteError(node.id)
        trace.activations[node.id] = (ins, out)
        if cache is not None:
            trace.caches[node.id] = cache
    out = _value(trace, graph.output_id)
    return (out if batched else out[0]), trace


def backward(graph: LayerGraph, trace: ForwardTrace, loss_grad: np.ndarray,
             return_input_grad: bool = False):
    """Reverse-mode pass. Returns parameter gradients keyed like :meth:`LayerGraph.parameters`."""
    if trace.version != graph.version:
        raise StaleTraceError("graph was modified after the forward pass")
    g = np.asarray(loss_grad)
    if not trace.batched:
        g = g[None]
    grads_out: dict[str, np.ndarray] = {graph.output_id: g}
    param_grads: dict[str, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads_out.pop(node.id, None)
        if g is None:
            g = np.zeros_like(trace.activations[node.id][1])
        ins, out = trace.activations[node.id]
        in_grads, pgrads = node.layer.backward(ins, out, trace.caches.get(node.id), g)
        for k, v in pgrads.items():
            param_grads[f"{node.id}.{k}"] = v
        for src, dg in zip(node.inputs, in_grads):
            grads_out[src] = dg if src not in grads_out else grads_out[src] + dg
    if return_input_grad:
        gi = grads_out.get(INPUT, np.zeros_like(trace.input))
        return param_grads, (gi if trace.batched else gi[0])
    return param_grads


def predict(graph: LayerGraph, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode outputs for a batch, evaluated in chunks."""
    outs = [forward(graph, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, graph.output_dim))


def init_parameters(graph: LayerGraph, rng: np.random.Generator) -> None:
    """Uniform fan-in initialisation: He for layers feeding ReLU, Glorot otherwise; zero biases."""
    for node in graph.nodes:
        layer = node.layer
        if layer.kind not in ("Conv1D", "Dense"):
            continue
        w = layer.params["weight"]
        if layer.kind == "Conv1D":
            fan_in, fan_out = layer.in_channels * layer.kernel_size, layer.out_channels * layer.kernel_size
        else:
            fan_in, fan_out = layer.in_features, layer.out_features
        following = {c.layer.kind for c in graph.consumers(node.id)}
        if "ReLU" in following:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        layer.params["weight"] = rng.uniform(-limit, limit, size=w.shape).astype(w.dtype)
        layer.params["bias"] = np.zeros_like(layer.params["bias"])
    graph.meta["init"] = "he_uniform(relu)/glorot_uniform(other)"
    graph.touch()


