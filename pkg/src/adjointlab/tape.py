"""Minimal reverse-mode tape over coarse-grained custom operators.

Every node of a :class:`TapeGraph` is the application of one
:class:`CustomOp`, a pair of hand-written ``forward``/``backward`` functions.
``forward`` returns the output together with whatever context ``backward``
needs later, so a backward sweep never re-enters the forward code except
inside :func:`scan`, which trades memory for recomputation by keeping only
every ``checkpoint_stride``-th carry.

Typical use::

    g = TapeGraph()
    x = g.placeholder("x", shape=(3,))
    y = record(g, "square", [x])
    loss = record(g, "sum", [y])
    forward_eval(g, {x: np.ones(3)})
    grads = backward(g, loss)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "TapeError",
    "CustomOp",
    "TapeNode",
    "TapeGraph",
    "ScanSpec",
    "OpRegistry",
    "REGISTRY",
    "register_custom_op",
    "get_op",
    "record",
    "forward_eval",
    "backward",
    "scan",
]


class TapeError(RuntimeError):
    """Raised for graph construction or evaluation misuse."""


@dataclass(frozen=True)
class CustomOp:
    """A differentiable operator.

    ``forward(inputs, **attrs) -> (value, ctx)`` and
    ``backward(grad_out, ctx) -> list of per-input gradients``.
    ``sample(rng) -> (inputs, attrs)`` optionally produces a random valid
    input set; gradient-check tooling uses it.
    """

    name: str
    forward: Callable[..., Any]
    backward: Callable[..., Any]
    sample: Optional[Callable[[np.random.Generator], Any]] = None


@dataclass
class TapeNode:
    id: int
    op_name: str
    input_ids: List[int]
    attrs: Dict[str, Any] = field(default_factory=dict)
    value: Optional[np.ndarray] = None
    backward_context: Any = None


class OpRegistry:
    def __init__(self):
        self._ops: Dict[str, CustomOp] = {}
        self._lock = threading.Lock()

    def register(self, name, forward, backward, sample=None) -> CustomOp:
        with self._lock:
            if name in self._ops:
                raise TapeError(f"op {name!r} is already registered")
            op = CustomOp(name, forward, backward, sample)
            self._ops[name] = op
            return op

    def unregister(self, name: str) -> None:
        with self._lock:
            self._ops.pop(name, None)

    def get(self, name: str) -> CustomOp:
        try:
            return self._ops[name]
        except KeyError:
            raise TapeError(f"unregistered op {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._ops

    def names(self) -> List[str]:
        return sorted(self._ops)


REGISTRY = OpRegistry()


def register_custom_op(name: str, forward, backward, sample=None) -> CustomOp:
    """Register ``name`` in the global registry; duplicate names raise."""
    return REGISTRY.register(name, forward, backward, sample)


def get_op(name: str) -> CustomOp:
    return REGISTRY.get(name)


_PLACEHOLDER = "placeholder"
_CONSTANT = "constant"


class TapeGraph:
    """Append-only graph; node ids are contiguous and follow append order."""

    def __init__(self, registry: OpRegistry = REGISTRY):
        self.nodes: List[TapeNode] = []
        self.feeds: Dict[int, np.ndarray] = {}
        self.registry = registry
        # ops not in the registry (scan wrappers) live here, keyed by node id
        self._private_ops: Dict[int, CustomOp] = {}
        self._evaluated = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op_name, input_ids, attrs, private_op=None) -> int:
        nid = len(self.nodes)
        for i in input_ids:
            if not isinstance(i, (int, np.integer)) or not 0 <= i < nid:
                raise TapeError(f"unknown input id {i!r}")
        self.nodes.append(TapeNode(nid, op_name, [int(i) for i in input_ids], dict(attrs)))
        if private_op is not None:
            self._private_ops[nid] = private_op
        self._evaluated = False
        return nid

    def placeholder(self, name: str = "", shape=None) -> int:
        return self._append(_PLACEHOLDER, [], {"name": name, "shape": shape})

    def constant(self, value) -> int:
        return self._append(_CONSTANT, [], {"value": np.array(value, dtype=np.float64)})

    def op_for(self, nid: int) -> CustomOp:
        if nid in self._private_ops:
            return self._private_ops[nid]
        return self.registry.get(self.nodes[nid].op_name)

    def value(self, nid: int) -> np.ndarray:
        v = self.nodes[nid].value
        if v is None:
            raise TapeError(f"node {nid} has not been evaluated")
        return v


def record(graph: TapeGraph, op, inputs: Sequence[int], **attrs) -> int:
    """Append one application of ``op`` (a name or registered op); no evaluation."""
    name = op.name if isinstance(op, CustomOp) else op
    graph.registry.get(name)
    return graph._append(name, list(inputs), attrs)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def forward_eval(graph: TapeGraph, feeds: Mapping[int, Any]) -> Dict[int, np.ndarray]:
    """Evaluate every node in id order and cache the backward contexts."""
    graph.feeds = {int(k): _as_array(v) for k, v in feeds.items()}
    for node in graph.nodes:
        node.value = None
        node.backward_context = None
    graph._evaluated = False
    out = {}
    for node in graph.nodes:
        if node.op_name == _PLACEHOLDER:
            if node.id not in graph.feeds:
                label = node.attrs.get("name") or node.id
                raise TapeError(f"missing feed for placeholder {label!r}")
            val = graph.feeds[node.id]
            shape = node.attrs.get("shape")
            if shape is not None and tuple(val.shape) != tuple(shape):
                raise TapeError(
                    f"feed for node {node.id} has shape {val.shape}, expected {tuple(shape)}")
        elif node.op_name == _CONSTANT:
            val = node.attrs["value"]
        else:
            op = graph.op_for(node.id)
            args = [graph.nodes[i].value for i in node.input_ids]
            try:
                val, ctx = op.forward(args, **node.attrs)
            except TapeError:
                raise
            except ValueError as exc:
                raise TapeError(f"{op.name} (node {node.id}): {exc}") from exc
            node.backward_context = ctx
            val = _as_array(val)
        node.value = val
        out[node.id] = val
    graph._evaluated = True
    return out


def _ancestors(graph: TapeGraph, root: int) -> np.ndarray:
    mark = np.zeros(len(graph.nodes), dtype=bool)
    mark[root] = True
    for nid in range(root, -1, -1):
        if mark[nid]:
            for i in graph.nodes[nid].input_ids:
                mark[i] = True
    return mark


def _descendants(graph: TapeGraph, sources: Sequence[int]) -> np.ndarray:
    mark = np.zeros(len(graph.nodes), dtype=bool)
    mark[list(sources)] = True
    for node in graph.nodes:
        if not mark[node.id] and any(mark[i] for i in node.input_ids):
            mark[node.id] = True
    return mark


def backward(graph: TapeGraph, loss_id: int, wrt: Optional[Sequence[int]] = None
             ) -> Dict[int, np.ndarray]:
    """Gradients of the scalar node ``loss_id``.

    Returns a gradient for every ancestor of the loss. When ``wrt`` is given,
    only nodes lying on a path from some ``wrt`` node to the loss are
    visited, which skips expensive backward calls that cannot reach them.
    """
    if not 0 <= loss_id < len(graph.nodes):
        raise TapeError(f"unknown loss id {loss_id}")
    if not graph._evaluated:
        raise TapeError("backward called before forward_eval")
    loss_val = graph.nodes[loss_id].value
    if loss_val.size != 1:
        raise TapeError(f"loss node must be scalar, got shape {loss_val.shape}")

    active = _ancestors(graph, loss_id)
    if wrt is not None:
        active &= _descendants(graph, wrt)
    grads: Dict[int, np.ndarray] = {loss_id: np.ones_like(loss_val)}
    for nid in range(loss_id, -1, -1):
        if not active[nid] or nid not in grads:
            continue
        node = graph.nodes[nid]
        if not node.input_ids:
            continue
        op = graph.op_for(nid)
        in_grads = op.backward(grads[nid], node.backward_context)
        if len(in_grads) != len(node.input_ids):
            raise TapeError(
                f"{op.name}.backward returned {len(in_grads)} gradients "
                f"for {len(node.input_ids)} inputs")
        for i, g in zip(node.input_ids, in_grads):
            if not active[i]:
                continue
            g = _as_array(g)
            if g.shape != graph.nodes[i].value.shape:
                raise TapeError(
                    f"{op.name}.backward gradient shape {g.shape} does not match "
                    f"input shape {graph.nodes[i].value.shape}")
            grads[i] = grads[i] + g if i in grads else g
    if wrt is None:
        for nid in np.flatnonzero(active):
            grads.setdefault(int(nid), np.zeros_like(graph.nodes[nid].value))
    return grads


# ---------------------------------------------------------------------------
# scan


@dataclass(frozen=True)
class ScanSpec:
    """``n_steps``-fold application of ``step_op`` to a carry.

    ``step_op.forward([carry, *static], step=k, **attrs)`` must return a
    carry of the same shape. ``checkpoint_stride=None`` selects
    ``ceil(sqrt(n_steps))``; a stride of 1 stores every step's context.
    """

    step_op: CustomOp
    n_steps: int
    carry_shape: tuple = None
    checkpoint_stride: Optional[int] = None

    def stride(self) -> int:
        if self.checkpoint_stride is not None:
            return int(self.checkpoint_stride)
        return max(1, math.ceil(math.sqrt(self.n_steps)))


def _make_scan_op(spec: ScanSpec, start: int, step_attrs: dict) -> CustomOp:
    step = spec.step_op
    n = spec.n_steps
    stride = spec.stride()

    def run_step(k, carry, static):
        out, ctx = step.forward([carry, *static], step=start + k, **step_attrs)
        out = _as_array(out)
        if out.shape != carry.shape:
            raise TapeError(
                f"scan step {step.name} changed carry shape {carry.shape} -> {out.shape}")
        return out, ctx

    def forward(inputs, **_):
        carry, static = _as_array(inputs[0]), [_as_array(s) for s in inputs[1:]]
        if spec.carry_shape is not None and carry.shape != tuple(spec.carry_shape):
            raise TapeError(f"scan init shape {carry.shape} != {tuple(spec.carry_shape)}")
        if stride == 1:
            ctxs = []
            for k in range(n):
                carry, ctx = run_step(k, carry, static)
                ctxs.append(ctx)
            return carry, ("full", ctxs, static, carry.shape)
        checkpoints = {}
        for k in range(n):
            if k % stride == 0:
                checkpoints[k] = carry
            carry, _ = run_step(k, carry, static)
        return carry, ("checkpoint", checkpoints, static, carry.shape)

    def backward(g, ctx):
        mode, store, static, shape = ctx
        g_carry = _as_array(g)
        g_static = [np.zeros_like(s) for s in static]

        def step_back(g_carry, c):
            gs = step.backward(g_carry, c)
            for j in range(len(static)):
                g_static[j] = g_static[j] + gs[1 + j]
            return _as_array(gs[0])

        if mode == "full":
            for k in range(n - 1, -1, -1):
                g_carry = step_back(g_carry, store[k])
        else:
            for seg in sorted(store, reverse=True):
                carry = store[seg]
                ctxs = []
                for k in range(seg, min(seg + stride, n)):
                    carry, c = run_step(k, carry, static)
                    ctxs.append(c)
                for c in reversed(ctxs):
                    g_carry = step_back(g_carry, c)
        return [g_carry, *g_static]

    return CustomOp(f"scan[{step.name}]", forward, backward)


def scan(graph: TapeGraph, spec: ScanSpec, init: int, static_params: Sequence[int] = (),
         start: int = 0, **step_attrs) -> int:
    """Record ``spec.n_steps`` applications of the step op as a single node.

    ``start`` offsets the step index handed to the step op, so consecutive
    scans can continue one global time axis. Returns the final-carry node;
    with ``n_steps == 0`` that is ``init`` itself.
    """
    if spec.n_steps < 0:
        raise TapeError("n_steps must be >= 0")
    if spec.n_steps == 0:
        return init
    if spec.stride() < 1:
        raise TapeError("checkpoint_stride must be >= 1")
    if spec.checkpoint_stride is not None and spec.checkpoint_stride > spec.n_steps:
        raise TapeError("checkpoint_stride must not exceed n_steps")
    op = _make_scan_op(spec, start, step_attrs)
    return graph._append(op.name, [init, *static_params], {}, private_op=op)


# ---------------------------------------------------------------------------
# generic elementwise / reduction ops


def _identity_fwd(inputs, **_):
    return inputs[0].copy(), None


def _identity_bwd(g, ctx):
    return [g]


def _add_fwd(inputs, **_):
    shape = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != shape:
            raise ValueError(f"add: shape mismatch {x.shape} vs {shape}")
    out = inputs[0].copy()
    for x in inputs[1:]:
        out = out + x
    return out, len(inputs)


def _add_bwd(g, n):
    return [g] * n


def _scale_fwd(inputs, factor=1.0, **_):
    return factor * inputs[0], factor


def _scale_bwd(g, factor):
    return [factor * g]


def _mul_fwd(inputs, **_):
    x, y = inputs
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    return x * y, (x, y)


def _mul_bwd(g, ctx):
    x, y = ctx
    return [g * y, g * x]


def _square_fwd(inputs, **_):
    x = inputs[0]
    return x * x, x


def _square_bwd(g, x):
    return [2.0 * x * g]


def _sum_fwd(inputs):
    x = inputs[0]
    return np.array(np.sum(x)), x.shape


def _sum_bwd(g, shape):
    return [np.full(shape, float(g))]


def _dot_fwd(inputs):
    x, y = inputs
    if x.shape != y.shape:
        raise ValueError(f"dot: shape mismatch {x.shape} vs {y.shape}")
    return np.array(np.vdot(x, y)), (x, y)


def _dot_bwd(g, ctx):
    x, y = ctx
    g = float(g)
    return [g * y, g * x]


def _index_fwd(inputs, index=0):
    x = inputs[0]
    return x[index].copy(), (x.shape, index)


def _index_bwd(g, ctx):
    shape, index = ctx
    out = np.zeros(shape)
    out[index] = g
    return [out]


def _rand_args(n_inputs):
    def sample(rng):
        return [rng.standard_normal(4) for _ in range(n_inputs)], {}
    return sample


register_custom_op("identity", _identity_fwd, _identity_bwd, _rand_args(1))
register_custom_op("add", _add_fwd, _add_bwd, _rand_args(2))
register_custom_op("scale", _scale_fwd, _scale_bwd,
                   lambda rng: ([rng.standard_normal(4)], {"factor": 1.7}))
register_custom_op("mul", _mul_fwd, _mul_bwd, _rand_args(2))
register_custom_op("square", _square_fwd, _square_bwd, _rand_args(1))
register_custom_op("sum", _sum_fwd, _sum_bwd, _rand_args(1))
register_custom_op("dot", _dot_fwd, _dot_bwd, _rand_args(2))
register_custom_op("index", _index_fwd, _index_bwd,
                   lambda rng: ([rng.standard_normal((3, 4))], {"index": 1}))
