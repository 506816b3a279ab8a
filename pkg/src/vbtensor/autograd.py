"""Reverse-mode autograd engine.

Forward recording hangs GradNodes off output tensors; backward runs a
dependency-counted FIFO ready queue with per-node input buffers, validates
saved-tensor versions before each apply, and synchronizes cross-stream
gradients with device events. One process-wide try-acquired gate rejects
concurrent (and nested) backward runs outright.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Callable, Optional, Sequence

from . import _exec
from .errors import GateBusyError, ShapeError, VbtError, VersionMismatchError
from .runtime import get_runtime, stream_scope
from .storage import Tensor, make_tensor

_tls = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


def set_grad_enabled(mode: bool) -> None:
    _tls.grad_enabled = bool(mode)


class _GradMode:
    def __init__(self, mode: bool):
        self.mode = mode
        self.prev = True

    def __enter__(self):
        self.prev = is_grad_enabled()
        set_grad_enabled(self.mode)
        return self

    def __exit__(self, *exc):
        set_grad_enabled(self.prev)
        return False


def no_grad() -> _GradMode:
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class AutogradMeta:
    __slots__ = ("requires_grad", "grad", "grad_fn", "output_nr", "accumulator")

    def __init__(self):
        self.requires_grad = False
        self.grad: Optional[Tensor] = None
        self.grad_fn: Optional["GradNode"] = None
        self.output_nr = 0
        self.accumulator: Optional["GradNode"] = None


def ensure_meta(t: Tensor) -> AutogradMeta:
    if t.autograd_meta is None:
        t.autograd_meta = AutogradMeta()
    return t.autograd_meta


class SavedTensor:
    __slots__ = ("tensor", "saved_version")

    def __init__(self, tensor: Tensor):
        self.tensor = tensor
        self.saved_version = tensor.version.value

    def unpack(self, op_name: str, index: int) -> Tensor:
        current = self.tensor.version.value
        if current != self.saved_version:
            raise VersionMismatchError(
                f"tensor saved for {op_name} (saved input {index}) was "
                f"mutated in place: saved version {self.saved_version}, "
                f"current {current}")
        return self.tensor


class GradEdge:
    __slots__ = ("node", "input_nr")

    def __init__(self, node: "GradNode", input_nr: int):
        self.node = node
        self.input_nr = input_nr


class GradNode:
    """One backward function: consumes output grads, produces input grads."""

    def __init__(self, name: str, num_inputs: int,
                 apply_fn: Optional[Callable] = None,
                 stream_hint: Optional[tuple[int, int]] = None):
        self.name = name
        self.num_inputs = num_inputs  # gradient slots == forward outputs
        self.next_edges: list[Optional[GradEdge]] = []
        self.saved: list[SavedTensor] = []
        self.aux = None
        self.apply_fn = apply_fn
        self.stream_hint = stream_hint
        self.consumed = False

    def unpack_saved(self) -> list[Tensor]:
        return [s.unpack(self.name, i) for i, s in enumerate(self.saved)]

    def apply(self, grads: list[Optional[Tensor]]) -> Sequence[Optional[Tensor]]:
        return self.apply_fn(self.unpack_saved(), self.aux, grads)

    def __repr__(self) -> str:
        return f"<GradNode {self.name} edges={len(self.next_edges)}>"


class AccumulateGrad(GradNode):
    """Terminal node summing gradients into a leaf's .grad buffer."""

    def __init__(self, tensor: Tensor):
        super().__init__(f"accumulate_grad({id(tensor):#x})", num_inputs=1)
        self.tensor = tensor

    def apply(self, grads):
        g = grads[0]
        if g is None:
            return []
        if g.sizes != self.tensor.sizes:
            raise ShapeError(
                f"gradient shape {g.sizes} does not match leaf shape "
                f"{self.tensor.sizes}")
        meta = ensure_meta(self.tensor)
        if meta.grad is None:
            # Fresh accumulation buffers are zero-initialized, then added to.
            meta.grad = make_tensor(g.sizes, g.dtype, g.device)
        _exec.elementwise_binary("add", meta.grad, g, out=meta.grad,
                                 allow_alias=True)
        return []


def _accumulator_for(t: Tensor) -> GradNode:
    meta = ensure_meta(t)
    if meta.accumulator is None:
        meta.accumulator = AccumulateGrad(t)
    return meta.accumulator


def _edge_for(t: Tensor) -> Optional[GradEdge]:
    meta = t.autograd_meta
    if meta is None or not (meta.requires_grad or meta.grad_fn is not None):
        return None
    if meta.grad_fn is not None:
        return GradEdge(meta.grad_fn, meta.output_nr)
    return GradEdge(_accumulator_for(t), 0)


def record_forward(op_name: str, inputs: Sequence[Tensor],
                   outputs: Sequence[Tensor], backward_fn: Callable,
                   saved: Sequence[Tensor], aux=None) -> GradNode:
    """Attach a GradNode to ``outputs`` for a just-executed forward call."""
    stream_hint = None
    for t in (*inputs, *outputs):
        if t.device.is_virt:
            rt = get_runtime()
            stream_hint = (t.device.index,
                           rt.current_stream(t.device.index).id)
            break
    node = GradNode(op_name, num_inputs=len(outputs), apply_fn=backward_fn,
                    stream_hint=stream_hint)
    node.next_edges = [_edge_for(t) for t in inputs]
    node.saved = [SavedTensor(t) for t in saved]
    node.aux = aux
    for i, out in enumerate(outputs):
        meta = ensure_meta(out)
        meta.requires_grad = True
        meta.grad_fn = node
        meta.output_nr = i
    return node


class Derivative:
    """Backward formula + saved-tensor selection for one operator.

    ``save(args, outputs) -> (saved_tensors, aux)``;
    ``backward(saved, aux, grad_outputs) -> grads`` aligned with the op's
    tensor inputs (None where a formula produces nothing).
    """

    def __init__(self, name: str, backward: Callable, save: Callable):
        self.name = name
        self.backward = backward
        self.save = save

    def wrap(self, snapshot, args, base_call):
        schema = snapshot.schema
        tensor_inputs = [a for a in args[:schema.num_tensor_inputs]]
        if not is_grad_enabled() or not any(t.requires_grad for t in tensor_inputs):
            return base_call()
        if schema.inplace_alias:
            raise VbtError(
                f"{schema.name}: in-place op on a tensor that requires grad "
                f"is not supported while grad recording is enabled")
        outs = base_call()
        saved, aux = self.save(args, outs)
        record_forward(schema.name, tensor_inputs, outs, self.backward,
                       saved, aux)
        return outs


def check_inplace(t: Tensor, op_name: str) -> None:
    """Guard in-place kernels: mutation of recorded tensors is rejected."""
    if is_grad_enabled() and t.requires_grad:
        raise VbtError(
            f"{op_name}: in-place mutation of a tensor that requires grad "
            f"is not supported while grad recording is enabled")


# -- the global backward gate --------------------------------------------------

_gate = threading.Lock()


class acquire_backward_gate:
    """Try-acquire scope for the process-wide backward gate.

    Non-blocking and non-reentrant: a second concurrent (or nested) backward
    fails immediately with GateBusyError.
    """

    def __enter__(self):
        if not _gate.acquire(blocking=False):
            raise GateBusyError(
                "concurrent backward rejected by the global backward gate")
        return self

    def __exit__(self, *exc):
        _gate.release()
        return False


def sync_cross_stream_grad(node: GradNode, consumer_stream) -> None:
    """Order a producer node's stream before a consumer stream via an event."""
    if node.stream_hint is None:
        return
    dev_index, producer_sid = node.stream_hint
    if consumer_stream is None or consumer_stream.id == producer_sid:
        return
    dev = get_runtime().device(dev_index)
    event = dev.create_event()
    dev.event_record(event, dev.stream(producer_sid))
    dev.event_wait(event, consumer_stream)


def _consumer_stream(node: GradNode):
    if node.stream_hint is None:
        return None
    dev_index, sid = node.stream_hint
    return get_runtime().device(dev_index).stream(sid)


def _route(edge: GradEdge, grad: Optional[Tensor], producer: GradNode,
           buffers: dict, pending: dict, queue: deque) -> None:
    """Deliver one gradient along an edge; None is the additive identity
    but still satisfies the consumer's dependency count."""
    target = edge.node
    buf = buffers.setdefault(target, [None] * max(target.num_inputs, 1))
    if grad is not None:
        consumer_stream = _consumer_stream(target)
        if producer.stream_hint is not None:
            if consumer_stream is None:
                # Consumer carries no stream hint (leaf accumulator): it runs
                # on the producing device's current stream, so order on that.
                dev_index, _ = producer.stream_hint
                consumer_stream = get_runtime().current_stream(dev_index)
            sync_cross_stream_grad(producer, consumer_stream)
        slot = buf[edge.input_nr]
        if slot is None:
            buf[edge.input_nr] = grad
        else:
            if consumer_stream is not None:
                with stream_scope(consumer_stream):
                    buf[edge.input_nr] = _exec.elementwise_binary(
                        "add", slot, grad)
            else:
                buf[edge.input_nr] = _exec.elementwise_binary(
                    "add", slot, grad)
    pending[target] -= 1
    if pending[target] == 0:
        queue.append(target)


def backward(root: Tensor, grad_seed: Optional[Tensor] = None) -> None:
    if not root.requires_grad:
        raise VbtError("backward() on a tensor that does not require grad")
    if grad_seed is not None and grad_seed.sizes != root.sizes:
        raise ShapeError(
            f"grad seed shape {grad_seed.sizes} does not match root shape "
            f"{root.sizes}")
    with acquire_backward_gate():
        with no_grad():
            if grad_seed is None:
                if root.numel() != 1:
                    raise VbtError(
                        "backward() on a non-scalar root requires a grad seed")
                grad_seed = make_tensor(root.sizes, root.dtype, root.device)
                _exec.fill_(grad_seed, 1)
            _run_engine(root, grad_seed)


def _run_engine(root: Tensor, seed: Tensor) -> None:
    root_fn = root.grad_fn
    if root_fn is None:
        _accumulator_for(root).apply([seed])
        return

    # Reverse reachability pass: dependency counts per reachable node.
    pending: dict[GradNode, int] = {root_fn: 0}
    stack = [root_fn]
    seen = {root_fn}
    while stack:
        node = stack.pop()
        if node.consumed and not isinstance(node, AccumulateGrad):
            raise VbtError(
                f"backward through {node.name} a second time: buffers were "
                f"freed after the first backward (no retain_graph)")
        for edge in node.next_edges:
            if edge is None:
                continue
            pending[edge.node] = pending.get(edge.node, 0) + 1
            if edge.node not in seen:
                seen.add(edge.node)
                stack.append(edge.node)

    buffers: dict[GradNode, list[Optional[Tensor]]] = {
        root_fn: [None] * max(root_fn.num_inputs, 1)}
    buffers[root_fn][root.autograd_meta.output_nr] = seed
    queue: deque[GradNode] = deque([root_fn])

    while queue:
        node = queue.popleft()
        grads_in = buffers.pop(node, [None] * max(node.num_inputs, 1))
        if all(g is None for g in grads_in):
            # Nothing flowed here: propagate nulls without applying so that
            # downstream dependency counts still drain.
            grads_out = []
        else:
            stream = _consumer_stream(node)
            if stream is not None:
                with stream_scope(stream):
                    grads_out = node.apply(grads_in)
            else:
                grads_out = node.apply(grads_in)
        if not isinstance(node, AccumulateGrad):
            node.consumed = True
            node.saved = []  # free buffers eagerly
        grads_out = list(grads_out) if grads_out is not None else []
        if len(grads_out) < len(node.next_edges):
            grads_out += [None] * (len(node.next_edges) - len(grads_out))
        for edge, g in zip(node.next_edges, grads_out):
            if edge is None:
                continue
            _route(edge, g, node, buffers, pending, queue)
