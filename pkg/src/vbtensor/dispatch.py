"""Schema-lite operator registry.

Operators are keyed by fully qualified "ns::op" names and carry only arity,
alias map, and device policy. Every registration change publishes a fresh
immutable OperatorSnapshot under the registry writer lock; call paths read the
latest snapshot without taking any lock, so steady-state calls never block.
Wrapper order on a call is fixed: override, then autograd, then base kernel.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, replace
from enum import Enum
from types import MappingProxyType
from typing import Callable, Optional, Sequence

from .errors import DeviceError, DispatchError
from .storage import Tensor

_NAME_RE = re.compile(r"^[a-z_][a-z0-9_]*::[a-z_][a-z0-9_]*$")
_MAX_OVERRIDE_DEPTH = 64

BOXED_TYPES = (Tensor, bool, int, float, list, tuple, str, type(None))


class DispatchKey(Enum):
    HOST_KERNEL = "host"
    VIRT_KERNEL = "virt"


class DevicePolicy(Enum):
    ALL_SAME_DEVICE = "all_same_device"
    FABRIC_MULTI_DEVICE = "fabric_multi_device"


@dataclass(frozen=True)
class OpSchemaLite:
    name: str
    num_tensor_inputs: int
    num_tensor_outputs: int
    inplace_alias: Optional[dict[int, int]] = None
    device_policy: DevicePolicy = DevicePolicy.ALL_SAME_DEVICE

    def validate(self) -> None:
        if not _NAME_RE.match(self.name):
            raise DispatchError(f"malformed operator name {self.name!r}")
        if self.num_tensor_inputs < 0 or self.num_tensor_outputs < 0:
            raise DispatchError("negative arity")
        for out_idx, in_idx in (self.inplace_alias or {}).items():
            if not (0 <= out_idx < self.num_tensor_outputs
                    and 0 <= in_idx < self.num_tensor_inputs):
                raise DispatchError(
                    f"alias map {self.inplace_alias} outside arities of {self.name}")


@dataclass(frozen=True)
class OperatorSnapshot:
    schema: OpSchemaLite
    base_kernels: MappingProxyType
    has_autograd_wrapper: bool
    has_override_wrapper: bool
    override: Optional[Callable]
    generation: int
    autograd: Optional[object] = None  # Derivative handler; has .wrap(...)


def device_policy_check(schema: OpSchemaLite, args: Sequence) -> None:
    first_device = None
    for i, a in enumerate(args):
        if not isinstance(a, Tensor):
            continue
        if schema.device_policy is DevicePolicy.ALL_SAME_DEVICE:
            if first_device is None:
                first_device = a.device
            elif a.device != first_device:
                raise DeviceError(
                    f"{schema.name}: all tensor inputs must be on the same "
                    f"device; arg {i} is on {a.device!r}, expected "
                    f"{first_device!r}")
        else:  # FABRIC_MULTI_DEVICE: tensor args may span VIRT devices
            if not a.device.is_virt:
                raise DeviceError(
                    f"{schema.name}: fabric ops take VIRT tensors; arg {i} "
                    f"is on {a.device!r}")


class Registry:
    def __init__(self):
        self._ops: dict[str, OperatorSnapshot] = {}
        self._lock = threading.Lock()
        self._tls = threading.local()

    # -- registration (serialized behind the writer lock) --------------------

    def register_op(self, schema: OpSchemaLite) -> str:
        schema.validate()
        with self._lock:
            if schema.name in self._ops:
                raise DispatchError(f"operator {schema.name!r} already registered")
            self._ops[schema.name] = OperatorSnapshot(
                schema=schema, base_kernels=MappingProxyType({}),
                has_autograd_wrapper=False, has_override_wrapper=False,
                override=None, generation=0)
        return schema.name

    def _republish(self, name: str, **changes) -> None:
        snap = self._ops.get(name)
        if snap is None:
            raise DispatchError(f"unknown operator {name!r}")
        self._ops[name] = replace(snap, generation=snap.generation + 1, **changes)

    def register_kernel(self, name: str, key: DispatchKey, kernel: Callable,
                        *, replace_existing: bool = False) -> None:
        with self._lock:
            snap = self._ops.get(name)
            if snap is None:
                raise DispatchError(f"unknown operator {name!r}")
            if key in snap.base_kernels and not replace_existing:
                raise DispatchError(
                    f"{name}: kernel slot {key.value} already filled "
                    f"(pass replace_existing=True to overwrite)")
            kernels = dict(snap.base_kernels)
            kernels[key] = kernel
            self._republish(name, base_kernels=MappingProxyType(kernels))

    def register_autograd(self, name: str, derivative) -> None:
        with self._lock:
            self._republish(name, has_autograd_wrapper=True, autograd=derivative)

    def set_python_style_override(self, name: str, fn: Callable) -> None:
        with self._lock:
            self._republish(name, has_override_wrapper=True, override=fn)

    def clear_override(self, name: str) -> None:
        with self._lock:
            self._republish(name, has_override_wrapper=False, override=None)

    def unregister(self, name: str) -> None:
        """Internal: used by plugin rollback only."""
        with self._lock:
            self._ops.pop(name, None)

    # -- lookup / call (lock-free) ------------------------------------------

    def lookup(self, name: str) -> OperatorSnapshot:
        snap = self._ops.get(name)
        if snap is None:
            raise DispatchError(f"unknown operator {name!r}")
        return snap

    def has_op(self, name: str) -> bool:
        return name in self._ops

    def op_names(self) -> list[str]:
        return sorted(self._ops.keys())

    def _check_args(self, snap: OperatorSnapshot, args: Sequence) -> None:
        schema = snap.schema
        n = schema.num_tensor_inputs
        if len(args) < n:
            raise DispatchError(
                f"{schema.name}: expected at least {n} args, got {len(args)}")
        for i, a in enumerate(args):
            if i < n:
                if not isinstance(a, Tensor):
                    raise DispatchError(
                        f"{schema.name}: arg {i} must be a tensor "
                        f"(schema declares {n} tensor inputs)")
            elif isinstance(a, Tensor):
                raise DispatchError(
                    f"{schema.name}: unexpected tensor at arg {i} "
                    f"(schema declares {n} tensor inputs)")
            elif not isinstance(a, BOXED_TYPES):
                raise DispatchError(
                    f"{schema.name}: arg {i} of type {type(a).__name__} "
                    f"is not a boxed value")

    def _base_call(self, snap: OperatorSnapshot, args: Sequence) -> list:
        schema = snap.schema
        key = DispatchKey.HOST_KERNEL
        for a in args:
            if isinstance(a, Tensor):
                key = (DispatchKey.VIRT_KERNEL if a.device.is_virt
                       else DispatchKey.HOST_KERNEL)
                break
        kernel = snap.base_kernels.get(key)
        if kernel is None:
            raise DispatchError(
                f"{schema.name}: no kernel for dispatch key {key.value!r}")
        outs = kernel(args)
        if not isinstance(outs, (list, tuple)):
            outs = [outs]
        outs = list(outs)
        if len(outs) != schema.num_tensor_outputs:
            raise DispatchError(
                f"{schema.name}: kernel returned {len(outs)} outputs, schema "
                f"declares {schema.num_tensor_outputs}")
        return outs

    def call_boxed(self, name: str, args: Sequence) -> list:
        snap = self.lookup(name)
        self._check_args(snap, args)
        device_policy_check(snap.schema, args)

        def run_autograd_and_base() -> list:
            if snap.has_autograd_wrapper and snap.autograd is not None:
                return snap.autograd.wrap(snap, args,
                                          lambda: self._base_call(snap, args))
            return self._base_call(snap, args)

        if snap.has_override_wrapper and snap.override is not None:
            depth_map = getattr(self._tls, "depth", None)
            if depth_map is None:
                depth_map = {}
                self._tls.depth = depth_map
            depth = depth_map.get(name, 0)
            if depth >= _MAX_OVERRIDE_DEPTH:
                raise DispatchError(
                    f"{name}: override self-recursion exceeded depth "
                    f"{_MAX_OVERRIDE_DEPTH}")
            depth_map[name] = depth + 1
            try:
                outs = snap.override(args, run_autograd_and_base)
            finally:
                depth_map[name] = depth
            if not isinstance(outs, (list, tuple)):
                outs = [outs]
            return list(outs)
        return run_autograd_and_base()


registry = Registry()


def register_op(schema: OpSchemaLite) -> str:
    return registry.register_op(schema)


def register_kernel(name: str, key: DispatchKey, kernel: Callable,
                    *, replace_existing: bool = False) -> None:
    registry.register_kernel(name, key, kernel, replace_existing=replace_existing)


def call_boxed(name: str, args: Sequence) -> list:
    return registry.call_boxed(name, args)


def set_python_style_override(name: str, fn: Callable) -> None:
    registry.set_python_style_override(name, fn)


def clear_override(name: str) -> None:
    registry.clear_override(name)
