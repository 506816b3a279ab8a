"""Host side of the C plugin ABI.

Loads shared libraries with ctypes, negotiates the ABI version, hands the
plugin a function table (VbtHostApi in include/vbt_plugin.h), and rolls the
registry back atomically when init fails. Plugin kernels become ordinary
dispatcher base kernels; iterator helpers let external kernels reuse the
host's broadcasting and aliasing rules.
"""

from __future__ import annotations

import ctypes
import threading
from ctypes import (CFUNCTYPE, POINTER, Structure, byref, c_char_p, c_double,
                    c_int32, c_int64, c_uint8, c_uint16, c_uint32, c_void_p)
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dispatch import DispatchKey, OpSchemaLite, registry
from .dtypes import DType, HOST, virt
from .errors import OverlapError, PluginError, VbtError
from .iterator import OperandSpec, build_iter, for_each
from .runtime import get_runtime
from .storage import Tensor, make_tensor

ABI_MAJOR = 1
ABI_MINOR = 0

VBT_OK = 0
VBT_ERR = 1
VBT_ERR_OVERLAP = 2
VBT_ERR_INVALID_HANDLE = 3
VBT_ERR_BAD_ARGS = 4

ITER_FIRST_IS_OUTPUT = 1
ITER_ALLOW_INPLACE_ALIAS = 2

_DTYPE_CODES = {
    DType.F32: (2, 32), DType.F64: (2, 64), DType.I64: (0, 64),
    DType.I32: (0, 32), DType.BOOL: (6, 8),
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class VbtDtype(Structure):
    _fields_ = [("code", c_uint8), ("bits", c_uint8), ("lanes", c_uint16)]


_KERNEL_FN = CFUNCTYPE(c_int32, c_void_p, c_void_p)
_ELEMENT_FN = CFUNCTYPE(None, POINTER(c_void_p), c_int32, c_void_p)

# Order must match include/vbt_plugin.h exactly (append-only contract).
_API_SLOTS = [
    ("register_op", CFUNCTYPE(c_int32, c_char_p, c_int32, c_int32, _KERNEL_FN,
                              c_int32, c_void_p)),
    ("tensor_ndim", CFUNCTYPE(c_int32, c_void_p)),
    ("tensor_sizes", CFUNCTYPE(c_int32, c_void_p, POINTER(c_int64), c_int32)),
    ("tensor_strides", CFUNCTYPE(c_int32, c_void_p, POINTER(c_int64), c_int32)),
    ("tensor_dtype_code", CFUNCTYPE(c_int32, c_void_p, POINTER(VbtDtype))),
    ("tensor_device", CFUNCTYPE(c_int32, c_void_p, POINTER(c_int32),
                                POINTER(c_int32))),
    ("tensor_data", CFUNCTYPE(c_void_p, c_void_p)),
    ("iter_build", CFUNCTYPE(c_int32, POINTER(c_void_p), c_int32, c_uint32,
                             POINTER(c_void_p))),
    ("iter_common_shape", CFUNCTYPE(c_int32, c_void_p, POINTER(c_int64),
                                    c_int32)),
    ("iter_for_each", CFUNCTYPE(c_int32, c_void_p, _ELEMENT_FN, c_void_p)),
    ("iter_destroy", CFUNCTYPE(None, c_void_p)),
    ("alloc", CFUNCTYPE(c_void_p, c_int32, c_int64, c_int32)),
    ("dealloc", CFUNCTYPE(None, c_void_p)),
    ("report_error", CFUNCTYPE(None, c_int32, c_char_p)),
    ("call_num_args", CFUNCTYPE(c_int32, c_void_p)),
    ("call_arg_tensor", CFUNCTYPE(c_void_p, c_void_p, c_int32)),
    ("call_arg_double", CFUNCTYPE(c_int32, c_void_p, c_int32,
                                  POINTER(c_double))),
    ("call_arg_int", CFUNCTYPE(c_int32, c_void_p, c_int32, POINTER(c_int64))),
    ("call_new_output", CFUNCTYPE(c_void_p, c_void_p, c_int32,
                                  POINTER(c_int64), c_int32, VbtDtype,
                                  c_int32, c_int32)),
    ("call_set_output", CFUNCTYPE(c_int32, c_void_p, c_int32, c_void_p)),
]


class VbtHostApi(Structure):
    _fields_ = [("abi_major", c_uint32), ("abi_minor", c_uint32)] + \
        [(name, fn_t) for name, fn_t in _API_SLOTS]


class _HandleTable:
    """Maps opaque non-zero integer handles to live Python objects."""

    def __init__(self):
        self._lock = threading.Lock()
        self._next = 1
        self._objs: dict[int, object] = {}

    def put(self, obj) -> int:
        with self._lock:
            h = self._next
            self._next += 1
            self._objs[h] = obj
            return h

    def get(self, handle) -> object:
        if handle is None:
            return None
        return self._objs.get(int(handle))

    def drop(self, handle) -> None:
        with self._lock:
            self._objs.pop(int(handle), None)


@dataclass
class _IterState:
    plan: object
    tensors: list
    views: list = field(default_factory=list)


class _CallCtx:
    def __init__(self, args, schema):
        self.args = list(args)
        self.schema = schema
        self.outputs: list = [None] * schema.num_tensor_outputs
        self.handles: list[int] = []


@dataclass
class PluginManifest:
    path: str
    abi_major: int
    abi_minor: int
    minor_used: int
    registered_ops: list[str]


class _Host:
    """Singleton owning the API table, handles, and loaded manifests."""

    def __init__(self):
        self.tensors = _HandleTable()
        self.iters = _HandleTable()
        self.calls = _HandleTable()
        self._tls = threading.local()
        self._alloc_live: dict[int, object] = {}
        self._registering: list[str] | None = None
        self._load_lock = threading.Lock()
        self.manifests: list[PluginManifest] = []
        self._callbacks = []  # keep ctypes thunks alive
        self.table = self._build_table()

    # -- error channel ------------------------------------------------------

    def set_error(self, code: int, message: str) -> None:
        self._tls.last_error = (code, message)

    def take_error(self):
        err = getattr(self._tls, "last_error", None)
        self._tls.last_error = None
        return err

    # -- table construction -----------------------------------------------------

    def _wrap(self, fn_t, py):
        cb = fn_t(py)
        self._callbacks.append(cb)
        return cb

    def _build_table(self) -> VbtHostApi:
        t = VbtHostApi()
        t.abi_major = ABI_MAJOR
        t.abi_minor = ABI_MINOR

        def register_op(name, n_in, n_out, fn, device_key, user_data):
            try:
                qual = name.decode("utf-8")
                if self._registering is None:
                    self.set_error(VBT_ERR, "register_op outside plugin init")
                    return VBT_ERR
                if registry.has_op(qual):
                    self.set_error(VBT_ERR, f"operator {qual} already exists "
                                            "(plugins may only add new names)")
                    return VBT_ERR
                schema = OpSchemaLite(qual, int(n_in), int(n_out))
                registry.register_op(schema)
                kernel = self._make_kernel(qual, schema, fn, user_data)
                key = DispatchKey.VIRT_KERNEL if device_key == 1 \
                    else DispatchKey.HOST_KERNEL
                registry.register_kernel(qual, key, kernel)
                self._registering.append(qual)
                return VBT_OK
            except Exception as exc:  # noqa: BLE001 - never unwind across ABI
                self.set_error(VBT_ERR, f"register_op failed: {exc}")
                return VBT_ERR

        def tensor_ndim(h):
            t_ = self.tensors.get(h)
            return -1 if t_ is None else t_.ndim

        def tensor_sizes(h, out, cap):
            t_ = self.tensors.get(h)
            if t_ is None:
                return VBT_ERR_INVALID_HANDLE
            if cap < t_.ndim:
                return VBT_ERR_BAD_ARGS
            for i, s in enumerate(t_.sizes):
                out[i] = s
            return VBT_OK

        def tensor_strides(h, out, cap):
            t_ = self.tensors.get(h)
            if t_ is None:
                return VBT_ERR_INVALID_HANDLE
            if cap < t_.ndim:
                return VBT_ERR_BAD_ARGS
            for i, s in enumerate(t_.strides):
                out[i] = s
            return VBT_OK

        def tensor_dtype_code(h, out):
            t_ = self.tensors.get(h)
            if t_ is None:
                return VBT_ERR_INVALID_HANDLE
            code, bits = _DTYPE_CODES[t_.dtype]
            out.contents.code = code
            out.contents.bits = bits
            out.contents.lanes = 1
            return VBT_OK

        def tensor_device(h, type_code, dev_id):
            t_ = self.tensors.get(h)
            if t_ is None:
                return VBT_ERR_INVALID_HANDLE
            type_code.contents.value = 1 if t_.device.is_host else 2
            dev_id.contents.value = 0 if t_.device.is_host else t_.device.index
            return VBT_OK

        def tensor_data(h):
            t_ = self.tensors.get(h)
            if t_ is None:
                return None
            base = t_.storage.typed(t_.dtype.np)
            return base.ctypes.data + t_.offset_elems * t_.dtype.np.itemsize

        def iter_build(operands, n, flags, out):
            try:
                tensors = []
                for i in range(n):
                    t_ = self.tensors.get(operands[i])
                    if t_ is None:
                        return VBT_ERR_INVALID_HANDLE
                    tensors.append(t_)
                specs = []
                for i, t_ in enumerate(tensors):
                    is_out = bool(flags & ITER_FIRST_IS_OUTPUT) and i == 0
                    specs.append(OperandSpec(
                        t_, is_output=is_out,
                        allow_inplace_alias=bool(flags & ITER_ALLOW_INPLACE_ALIAS)))
                plan = build_iter(specs)
                out.contents.value = self.iters.put(_IterState(plan, tensors))
                return VBT_OK
            except OverlapError as exc:
                self.set_error(VBT_ERR_OVERLAP, str(exc))
                return VBT_ERR_OVERLAP
            except Exception as exc:  # noqa: BLE001
                self.set_error(VBT_ERR_BAD_ARGS, str(exc))
                return VBT_ERR_BAD_ARGS

        def iter_common_shape(h, out, cap):
            st = self.iters.get(h)
            if st is None:
                return VBT_ERR_INVALID_HANDLE
            shape = st.plan.common_shape
            if cap < len(shape):
                return VBT_ERR_BAD_ARGS
            for i, s in enumerate(shape):
                out[i] = s
            return len(shape)

        def iter_for_each(h, fn, ctx):
            st = self.iters.get(h)
            if st is None:
                return VBT_ERR_INVALID_HANDLE
            try:
                nops = len(st.plan.operands)
                bases = []
                for t_ in st.plan.operands:
                    arr = t_.storage.typed(t_.dtype.np)
                    bases.append((arr.ctypes.data, arr.itemsize))
                ptrs = (c_void_p * nops)()

                def body(offsets):
                    for k in range(nops):
                        base, itemsize = bases[k]
                        ptrs[k] = base + offsets[k] * itemsize
                    fn(ptrs, nops, ctx)

                for_each(st.plan, body)
                return VBT_OK
            except Exception as exc:  # noqa: BLE001
                self.set_error(VBT_ERR, f"iter_for_each failed: {exc}")
                return VBT_ERR

        def iter_destroy(h):
            self.iters.drop(h)

        def alloc(device_index, nbytes, stream):
            try:
                if nbytes <= 0:
                    return None
                if device_index < 0:
                    buf = np.zeros(int(nbytes), dtype=np.uint8)
                    self._alloc_live[buf.ctypes.data] = buf
                    return buf.ctypes.data
                rt = get_runtime()
                allocator = rt.allocator(device_index)
                if rt.device(device_index).capture_pool_of(
                        rt.device(device_index).stream(stream)) is not None:
                    self.set_error(VBT_ERR, "plugins cannot allocate from "
                                            "graph pools")
                    return None
                block = allocator.allocate(int(nbytes), int(stream))
                addr = block.segment.buffer.ctypes.data + block.offset
                self._alloc_live[addr] = (allocator, block)
                return addr
            except Exception as exc:  # noqa: BLE001
                self.set_error(VBT_ERR, f"alloc failed: {exc}")
                return None

        def dealloc(ptr):
            if ptr is None:
                return
            live = self._alloc_live.pop(int(ptr), None)
            if isinstance(live, tuple):
                allocator, block = live
                try:
                    allocator.free(block)
                except Exception:
                    pass

        def report_error(code, message):
            msg = message.decode("utf-8", "replace") if message else ""
            self.set_error(int(code), msg)

        def call_num_args(h):
            ctx = self.calls.get(h)
            return -1 if ctx is None else len(ctx.args)

        def call_arg_tensor(h, index):
            ctx = self.calls.get(h)
            if ctx is None or not (0 <= index < len(ctx.args)):
                return None
            a = ctx.args[index]
            if not isinstance(a, Tensor):
                return None
            handle = self.tensors.put(a)
            ctx.handles.append(handle)
            return handle

        def call_arg_double(h, index, out):
            ctx = self.calls.get(h)
            if ctx is None or not (0 <= index < len(ctx.args)):
                return VBT_ERR_BAD_ARGS
            a = ctx.args[index]
            if isinstance(a, Tensor) or isinstance(a, (list, tuple, str)):
                return VBT_ERR_BAD_ARGS
            out.contents.value = float(a)
            return VBT_OK

        def call_arg_int(h, index, out):
            ctx = self.calls.get(h)
            if ctx is None or not (0 <= index < len(ctx.args)):
                return VBT_ERR_BAD_ARGS
            a = ctx.args[index]
            if isinstance(a, Tensor) or isinstance(a, (list, tuple, str)):
                return VBT_ERR_BAD_ARGS
            out.contents.value = int(a)
            return VBT_OK

        def call_new_output(h, out_index, sizes, ndim, dtype, dev_type, dev_id):
            try:
                ctx = self.calls.get(h)
                if ctx is None or not (0 <= out_index < len(ctx.outputs)):
                    return None
                dt = _CODE_DTYPES.get((dtype.code, dtype.bits))
                if dt is None:
                    self.set_error(VBT_ERR_BAD_ARGS,
                                   f"unknown dtype code {dtype.code}/{dtype.bits}")
                    return None
                device = HOST if dev_type == 1 else virt(dev_id)
                t_ = make_tensor([sizes[i] for i in range(ndim)], dt, device)
                ctx.outputs[out_index] = t_
                handle = self.tensors.put(t_)
                ctx.handles.append(handle)
                return handle
            except Exception as exc:  # noqa: BLE001
                self.set_error(VBT_ERR, f"call_new_output failed: {exc}")
                return None

        def call_set_output(h, out_index, th):
            ctx = self.calls.get(h)
            t_ = self.tensors.get(th)
            if ctx is None or t_ is None \
                    or not (0 <= out_index < len(ctx.outputs)):
                return VBT_ERR_INVALID_HANDLE
            ctx.outputs[out_index] = t_
            return VBT_OK

        impls = {
            "register_op": register_op, "tensor_ndim": tensor_ndim,
            "tensor_sizes": tensor_sizes, "tensor_strides": tensor_strides,
            "tensor_dtype_code": tensor_dtype_code,
            "tensor_device": tensor_device, "tensor_data": tensor_data,
            "iter_build": iter_build, "iter_common_shape": iter_common_shape,
            "iter_for_each": iter_for_each, "iter_destroy": iter_destroy,
            "alloc": alloc, "dealloc": dealloc, "report_error": report_error,
            "call_num_args": call_num_args, "call_arg_tensor": call_arg_tensor,
            "call_arg_double": call_arg_double, "call_arg_int": call_arg_int,
            "call_new_output": call_new_output,
            "call_set_output": call_set_output,
        }
        for name, fn_t in _API_SLOTS:
            setattr(t, name, self._wrap(fn_t, impls[name]))
        return t

    # -- plugin kernels ------------------------------------------------------------

    def _make_kernel(self, qual: str, schema: OpSchemaLite, fn, user_data):
        fn_callable = ctypes.cast(fn, _KERNEL_FN)
        user = user_data

        def kernel(args):
            ctx = _CallCtx(args, schema)
            handle = self.calls.put(ctx)
            try:
                rc = fn_callable(handle, user)
                if rc != VBT_OK:
                    err = self.take_error()
                    detail = f": {err[1]}" if err else ""
                    raise VbtError(f"{qual}: plugin kernel failed "
                                   f"(status {rc}){detail}")
                for i, out in enumerate(ctx.outputs):
                    if out is None:
                        raise VbtError(f"{qual}: plugin kernel left output "
                                       f"{i} unset")
                return list(ctx.outputs)
            finally:
                for th in ctx.handles:
                    self.tensors.drop(th)
                self.calls.drop(handle)

        return kernel

    # -- loading ------------------------------------------------------------------

    def abi_negotiate(self, plugin_major: int, plugin_minor: int):
        if plugin_major != ABI_MAJOR:
            return ("reject",
                    f"abi major mismatch: host {ABI_MAJOR}, plugin {plugin_major}")
        return ("accept", min(ABI_MINOR, plugin_minor))

    def load_plugin(self, path) -> PluginManifest:
        path = str(path)
        if not Path(path).exists():
            raise PluginError(f"plugin file not found: {path}")
        with self._load_lock:
            try:
                lib = ctypes.CDLL(path)
            except OSError as exc:
                raise PluginError(f"cannot load {path}: {exc}") from None
            try:
                get_abi = lib.vbt_plugin_get_abi
                init = lib.vbt_plugin_init
            except AttributeError as exc:
                raise PluginError(
                    f"{path}: missing required symbol ({exc})") from None
            get_abi.argtypes = [POINTER(c_uint32), POINTER(c_uint32)]
            get_abi.restype = None
            init.argtypes = [POINTER(VbtHostApi), c_uint32, c_uint32]
            init.restype = c_int32

            major, minor = c_uint32(0), c_uint32(0)
            get_abi(byref(major), byref(minor))
            verdict = self.abi_negotiate(major.value, minor.value)
            if verdict[0] == "reject":
                raise PluginError(f"{path}: {verdict[1]}")
            minor_used = verdict[1]

            self._registering = []
            self.take_error()
            try:
                rc = init(byref(self.table), ABI_MAJOR, minor_used)
            finally:
                registered, self._registering = self._registering, None
            if rc != 0:
                for name in registered:
                    registry.unregister(name)
                err = self.take_error()
                detail = f": {err[1]}" if err else ""
                raise PluginError(
                    f"{path}: vbt_plugin_init returned {rc}{detail} "
                    f"(registry rolled back)")
            manifest = PluginManifest(path=path, abi_major=major.value,
                                      abi_minor=minor.value,
                                      minor_used=minor_used,
                                      registered_ops=registered)
            self.manifests.append(manifest)
            return manifest


_host: _Host | None = None
_host_lock = threading.Lock()


def get_host() -> _Host:
    global _host
    if _host is None:
        with _host_lock:
            if _host is None:
                _host = _Host()
    return _host


def load_plugin(path) -> PluginManifest:
    return get_host().load_plugin(path)


def abi_negotiate(plugin_major: int, plugin_minor: int):
    return get_host().abi_negotiate(plugin_major, plugin_minor)


def header_path() -> Path:
    return Path(__file__).parent / "include" / "vbt_plugin.h"


def api_slot_names() -> list[str]:
    """Ordered API table slot names (the append-only layout contract)."""
    return ["abi_major", "abi_minor"] + [name for name, _ in _API_SLOTS]
