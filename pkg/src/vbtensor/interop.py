"""Zero-copy exchange descriptors and the safetensors file format.

The exchange descriptor mirrors the DLPack convention: device type codes
(HOST=1, VIRT=2), dtype codes (int=0, uint=1, float=2, bool=6) with bit
widths, element-unit strides, and an exactly-once deleter that fires when the
last importing tensor drops. Safetensors files are bit-exact: 8-byte
little-endian header length, compact JSON header with lexicographic keys,
then the contiguous little-endian payload.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dtypes import Device, DType, HOST, dtype_from_tag, virt
from .errors import DeviceError, DTypeError, FormatError, ShapeError, VbtError
from .storage import Storage, Tensor
from . import _exec

DEVICE_HOST = 1
DEVICE_VIRT = 2

_DTYPE_TO_CODE = {
    DType.F32: (2, 32),
    DType.F64: (2, 64),
    DType.I64: (0, 64),
    DType.I32: (0, 32),
    DType.BOOL: (6, 8),
}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}

MAX_HEADER_BYTES = 100 << 20


@dataclass
class ExchangeDescriptor:
    data: np.ndarray            # flat byte buffer backing the tensor
    byte_offset: int
    device_type: int
    device_id: int
    ndim: int
    dtype_code: int
    dtype_bits: int
    shape: tuple[int, ...]
    strides: tuple[int, ...]    # element units
    deleter: Callable[[], None]
    lanes: int = 1
    _consumed: bool = field(default=False, repr=False)
    _deleted: bool = field(default=False, repr=False)
    _origin: Optional[Storage] = field(default=None, repr=False)

    def invoke_deleter(self) -> None:
        if self._deleted:
            return
        self._deleted = True
        self.deleter()

    def __del__(self):
        # Unconsumed descriptors release on drop; consumed ones hand the
        # deleter to the importing storage family.
        if not self._consumed:
            try:
                self.invoke_deleter()
            except Exception:
                pass


def export_descriptor(t: Tensor) -> ExchangeDescriptor:
    if t.dtype not in _DTYPE_TO_CODE:
        raise DTypeError(f"unsupported dtype {t.dtype.tag} for exchange")
    code, bits = _DTYPE_TO_CODE[t.dtype]
    pinned = [t.storage]  # keeps the storage refcount up until the deleter runs

    def deleter():
        pinned.clear()

    return ExchangeDescriptor(
        data=t.storage.buffer,
        byte_offset=t.offset_elems * t.dtype.size_bytes,
        device_type=DEVICE_HOST if t.device.is_host else DEVICE_VIRT,
        device_id=0 if t.device.is_host else t.device.index,
        ndim=t.ndim,
        dtype_code=code,
        dtype_bits=bits,
        shape=t.sizes,
        strides=t.strides,
        deleter=deleter,
        _origin=t.storage,
    )


def import_descriptor(d: ExchangeDescriptor) -> Tensor:
    if d._consumed:
        raise VbtError("exchange descriptor already imported")
    if d.device_type == DEVICE_HOST:
        device = HOST
    elif d.device_type == DEVICE_VIRT:
        device = virt(d.device_id)
    else:
        raise DeviceError(f"unknown exchange device type_code {d.device_type}")
    dtype = _CODE_TO_DTYPE.get((d.dtype_code, d.dtype_bits))
    if dtype is None or d.lanes != 1:
        raise DTypeError(
            f"unknown exchange dtype (code={d.dtype_code}, bits={d.dtype_bits}, "
            f"lanes={d.lanes})")
    if any(s < 0 for s in d.strides):
        raise ShapeError("negative strides are not importable")
    if d.byte_offset % dtype.size_bytes:
        raise FormatError(
            f"byte offset {d.byte_offset} not aligned to {dtype.tag}")

    d._consumed = True
    storage = Storage(d.data, device, "system", free_cb=d.invoke_deleter)
    if d._origin is not None:
        storage.block = d._origin.block
        storage.segment_id = d._origin.segment_id
        storage.last_stream = d._origin.last_stream
    # Fresh version counter: the imported family tracks its own mutations.
    return Tensor(storage, d.byte_offset // dtype.size_bytes,
                  d.shape, d.strides, dtype)


# -- safetensors ---------------------------------------------------------------


def _header_bytes(tensors: dict[str, Tensor], metadata: Optional[dict]) -> tuple[bytes, list[tuple[str, Tensor, int, int]]]:
    entries = {}
    layout = []
    offset = 0
    for name in sorted(tensors.keys()):
        t = tensors[name]
        n = t.numel() * t.dtype.size_bytes
        entries[name] = {
            "dtype": t.dtype.tag,
            "shape": list(t.sizes),
            "data_offsets": [offset, offset + n],
        }
        layout.append((name, t, offset, offset + n))
        offset += n
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    header.update(entries)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("utf-8")
    return blob, layout


def save_safetensors(path, tensors: dict[str, Tensor],
                     metadata: Optional[dict] = None) -> None:
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    for name, t in tensors.items():
        if "__metadata__" == name:
            raise FormatError("'__metadata__' is a reserved name")
        if not t.device.is_host:
            raise DeviceError(
                f"save_safetensors takes HOST tensors; {name!r} is on "
                f"{t.device!r} (copy to host first)")
    blob, layout = _header_bytes(tensors, metadata)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t, _, _ in layout:
            arr = np.ascontiguousarray(t.ndview())
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_safetensors(path) -> tuple[dict[str, Tensor], dict[str, str]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError("file too short for safetensors header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > MAX_HEADER_BYTES:
        raise FormatError(f"header length {header_len} exceeds the "
                          f"{MAX_HEADER_BYTES}-byte guard")
    if len(raw) < 8 + header_len:
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed JSON header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    payload = raw[8 + header_len:]

    metadata = {}
    entries = []
    for name, info in header.items():
        if name == "__metadata__":
            if not isinstance(info, dict):
                raise FormatError("__metadata__ must be a string map")
            metadata = {str(k): str(v) for k, v in info.items()}
            continue
        try:
            dtype = dtype_from_tag(info["dtype"])
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError, DTypeError) as exc:
            raise FormatError(f"bad header entry for {name!r}: {exc}") from None
        expect = dtype.size_bytes * int(np.prod(shape, dtype=np.int64))
        if end - begin != expect:
            raise FormatError(
                f"{name!r}: data_offsets span {end - begin} bytes, "
                f"shape/dtype require {expect}")
        if begin < 0 or end > len(payload):
            raise FormatError(f"{name!r}: data_offsets outside payload")
        entries.append((begin, end, name, dtype, shape))

    entries.sort(key=lambda e: e[0])
    cursor = 0
    for begin, end, name, _, _ in entries:
        if begin != cursor:
            kind = "overlapping" if begin < cursor else "gapped"
            raise FormatError(f"{kind} data_offsets at {name!r}")
        cursor = end
    if cursor != len(payload):
        raise FormatError(
            f"payload length {len(payload)} does not match final offset {cursor}")

    out: dict[str, Tensor] = {}
    for begin, end, name, dtype, shape in entries:
        arr = np.frombuffer(payload[begin:end],
                            dtype=np.dtype(dtype.np).newbyteorder("<"))
        arr = arr.astype(dtype.np, copy=False).reshape(shape)
        out[name] = _exec.from_numpy(arr, dtype, HOST)
    return out, metadata
