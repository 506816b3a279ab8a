"""Dtype and device descriptors shared by every layer of the runtime."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DeviceError, DTypeError


class DType(Enum):
    F32 = ("F32", 4, np.float32)
    F64 = ("F64", 8, np.float64)
    I64 = ("I64", 8, np.int64)
    I32 = ("I32", 4, np.int32)
    BOOL = ("BOOL", 1, np.bool_)

    def __init__(self, tag: str, size_bytes: int, np_dtype):
        self.tag = tag
        self.size_bytes = size_bytes
        self.np = np.dtype(np_dtype)

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @property
    def is_int(self) -> bool:
        return self in (DType.I64, DType.I32)

    def __repr__(self) -> str:
        return f"DType.{self.tag}"


_BY_TAG = {d.tag: d for d in DType}
_BY_NP = {d.np: d for d in DType}


def dtype_from_tag(tag: str) -> DType:
    try:
        return _BY_TAG[tag]
    except KeyError:
        raise DTypeError(f"unknown dtype tag {tag!r}") from None


def dtype_from_numpy(np_dtype) -> DType:
    try:
        return _BY_NP[np.dtype(np_dtype)]
    except KeyError:
        raise DTypeError(f"unsupported numpy dtype {np_dtype!r}") from None


class DeviceKind(Enum):
    HOST = "host"
    VIRT = "virt"


@dataclass(frozen=True)
class Device:
    kind: DeviceKind
    index: int = 0

    def __post_init__(self):
        if self.kind is DeviceKind.HOST and self.index != 0:
            raise DeviceError("host device has no index")
        if self.index < 0:
            raise DeviceError("device index must be non-negative")

    @property
    def is_host(self) -> bool:
        return self.kind is DeviceKind.HOST

    @property
    def is_virt(self) -> bool:
        return self.kind is DeviceKind.VIRT

    def __repr__(self) -> str:
        return "host" if self.is_host else f"virt:{self.index}"


HOST = Device(DeviceKind.HOST)


def virt(index: int) -> Device:
    return Device(DeviceKind.VIRT, index)


def parse_device(spec) -> Device:
    """Parse 'host', 'virt:N', or pass a Device through."""
    if isinstance(spec, Device):
        return spec
    if isinstance(spec, str):
        s = spec.strip().lower()
        if s in ("host", "cpu"):
            return HOST
        if s.startswith("virt"):
            _, _, idx = s.partition(":")
            return virt(int(idx) if idx else 0)
    raise DeviceError(f"cannot parse device {spec!r}")
