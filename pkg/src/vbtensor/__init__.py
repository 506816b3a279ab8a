"""Desk-scale eager tensor runtime.

Strided tensors over reference-counted storage, a schema-lite dispatcher,
reverse-mode autograd, a deterministic virtual async device with streams,
events and graphs, a stream-ordered caching allocator, exchange-descriptor
and safetensors interop, a versioned C plugin ABI, and a ring-allreduce
fabric over virtual peer devices.
"""

from . import overlay
from .dtypes import DType, Device, HOST, virt
from .errors import VbtError
from .storage import (Storage, Tensor, VersionCounter, as_strided,
                      bump_version, is_contiguous, make_tensor)

__version__ = "0.1.0"

__all__ = [
    "overlay", "DType", "Device", "HOST", "virt", "VbtError",
    "Storage", "Tensor", "VersionCounter", "as_strided", "bump_version",
    "is_contiguous", "make_tensor", "__version__",
]
