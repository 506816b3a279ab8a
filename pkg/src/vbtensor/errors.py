"""Exception taxonomy for the runtime.

Typed exceptions exist where callers (or tests) need to distinguish failure
modes; everything derives from VbtError so embedders can catch broadly.
"""

from __future__ import annotations


class VbtError(RuntimeError):
    """Base class for all runtime errors."""


class ShapeError(VbtError):
    """Shape or stride mismatch (broadcast failures, bad dims, bad views)."""


class DTypeError(VbtError):
    """Unsupported or mismatched dtypes."""


class DeviceError(VbtError):
    """Unknown device or device-policy violation."""


class OverlapError(VbtError):
    """Output partially overlaps an input, or aliasing not permitted."""


class DispatchError(VbtError):
    """Operator registry misuse: unknown op, duplicate, arity, missing kernel."""


class VersionMismatchError(VbtError):
    """A tensor saved for backward was mutated in place before use."""


class GateBusyError(VbtError):
    """A concurrent backward run was rejected by the global backward gate."""


class StreamError(VbtError):
    """Stream/event misuse (wait before record, unknown stream, deadlock)."""


class CaptureError(VbtError):
    """Graph capture/replay misuse."""


class OOMError(VbtError):
    """Allocation failed after the GC ladder.

    Carries the allocator stats snapshot and the cap that bound the request.
    """

    def __init__(self, message: str, *, stats: dict | None = None,
                 cap_bytes: int | None = None, requested_bytes: int | None = None):
        super().__init__(message)
        self.stats = stats or {}
        self.cap_bytes = cap_bytes
        self.requested_bytes = requested_bytes


class AllocatorError(VbtError):
    """Allocator misuse (double free, bad fraction, pool lifecycle)."""


class FormatError(VbtError):
    """Malformed serialized data (safetensors header/payload problems)."""


class PluginError(VbtError):
    """Plugin loading or ABI negotiation failure."""
