"""Import-only API parity gate.

Checks a scoped manifest of dotted symbol paths for presence in the overlay
namespace. Presence-only by design: a regression guard against "it imports
but it is broken" drift, not a behavioral compatibility claim.
"""

from __future__ import annotations

import importlib
import json
from pathlib import Path

from .errors import FormatError

DEFAULT_MANIFEST = Path(__file__).parent / "data" / "parity_manifest.json"


def _resolve(path: str) -> bool:
    parts = path.split(".")
    for cut in range(len(parts), 0, -1):
        module_name = ".".join(parts[:cut])
        try:
            obj = importlib.import_module(module_name)
        except ImportError:
            continue
        try:
            for attr in parts[cut:]:
                obj = getattr(obj, attr)
        except AttributeError:
            return False
        return True
    return False


def check_parity(manifest_path=None) -> dict:
    path = Path(manifest_path) if manifest_path else DEFAULT_MANIFEST
    try:
        symbols = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read parity manifest {path}: {exc}") from None
    if not isinstance(symbols, list) or not all(isinstance(s, str) for s in symbols):
        raise FormatError("parity manifest must be a JSON list of dotted paths")
    present, missing = [], []
    for sym in symbols:
        (present if _resolve(sym) else missing).append(sym)
    return {"checked": len(symbols), "present": present, "missing": missing,
            "ok": not missing}
