"""Header-plus-payload container shared by the codebook, model and registry files.

Layout::

    <one line of UTF-8 JSON header>\\n<payload bytes>

The header carries a ``"arrays"`` list; each entry gives ``name``, ``dtype``
(always little-endian), ``shape`` and ``offset``/``nbytes`` in bytes relative to
the first payload byte (the byte right after the newline).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A serialized file is malformed, truncated or of the wrong kind."""


def dumps(header: dict, arrays: dict[str, np.ndarray], dtype: str = "<f8") -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=dtype)
        raw = data.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(data.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["arrays"] = entries
    head = json.dumps(full, sort_keys=False, separators=(",", ":")).encode("utf-8")
    return head + b"\n" + b"".join(chunks)


def loads(blob: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b"{"):
        raise FormatError("missing JSON header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("version") != 1:
        raise FormatError(f"unsupported version {header.get('version')!r}")
    payload = blob[nl + 1:]
    arrays = {}
    end = 0
    for e in header.get("arrays", []):
        lo, n = int(e["offset"]), int(e["nbytes"])
        if lo + n > len(payload):
            raise FormatError(f"truncated payload for array {e['name']!r}")
        arr = np.frombuffer(payload[lo:lo + n], dtype=e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if arr.size != count:
            raise FormatError(f"array {e['name']!r} size does not match its shape")
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        end = max(end, lo + n)
    if end != len(payload):
        raise FormatError("payload length inconsistent with header")
    return header, arrays


def write(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, arrays))


def read(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
