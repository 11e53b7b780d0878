"""Model checkpoint container: JSON manifest plus one raw float payload.

The manifest lists every parameter's name, shape, and byte offset into a
single little-endian payload file that sits next to it.  Loading is a
plain read, no pickling anywhere.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "ctbg-ckpt-1"

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(manifest_path, named_arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<manifest_path>`` (JSON) and its ``.bin`` payload sibling."""
    manifest_path = Path(manifest_path)
    payload_path = manifest_path.with_suffix(".bin")
    if not named_arrays:
        raise CheckpointError("nothing to save")
    dtypes = {np.asarray(a).dtype.name for a in named_arrays.values()}
    if len(dtypes) != 1 or next(iter(dtypes)) not in _DTYPE_TAGS:
        raise CheckpointError(f"parameters must share one float dtype, got {sorted(dtypes)}")
    dtype_name = next(iter(dtypes))
    tag = _DTYPE_TAGS[dtype_name]

    entries = []
    offset = 0
    chunks = []
    for name, arr in named_arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype=tag)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "version": FORMAT_VERSION,
        "dtype": dtype_name,
        "payload": payload_path.name,
        "params": entries,
    }
    if meta:
        manifest["meta"] = meta
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(manifest_path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a manifest + payload back into {name: array} and its meta dict."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    dtype_name = manifest.get("dtype")
    if dtype_name not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype_name!r}")
    tag = _DTYPE_TAGS[dtype_name]
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()

    out: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        lo = entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"payload truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype=tag).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(dtype_name)
    return out, manifest.get("meta", {})
