"""Model archive: a JSON manifest followed by raw little-endian float64 blocks.

Layout::

    b"KPRNNARC"  magic
    uint32 LE    format version
    uint32 LE    reserved (0)
    uint64 LE    manifest length in bytes, a multiple of 8
    manifest     canonical JSON, space padded
    blocks       '<f8' data, each block at manifest["blocks"][i]["offset"]
                 bytes past the end of the manifest

The manifest is written with sorted keys and compact separators so that
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .cells import Cell, CellSpec
from .operators import operator_from_state
from .train import SequenceClassifier

__all__ = ["ArchiveError", "FORMAT_VERSION", "archive_bytes", "save_archive", "load_archive",
           "parse_archive"]

MAGIC = b"KPRNNARC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQ")
_MANIFEST_KEYS = frozenset({"format_version", "spec", "bidirectional", "n_classes", "operators",
                            "blocks", "history", "metadata"})


class ArchiveError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _model_blocks(model: SequenceClassifier):
    metas, arrays = [], {}
    for prefix, cell in zip(("fwd", "bwd"), model.cells):
        meta, op_arrays = cell.op.state()
        metas.append(meta)
        arrays.update({f"{prefix}.op.{k}": v for k, v in op_arrays.items()})
        arrays.update({f"{prefix}.{k}": v for k, v in cell.params().items() if not k.startswith("op.")})
    arrays["head.W"] = model.W_out
    arrays["head.b"] = model.b_out
    return metas, arrays


def archive_bytes(model: SequenceClassifier, history=None, metadata: dict | None = None) -> bytes:
    metas, arrays = _model_blocks(model)
    blocks, payload, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset, "length": int(a.size)})
        payload.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.as_dict(),
        "bidirectional": model.bidirectional,
        "n_classes": model.n_classes,
        "operators": metas,
        "blocks": blocks,
        "history": list(history or []),
        "metadata": dict(metadata or {}),
    }
    text = _canonical_json(manifest)
    text += b" " * (-len(text) % 8)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(text)) + text + b"".join(payload)


def save_archive(path, model: SequenceClassifier, history=None, metadata: dict | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    data = archive_bytes(model, history, metadata)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_archive(data: bytes) -> tuple[SequenceClassifier, dict]:
    """Rebuild ``(model, manifest)`` from archive bytes."""
    if len(data) < _HEADER.size:
        raise ArchiveError("truncated archive header")
    magic, version, _, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveError("not a model archive (bad magic)")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive format version {version} (expected {FORMAT_VERSION})")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise ArchiveError("truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start])
    except ValueError as exc:
        raise ArchiveError(f"corrupt manifest: {exc}") from None
    missing = _MANIFEST_KEYS - set(manifest) if isinstance(manifest, dict) else _MANIFEST_KEYS
    if missing:
        raise ArchiveError(f"corrupt manifest: missing {sorted(missing)}")
    if manifest["format_version"] != version:
        raise ArchiveError("manifest and header disagree on the format version")
    arrays = {}
    for b in manifest["blocks"]:
        try:
            name, shape, offset, length = b["name"], b["shape"], int(b["offset"]), int(b["length"])
        except (KeyError, TypeError, ValueError):
            raise ArchiveError(f"corrupt manifest: bad block entry {b!r}") from None
        if math.prod(shape) != length:
            raise ArchiveError(f"block {name}: shape {shape} does not hold {length} values")
        lo = start + offset
        hi = lo + 8 * length
        if offset < 0 or hi > len(data):
            raise ArchiveError(f"block {name} runs past the end of the archive")
        arrays[name] = np.frombuffer(data[lo:hi], dtype="<f8").astype(np.float64).reshape(shape)
    try:
        spec = CellSpec(**manifest["spec"])
    except (TypeError, ValueError) as exc:
        raise ArchiveError(f"corrupt manifest: bad cell spec ({exc})") from None
    cells = []
    prefixes = ("fwd", "bwd") if manifest["bidirectional"] else ("fwd",)
    for prefix, meta in zip(prefixes, manifest["operators"]):
        op_arrays = {k[len(prefix) + 4:]: v for k, v in arrays.items() if k.startswith(f"{prefix}.op.")}
        try:
            op = operator_from_state(meta, op_arrays)
            cells.append(Cell(spec, op, arrays.get(f"{prefix}.bias"),
                              arrays.get(f"{prefix}.alpha"), arrays.get(f"{prefix}.beta")))
        except (KeyError, ValueError) as exc:
            raise ArchiveError(f"cannot rebuild cell {prefix!r}: {exc}") from None
    try:
        model = SequenceClassifier(cells, arrays["head.W"], arrays["head.b"])
    except (KeyError, ValueError) as exc:
        raise ArchiveError(f"cannot rebuild classifier head: {exc}") from None
    return model, manifest


def load_archive(path) -> tuple[SequenceClassifier, dict]:
    return parse_archive(Path(path).read_bytes())
