"""Dataset ingestion: IDX image/label files and grouped CSV sequences.

Images become sequences with one pixel row per timestep.
"""

from __future__ import annotations

import csv
import gzip
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .train import SequenceDataset

__all__ = ["DatasetParseError", "parse_idx", "write_idx", "load_idx", "load_csv_sequences",
           "write_csv_sequences", "load_dataset"]

# IDX type codes -> big-endian numpy dtypes
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("=").str: k for k, v in _IDX_TYPES.items()}


class DatasetParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        where = "" if offset is None else f" at byte offset {offset}"
        src = "" if path is None else f"{path}: "
        super().__init__(f"{src}{message}{where}")
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX buffer (``00 00 <type> <ndim>`` magic, big-endian dims and data)."""
    if len(data) < 4:
        raise DatasetParseError("truncated IDX header", len(data))
    if data[0] != 0 or data[1] != 0:
        raise DatasetParseError("bad IDX magic: first two bytes must be zero", 0)
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise DatasetParseError(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise DatasetParseError("IDX tensor must have at least one dimension", 3)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetParseError("truncated IDX dimension list", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < expected:
        raise DatasetParseError(f"truncated IDX payload: expected {expected} bytes, got {len(data)}",
                                len(data))
    if len(data) > expected:
        raise DatasetParseError("trailing bytes after IDX payload", expected)
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def _parse_idx_file(path) -> np.ndarray:
    try:
        return parse_idx(_read_bytes(path))
    except DatasetParseError as exc:
        err = DatasetParseError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.newbyteorder("=").str
    if key not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path) -> SequenceDataset:
    """Images ``(N, rows, cols)`` -> ``N`` sequences of ``rows`` steps with ``cols`` features."""
    images = _parse_idx_file(images_path)
    labels = _parse_idx_file(labels_path)
    if images.ndim != 3:
        raise DatasetParseError(f"expected a 3-D image tensor, got {images.ndim} dimensions", 3)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DatasetParseError(f"{labels.shape[0]} labels for {images.shape[0]} images", 4)
    xs = images.astype(np.float64)
    if images.dtype == np.dtype(">u1"):
        xs /= 255.0
    return SequenceDataset(xs, labels.astype(np.int64))


def load_csv_sequences(path, label_column: str = "label", sequence_column: str = "sequence_id",
                       step_column: str | None = "step") -> SequenceDataset:
    """Rows sharing ``sequence_column`` form one sequence, in file order (or by ``step``).

    Every other column is a feature.  All sequences must have equal length and
    a single label.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("empty CSV file", 0, path) from None
        if label_column not in header or sequence_column not in header:
            raise DatasetParseError(
                f"header must contain {label_column!r} and {sequence_column!r}", 0, path)
        li, si = header.index(label_column), header.index(sequence_column)
        ti = header.index(step_column) if step_column and step_column in header else None
        fi = [i for i in range(len(header)) if i not in (li, si, ti)]
        if not fi:
            raise DatasetParseError("no feature columns", 0, path)
        groups: OrderedDict[str, list] = OrderedDict()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}",
                                        None, path)
            try:
                feats = [float(row[i]) for i in fi]
                label = int(row[li])
                step = float(row[ti]) if ti is not None else None
            except ValueError as exc:
                raise DatasetParseError(f"line {lineno}: {exc}", None, path) from None
            groups.setdefault(row[si], []).append((step, label, feats))
    xs, labels = [], []
    for sid, rows in groups.items():
        if ti is not None:
            rows = sorted(rows, key=lambda r: r[0])
        lab = {r[1] for r in rows}
        if len(lab) != 1:
            raise DatasetParseError(f"sequence {sid!r} has several labels {sorted(lab)}", None, path)
        xs.append([r[2] for r in rows])
        labels.append(lab.pop())
    lengths = {len(x) for x in xs}
    if len(lengths) > 1:
        raise DatasetParseError(f"sequences have unequal lengths {sorted(lengths)}", None, path)
    if not xs:
        return SequenceDataset(np.zeros((0, 0, len(fi))), np.zeros(0, dtype=np.int64))
    return SequenceDataset(np.array(xs), np.array(labels))


def write_csv_sequences(path, dataset: SequenceDataset) -> None:
    """Inverse of :func:`load_csv_sequences`; floats are written with ``repr`` precision."""
    n = dataset.n_features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "step", "label"] + [f"f{i}" for i in range(n)])
        for s, (x, y) in enumerate(zip(dataset.xs, dataset.labels)):
            for t, row in enumerate(x):
                w.writerow([s, t, int(y)] + [repr(float(v)) for v in row])


def load_dataset(path, format: str = "csv", labels_path=None, **kwargs) -> SequenceDataset:
    """Load ``csv`` sequences or ``idx`` images (``labels_path`` required for IDX)."""
    if format == "csv":
        return load_csv_sequences(path, **kwargs)
    if format == "idx":
        if labels_path is None:
            raise ValueError("IDX datasets need labels_path")
        return load_idx(path, labels_path)
    raise ValueError(f"unknown dataset format {format!r}")
