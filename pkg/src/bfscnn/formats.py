"""On-disk formats for distributed spectra and extracted BFS traces.

BGS binary layout (little-endian)::

    b"BGS1"  u32 n_points  u32 n_traces  f64 f_min  f64 f_max
    f64[n_points * n_traces]        gains, frequency-major (row i = frequency i)
    [ b"TRUE"  f64[n_traces] ]      optional normalized true BFS

A BFS binary block is ``b"BFS1" u32 n_traces f64[n_traces]`` (normalized).
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .spectra import BfsTrace, DistributedBgs, SweepRange

PathLike = Union[str, Path]

BGS_MAGIC = b"BGS1"
TRUTH_MAGIC = b"TRUE"
BFS_MAGIC = b"BFS1"
_HEADER = struct.Struct("<4sIIdd")


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_bgs(data: DistributedBgs) -> bytes:
    sweep = data.sweep
    parts = [
        _HEADER.pack(BGS_MAGIC, sweep.n_points, data.n_traces, float(sweep.f_min), float(sweep.f_max)),
        np.ascontiguousarray(data.matrix, dtype="<f8").tobytes(),
    ]
    if data.truth is not None:
        parts += [TRUTH_MAGIC, np.ascontiguousarray(data.truth, dtype="<f8").tobytes()]
    return b"".join(parts)


def decode_bgs(buf: bytes) -> DistributedBgs:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, n_points, n_traces, f_min, f_max = _HEADER.unpack_from(buf, 0)
    if magic != BGS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if n_traces < 1 or n_points < 3:
        raise FormatError(f"invalid dimensions {n_points} x {n_traces}", 4)
    offset = _HEADER.size
    n_bytes = 8 * n_points * n_traces
    if len(buf) < offset + n_bytes:
        raise FormatError(f"gain block needs {n_bytes} bytes, file has {len(buf) - offset}", len(buf))
    try:
        sweep = SweepRange(f_min, f_max, n_points)
    except ValueError as exc:
        raise FormatError(str(exc), 12) from exc
    matrix = np.frombuffer(buf, dtype="<f8", count=n_points * n_traces, offset=offset)
    matrix = matrix.reshape(n_points, n_traces).astype(np.float64)
    offset += n_bytes
    truth = None
    if offset < len(buf):
        if buf[offset:offset + 4] != TRUTH_MAGIC:
            raise FormatError("unexpected trailing data", offset)
        offset += 4
        if len(buf) != offset + 8 * n_traces:
            raise FormatError("truth block length mismatch", offset)
        truth = np.frombuffer(buf, dtype="<f8", count=n_traces, offset=offset).astype(np.float64)
    return DistributedBgs(sweep, matrix, truth)


def write_bgs(path: PathLike, data: DistributedBgs) -> None:
    Path(path).write_bytes(encode_bgs(data))


def read_bgs(path: PathLike) -> DistributedBgs:
    return decode_bgs(Path(path).read_bytes())


def encode_bfs_block(trace: BfsTrace) -> bytes:
    return BFS_MAGIC + struct.pack("<I", len(trace)) + np.asarray(trace.values, dtype="<f8").tobytes()


def decode_bfs_block(buf: bytes) -> np.ndarray:
    if buf[:4] != BFS_MAGIC:
        raise FormatError("bad BFS block magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated BFS block", len(buf))
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 8 * n:
        raise FormatError("BFS block length mismatch", 8)
    return np.frombuffer(buf, dtype="<f8", count=n, offset=8).astype(np.float64)


def write_bgs_csv(path: PathLike, data: DistributedBgs) -> None:
    """One column per trace, header of position indices, one row per frequency sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(data.n_traces))
        for row in data.matrix:
            w.writerow([repr(float(x)) for x in row])


def read_bgs_csv(path: PathLike, sweep: SweepRange | None = None) -> DistributedBgs:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 4:
        raise FormatError("CSV needs a header and at least 3 frequency rows")
    matrix = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
    if sweep is None:
        sweep = SweepRange(0.0, 1.0, matrix.shape[0])
    return DistributedBgs(sweep, matrix)


BFS_CSV_FIELDS = ("position", "bfs", "converged", "iterations", "sse")


def bfs_csv_text(trace: BfsTrace) -> str:
    """Schema shared by the fitting and inference paths; missing diagnostics are blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BFS_CSV_FIELDS)
    n = len(trace)
    for i in range(n):
        conv = "" if trace.converged is None else int(bool(trace.converged[i]))
        iters = "" if trace.iterations is None else int(trace.iterations[i])
        sse = "" if trace.sse is None else repr(float(trace.sse[i]))
        w.writerow([i, repr(float(trace.values[i])), conv, iters, sse])
    return buf.getvalue()


def write_bfs_csv(path: PathLike, trace: BfsTrace) -> None:
    Path(path).write_text(bfs_csv_text(trace))


def read_bfs_csv(path: PathLike) -> BfsTrace:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BFS_CSV_FIELDS:
            raise FormatError(f"unexpected BFS CSV header {reader.fieldnames}")
        rows = list(reader)
    values = np.array([float(r["bfs"]) for r in rows])
    conv = None
    if rows and rows[0]["converged"] != "":
        conv = np.array([r["converged"] == "1" for r in rows])
    return BfsTrace(values, converged=conv)
