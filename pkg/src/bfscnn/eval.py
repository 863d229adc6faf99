"""Comparison harness: error metrics, parameter grids, uncertainty and resolution.

Every extractor maps a :class:`DistributedBgs` to a :class:`BfsTrace` in
normalized units, so the metrics never need to know which method produced a
trace.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .lcf import LmConfig, fit_distributed
from .spectra import BfsTrace, DistributedBgs, SweepRange, make_test_set, synth_columns

log = logging.getLogger(__name__)

# Seconds per 1000 spectra reported for the original system (GPU network, CPU fitting).
REFERENCE_TIMINGS = {"CNN": 0.129, "LCF": 0.814}


class EvalError(ValueError):
    pass


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, BfsTrace) else x, dtype=np.float64).ravel()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    rmse: float
    sd: float
    bias: float
    n: int
    n_excluded: int


def _paired(pred, truth):
    p, t = _values(pred), _values(truth)
    if t.size == 1 and p.size > 1:
        t = np.full_like(p, t[0])
    if p.shape != t.shape:
        raise EvalError(f"length mismatch: {p.size} predictions vs {t.size} truth values")
    ok = np.isfinite(p) & np.isfinite(t)
    return p[ok], t[ok], int(p.size - ok.sum())


def rmse(pred, truth) -> float:
    """Root mean squared error; pairs with a non-finite entry are skipped."""
    p, t, dropped = _paired(pred, truth)
    if dropped:
        log.info("rmse: excluded %d non-finite pairs", dropped)
    if p.size == 0:
        return float("nan")
    e = p - t
    return float(np.sqrt(np.mean(e * e)))


def sd(values) -> float:
    """Population standard deviation (1/N) of the finite entries."""
    v = _values(values)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan")
    # shifting by a sample first makes a constant vector give exactly zero
    d = v - v[0]
    d -= d.mean()
    return float(np.sqrt(np.mean(d * d)))


def error_stats(pred, truth) -> ErrorStats:
    """RMSE, error SD and bias with the exclusion count.

    The SD is that of the errors, so ``rmse**2 == sd**2 + bias**2``; for a
    constant truth it equals the SD of the predictions themselves.
    """
    p, t, dropped = _paired(pred, truth)
    if p.size == 0:
        return ErrorStats(float("nan"), float("nan"), float("nan"), 0, dropped)
    e = p - t
    return ErrorStats(float(np.sqrt(np.mean(e * e))), sd(e), float(e.mean()), int(p.size), dropped)


# ---------------------------------------------------------------------------
# extractors
# ---------------------------------------------------------------------------

@dataclass
class Extractor:
    """Named BFS extraction strategy."""

    name: str
    fn: Callable[[DistributedBgs], BfsTrace] = field(repr=False)

    def extract(self, data: DistributedBgs) -> BfsTrace:
        return self.fn(data)

    @classmethod
    def lcf(cls, config: LmConfig = LmConfig(), threads: int = 1) -> "Extractor":
        return cls("LCF", lambda d: fit_distributed(d, config, threads))

    @classmethod
    def cnn(cls, model, precision: str = "float32", chunk: int = 2048) -> "Extractor":
        """``model`` is a checkpoint, a network or an inference plan."""
        from .model import InferencePlan, ModelCheckpoint, infer_distributed, network_from_checkpoint
        if not isinstance(model, InferencePlan):
            net = network_from_checkpoint(model) if isinstance(model, ModelCheckpoint) else model
            model = InferencePlan(net, np.dtype(precision))
        plan = model
        return cls("CNN", lambda d: infer_distributed(plan, d, chunk))


# ---------------------------------------------------------------------------
# parameter grids
# ---------------------------------------------------------------------------

def _axis(lo, hi, step):
    return np.round(np.arange(lo, hi + step / 2, step), 10)


@dataclass(frozen=True)
class GridSpec:
    snr: tuple
    bfs: tuple
    sw: tuple

    @classmethod
    def table1(cls) -> "GridSpec":
        """SNR 5..19 dB step 2, BFS 10..90 % step 5, SW 10..50 % step 5."""
        return cls(tuple(_axis(5, 19, 2)), tuple(_axis(0.10, 0.90, 0.05)),
                   tuple(_axis(0.10, 0.50, 0.05)))

    @property
    def shape(self):
        return len(self.snr), len(self.bfs), len(self.sw)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def cell(self, index: int):
        """(snr, bfs, sw) for a flat cell index, SNR slowest and SW fastest."""
        i, j, k = np.unravel_index(index, self.shape)
        return float(self.snr[i]), float(self.bfs[j]), float(self.sw[k])

    def to_dict(self):
        return {"snr": [float(v) for v in self.snr], "bfs": [float(v) for v in self.bfs],
                "sw": [float(v) for v in self.sw]}


@dataclass
class GridResult:
    """Per-cell metrics; arrays are indexed (snr, bfs, sw) and NaN where not run."""

    grid: GridSpec
    names: List[str]
    n_per_cell: int
    seed: int
    rmse: Dict[str, np.ndarray]
    sd: Dict[str, np.ndarray]
    bias: Dict[str, np.ndarray]
    status: np.ndarray            # "ok", "pending" or "failed" per cell
    failures: Dict[str, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def skeleton(cls, grid: GridSpec, names: Sequence[str], n_per_cell: int = 500,
                 seed: int = 0) -> "GridResult":
        def blank():
            return {n: np.full(grid.shape, np.nan) for n in names}
        return cls(grid, list(names), n_per_cell, seed, blank(), blank(), blank(),
                   np.full(grid.shape, "pending", dtype=object))

    def difference(self, a: str = "CNN", b: str = "LCF") -> np.ndarray:
        """RMSE of ``a`` minus RMSE of ``b``; negative where ``a`` is better."""
        return self.rmse[a] - self.rmse[b]

    def to_json_dict(self) -> dict:
        cells = []
        for idx in range(self.grid.n_cells):
            pos = np.unravel_index(idx, self.grid.shape)
            snr, bfs, sw = self.grid.cell(idx)
            row = {"cell": idx, "snr": snr, "bfs": bfs, "sw": sw, "status": str(self.status[pos])}
            for n in self.names:
                row[n] = {"rmse": _num(self.rmse[n][pos]), "sd": _num(self.sd[n][pos]),
                          "bias": _num(self.bias[n][pos])}
            if str(idx) in self.failures:
                row["error"] = self.failures[str(idx)]
            cells.append(row)
        return {"axes": self.grid.to_dict(), "extractors": self.names,
                "n_per_cell": self.n_per_cell, "seed": self.seed, "cells": cells,
                "metadata": self.metadata}

    def write(self, out_dir) -> List[Path]:
        """JSON report, flat CSV and one difference-map CSV per SW value."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "grid.json", out / "grid.csv"]
        paths[0].write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True))
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "snr", "bfs", "sw", "status"]
                       + [f"{n}_{m}" for n in self.names for m in ("rmse", "sd", "bias")])
            for idx in range(self.grid.n_cells):
                pos = np.unravel_index(idx, self.grid.shape)
                w.writerow([idx, *self.grid.cell(idx), self.status[pos]]
                           + [_fmt(getattr(self, m)[n][pos])
                              for n in self.names for m in ("rmse", "sd", "bias")])
        if {"CNN", "LCF"} <= set(self.names):
            diff = self.difference()
            for k, sw in enumerate(self.grid.sw):
                p = out / f"diff_sw{int(round(sw * 100)):02d}.csv"
                with open(p, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["snr\\bfs"] + [_fmt(b) for b in self.grid.bfs])
                    for i, snr in enumerate(self.grid.snr):
                        w.writerow([_fmt(snr)] + [_fmt(v) for v in diff[i, :, k]])
                paths.append(p)
        return paths


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _fmt(v):
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


def cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng([seed, cell])


def run_grid(extractors: Sequence[Extractor], grid: GridSpec, n_per_cell: int = 500,
             sweep: SweepRange = SweepRange(), seed: int = 0,
             cells: Optional[Sequence[int]] = None, progress: bool = False) -> GridResult:
    """Evaluate every extractor on identical simulated data in each cell.

    Each cell draws its spectra from its own stream seeded by (seed, cell), so
    results do not depend on extractor order or on which cells are run.
    """
    if n_per_cell < 2:
        raise EvalError("n_per_cell must be at least 2")
    names = [e.name for e in extractors]
    if len(set(names)) != len(names):
        raise EvalError(f"duplicate extractor names {names}")
    res = GridResult.skeleton(grid, names, n_per_cell, seed)
    todo = range(grid.n_cells) if cells is None else cells
    started = time.perf_counter()
    for count, idx in enumerate(todo):
        pos = np.unravel_index(idx, grid.shape)
        snr, bfs, sw = grid.cell(idx)
        data, truth = make_test_set(bfs, sw, snr, n_per_cell, sweep, cell_rng(seed, idx))
        try:
            for e in extractors:
                st = error_stats(e.extract(data), truth)
                res.rmse[e.name][pos] = st.rmse
                res.sd[e.name][pos] = st.sd
                res.bias[e.name][pos] = st.bias
            res.status[pos] = "ok"
        except Exception as exc:  # a failing cell is recorded, the run goes on
            res.status[pos] = "failed"
            res.failures[str(idx)] = f"{type(exc).__name__}: {exc}"
            log.warning("cell %d failed: %s", idx, exc)
        if progress:
            log.info("cell %d/%d (%.0f s)", count + 1, len(todo), time.perf_counter() - started)
    return res


# ---------------------------------------------------------------------------
# uncertainty and spatial resolution
# ---------------------------------------------------------------------------

@dataclass
class UncertaintyTrace:
    positions: np.ndarray
    sd: np.ndarray
    coeffs: tuple          # (a, b, c) of a*z**2 + b*z + c
    fitted: np.ndarray


def quadratic_fit(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.size < 3:
        raise EvalError("a quadratic fit needs at least 3 positions")
    design = np.stack([z * z, z, np.ones_like(z)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return tuple(float(c) for c in coef)


def uncertainty_trace(repeats, positions) -> UncertaintyTrace:
    """Per-position SD across repeated extractions and its least-squares quadratic."""
    rows = np.array([_values(r) for r in repeats])
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise EvalError("need at least 2 repeats of equal length")
    z = np.asarray(positions, dtype=np.float64)
    if z.shape != (rows.shape[1],):
        raise EvalError(f"{z.size} positions for traces of length {rows.shape[1]}")
    dev = rows - rows[0]
    dev -= dev.mean(axis=0)
    sds = np.sqrt(np.mean(dev * dev, axis=0))
    a, b, c = quadratic_fit(z, sds)
    return UncertaintyTrace(z, sds, (a, b, c), a * z * z + b * z + c)


def _crossing(z, u, i, level):
    """Linearly interpolated position where u passes ``level`` between samples i and i+1."""
    t = (level - u[i]) / (u[i + 1] - u[i])
    return z[i] + t * (z[i + 1] - z[i])


def spatial_resolution(bfs, positions, floor: float = 1e-3, edge: Optional[int] = None) -> float:
    """Length of the 10 %-90 % part of a transition between two plateaus.

    Plateau levels are medians of the first and last ``edge`` samples
    (default a tenth of the profile).  The transition is located by the
    split that best separates samples above and below the 50 % level; the
    10 % and 90 % crossings nearest that split are interpolated linearly.
    """
    v = _values(bfs)
    z = np.asarray(positions, dtype=np.float64)
    if v.size != z.size or v.size < 2:
        raise EvalError("profile and positions must have equal length >= 2")
    if not np.all(np.isfinite(v)):
        raise EvalError("profile contains non-finite values")
    edge = edge or max(1, v.size // 10)
    start, end = float(np.median(v[:edge])), float(np.median(v[-edge:]))
    if abs(end - start) < floor:
        raise EvalError(f"no transition: plateau difference {abs(end - start):.3g} below {floor}")
    if end < start:
        v, z = v[::-1], z[::-1]
        start, end = end, start
    u = (v - start) / (end - start)
    above = u > 0.5
    # cost of splitting after sample j: high samples before plus low samples after
    cost = np.cumsum(above)[:-1] + (np.sum(~above) - np.cumsum(~above)[:-1])
    best = np.flatnonzero(cost == cost.min())
    j = int(best[len(best) // 2])
    lo = [i for i in range(j, -1, -1) if u[i] < 0.1 <= u[i + 1]]
    hi = [i for i in range(j, u.size - 1) if u[i] <= 0.9 < u[i + 1]]
    if not hi:
        hi = [i for i in range(j - 1, -1, -1) if u[i] <= 0.9 < u[i + 1]]
    if not lo:
        lo = [i for i in range(j + 1, u.size - 1) if u[i] < 0.1 <= u[i + 1]]
    if not lo or not hi:
        raise EvalError("transition crossings not found")
    return float(abs(_crossing(z, u, hi[0], 0.9) - _crossing(z, u, lo[0], 0.1)))


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------

def machine_descriptor() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "numpy": np.__version__,
            "cpu_count": os.cpu_count(), "package": __version__}


@dataclass
class BenchReport:
    name: str
    n_traces: int
    times: List[float]
    per_1000_median: float
    per_1000_min: float
    per_1000_max: float
    machine: dict
    reference_per_1000: Optional[float] = None

    def to_dict(self):
        return dict(self.__dict__)


BENCH_SNRS = (5.0, 9.0, 13.0, 17.0)


def make_bench_set(n: int = 1000, seed: int = 0, bfs: float = 0.3, sw: float = 0.25,
                   snrs: Sequence[float] = BENCH_SNRS) -> DistributedBgs:
    """Timing data: one Lorentzian with the SNR cycling through ``snrs`` along the fiber."""
    snr = np.resize(np.asarray(snrs, dtype=np.float64), n)
    truth = np.full(n, float(bfs))
    sweep = SweepRange()
    return DistributedBgs(sweep, synth_columns(truth, sw, snr, sweep,
                                               np.random.default_rng([seed, 3])), truth)


def bench(extractor: Extractor, data: DistributedBgs, repeats: int = 3) -> BenchReport:
    """Warm wall-clock timing of one extractor, normalized to 1000 spectra."""
    if repeats < 3:
        raise EvalError("repeats must be at least 3")
    extractor.extract(data)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        extractor.extract(data)
        times.append(time.perf_counter() - t0)
    scale = 1000.0 / data.n_traces
    return BenchReport(extractor.name, data.n_traces, times, statistics.median(times) * scale,
                       min(times) * scale, max(times) * scale, machine_descriptor(),
                       REFERENCE_TIMINGS.get(extractor.name))
