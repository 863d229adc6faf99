"""Simulated Brillouin gain spectra.

All BFS and spectral-width values inside the package are fractions of the
frequency sweep range; physical frequencies only appear at I/O boundaries
(see :func:`normalize_bfs` / :func:`denormalize_bfs`).

Distributed data are stored frequency-major: ``matrix[i, j]`` is the gain of
frequency sample ``i`` at fiber position ``j``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_POINTS = 151
MAX_REDRAWS = 8


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class SweepRange:
    f_min: float = 0.0
    f_max: float = 1.0
    n_points: int = DEFAULT_POINTS

    def __post_init__(self):
        if not self.f_max > self.f_min:
            raise SpectrumError(f"f_max ({self.f_max}) must exceed f_min ({self.f_min})")
        if int(self.n_points) != self.n_points or self.n_points < 3:
            raise SpectrumError(f"n_points must be an integer >= 3, got {self.n_points}")

    @property
    def step(self) -> float:
        """Normalized spacing between adjacent samples."""
        return 1.0 / (self.n_points - 1)

    def grid(self) -> np.ndarray:
        """Normalized sample positions, 0 .. 1 inclusive."""
        return np.arange(self.n_points) / (self.n_points - 1)

    def frequencies(self) -> np.ndarray:
        return self.f_min + np.arange(self.n_points) * (self.f_max - self.f_min) / (self.n_points - 1)


@dataclass(frozen=True)
class LorentzianParams:
    """Gain peak, center (normalized BFS) and FWHM (normalized SW) of one spectrum."""

    g_b: float
    v_b: float
    sw: float

    def validate(self) -> "LorentzianParams":
        if not self.g_b > 0:
            raise SpectrumError(f"gain peak must be positive, got {self.g_b}")
        if not 0.0 <= self.v_b <= 1.0:
            raise SpectrumError(f"v_b must lie in [0, 1], got {self.v_b}")
        if not 0.0 < self.sw < 1.0:
            raise SpectrumError(f"sw must lie in (0, 1), got {self.sw}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.g_b, self.v_b, self.sw], dtype=np.float64)


@dataclass
class SpectrumTrace:
    sweep: SweepRange
    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.shape != (self.sweep.n_points,):
            raise SpectrumError(
                f"expected {self.sweep.n_points} gain samples, got shape {self.gains.shape}"
            )


@dataclass
class DistributedBgs:
    """Frequency x position gain matrix, optionally carrying the true normalized BFS."""

    sweep: SweepRange
    matrix: np.ndarray
    truth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.sweep.n_points:
            raise SpectrumError(
                f"matrix must be {self.sweep.n_points} x n_traces, got {self.matrix.shape}"
            )
        if self.matrix.shape[1] < 1:
            raise SpectrumError("need at least one trace")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)
            if self.truth.shape != (self.n_traces,):
                raise SpectrumError("truth length must equal n_traces")

    @property
    def n_traces(self) -> int:
        return self.matrix.shape[1]

    def column(self, j: int) -> SpectrumTrace:
        return SpectrumTrace(self.sweep, self.matrix[:, j])

    def take(self, idx) -> "DistributedBgs":
        truth = None if self.truth is None else self.truth[idx]
        return DistributedBgs(self.sweep, self.matrix[:, idx], truth)


@dataclass
class BfsTrace:
    """Extracted BFS per fiber position.

    ``values`` are normalized fractions unless ``normalized`` is False, in
    which case they are in the sweep's physical units.  Failed positions hold
    NaN; per-position diagnostics are optional.
    """

    values: np.ndarray
    sweep: Optional[SweepRange] = None
    normalized: bool = True
    converged: Optional[np.ndarray] = None
    iterations: Optional[np.ndarray] = None
    sse: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self):
        return len(self.values)

    def to_physical(self) -> "BfsTrace":
        if not self.normalized:
            return self
        if self.sweep is None:
            raise SpectrumError("cannot denormalize a trace without its sweep")
        return BfsTrace(denormalize_bfs(self.values, self.sweep), self.sweep, False,
                        self.converged, self.iterations, self.sse, dict(self.diagnostics))


@dataclass(frozen=True)
class SimRanges:
    """Uniform sampling ranges for simulated spectra (fractions and dB)."""

    bfs_lo: float = 0.05
    bfs_hi: float = 0.95
    sw_lo: float = 0.10
    sw_hi: float = 0.50
    snr_lo: float = 5.0
    snr_hi: float = 20.0

    def __post_init__(self):
        for name, lo, hi in (("bfs", self.bfs_lo, self.bfs_hi), ("sw", self.sw_lo, self.sw_hi),
                             ("snr", self.snr_lo, self.snr_hi)):
            if lo > hi:
                raise SpectrumError(f"{name} range is inverted: {lo} > {hi}")
        for v in (self.bfs_lo, self.bfs_hi, self.sw_lo, self.sw_hi):
            if not 0.0 <= v <= 1.0:
                raise SpectrumError(f"fractional range value {v} outside [0, 1]")


def lorentzian_gain(params: LorentzianParams, v):
    """Lorentzian gain ``g_B / (1 + ((v - v_B) / (sw / 2))**2)``."""
    return lorentzian(v, params.g_b, params.v_b, params.sw)


def lorentzian(v, g_b, v_b, sw):
    u = (np.asarray(v, dtype=np.float64) - v_b) / (0.5 * sw)
    return g_b / (1.0 + u * u)


def noise_sigma_from_snr(snr_db):
    """Noise standard deviation relative to a unit peak for the given SNR in dB."""
    return 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 20.0)


def normalize_bfs(bfs, sweep: SweepRange):
    frac = (np.asarray(bfs, dtype=np.float64) - sweep.f_min) / (sweep.f_max - sweep.f_min)
    if np.any((frac < 0) | (frac > 1)):
        warnings.warn("BFS outside the sweep range", RuntimeWarning, stacklevel=2)
    return frac if frac.ndim else float(frac)


def denormalize_bfs(frac, sweep: SweepRange):
    out = sweep.f_min + np.asarray(frac, dtype=np.float64) * (sweep.f_max - sweep.f_min)
    return out if out.ndim else float(out)


def synth_columns(bfs, sw, snr_db, sweep: SweepRange, rng: np.random.Generator,
                  normalize: bool = True) -> np.ndarray:
    """Noisy, peak-normalized Lorentzian columns for per-column parameter vectors.

    Noise is added to the unit-peak curve and the column is then rescaled to a
    maximum of exactly 1 (skipped when ``normalize`` is False).  Columns whose
    noisy maximum is not positive get a fresh noise draw, at most
    ``MAX_REDRAWS`` times.
    """
    bfs, sw, snr_db = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=np.float64))
                                            for a in (bfs, sw, snr_db)))
    n = bfs.shape[0]
    v = sweep.grid()[:, None]
    ideal = lorentzian(v, 1.0, bfs[None, :], sw[None, :])
    sigma = noise_sigma_from_snr(snr_db)
    noisy = ideal + rng.standard_normal((sweep.n_points, n)) * sigma
    peak = noisy.max(axis=0)
    for _ in range(MAX_REDRAWS):
        bad = np.flatnonzero(~(peak > 0))
        if bad.size == 0:
            break
        noisy[:, bad] = ideal[:, bad] + rng.standard_normal((sweep.n_points, bad.size)) * sigma[bad]
        peak[bad] = noisy[:, bad].max(axis=0)
    else:
        if np.any(~(peak > 0)):
            raise SpectrumError("noisy spectrum has no positive sample; SNR is too low")
    return noisy / peak if normalize else noisy


def peak_normalize(matrix: np.ndarray) -> np.ndarray:
    """Scale each column so its maximum is 1."""
    matrix = np.asarray(matrix, dtype=np.float64)
    peak = matrix.max(axis=0)
    if np.any(~(peak > 0)):
        raise SpectrumError("cannot peak-normalize a column with non-positive maximum")
    return matrix / peak


def synth_trace(params: LorentzianParams, sweep: SweepRange, snr_db: float,
                rng: np.random.Generator) -> SpectrumTrace:
    params.validate()
    col = synth_columns(params.v_b, params.sw, snr_db, sweep, rng)
    return SpectrumTrace(sweep, col[:, 0])


def _flag_out_of_training_range(bfs, ranges: Optional[SimRanges] = None):
    ranges = ranges or SimRanges()
    outside = (np.asarray(bfs) < ranges.bfs_lo) | (np.asarray(bfs) > ranges.bfs_hi)
    if np.any(outside):
        log.warning("%d BFS values lie outside the training range [%g, %g]",
                    int(np.count_nonzero(outside)), ranges.bfs_lo, ranges.bfs_hi)


def make_training_batch(n_traces: int, ranges: SimRanges, sweep: SweepRange,
                        rng: np.random.Generator) -> Tuple[DistributedBgs, np.ndarray]:
    """Random columns with independent uniform BFS, SW and SNR draws."""
    if n_traces < 1:
        raise SpectrumError("n_traces must be >= 1")
    bfs = rng.uniform(ranges.bfs_lo, ranges.bfs_hi, n_traces)
    sw = rng.uniform(ranges.sw_lo, ranges.sw_hi, n_traces)
    snr = rng.uniform(ranges.snr_lo, ranges.snr_hi, n_traces)
    # uniform(lo, hi) with lo == hi returns lo exactly
    matrix = synth_columns(bfs, sw, snr, sweep, rng)
    return DistributedBgs(sweep, matrix, bfs), bfs


def make_test_set(bfs: float, sw: float, snr_db: float, n: int, sweep: SweepRange,
                  rng: np.random.Generator) -> Tuple[DistributedBgs, np.ndarray]:
    """``n`` noisy realizations of a single Lorentzian."""
    if n < 1:
        raise SpectrumError("n must be >= 1")
    LorentzianParams(1.0, bfs, sw).validate()
    _flag_out_of_training_range([bfs])
    truth = np.full(n, float(bfs))
    matrix = synth_columns(truth, sw, snr_db, sweep, rng)
    return DistributedBgs(sweep, matrix, truth), truth


def step_profile(baseline_bfs: float, heated_bfs: float, heated_start: int, n_traces: int,
                 transition_samples: int = 0) -> np.ndarray:
    """Baseline, then a linear ramp over ``transition_samples``, then the heated level."""
    if not 0 <= heated_start < n_traces:
        raise SpectrumError(f"heated_start {heated_start} outside [0, {n_traces})")
    if transition_samples < 0:
        raise SpectrumError("transition_samples must be >= 0")
    if heated_start + transition_samples > n_traces - 1:
        raise SpectrumError("ramp runs past the end of the fiber")
    idx = np.arange(n_traces, dtype=np.float64)
    if transition_samples == 0:
        frac = (idx >= heated_start).astype(np.float64)
    else:
        frac = np.clip((idx - heated_start) / transition_samples, 0.0, 1.0)
    return baseline_bfs + (heated_bfs - baseline_bfs) * frac


def make_step_scenario(baseline_bfs: float, heated_bfs: float, heated_start: int, n_traces: int,
                       sw: float, snr_db: float, transition_samples: int, sweep: SweepRange,
                       rng: np.random.Generator) -> Tuple[DistributedBgs, np.ndarray]:
    """Software analog of a fiber whose far section is heated."""
    profile = step_profile(baseline_bfs, heated_bfs, heated_start, n_traces, transition_samples)
    matrix = synth_columns(profile, sw, snr_db, sweep, rng)
    return DistributedBgs(sweep, matrix, profile), profile


def make_attenuated_scenario(bfs: float, sw: float, snr_start: float, snr_end: float,
                             n_traces: int, sweep: SweepRange,
                             rng: np.random.Generator) -> Tuple[DistributedBgs, np.ndarray]:
    """Constant BFS with SNR falling linearly (in dB) along the fiber."""
    snr = np.linspace(snr_start, snr_end, n_traces)
    truth = np.full(n_traces, float(bfs))
    return DistributedBgs(sweep, synth_columns(truth, sw, snr, sweep, rng), truth), truth


def resample(data: DistributedBgs, n_points: int = DEFAULT_POINTS) -> DistributedBgs:
    """Linearly interpolate every column onto an ``n_points`` grid over the same sweep."""
    if data.sweep.n_points == n_points:
        return data
    new_sweep = SweepRange(data.sweep.f_min, data.sweep.f_max, n_points)
    old = data.sweep.grid()
    new = new_sweep.grid()
    matrix = np.empty((n_points, data.n_traces))
    for j in range(data.n_traces):
        matrix[:, j] = np.interp(new, old, data.matrix[:, j])
    return DistributedBgs(new_sweep, matrix, data.truth)
