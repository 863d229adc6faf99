"""Lorentzian curve fitting with Levenberg-Marquardt.

Parameters are fitted in normalized units: the frequency axis runs 0..1 over
the sweep, so ``v_b`` and ``sw`` are fractions of the sweep range.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .spectra import BfsTrace, DistributedBgs, LorentzianParams, SpectrumTrace

log = logging.getLogger(__name__)

V_BOUNDS = (-0.5, 1.5)
SW_BOUNDS = (1e-4, 2.0)
HALF_TOL = 1e-12


class FitError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LmConfig:
    step_stop: float = 1e-8
    max_iter: int = 200
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0

    def __post_init__(self):
        if min(self.step_stop, self.max_iter, self.lambda_init) <= 0:
            raise ValueError("LmConfig values must be strictly positive")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda_up and lambda_down must exceed 1")


@dataclass
class FitResult:
    params: LorentzianParams
    iterations: int
    converged: bool
    sse: float
    step_norm: float = np.inf
    clamped: bool = False
    history: list = field(default_factory=list, repr=False)


def estimate_initial(trace: SpectrumTrace) -> LorentzianParams:
    """Starting point read directly off the samples.

    Peak gain and its position give ``g_b`` and ``v_b``; the width is the
    number of contiguous samples around the peak that exceed half the peak,
    times the grid step.  Samples equal to half the peak up to round-off do
    not count as exceeding it.
    """
    g = trace.gains
    if g.size == 0:
        raise FitError("empty spectrum")
    if np.all(g == g[0]):
        raise FitError("degenerate spectrum: all samples equal")
    k = int(np.argmax(g))
    g_b = float(g[k])
    half = 0.5 * g_b * (1.0 + HALF_TOL)
    lo = k
    while lo > 0 and g[lo - 1] > half:
        lo -= 1
    hi = k
    while hi < g.size - 1 and g[hi + 1] > half:
        hi += 1
    step = trace.sweep.step
    return LorentzianParams(g_b, k * step, (hi - lo + 1) * step)


def _model_and_partials(v, p):
    g_b, v_b, sw = p
    u = 2.0 * (v - v_b) / sw
    d = 1.0 + u * u
    inv = 1.0 / d
    model = g_b * inv
    # partials of the model w.r.t. (g_b, v_b, sw)
    jac = np.empty((v.size, 3))
    jac[:, 0] = inv
    jac[:, 1] = 4.0 * g_b * u * inv * inv / sw
    jac[:, 2] = 2.0 * g_b * u * u * inv * inv / sw
    return model, jac


def residual_jacobian(params: LorentzianParams, trace: SpectrumTrace):
    """Residuals ``g_i - g(v_i)`` and their Jacobian (``-dg/dparam``), shape (m, 3)."""
    if params.sw == 0:
        raise FitError("zero spectral width makes the model singular")
    model, jac = _model_and_partials(trace.sweep.grid(), params.as_array())
    return trace.gains - model, -jac


def _clamp(p):
    q = p.copy()
    q[1] = min(max(q[1], V_BOUNDS[0]), V_BOUNDS[1])
    q[2] = min(max(q[2], SW_BOUNDS[0]), SW_BOUNDS[1])
    return q, bool(np.any(q != p))


def lm_fit(trace: SpectrumTrace, init: LorentzianParams, config: LmConfig = LmConfig(),
           keep_history: bool = False) -> FitResult:
    """Minimize the sum of squared residuals starting from ``init``.

    Each iteration solves ``(J^T J + lam * diag(J^T J)) delta = J^T r`` with
    ``J`` the residual Jacobian and proposes ``p - delta``.  A proposal is
    accepted only if it lowers the SSE; ``lam`` is divided by ``lambda_down``
    on acceptance and multiplied by ``lambda_up`` on rejection.  The fit has
    converged once a step shorter than ``step_stop`` is produced.
    """
    v = trace.sweep.grid()
    y = trace.gains
    p = init.as_array()
    if not np.all(np.isfinite(p)) or p[2] <= 0:
        raise FitError(f"invalid initial parameters {init}")
    model, jac = _model_and_partials(v, p)
    r = y - model
    sse = float(r @ r)
    lam = config.lambda_init
    clamped = False
    converged = False
    step_norm = np.inf
    history = [sse] if keep_history else []
    it = 0
    while it < config.max_iter:
        it += 1
        # residual Jacobian is -jac, so J^T J = jac^T jac and J^T r = -jac^T r
        jtj = jac.T @ jac
        jtr = -(jac.T @ r)
        a = jtj + lam * np.diag(np.diag(jtj))
        try:
            delta = np.linalg.solve(a, jtr)
        except np.linalg.LinAlgError:
            lam *= config.lambda_up
            continue
        trial, hit = _clamp(p - delta)
        step_norm = float(np.linalg.norm(trial - p))
        if not np.all(np.isfinite(trial)):
            raise FitError(f"non-finite parameters at iteration {it}")
        t_model, t_jac = _model_and_partials(v, trial)
        t_r = y - t_model
        t_sse = float(t_r @ t_r)
        if not np.isfinite(t_sse):
            raise FitError(f"non-finite residual at iteration {it}")
        small = step_norm < config.step_stop
        if t_sse < sse or (small and t_sse <= sse):
            p, model, jac, r, sse = trial, t_model, t_jac, t_r, t_sse
            clamped |= hit
            lam = max(lam / config.lambda_down, 1e-300)
            if keep_history:
                history.append(sse)
        else:
            lam *= config.lambda_up
        if small:
            converged = True
            break
        if lam > 1e300:
            break
    return FitResult(LorentzianParams(*map(float, p)), it, converged, sse, step_norm,
                     clamped, history)


def fit_trace(trace: SpectrumTrace, config: LmConfig = LmConfig()) -> FitResult:
    return lm_fit(trace, estimate_initial(trace), config)


def fit_distributed(data: DistributedBgs, config: LmConfig = LmConfig(),
                    threads: int = 1) -> BfsTrace:
    """Fit every column independently; failed columns become NaN with a diagnostic."""
    n = data.n_traces
    values = np.full(n, np.nan)
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    sse = np.full(n, np.nan)
    failures = {}
    clamped = []

    def one(j):
        try:
            return j, fit_trace(data.column(j), config)
        except (FitError, ValueError, np.linalg.LinAlgError) as exc:
            return j, exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(j) for j in range(n)]
    for j, res in results:
        if isinstance(res, Exception):
            failures[j] = str(res)
            continue
        values[j] = res.params.v_b
        converged[j] = res.converged
        iterations[j] = res.iterations
        sse[j] = res.sse
        if res.clamped:
            clamped.append(j)
    if failures:
        log.warning("%d of %d columns failed to fit", len(failures), n)
    diag = {"failures": failures, "clamped": clamped,
            "not_converged": int(n - converged.sum() - len(failures))}
    return BfsTrace(values, data.sweep, True, converged, iterations, sse, diag)
