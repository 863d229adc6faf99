import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from bfscnn.lcf import (FitError, LmConfig, estimate_initial, fit_distributed, fit_trace, lm_fit,
                        residual_jacobian)
from bfscnn.spectra import (DistributedBgs, LorentzianParams, SpectrumTrace, SweepRange, lorentzian,
                            make_test_set, synth_trace)

SWEEP = SweepRange()
V = SWEEP.grid()


def clean(g_b, v_b, sw):
    return SpectrumTrace(SWEEP, lorentzian(V, g_b, v_b, sw))


def noisy(v_b, sw, snr, seed):
    return synth_trace(LorentzianParams(1.0, v_b, sw), SWEEP, snr, np.random.default_rng(seed))


class TestInitial:
    def test_noiseless(self):
        p = estimate_initial(clean(1.0, 0.5, 0.2))
        assert abs(p.v_b - 0.5) <= SWEEP.step / 2
        assert abs(p.sw - 0.2) <= SWEEP.step
        assert p.g_b == 1.0

    def test_edge_peak(self):
        assert estimate_initial(clean(1.0, 0.0, 0.2)).v_b == 0.0

    def test_flat(self):
        with pytest.raises(FitError, match="degenerate"):
            estimate_initial(SpectrumTrace(SWEEP, np.ones(151)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_scan(self, seed):
        tr = noisy(0.4, 0.25, 11, seed)
        g = tr.gains
        k = max(range(g.size), key=lambda i: (g[i], -i))
        above = [i for i in range(g.size) if g[i] > g[k] / 2]
        # contiguous run containing the peak
        run = {k}
        for direction in (-1, 1):
            i = k + direction
            while i in above:
                run.add(i)
                i += direction
        p = estimate_initial(tr)
        assert p.v_b == k * SWEEP.step
        assert p.sw == pytest.approx(len(run) * SWEEP.step, abs=1e-15)


class TestJacobian:
    def test_zero_residual_at_generator(self):
        r, _ = residual_jacobian(LorentzianParams(1.3, 0.4, 0.3), clean(1.3, 0.4, 0.3))
        np.testing.assert_allclose(r, 0.0, atol=1e-15)

    def test_gain_column(self):
        p = LorentzianParams(2.0, 0.4, 0.3)
        _, jac = residual_jacobian(p, clean(1.0, 0.5, 0.2))
        np.testing.assert_allclose(-jac[:, 0], lorentzian(V, 2.0, 0.4, 0.3) / 2.0, rtol=1e-15)

    @pytest.mark.parametrize("p", [(1.0, 0.5, 0.25), (0.7, 0.1, 0.1), (1.4, 0.93, 0.45)])
    def test_finite_difference(self, p):
        tr = noisy(0.5, 0.25, 11, 0)
        _, jac = residual_jacobian(LorentzianParams(*p), tr)
        h = 1e-6
        num = np.empty_like(jac)
        for k in range(3):
            up, dn = np.array(p, float), np.array(p, float)
            up[k] += h
            dn[k] -= h
            num[:, k] = (residual_jacobian(LorentzianParams(*up), tr)[0]
                         - residual_jacobian(LorentzianParams(*dn), tr)[0]) / (2 * h)
        rel = np.max(np.abs(jac - num)) / np.max(np.abs(num))
        assert rel < 1e-5

    def test_zero_width(self):
        with pytest.raises(FitError):
            residual_jacobian(LorentzianParams(1.0, 0.5, 0.0), clean(1, 0.5, 0.2))


class TestLm:
    @pytest.mark.parametrize("v_b", [0.1, 0.3, 0.5, 0.7, 0.9])
    @pytest.mark.parametrize("sw", [0.1, 0.25, 0.5])
    def test_noiseless_exact(self, v_b, sw):
        res = fit_trace(clean(1.0, v_b, sw))
        np.testing.assert_allclose(res.params.as_array(), [1.0, v_b, sw], rtol=0, atol=1e-6)
        assert res.converged and res.step_norm < 1e-8 and res.iterations <= 50

    def test_start_at_optimum(self):
        truth = LorentzianParams(1.0, 0.42, 0.27)
        res = lm_fit(clean(1.0, 0.42, 0.27), truth)
        assert res.converged and res.iterations <= 2
        np.testing.assert_allclose(res.params.as_array(), truth.as_array(), atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_grid_oracle(self, seed):
        tr = noisy(0.45, 0.25, 11, seed)
        res = fit_trace(tr)

        def sse_at(v_b):
            # g_b enters linearly; sw by a bounded 1-D search
            def inner(sw):
                shape = lorentzian(V, 1.0, v_b, sw)
                g_b = shape @ tr.gains / (shape @ shape)
                r = tr.gains - g_b * shape
                return r @ r
            return minimize_scalar(inner, bounds=(0.02, 1.0), method="bounded",
                                   options={"xatol": 1e-9}).fun

        grid = np.arange(res.params.v_b - 0.03, res.params.v_b + 0.03, 1e-4)
        best = grid[np.argmin([sse_at(v) for v in grid])]
        assert abs(res.params.v_b - best) <= SWEEP.step

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_sse(self, seed):
        tr = noisy(0.3, 0.3, 6, seed)
        res = lm_fit(tr, estimate_initial(tr), keep_history=True)
        assert np.all(np.diff(res.history) <= 0)
        assert res.sse >= 0

    @pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
    def test_gain_scaling(self, c):
        tr = noisy(0.6, 0.2, 15, 4)
        a = fit_trace(tr)
        b = fit_trace(SpectrumTrace(SWEEP, c * tr.gains))
        assert b.params.v_b == pytest.approx(a.params.v_b, abs=1e-7)
        assert b.params.sw == pytest.approx(a.params.sw, abs=1e-7)
        assert b.params.g_b == pytest.approx(c * a.params.g_b, rel=1e-7)

    def test_max_iter_reports_unconverged(self):
        tr = noisy(0.3, 0.3, 6, 1)
        res = lm_fit(tr, estimate_initial(tr), LmConfig(max_iter=1))
        assert not res.converged and res.iterations == 1
        assert res.sse <= np.sum((tr.gains - lorentzian(V, *estimate_initial(tr).as_array())) ** 2)

    def test_converged_implies_small_step(self):
        for seed in range(10):
            res = fit_trace(noisy(0.5, 0.25, 8, seed))
            if res.converged:
                assert res.step_norm < 1e-8

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LmConfig(step_stop=0)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(20, 130), sw=st.floats(0.1, 0.5))
def test_noiseless_any_interior_peak(k, sw):
    v_b = k * SWEEP.step
    res = fit_trace(clean(1.0, v_b, sw))
    np.testing.assert_allclose(res.params.as_array(), [1.0, v_b, sw], atol=1e-6)


class TestDistributed:
    def test_noiseless_columns(self):
        bfs = np.linspace(0.1, 0.9, 224)
        m = np.stack([lorentzian(V, 1.0, b, 0.25) for b in bfs], axis=1)
        out = fit_distributed(DistributedBgs(SWEEP, m))
        np.testing.assert_allclose(out.values, bfs, atol=1e-6)
        assert out.converged.all()

    def test_single_column(self):
        tr = noisy(0.5, 0.25, 11, 3)
        out = fit_distributed(DistributedBgs(SWEEP, tr.gains[:, None]))
        assert len(out) == 1 and out.values[0] == fit_trace(tr).params.v_b

    def test_permutation(self):
        data, _ = make_test_set(0.4, 0.3, 9, 20, SWEEP, np.random.default_rng(0))
        perm = np.random.default_rng(1).permutation(20)
        a = fit_distributed(data)
        b = fit_distributed(data.take(perm))
        np.testing.assert_array_equal(b.values, a.values[perm])

    def test_pure_and_threads(self):
        data, _ = make_test_set(0.4, 0.3, 9, 16, SWEEP, np.random.default_rng(0))
        a = fit_distributed(data)
        np.testing.assert_array_equal(fit_distributed(data).values, a.values)
        np.testing.assert_array_equal(fit_distributed(data, threads=3).values, a.values)

    def test_flat_column_becomes_gap(self):
        m = np.stack([lorentzian(V, 1, 0.5, 0.2), np.ones(151)], axis=1)
        out = fit_distributed(DistributedBgs(SWEEP, m))
        assert np.isnan(out.values[1]) and 1 in out.diagnostics["failures"]
        assert out.values[0] == pytest.approx(0.5, abs=1e-6)
