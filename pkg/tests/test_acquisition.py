import math

import numpy as np
import pytest

from fieldcycle import acquisition as A
from fieldcycle import kernels as K


@pytest.fixture(scope="module")
def cfg():
    return A.AcqConfig()


@pytest.fixture(scope="module")
def cfg_quiet():
    return A.AcqConfig(noise_sigma=0.0)


class TestConfig:
    def test_default_bin_alignment(self, cfg):
        assert cfg.bin_exact == 100.0
        assert cfg.bin_index == 100
        assert cfg.bin_aligned

    def test_misaligned_heterodyne(self):
        c = A.AcqConfig(f_het_hz=19.7e6)
        assert not c.bin_aligned

    @pytest.mark.parametrize("kwargs", [
        dict(f_het_hz=0.0),
        dict(f_het_hz=6e8),
        dict(n_samples=8),
        dict(noise_sigma=-0.1),
        dict(seed=-1),
        dict(seed=2 ** 64),
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            A.AcqConfig(**kwargs)


class TestSynthesizeExtract:
    def test_noiseless_round_trip(self, cfg_quiet):
        for amp, phi in ((1.0, 0.0), (0.24, 1.234), (2.0, -2.9), (0.3, 3.1)):
            x = A.synthesize_window(amp, phi, cfg_quiet)
            a, p = A.extract_tone(x, cfg_quiet)
            assert a == pytest.approx(amp, abs=1e-12)
            assert math.cos(p - phi) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic_per_index(self, cfg):
        x1 = A.synthesize_window(1.0, 0.0, cfg, index=7)
        x2 = A.synthesize_window(1.0, 0.0, cfg, index=7)
        x3 = A.synthesize_window(1.0, 0.0, cfg, index=8)
        assert np.array_equal(x1, x2)
        assert not np.array_equal(x1, x3)

    def test_matches_direct_formula(self, cfg):
        amp, phi = 0.8, 0.6
        x = A.synthesize_window(amp, phi, cfg, index=3)
        k = np.arange(cfg.n_samples)
        tone = amp * np.cos(2 * np.pi * cfg.f_het_hz * k / cfg.fs_hz + phi)
        key = K.window_keys(cfg.seed, [3])[0]
        noise = cfg.noise_sigma * K.norm_ppf_np(
            K.uniforms_np(int(key), cfg.n_samples))
        assert np.allclose(x, tone + noise, atol=1e-12)

    def test_extract_against_direct_dft(self, cfg):
        # dual route: Goertzel extraction vs the direct DFT-sum reference
        rng = np.random.default_rng(0)
        worst = 0.0
        for i in range(100):
            x = A.synthesize_window(rng.uniform(0.05, 2.0),
                                    rng.uniform(-np.pi, np.pi), cfg, index=i)
            a, p = A.extract_tone(x, cfg)
            X = A.dft_bin_oracle(x, cfg.f_het_hz, cfg.fs_hz)
            a_ref = 2.0 * abs(X) / cfg.n_samples
            p_ref = math.atan2(X.imag, X.real)
            worst = max(worst, abs(a - a_ref) / a_ref, abs(p - p_ref))
        assert worst < 1e-9

    def test_all_zero_window(self, cfg_quiet):
        a, p = A.extract_tone(np.zeros(cfg_quiet.n_samples), cfg_quiet)
        assert (a, p) == (0.0, 0.0)

    def test_nonfinite_rejected(self, cfg):
        x = np.zeros(cfg.n_samples)
        x[17] = np.nan
        with pytest.raises(A.DataError):
            A.extract_tone(x, cfg)

    def test_phase_at_half_turn(self, cfg_quiet):
        x = A.synthesize_window(1.0, math.pi, cfg_quiet)
        a, p = A.extract_tone(x, cfg_quiet)
        assert a == pytest.approx(1.0, abs=1e-12)
        assert abs(p) == pytest.approx(math.pi, abs=1e-9)
        assert -math.pi < p <= math.pi

    def test_two_tone_orthogonality(self, cfg_quiet):
        # a second bin-aligned tone 10 bins away must not leak into the bin
        n = cfg_quiet.n_samples
        k = np.arange(n)
        x = A.synthesize_window(0.5, 0.3, cfg_quiet) \
            + 2.0 * np.cos(2 * np.pi * (cfg_quiet.bin_index + 10) * k / n)
        a, p = A.extract_tone(x, cfg_quiet)
        assert a == pytest.approx(0.5, abs=1e-9)


class TestOracleIdentities:
    def test_impulse_flat_spectrum(self):
        x = np.zeros(256)
        x[0] = 3.0
        for f in (1e6, 7.3e6, 499e6):
            X = A.dft_bin_oracle(x, f, 1e9)
            assert X == pytest.approx(3.0 + 0.0j, abs=1e-12)

    def test_parseval(self):
        rng = np.random.default_rng(4)
        n = 64
        x = rng.standard_normal(n)
        bins = [A.dft_bin_oracle(x, m / n, 1.0) for m in range(n)]
        lhs = np.sum(x * x)
        rhs = np.sum(np.abs(bins) ** 2) / n
        assert lhs == pytest.approx(rhs, rel=1e-9)


class TestEstimatorStatistics:
    def test_amplitude_scatter_matches_theory(self):
        # projection of white noise onto one quadrature pair:
        # std(amp) = sigma * sqrt(2 / n)
        cfg = A.AcqConfig(fs_hz=1.024e9, n_samples=4096, noise_sigma=0.1,
                          seed=21)
        n_win = 10_000
        recs = list(A.stream_process(iter([1.0] * n_win), cfg))
        amps = np.array([r.amplitude for r in recs])
        expect = cfg.noise_sigma * math.sqrt(2.0 / cfg.n_samples)
        assert np.std(amps) == pytest.approx(expect, rel=0.10)
        assert np.mean(amps) == pytest.approx(1.0, abs=5 * expect
                                              / math.sqrt(n_win))


class TestStreamProcess:
    def _amps(self, n, seed=3):
        rng = np.random.default_rng(seed)
        return rng.uniform(0.05, 1.5, n)

    def test_empty_stream(self, cfg):
        assert list(A.stream_process(iter([]), cfg)) == []

    def test_indices_in_order(self, cfg):
        recs = list(A.stream_process(iter(self._amps(100)), cfg))
        assert [r.index for r in recs] == list(range(100))

    def test_worker_count_invariance(self, cfg):
        amps = self._amps(5000)
        d1 = A.record_digest(A.stream_process(iter(amps), cfg, n_workers=1))
        d4 = A.record_digest(A.stream_process(iter(amps), cfg, n_workers=4))
        assert d1 == d4

    def test_chunk_size_invariance(self, cfg):
        amps = self._amps(1000)
        d_a = A.record_digest(A.stream_process(iter(amps), cfg,
                                               chunk_size=4096))
        d_b = A.record_digest(A.stream_process(iter(amps), cfg,
                                               chunk_size=13, n_workers=2))
        assert d_a == d_b

    def test_start_index_continuation(self, cfg):
        amps = self._amps(150)
        full = list(A.stream_process(iter(amps), cfg))
        tail = list(A.stream_process(iter(amps[100:]), cfg, start_index=100))
        assert [(r.index, r.amplitude, r.phase) for r in tail] \
            == [(r.index, r.amplitude, r.phase) for r in full[100:]]

    def test_amplitude_phase_pairs_accepted(self, cfg_quiet):
        src = [(0.5, 1.0), (0.25, -2.0)]
        recs = list(A.stream_process(iter(src), cfg_quiet))
        assert recs[0].amplitude == pytest.approx(0.5, abs=1e-12)
        assert recs[1].phase == pytest.approx(-2.0, abs=1e-9)

    def test_requires_bin_alignment(self):
        cfg = A.AcqConfig(f_het_hz=19.7e6)
        with pytest.raises(ValueError):
            list(A.stream_process(iter([1.0]), cfg))

    def test_rejects_bad_worker_args(self, cfg):
        with pytest.raises(ValueError):
            list(A.stream_process(iter([1.0]), cfg, n_workers=0))
        with pytest.raises(ValueError):
            list(A.stream_process(iter([1.0]), cfg, chunk_size=0))


class TestSeriesHelpers:
    def test_records_to_series_time_axis(self):
        recs = [A.WindowRecord(i, float(i), 0.0) for i in range(5)]
        s = A.records_to_series(recs, 0.25)
        assert s.t.tolist() == [0.25, 0.5, 0.75, 1.0, 1.25]

    def test_series_validation(self):
        with pytest.raises(ValueError):
            A.DecaySeries(t=np.array([0.0, 0.0]), y=np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            A.DecaySeries(t=np.array([0.0, 1.0]), y=np.array([1.0, np.nan]))

    def test_boxcar_identity_and_constant(self):
        s = A.DecaySeries(t=np.arange(10.0), y=np.full(10, 3.0))
        assert np.array_equal(A.boxcar_smooth(s, 1).y, s.y)
        assert np.allclose(A.boxcar_smooth(s, 5).y, 3.0)

    def test_boxcar_noise_reduction(self):
        rng = np.random.default_rng(8)
        n, w = 200_000, 9
        s = A.DecaySeries(t=np.arange(float(n)), y=rng.standard_normal(n))
        sm = A.boxcar_smooth(s, w)
        inner = sm.y[w:-w]
        assert np.std(inner) == pytest.approx(1.0 / math.sqrt(w), rel=0.10)

    def test_boxcar_bad_width(self):
        s = A.DecaySeries(t=np.arange(10.0), y=np.ones(10))
        with pytest.raises(ValueError):
            A.boxcar_smooth(s, 4)
        with pytest.raises(ValueError):
            A.boxcar_smooth(s, 11)


class TestFitDecay:
    def test_exponential_recovery(self):
        t = np.linspace(0.0, 250.0, 120)
        y = 0.8 * np.exp(-t / 93.5)
        fit = A.fit_decay(A.DecaySeries(t=t, y=y), model="exponential")
        assert fit.params["tau"] == pytest.approx(93.5, rel=1e-6)
        assert fit.params["a"] == pytest.approx(0.8, rel=1e-6)
        assert fit.one_over_e_time == pytest.approx(93.5, rel=1e-6)

    def test_gaussian_recovery(self):
        t = np.linspace(0.0, 3e-3, 80)
        y = 0.5 * np.exp(-((t / 1.1e-3) ** 2))
        fit = A.fit_decay(A.DecaySeries(t=t, y=y), model="gaussian")
        assert fit.params["tau"] == pytest.approx(1.1e-3, rel=1e-6)
        assert fit.one_over_e_time == pytest.approx(1.1e-3, rel=1e-6)

    def test_stretched_recovery(self):
        t = np.linspace(0.0, 400.0, 200)
        y = 0.6 * np.exp(-((t / 90.0) ** 0.85))
        fit = A.fit_decay(A.DecaySeries(t=t, y=y), model="stretched")
        assert fit.params["tau"] == pytest.approx(90.0, rel=1e-6)
        assert fit.params["beta"] == pytest.approx(0.85, rel=1e-6)

    def test_two_shell_recovery(self):
        t = np.linspace(0.0, 150.0, 300)
        a, w, tp, tm = 0.5, 0.35, 56.1, 168.3
        y = a * ((1 - w) * np.exp(-t / tp) - w * np.exp(-t / tm))
        fit = A.fit_decay(A.DecaySeries(t=t, y=y), model="two_shell_signed")
        assert fit.params["w_minus"] == pytest.approx(w, rel=1e-5)
        assert fit.params["tau_plus"] == pytest.approx(tp, rel=1e-5)
        assert fit.params["tau_minus"] == pytest.approx(tm, rel=1e-5)

    def test_noisy_exponential_tolerance(self):
        rng = np.random.default_rng(12)
        t = np.linspace(0.0, 300.0, 600)
        y = np.exp(-t / 93.5) + rng.normal(0.0, 0.004, len(t))
        y[0] = abs(y[0])
        fit = A.fit_decay(A.DecaySeries(t=t, y=y), model="exponential")
        assert fit.params["tau"] == pytest.approx(93.5, rel=0.02)

    @pytest.mark.parametrize("model,p", [
        ("exponential", np.array([0.8, 93.5])),
        ("gaussian", np.array([0.5, 1.1e-3])),
        ("stretched", np.array([0.6, 90.0, 0.85])),
        ("two_shell_signed", np.array([0.5, 0.35, 56.1, 168.3])),
    ])
    def test_jacobian_matches_finite_differences(self, model, p):
        fn, jac, _ = A._MODELS[model]
        tmax = 3e-3 if model == "gaussian" else 200.0
        t = np.linspace(tmax / 50, tmax, 40)
        Jan = jac(t, p)
        Jfd = np.empty_like(Jan)
        for j in range(len(p)):
            h = 1e-7 * max(abs(p[j]), 1e-12)
            pp = p.copy()
            pm = p.copy()
            pp[j] += h
            pm[j] -= h
            Jfd[:, j] = (fn(t, pp) - fn(t, pm)) / (2 * h)
        scale = np.max(np.abs(Jan), axis=0)
        err = np.max(np.abs(Jan - Jfd), axis=0) / np.maximum(scale, 1e-12)
        assert np.max(err) < 1e-6

    def test_two_shell_one_over_e_without_crossing_depth(self):
        # window too short for the curve to fall to y0/e
        t = np.linspace(0.0, 5.0, 40)
        assert math.isnan(A._one_over_e_time(
            "two_shell_signed", np.array([0.5, 0.35, 56.1, 168.3]), t))

    def test_input_validation(self):
        s = A.DecaySeries(t=np.arange(4.0), y=np.ones(4))
        with pytest.raises(ValueError):
            A.fit_decay(s)
        t = np.arange(10.0)
        with pytest.raises(ValueError):
            A.fit_decay(A.DecaySeries(t=t, y=-np.exp(-t)))
        with pytest.raises(ValueError):
            A.fit_decay(A.DecaySeries(t=t, y=np.exp(-t)), model="sinc")


class TestSpectrum:
    def _tone_series(self, a, sigma, seed=5, n=4096):
        rng = np.random.default_rng(seed)
        t = np.arange(n) / n
        y = a * np.cos(2 * np.pi * 200 * t) + rng.normal(0.0, sigma, n)
        return A.DecaySeries(t=t, y=y)

    def test_peak_location(self):
        freq, mag, snr = A.spectrum_of_series(self._tone_series(1.0, 0.01))
        assert freq[int(np.argmax(mag))] == pytest.approx(200.0)

    def test_snr_scales_with_amplitude(self):
        _, _, snr1 = A.spectrum_of_series(self._tone_series(1.0, 0.1))
        _, _, snr2 = A.spectrum_of_series(self._tone_series(100.0, 0.1))
        assert snr2 / snr1 == pytest.approx(100.0, rel=0.15)

    def test_all_zero_series(self):
        s = A.DecaySeries(t=np.arange(64.0), y=np.zeros(64))
        _, _, snr = A.spectrum_of_series(s)
        assert snr == 0.0

    def test_nonuniform_grid_rejected(self):
        t = np.array([0.0, 1.0, 2.5, 3.0])
        with pytest.raises(ValueError):
            A.spectrum_of_series(A.DecaySeries(t=t, y=np.ones(4)))


class TestArtifacts:
    def _records(self, n=50, seed=6):
        rng = np.random.default_rng(seed)
        return [A.WindowRecord(i, float(a), float(p)) for i, (a, p)
                in enumerate(zip(rng.uniform(0, 2, n),
                                 rng.uniform(-np.pi, np.pi, n)))]

    def test_window_log_round_trip(self, tmp_path):
        recs = self._records()
        path = tmp_path / "w.fcwr"
        A.write_window_log(path, recs)
        back = A.read_window_log(path)
        assert back == recs
        assert A.record_digest(back) == A.record_digest(recs)

    def test_window_log_bad_magic(self, tmp_path):
        path = tmp_path / "w.fcwr"
        path.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(A.ArtifactFormatError):
            A.read_window_log(path)

    def test_window_log_bad_version(self, tmp_path):
        path = tmp_path / "w.fcwr"
        path.write_bytes(A.WINDOW_LOG_MAGIC + (99).to_bytes(2, "little"))
        with pytest.raises(A.ArtifactFormatError):
            A.read_window_log(path)

    def test_window_log_truncated(self, tmp_path):
        recs = self._records(3)
        path = tmp_path / "w.fcwr"
        A.write_window_log(path, recs)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(A.ArtifactFormatError):
            A.read_window_log(path)

    def test_series_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        s = A.DecaySeries(t=np.sort(rng.uniform(0, 10, 20)),
                          y=rng.standard_normal(20))
        path = tmp_path / "s.csv"
        A.write_series_csv(path, s)
        back = A.read_series_csv(path)
        assert np.array_equal(back.t, s.t)
        assert np.array_equal(back.y, s.y)

    def test_series_csv_bad_header(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("time,val\n0.0,1.0\n")
        with pytest.raises(A.ArtifactFormatError):
            A.read_series_csv(path)
