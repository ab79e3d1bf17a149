import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prrx.sigkit import (C_LIGHT, ComplexFrame, DispersionSpec, DualPolFrame, SpectralSupport,
                         apply_dispersion, disperse, forward_spectrum, frequency_grid,
                         inverse_spectrum, invert_dispersion, project_spectral_support,
                         project_support)
from prrx.txgen import TxConfig, pulse_shape

FS = 120e9

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
complex_arrays = arrays(np.complex128, st.integers(1, 300), elements=st.complex_numbers(max_magnitude=1e3))


def frame(x, fs=FS):
    return ComplexFrame(np.asarray(x, dtype=complex), fs)


def test_frame_validation():
    with pytest.raises(ValueError):
        ComplexFrame(np.zeros(0), FS)
    with pytest.raises(ValueError):
        ComplexFrame(np.zeros(4), 0.0)
    with pytest.raises(ValueError):
        ComplexFrame(np.zeros((2, 2)), FS)
    f = frame([1, 1j, -1])
    assert f.energy == pytest.approx(3.0)
    assert f.time[1] == pytest.approx(1 / FS)


def test_dual_pol_frame_requires_shared_timebase():
    with pytest.raises(ValueError):
        DualPolFrame(frame([1, 2]), frame([1, 2, 3]))
    with pytest.raises(ValueError):
        DualPolFrame(frame([1, 2]), frame([1, 2], 60e9))
    d = DualPolFrame.from_array(np.ones((2, 5)), FS)
    assert d.to_array().shape == (2, 5) and d.energy == pytest.approx(10)


def test_dispersion_spec_validation():
    with pytest.raises(ValueError):
        DispersionSpec(10, center_wavelength=1000)
    with pytest.raises(ValueError):
        DispersionSpec(np.inf)
    with pytest.raises(ValueError):
        DispersionSpec(10, sign_convention="normal-positive")


def test_phase_coefficient_value():
    # pi * D * lambda^2 / c for 1 ps/nm at 1550 nm
    expected = np.pi * 1e-3 * (1550e-9) ** 2 / C_LIGHT
    assert DispersionSpec(1.0).phase_coefficient == pytest.approx(expected, rel=1e-15)
    h = DispersionSpec(650).transfer(256, FS)
    assert np.allclose(np.abs(h), 1.0, atol=1e-15)


def test_delta_has_flat_spectrum():
    x = np.zeros(64, complex)
    x[0] = 1
    spec = forward_spectrum(frame(x))
    assert np.allclose(np.abs(spec.values), 1 / np.sqrt(64), atol=1e-15)


def test_forward_spectrum_matches_direct_dft(rng):
    n = 256
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    k = np.arange(n)
    direct = np.exp(-2j * np.pi * np.outer(k, k) / n) @ x / np.sqrt(n)
    spec = forward_spectrum(frame(x))
    assert np.allclose(spec.values, np.fft.fftshift(direct), atol=1e-9)
    assert np.array_equal(spec.frequencies, frequency_grid(n, FS))
    assert spec.frequencies[0] == -FS / 2


def test_spectrum_round_trip(rng):
    x = rng.standard_normal(500) + 1j * rng.standard_normal(500)
    back = inverse_spectrum(forward_spectrum(frame(x)), FS)
    assert np.linalg.norm(back.samples - x) / np.linalg.norm(x) < 1e-10


@settings(max_examples=60, deadline=None)
@given(complex_arrays)
def test_parseval(x):
    assert forward_spectrum(frame(x)).energy == pytest.approx(frame(x).energy, rel=1e-10, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(complex_arrays, st.floats(-1e4, 1e4, allow_nan=False))
def test_dispersion_unitary_and_invertible(x, d):
    spec = DispersionSpec(d)
    f = frame(x)
    y = apply_dispersion(f, spec)
    assert y.energy == pytest.approx(f.energy, rel=1e-10, abs=1e-12)
    back = invert_dispersion(y, spec)
    assert np.linalg.norm(back.samples - x) <= 1e-9 * max(np.linalg.norm(x), 1e-300)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.floats(-5e3, 5e3, allow_nan=False), st.integers(0, 2**32 - 1))
def test_dispersion_linear(n, d, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal(n) + 1j * r.standard_normal(n)
    b = r.standard_normal(n) + 1j * r.standard_normal(n)
    spec = DispersionSpec(d)
    lhs = disperse(a + b, spec, FS)
    rhs = disperse(a, spec, FS) + disperse(b, spec, FS)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(a + b)


def test_zero_dispersion_is_bit_exact(rng):
    x = rng.standard_normal(77) + 1j * rng.standard_normal(77)
    assert np.array_equal(apply_dispersion(frame(x), DispersionSpec(0)).samples, x)
    assert np.array_equal(invert_dispersion(frame(x), DispersionSpec(0)).samples, x)


def test_round_trip_at_link_dispersion(rng):
    x = rng.standard_normal(4096) + 1j * rng.standard_normal(4096)
    spec = DispersionSpec(8921)
    back = invert_dispersion(apply_dispersion(frame(x), spec), spec)
    assert np.linalg.norm(back.samples - x) / np.linalg.norm(x) < 1e-8


def _energy_window(p):
    """Shortest circular window holding 99% of the energy, in samples."""
    e = np.abs(p) ** 2
    e = e / e.sum()
    n = e.size
    ee = np.concatenate([e, e])
    c = np.concatenate([[0], np.cumsum(ee)])
    best = n
    for start in range(n):
        stop = np.searchsorted(c, c[start] + 0.99, side="left")
        best = min(best, stop - start)
    return best


def test_element_spreads_a_pulse_over_more_than_eight_symbols():
    cfg = TxConfig(samples_per_symbol=8, n_symbols=256)
    sym = np.zeros(256, complex)
    sym[0] = 1
    pulse = pulse_shape(sym, cfg).frame.samples
    spread = disperse(pulse, DispersionSpec(650), cfg.sample_rate)
    # oracle: direct evaluation of the frequency-domain product, no FFT helpers
    n = pulse.size
    k = np.arange(n)
    W = np.exp(-2j * np.pi * np.outer(k, k) / n)
    f = np.fft.fftfreq(n, 1 / cfg.sample_rate)
    oracle = (W.conj() @ (np.exp(1j * DispersionSpec(650).phase_coefficient * f**2) * (W @ pulse))) / n
    assert np.allclose(spread, oracle, atol=1e-9)
    before = _energy_window(pulse) / cfg.samples_per_symbol
    after = _energy_window(oracle) / cfg.samples_per_symbol
    assert after > 8
    assert after > before + 2


def test_projection_keeps_inband_signal():
    cfg = TxConfig(samples_per_symbol=4, n_symbols=256)
    rng = np.random.default_rng(0)
    sym = np.exp(1j * np.pi / 2 * rng.integers(0, 4, 256))
    x = pulse_shape(sym, cfg).frame
    sup = SpectralSupport.nyquist(cfg.baud, cfg.rolloff)
    y = project_spectral_support(x, sup)
    assert np.max(np.abs(y.samples - x.samples)) < 1e-10


def test_projection_of_white_noise_halves_energy(rng):
    x = rng.standard_normal(8192) + 1j * rng.standard_normal(8192)
    y = project_support(x, SpectralSupport(-FS / 4, FS / 4), FS)
    ratio = np.sum(np.abs(y) ** 2) / np.sum(np.abs(x) ** 2)
    assert abs(ratio - 0.5) < 0.05


@settings(max_examples=40, deadline=None)
@given(complex_arrays, st.floats(0.05, 0.95), st.floats(-0.9, 0.9))
def test_projection_idempotent_and_nonexpansive(x, width, center):
    lo = max(-0.5, center / 2 - width / 2) * FS
    hi = min(0.5, center / 2 + width / 2) * FS
    if not lo < hi:
        return
    sup = SpectralSupport(lo, hi)
    once = project_support(x, sup, FS)
    twice = project_support(once, sup, FS)
    assert np.array_equal(once, twice)
    assert np.sum(np.abs(once) ** 2) <= np.sum(np.abs(x) ** 2) * (1 + 1e-12) + 1e-12


def test_support_must_fit_sampling_band():
    with pytest.raises(ValueError):
        SpectralSupport(1, -1)
    with pytest.raises(ValueError):
        SpectralSupport(-40e9, 40e9).check(60e9)
    assert SpectralSupport.nyquist(30e9, 0.1).width == pytest.approx(33e9)
