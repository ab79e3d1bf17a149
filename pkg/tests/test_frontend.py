import logging
import math

import numpy as np
import pytest

from prrx.frontend import (FrontendConfig, IntensityQuad, aliased_energy_fraction, detect,
                           detect_array, receive, resample)
from prrx.sigkit import ComplexFrame, DualPolFrame
from prrx.wavio import read_quad, write_quad

FS = 120e9


def test_config_invariants():
    with pytest.raises(ValueError):
        FrontendConfig(element_dispersion=0)
    with pytest.raises(ValueError):
        FrontendConfig(adc_rate=0)
    with pytest.raises(ValueError):
        FrontendConfig(optical_bandwidth=-1)


def test_quad_invariants():
    with pytest.raises(ValueError):
        IntensityQuad(np.ones(3), np.ones(4), None, None, FS)
    with pytest.raises(ValueError):
        IntensityQuad(np.ones(3), -np.ones(3), None, None, FS)
    with pytest.raises(ValueError):
        IntensityQuad(np.ones(3), np.ones(3), np.ones(3), None, FS)


def test_constant_amplitude():
    field = np.full((2, 256), 0.7 * np.exp(0.4j))
    a, b = detect_array(field, FrontendConfig(), FS)
    assert np.allclose(a, 0.49, atol=1e-15)
    assert np.allclose(b, 0.49, atol=1e-12)


def test_energy_equal_but_traces_differ(dual_tx):
    q = detect(dual_tx.field, FrontendConfig())
    for a, b in ((q.a_x, q.b_x), (q.a_y, q.b_y)):
        assert np.sum(b) == pytest.approx(np.sum(a), rel=1e-9)
        assert np.std(a - b) > 0.1 * np.std(a)


def test_noiseless_detection_is_squared_magnitude(dual_tx):
    x = dual_tx.field_array()
    q = detect(dual_tx.field, FrontendConfig())
    rebuilt = np.sqrt(q.a) * np.exp(1j * np.angle(x))
    np.testing.assert_array_max_ulp(np.sqrt(q.a), np.abs(x), maxulp=2)
    np.testing.assert_array_max_ulp(np.abs(rebuilt), np.abs(x), maxulp=2)
    assert np.allclose(rebuilt, x, atol=1e-14)


@pytest.mark.parametrize("phi", [0.3, 1.7, -2.9])
def test_global_phase_invariance(dual_tx, phi):
    cfg = FrontendConfig()
    q0 = detect(dual_tx.field, cfg)
    rot = DualPolFrame.from_array(dual_tx.field_array() * np.exp(1j * phi), dual_tx.config.sample_rate)
    q1 = detect(rot, cfg)
    assert np.max(np.abs(q1.a - q0.a)) < 1e-12
    assert np.max(np.abs(q1.b - q0.b)) < 1e-12


def test_single_polarization_detect(single_tx):
    q = detect(single_tx.field, FrontendConfig())
    assert q.n_polarizations == 1 and q.a.shape == (1, len(q))


def test_electrical_noise_clipped_and_seeded(single_tx):
    cfg = FrontendConfig(electrical_snr_db=3.0, seed=2)
    q1 = detect(single_tx.field, cfg)
    q2 = detect(single_tx.field, cfg)
    assert np.array_equal(q1.a, q2.a)
    assert q1.a.min() >= 0 and q1.b.min() >= 0
    assert not np.allclose(q1.a, detect(single_tx.field, FrontendConfig()).a)


def test_optical_filter_removes_out_of_band():
    n = 1024
    t = np.arange(n) / FS
    field = np.exp(2j * np.pi * FS * 100 / n * t)[None]  # ~11.7 GHz tone
    a, _ = detect_array(field, FrontendConfig(optical_bandwidth=20e9), FS)
    assert np.max(a) < 1e-20
    a, _ = detect_array(field, FrontendConfig(optical_bandwidth=30e9), FS)
    assert np.allclose(a, 1.0)


def _quad(trace):
    return IntensityQuad(trace, trace.copy(), None, None, FS)


def test_resample_identity(rng):
    q = _quad(rng.random(64))
    out = resample(q, FS)
    assert np.array_equal(out.a_x, q.a_x) and out.sample_rate == FS


def test_resample_up_then_down(rng):
    q = _quad(rng.random(256) + 1)
    back = resample(resample(q, 2 * FS), FS)
    assert np.max(np.abs(back.a_x - q.a_x)) < 1e-6


def test_sinusoid_amplitude_preserved():
    n = 1200
    t = np.arange(n) / FS
    trace = 1 + 0.5 * np.cos(2 * np.pi * 10e9 * t)
    out = resample(_quad(trace), 60e9)
    assert out.a_x.size == n // 2
    amp = 2 * np.abs(np.fft.rfft(out.a_x - out.a_x.mean())).max() / out.a_x.size
    assert abs(amp - 0.5) < 1e-3


def test_undersampling_is_reported(dual_tx, caplog):
    q = detect(dual_tx.field, FrontendConfig())
    assert aliased_energy_fraction(q.a_x, q.sample_rate, 60e9) > 1e-6
    with caplog.at_level(logging.WARNING, logger="prrx.frontend"):
        resample(q, 60e9)
    assert any("undersampled" in r.message for r in caplog.records)


def test_bad_ratio_rejected(rng):
    with pytest.raises(ValueError):
        resample(_quad(rng.random(7)), FS / 2)
    with pytest.raises(ValueError):
        resample(_quad(rng.random(8)), FS / math.pi)


def test_receive_samples_at_adc_rate(single_tx):
    q = receive(single_tx.field, FrontendConfig())
    assert q.sample_rate == 60e9 and len(q) == single_tx.config.n_symbols * 2


def test_quad_file_round_trip(tmp_path, dual_tx):
    q = detect(dual_tx.field, FrontendConfig())
    path = write_quad(tmp_path / "quad.f64", q)
    back = read_quad(path)
    assert back.sample_rate == q.sample_rate
    assert np.array_equal(back.a, q.a) and np.array_equal(back.b, q.b)
    single = detect(ComplexFrame(dual_tx.field_array()[0], FS), FrontendConfig())
    assert read_quad(write_quad(tmp_path / "s.f64", single)).n_polarizations == 1
