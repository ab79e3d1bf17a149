import math

import numpy as np
import pytest
from scipy.stats import norm

from prrx.metrics import (BerReport, cluster_separation, evm, evm_db, monte_carlo_qpsk_ber,
                          osnr_at_ber, osnr_penalty, osnr_to_snr, phase_error_trace,
                          qpsk_theory_ber, score_ber, theory_osnr_for_ber, write_ber_table)
from prrx.txgen import PilotMask, mod_format

QPSK = mod_format("QPSK")

# OSNR (dB, 0.1 nm) where dual-pol 30-Gbaud QPSK theory reaches BER 2e-2,
# from the inverse Gaussian tail: SNR = isf(2e-2)^2, OSNR = SNR * 2 * 30e9 / (2 * 12.49e9)
ANCHOR_2E2 = 10.0 * math.log10(norm.isf(2e-2) ** 2 * 2 * 30e9 / (2 * 12.49e9))


def bits_and_symbols(n=500, n_pol=2, seed=0):
    bits = np.random.default_rng(seed).integers(0, 2, (n_pol, n, 2), dtype=np.int8)
    return bits, QPSK.modulate(bits)


def test_identical_streams():
    bits, sym = bits_and_symbols()
    r = score_ber(sym, bits)
    assert r.ber == 0 and r.bits_counted == 2000
    assert score_ber(bits, bits).ber == 0


def test_one_flipped_bit_in_a_thousand():
    bits, _ = bits_and_symbols(500, 1)
    rx = bits.copy()
    rx[0, 17, 1] ^= 1
    r = score_ber(rx, bits)
    assert r.bit_errors == 1 and r.bits_counted == 1000
    assert r.ber == 1e-3


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotation_resolved(k):
    bits, sym = bits_and_symbols()
    r = score_ber(sym * 1j**k, bits)
    assert r.ber == 0 and r.rotations == ((4 - k) % 4,) * 2
    assert score_ber(sym * 1j**k, bits, resolve_ambiguity=False).ber > 0.3


def test_polarization_swap_resolved():
    bits, sym = bits_and_symbols()
    r = score_ber(sym[::-1] * np.array([[1], [1j]]), bits)
    assert r.ber == 0 and r.swapped


def test_ambiguity_group_only():
    # a conjugated stream is not in the declared group, so it is not forgiven
    bits, sym = bits_and_symbols()
    assert score_ber(np.conj(sym), bits).ber > 0.2


def test_pilots_excluded():
    bits, sym = bits_and_symbols(100, 1)
    pos = np.arange(0, 100, 10)
    bad = sym.copy()
    bad[0, pos] *= -1
    r = score_ber(bad, bits, PilotMask(pos, sym[0, pos]))
    assert r.bit_errors == 0 and r.bits_counted == 180


def test_length_mismatch():
    bits, sym = bits_and_symbols()
    with pytest.raises(ValueError):
        score_ber(sym[:, :-1], bits)


def test_report_dict():
    r = BerReport(3, 300, ((1, 150), (2, 150)))
    d = r.as_dict()
    assert d["ber"] == 0.01 and d["per_polarization"][1]["ber"] == pytest.approx(2 / 150)


def test_theory_limits_and_monotonicity():
    assert qpsk_theory_ber(math.inf) == 0.0
    grid = np.arange(0.0, 25.0, 0.5)
    ber = qpsk_theory_ber(grid)
    assert np.all(qpsk_theory_ber(grid + 3) < ber)
    assert np.all(np.diff(ber) < 0)
    with pytest.raises(ValueError):
        qpsk_theory_ber(math.nan)


def test_snr_convention():
    # dual pol at the reference baud: SNR = OSNR * 2 * 12.49 / 60
    assert osnr_to_snr(0.0, 30e9, 2) == pytest.approx(2 * 12.49 / 60)
    assert osnr_to_snr(10.0, 30e9, 1) == pytest.approx(10 * 2 * 12.49 / 30)


def test_theory_anchor():
    assert ANCHOR_2E2 == pytest.approx(10.0565, abs=1e-3)
    assert theory_osnr_for_ber(2e-2) == pytest.approx(ANCHOR_2E2, abs=1e-8)
    assert qpsk_theory_ber(ANCHOR_2E2) == pytest.approx(2e-2, rel=1e-9)


@pytest.mark.parametrize("target_ber", [1e-1, 3e-2, 1e-2, 3e-3, 1e-3])
def test_theory_matches_monte_carlo(target_ber):
    snr = norm.isf(target_ber) ** 2
    sim = monte_carlo_qpsk_ber(snr, 1_000_000, seed=17)
    theory = qpsk_theory_ber(10 * math.log10(snr * 60e9 / (2 * 12.49e9)))
    assert theory == pytest.approx(target_ber, rel=1e-9)
    assert abs(sim - theory) / theory < 0.10


def test_interpolated_penalty():
    o = np.array([8.0, 10.0, 12.0, 14.0])
    shifted = qpsk_theory_ber(o - 2.0)
    assert osnr_at_ber(o, shifted, 2e-2) == pytest.approx(ANCHOR_2E2 + 2.0, abs=0.05)
    assert osnr_penalty(o, shifted) == pytest.approx(2.0, abs=0.05)
    with pytest.raises(ValueError):
        osnr_at_ber(o, np.full(4, 1e-4), 2e-2)


def test_phase_trace_removes_global_phase(rng):
    s = rng.standard_normal(256) + 1j * rng.standard_normal(256)
    t = phase_error_trace(s * np.exp(0.3j), s)
    assert np.max(np.abs(t.values)) < 1e-12
    assert t.global_phase == pytest.approx(0.3)


def test_phase_trace_of_a_ramp(rng):
    s = np.exp(1j * rng.uniform(0, 2 * np.pi, 256))
    k = np.arange(256)
    ramp = 2e-3 * k
    t = phase_error_trace(s * np.exp(1j * ramp), s)
    assert np.allclose(t.values, ramp - ramp.mean(), atol=1e-6)
    assert np.all((t.values > -np.pi) & (t.values <= np.pi))


def test_phase_trace_errors():
    with pytest.raises(ValueError):
        phase_error_trace(np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        phase_error_trace(np.ones(4), np.zeros(4))


def test_evm_and_clusters(rng):
    _, sym = bits_and_symbols(4000, 1, 3)
    noisy = sym + 0.05 * (rng.standard_normal(sym.shape) + 1j * rng.standard_normal(sym.shape))
    assert evm(sym, sym) == 0
    assert evm_db(noisy, sym) == pytest.approx(20 * math.log10(0.05 * math.sqrt(2)), abs=0.3)
    assert cluster_separation(noisy) > 3
    assert cluster_separation(np.full(100, 1 + 1j)) == 0.0


def test_ber_table(tmp_path):
    path = write_ber_table(tmp_path / "t.csv", [(10.0, 0.1, 0.03, 0.02), (12.0, 0.1, 0.01, 0.005)])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("osnr_db") and len(lines) == 3
