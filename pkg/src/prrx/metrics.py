"""BER/EVM scoring, phase-error traces and QPSK theory curves."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc, log_ndtr

from .channel import REFERENCE_BANDWIDTH
from .txgen import ModFormat, PilotMask, mod_format

#: the rotation group shared by square QAM formats
_ROTATIONS = np.array([1, 1j, -1, -1j])


@dataclass(frozen=True)
class BerReport:
    bit_errors: int
    bits_counted: int
    per_polarization: tuple[tuple[int, int], ...]
    rotations: tuple[int, ...] = ()
    swapped: bool = False

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_counted if self.bits_counted else math.nan

    def as_dict(self) -> dict:
        return {
            "ber": self.ber,
            "bit_errors": self.bit_errors,
            "bits_counted": self.bits_counted,
            "per_polarization": [
                {"bit_errors": e, "bits_counted": n, "ber": e / n if n else math.nan}
                for e, n in self.per_polarization
            ],
            "rotations_quarter_turns": list(self.rotations),
            "polarization_swapped": self.swapped,
        }


def _as_symbols(received: np.ndarray, fmt: ModFormat) -> np.ndarray:
    arr = np.asarray(received)
    if np.iscomplexobj(arr):
        return np.atleast_2d(arr)
    # hard bits of shape (n_pol, n, bps) or (n, bps)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    return fmt.modulate(arr)


def score_ber(received, reference_bits: np.ndarray, pilots=None,
              fmt: ModFormat | None = None, resolve_ambiguity: bool = True) -> BerReport:
    """Hard-decision BER with pilot symbols excluded.

    ``received`` is either complex symbols ``(n_pol, n)`` or decided bits
    ``(n_pol, n, bps)``. Each polarization may carry one of the four
    quarter-turn rotations and the two tributaries may be swapped; the
    minimum over that group is reported.
    """
    fmt = fmt or mod_format("QPSK")
    ref = np.asarray(reference_bits)
    if ref.ndim == 2:
        ref = ref[np.newaxis]
    sym = _as_symbols(received, fmt)
    n_pol, n = sym.shape
    if ref.shape[:2] != (n_pol, n):
        raise ValueError(f"received {sym.shape} and reference {ref.shape[:2]} differ in length")
    if pilots is None:
        masks = [np.ones(n, dtype=bool)] * n_pol
    else:
        pilots = (pilots,) if isinstance(pilots, PilotMask) else tuple(pilots)
        masks = [p.data_mask(n) for p in pilots]
        if len(masks) == 1:
            masks = masks * n_pol

    def errors(row: np.ndarray, p: int) -> list[int]:
        out = []
        rots = _ROTATIONS if resolve_ambiguity else _ROTATIONS[:1]
        for r in rots:
            bits = fmt.demodulate(row * r)
            out.append(int(np.count_nonzero(bits[masks[p]] != ref[p][masks[p]])))
        return out

    orders = [tuple(range(n_pol))]
    if resolve_ambiguity and n_pol == 2:
        orders.append((1, 0))
    best = None
    for order in orders:
        per, rots = [], []
        for p in range(n_pol):
            errs = errors(sym[order[p]], p)
            k = int(np.argmin(errs))
            per.append((errs[k], int(masks[p].sum()) * fmt.bits_per_symbol))
            rots.append(k)
        total = sum(e for e, _ in per)
        if best is None or total < best.bit_errors:
            best = BerReport(total, sum(c for _, c in per), tuple(per), tuple(rots), order != orders[0])
    return best


def q_function(x):
    return 0.5 * erfc(np.asarray(x) / math.sqrt(2.0))


def osnr_to_snr(osnr_db, baud: float, n_polarizations: int,
                reference_bandwidth: float = REFERENCE_BANDWIDTH):
    """Linear per-symbol SNR, ``OSNR * 2 * B_ref / (n_pol * Rs)``."""
    osnr = 10.0 ** (np.asarray(osnr_db, dtype=float) / 10.0)
    return osnr * 2.0 * reference_bandwidth / (n_polarizations * baud)


def qpsk_theory_ber(osnr_db, baud: float = 30e9, n_polarizations: int = 2,
                    reference_bandwidth: float = REFERENCE_BANDWIDTH):
    if np.any(~np.isfinite(np.asarray(osnr_db, dtype=float)) & (np.asarray(osnr_db) != np.inf)):
        raise ValueError("osnr_db must be finite or +inf")
    ber = q_function(np.sqrt(osnr_to_snr(osnr_db, baud, n_polarizations, reference_bandwidth)))
    return float(ber) if np.ndim(ber) == 0 else ber


def theory_osnr_for_ber(target: float, baud: float = 30e9, n_polarizations: int = 2) -> float:
    """OSNR (dB) at which the QPSK theory curve crosses ``target``."""
    if not 0 < target < 0.5:
        raise ValueError("target BER must lie in (0, 0.5)")

    def gap(o):
        return float(log_ndtr(-np.sqrt(osnr_to_snr(o, baud, n_polarizations)))) - math.log(target)

    return brentq(gap, -30.0, 60.0, xtol=1e-10)


def monte_carlo_qpsk_ber(snr: float, n_symbols: int, seed: int = 0) -> float:
    """Seeded AWGN simulation of Gray QPSK at linear per-symbol SNR ``snr``."""
    fmt = mod_format("QPSK")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n_symbols, 2), dtype=np.int8)
    x = fmt.modulate(bits)
    sigma = math.sqrt(0.5 / snr)
    y = x + sigma * (rng.standard_normal(n_symbols) + 1j * rng.standard_normal(n_symbols))
    return float(np.mean(fmt.demodulate(y) != bits))


def osnr_at_ber(osnr_db, ber, target: float) -> float:
    """Interpolate a measured curve in (OSNR, log10 BER) at ``target``.

    Points with zero BER are dropped. Raises if the curve does not bracket
    the target.
    """
    o = np.asarray(osnr_db, dtype=float)
    b = np.asarray(ber, dtype=float)
    order = np.argsort(o)
    o, b = o[order], b[order]
    keep = b > 0
    o, lb = o[keep], np.log10(b[keep])
    lt = math.log10(target)
    for i in range(len(o) - 1):
        hi, lo = lb[i], lb[i + 1]
        if (hi - lt) * (lo - lt) <= 0 and hi != lo:
            return float(o[i] + (lt - hi) * (o[i + 1] - o[i]) / (lo - hi))
    raise ValueError(f"BER curve does not bracket {target:g}")


def osnr_penalty(osnr_db, ber, target: float = 2e-2, baud: float = 30e9,
                 n_polarizations: int = 2) -> float:
    return osnr_at_ber(osnr_db, ber, target) - theory_osnr_for_ber(target, baud, n_polarizations)


@dataclass(frozen=True)
class PhaseErrorTrace:
    values: np.ndarray
    global_phase: float

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def _samples(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.complex128)


def phase_error_trace(recovered, reference) -> PhaseErrorTrace:
    """Wrapped per-sample phase of ``recovered`` relative to ``reference``.

    The global phase that maximizes the correlation magnitude is removed
    first.
    """
    r, s = _samples(recovered), _samples(reference)
    if r.shape != s.shape:
        raise ValueError("recovered and reference differ in length")
    if not np.any(s):
        raise ValueError("reference has zero energy")
    phi = float(np.angle(np.vdot(s, r)))
    diff = np.angle(r * np.exp(-1j * phi) * np.conj(s))
    # np.angle returns [-pi, pi]; map -pi onto pi
    diff = np.where(diff <= -np.pi, diff + 2 * np.pi, diff)
    return PhaseErrorTrace(diff, phi)


def evm(symbols: np.ndarray, reference: np.ndarray) -> float:
    """RMS error vector magnitude relative to the reference RMS (linear)."""
    y = np.asarray(symbols).ravel()
    x = np.asarray(reference).ravel()
    return float(np.sqrt(np.mean(np.abs(y - x) ** 2) / np.mean(np.abs(x) ** 2)))


def evm_db(symbols, reference) -> float:
    return 20.0 * math.log10(max(evm(symbols, reference), 1e-300))


def cluster_separation(symbols: np.ndarray, fmt: ModFormat | None = None) -> float:
    """Minimum centroid distance over the largest within-cluster std.

    Clusters are formed by nearest-point decisions; a missing cluster
    gives 0.
    """
    fmt = fmt or mod_format("QPSK")
    y = np.asarray(symbols).ravel()
    idx = np.argmin(np.abs(y[:, np.newaxis] - fmt.constellation), axis=-1)
    cents, spreads = [], []
    for k in range(fmt.order):
        members = y[idx == k]
        if members.size < 2:
            return 0.0
        c = members.mean()
        cents.append(c)
        spreads.append(math.sqrt(np.mean(np.abs(members - c) ** 2)))
    cents = np.asarray(cents)
    dist = np.abs(cents[:, np.newaxis] - cents[np.newaxis, :])
    dist[np.diag_indices_from(dist)] = np.inf
    return float(dist.min() / max(spreads))


def estimate_osnr(field: np.ndarray, sample_rate: float, signal_bandwidth: float,
                  reference_bandwidth: float = REFERENCE_BANDWIDTH) -> float:
    """Periodogram OSNR estimate (dB) of a noisy field ``(n_pol, n)``.

    The white ASE floor is read from the band outside
    ``+/- signal_bandwidth/2``, then subtracted from the total power.
    """
    rows = np.atleast_2d(field)
    n = rows.shape[-1]
    f = np.abs(np.fft.fftfreq(n, 1.0 / sample_rate))
    psd = np.abs(np.fft.fft(rows, axis=-1)) ** 2 / (n * sample_rate)  # W/Hz per row
    out = f > 0.5 * signal_bandwidth
    if not out.any():
        raise ValueError("no noise-only band to measure the ASE floor")
    per_row = np.mean(psd[:, out], axis=-1)
    total = float(np.sum(np.mean(np.abs(rows) ** 2, axis=-1)))
    signal = total - float(per_row.sum()) * sample_rate
    # a single captured row stands for one of two equally noisy polarizations
    noise_psd = float(per_row.sum()) * 2.0 / rows.shape[0]
    return 10.0 * math.log10(signal / (noise_psd * reference_bandwidth))


# --------------------------------------------------------------------------
# CSV export


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12)) if math.isfinite(v) else str(v)
    return v


def write_trace_csv(path, traces) -> Path:
    """``iteration, block, mean_a_err_db``; one trace per block."""
    rows = ((i + 1, k, float(v)) for k, t in enumerate(traces) for i, v in enumerate(t))
    return write_csv(path, ["iteration", "block", "mean_a_err_db"], rows)


def write_constellation_csv(path, symbols, limit: int | None = None) -> Path:
    sym = np.atleast_2d(symbols)
    rows = []
    for p, row in enumerate(sym):
        for k, v in enumerate(row[:limit]):
            rows.append((p, k, float(v.real), float(v.imag)))
    return write_csv(path, ["polarization", "index", "re", "im"], rows)


def write_ber_table(path, rows) -> Path:
    """``rows`` of ``(osnr_db, pilot_fraction, ber, theory_ber)``."""
    return write_csv(path, ["osnr_db", "pilot_fraction", "ber", "theory_ber"], rows)
