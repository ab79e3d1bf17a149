"""Dual-polarization, pilot-bearing Nyquist QPSK/16-QAM transmitter."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .sigkit import ComplexFrame, DualPolFrame


@dataclass(frozen=True)
class ModFormat:
    """Gray-coded constellation with unit average energy.

    ``constellation[i]`` carries the bit label ``labels[i]`` (MSB first).
    """

    name: str
    constellation: np.ndarray
    labels: np.ndarray
    bits_per_symbol: int

    @property
    def order(self) -> int:
        return self.constellation.size

    def modulate(self, bits: np.ndarray) -> np.ndarray:
        """Map a ``(..., n, bits_per_symbol)`` bit array to symbols."""
        bits = np.asarray(bits, dtype=np.int64)
        weights = 1 << np.arange(self.bits_per_symbol - 1, -1, -1)
        index = bits @ weights
        lookup = np.empty(self.order, dtype=np.complex128)
        lookup[self.labels] = self.constellation
        return lookup[index]

    def decide(self, symbols: np.ndarray) -> np.ndarray:
        """Nearest constellation point for each symbol."""
        symbols = np.asarray(symbols)
        idx = np.argmin(np.abs(symbols[..., np.newaxis] - self.constellation), axis=-1)
        return self.constellation[idx]

    def demodulate(self, symbols: np.ndarray) -> np.ndarray:
        """Hard-decision Gray demapping to a ``(..., n, bits_per_symbol)`` array."""
        symbols = np.asarray(symbols)
        idx = np.argmin(np.abs(symbols[..., np.newaxis] - self.constellation), axis=-1)
        label = self.labels[idx]
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return ((label[..., np.newaxis] >> shifts) & 1).astype(np.int8)


def _gray(n: int) -> np.ndarray:
    k = np.arange(n)
    return k ^ (k >> 1)


@lru_cache(maxsize=None)
def mod_format(name: str) -> ModFormat:
    key = name.upper().replace("-", "")
    if key == "QPSK":
        # bit 0 -> sign of I, bit 1 -> sign of Q
        labels = np.array([0b00, 0b01, 0b10, 0b11])
        pts = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)
        return ModFormat("QPSK", pts, labels, 2)
    if key == "QAM16":
        levels = np.array([-3, -1, 1, 3])
        g = _gray(4)
        pts, labels = [], []
        for i, li in enumerate(levels):
            for q, lq in enumerate(levels):
                pts.append(li + 1j * lq)
                labels.append((g[i] << 2) | g[q])
        pts = np.asarray(pts) / np.sqrt(10.0)
        return ModFormat("QAM16", pts, np.asarray(labels), 4)
    raise ValueError(f"unknown modulation format {name!r}")


@dataclass(frozen=True)
class TxConfig:
    baud: float = 30e9
    samples_per_symbol: int = 4
    rolloff: float = 0.1
    n_symbols: int = 16384
    pilot_fraction: float = 0.1
    seed: int = 0
    modulation: str = "QPSK"
    n_polarizations: int = 2

    def __post_init__(self):
        if not self.baud > 0:
            raise ValueError("baud must be positive")
        if self.samples_per_symbol < 2:
            raise ValueError("samples_per_symbol must be >= 2")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ValueError("rolloff must lie in [0, 1]")
        if self.n_symbols < 1:
            raise ValueError("n_symbols must be positive")
        if not 0.0 <= self.pilot_fraction <= 0.5:
            raise ValueError("pilot_fraction must lie in [0, 0.5]")
        if self.n_polarizations not in (1, 2):
            raise ValueError("n_polarizations must be 1 or 2")

    @property
    def sample_rate(self) -> float:
        return self.baud * self.samples_per_symbol

    @property
    def format(self) -> ModFormat:
        return mod_format(self.modulation)


@dataclass(frozen=True)
class PilotMask:
    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        if pos.size > 1 and np.any(np.diff(pos) <= 0):
            raise ValueError("pilot positions must be strictly increasing")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.complex128))

    def __len__(self) -> int:
        return self.positions.size

    def data_mask(self, n_symbols: int) -> np.ndarray:
        """Boolean mask of the non-pilot symbols."""
        mask = np.ones(n_symbols, dtype=bool)
        mask[self.positions] = False
        return mask


def pilot_positions(n_symbols: int, pilot_fraction: float) -> np.ndarray:
    """Uniform grid: every ``floor(1/fraction)``-th symbol, starting at 0."""
    count = int(round(pilot_fraction * n_symbols))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    step = int(np.floor(1.0 / pilot_fraction + 1e-9))
    if step < 2 or (count - 1) * step >= n_symbols:
        raise ValueError(
            f"pilot_fraction={pilot_fraction} gives a degenerate grid for {n_symbols} symbols"
        )
    return np.arange(count, dtype=np.int64) * step


@dataclass(frozen=True)
class TxSymbols:
    """Ground truth of one transmission.

    ``symbols`` has shape ``(n_pol, n_symbols)`` and ``bits`` shape
    ``(n_pol, n_symbols, bits_per_symbol)``; pilot symbols also carry bits
    but are excluded from BER scoring.
    """

    symbols: np.ndarray
    bits: np.ndarray
    pilots: tuple[PilotMask, ...]
    format: ModFormat


def generate_symbols(cfg: TxConfig, fmt: ModFormat | None = None) -> TxSymbols:
    fmt = fmt or cfg.format
    rng = np.random.default_rng(cfg.seed)
    positions = pilot_positions(cfg.n_symbols, cfg.pilot_fraction)
    n_pol = cfg.n_polarizations
    bits = rng.integers(0, 2, size=(n_pol, cfg.n_symbols, fmt.bits_per_symbol), dtype=np.int8)
    symbols = fmt.modulate(bits)
    pilots = tuple(PilotMask(positions, symbols[p, positions]) for p in range(n_pol))
    return TxSymbols(symbols, bits, pilots, fmt)


def raised_cosine_response(n: int, sample_rate: float, baud: float, rolloff: float) -> np.ndarray:
    """Raised-cosine frequency response with unit DC gain, on the fftfreq grid."""
    f = np.abs(np.fft.fftfreq(n, 1.0 / sample_rate))
    f1 = 0.5 * (1.0 - rolloff) * baud
    f2 = 0.5 * (1.0 + rolloff) * baud
    h = np.zeros(n)
    h[f <= f1] = 1.0
    if rolloff > 0:
        band = (f > f1) & (f <= f2)
        h[band] = 0.5 * (1.0 + np.cos(np.pi / (rolloff * baud) * (f[band] - f1)))
    else:
        # a bin exactly on the band edge is shared by +-baud/2
        h[np.isclose(f, f1, rtol=1e-12, atol=0)] = 0.5
    return h


@dataclass(frozen=True)
class ShapedSignal:
    """Shaped waveform plus the scalar that maps a symbol to its center sample."""

    frame: ComplexFrame
    symbol_gain: float


def pulse_shape(symbols: np.ndarray, cfg: TxConfig) -> ShapedSignal:
    """Upsample and raised-cosine filter over the (circular) record.

    The output is normalized to unit average power. Because the pulse is
    Nyquist, ``frame.samples[k * sps] == symbol_gain * symbols[k]``.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    if symbols.size == 0:
        raise ValueError("no symbols to shape")
    sps = cfg.samples_per_symbol
    n = symbols.size * sps
    up = np.zeros(n, dtype=np.complex128)
    up[::sps] = symbols
    h = raised_cosine_response(n, cfg.sample_rate, cfg.baud, cfg.rolloff)
    shaped = np.fft.ifft(np.fft.fft(up) * h)
    # impulse-response peak of the filter is mean(h)
    peak = float(np.mean(h))
    scale = 1.0 / np.sqrt(np.mean(np.abs(shaped) ** 2))
    return ShapedSignal(ComplexFrame(shaped * scale, cfg.sample_rate), peak * scale)


def sample_symbols(samples: np.ndarray, samples_per_symbol: int, gain: float = 1.0,
                   offset: int = 0) -> np.ndarray:
    """Take the symbol-center samples; matched detection for Nyquist pulses."""
    return np.asarray(samples)[..., offset::samples_per_symbol] / gain


@dataclass(frozen=True)
class TxSignal:
    """Transmitted waveform together with its ground truth."""

    config: TxConfig
    truth: TxSymbols
    field: DualPolFrame | ComplexFrame
    symbol_gain: float

    @property
    def n_polarizations(self) -> int:
        return self.config.n_polarizations

    def field_array(self) -> np.ndarray:
        if isinstance(self.field, DualPolFrame):
            return self.field.to_array()
        return self.field.samples[np.newaxis]


def transmit(cfg: TxConfig) -> TxSignal:
    truth = generate_symbols(cfg)
    shaped = [pulse_shape(truth.symbols[p], cfg) for p in range(cfg.n_polarizations)]
    # a common gain keeps both tributaries on one scale
    gain = float(np.mean([s.symbol_gain for s in shaped]))
    frames = [s.frame.with_samples(s.frame.samples * gain / s.symbol_gain) for s in shaped]
    field = DualPolFrame(*frames) if cfg.n_polarizations == 2 else frames[0]
    return TxSignal(cfg, truth, field, gain)


def truth_to_dict(truth: TxSymbols) -> dict:
    return {
        "format": truth.format.name,
        "bits": truth.bits.astype(int).tolist(),
        "pilots": [
            {"positions": p.positions.tolist(),
             "values_re": p.values.real.tolist(),
             "values_im": p.values.imag.tolist()}
            for p in truth.pilots
        ],
    }


def truth_from_dict(d: dict) -> TxSymbols:
    fmt = mod_format(d["format"])
    bits = np.asarray(d["bits"], dtype=np.int8)
    pilots = tuple(PilotMask(p["positions"], np.asarray(p["values_re"]) + 1j * np.asarray(p["values_im"]))
                   for p in d["pilots"])
    return TxSymbols(fmt.modulate(bits), bits, pilots, fmt)
