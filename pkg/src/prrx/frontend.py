"""Optical front end: PBS, per-polarization dispersive tap, photodetection, ADC."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from .sigkit import DispersionSpec, DualPolFrame, SpectralSupport, disperse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrontendConfig:
    """Receiver front end.

    ``optical_bandwidth`` is the width of an ideal rectangular optical
    band-pass in front of the PBS (``None`` disables it). It removes
    out-of-band ASE that would otherwise make the two intensity
    measurements mutually inconsistent.
    """

    element_dispersion: float = 650.0  # ps/nm
    adc_rate: float = 60e9
    electrical_snr_db: float = math.inf
    seed: int = 0
    center_wavelength: float = 1550.0
    optical_bandwidth: float | None = None

    def __post_init__(self):
        if self.element_dispersion == 0:
            raise ValueError("element_dispersion must be non-zero; a zero element makes b == a")
        if not self.adc_rate > 0:
            raise ValueError("adc_rate must be positive")
        if math.isnan(self.electrical_snr_db):
            raise ValueError("electrical_snr_db must be a number")
        if self.optical_bandwidth is not None and not self.optical_bandwidth > 0:
            raise ValueError("optical_bandwidth must be positive")

    @property
    def element(self) -> DispersionSpec:
        return DispersionSpec(self.element_dispersion, self.center_wavelength)


@dataclass(frozen=True)
class IntensityQuad:
    """The four detected photocurrents ``(a_x, b_x, a_y, b_y)``.

    ``a`` is measured before the dispersive element and ``b`` after it.
    Single-polarization captures leave ``a_y``/``b_y`` as ``None``.
    """

    a_x: np.ndarray
    b_x: np.ndarray
    a_y: np.ndarray | None
    b_y: np.ndarray | None
    sample_rate: float

    def __post_init__(self):
        chans = [c for c in (self.a_x, self.b_x, self.a_y, self.b_y) if c is not None]
        n = len(chans[0])
        for c in chans:
            if len(c) != n:
                raise ValueError("all intensity traces must have equal length")
            if np.any(np.asarray(c) < 0):
                raise ValueError("intensities must be non-negative")
        if (self.a_y is None) != (self.b_y is None):
            raise ValueError("a_y and b_y must both be present or both absent")

    @property
    def n_polarizations(self) -> int:
        return 1 if self.a_y is None else 2

    def __len__(self) -> int:
        return len(self.a_x)

    @property
    def a(self) -> np.ndarray:
        """Pre-element intensities, shape ``(n_pol, n)``."""
        return np.vstack([self.a_x] if self.a_y is None else [self.a_x, self.a_y])

    @property
    def b(self) -> np.ndarray:
        return np.vstack([self.b_x] if self.b_y is None else [self.b_x, self.b_y])

    @classmethod
    def from_arrays(cls, a: np.ndarray, b: np.ndarray, sample_rate: float) -> "IntensityQuad":
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        if a.shape[0] == 1:
            return cls(a[0], b[0], None, None, sample_rate)
        return cls(a[0], b[0], a[1], b[1], sample_rate)

    def channels(self) -> dict[str, np.ndarray]:
        out = {"a_x": self.a_x, "b_x": self.b_x}
        if self.a_y is not None:
            out.update(a_y=self.a_y, b_y=self.b_y)
        return out


def optical_filter(field: np.ndarray, bandwidth: float, sample_rate: float) -> np.ndarray:
    support = SpectralSupport(-bandwidth / 2, bandwidth / 2)
    spec = np.fft.fft(field, axis=-1)
    spec[..., ~support.mask(field.shape[-1], sample_rate)] = 0.0
    return np.fft.ifft(spec, axis=-1)


def detect_array(field: np.ndarray, cfg: FrontendConfig, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Square-law detection of ``field`` (``(n_pol, n)``) before and after the element."""
    field = np.atleast_2d(np.asarray(field, dtype=np.complex128))
    if cfg.optical_bandwidth is not None:
        field = optical_filter(field, cfg.optical_bandwidth, sample_rate)
    a = np.abs(field) ** 2
    b = np.abs(disperse(field, cfg.element, sample_rate)) ** 2
    if cfg.electrical_snr_db != math.inf:
        rng = np.random.default_rng(cfg.seed)
        # noise std relative to the mean photocurrent of each trace
        for trace in (a, b):
            level = np.mean(trace, axis=-1, keepdims=True)
            sigma = level * 10.0 ** (-cfg.electrical_snr_db / 20.0)
            trace += sigma * rng.standard_normal(trace.shape)
        np.clip(a, 0.0, None, out=a)
        np.clip(b, 0.0, None, out=b)
    return a, b


def detect(rx, cfg: FrontendConfig) -> IntensityQuad:
    """Accepts a :class:`DualPolFrame` or a single :class:`ComplexFrame`."""
    if isinstance(rx, DualPolFrame):
        field, fs = rx.to_array(), rx.sample_rate
    else:
        field, fs = rx.samples[np.newaxis], rx.sample_rate
    a, b = detect_array(field, cfg, fs)
    return IntensityQuad.from_arrays(a, b, fs)


def aliased_energy_fraction(trace: np.ndarray, source_rate: float, target_rate: float) -> float:
    """Fraction of the AC energy of ``trace`` above ``target_rate / 2``."""
    trace = np.asarray(trace, dtype=float)
    spec = np.abs(np.fft.fft(trace - trace.mean())) ** 2
    f = np.abs(np.fft.fftfreq(trace.size, 1.0 / source_rate))
    total = spec.sum()
    if total == 0:
        return 0.0
    return float(spec[f > target_rate / 2].sum() / total)


def _resample_trace(trace: np.ndarray, ratio: Fraction) -> np.ndarray:
    up, down = ratio.numerator, ratio.denominator
    if up == 1:
        # the ADC samples instantaneously; no anti-alias filter in front of it
        return trace[::down].copy()
    n_out = trace.size * up // down
    if down == 1:
        spec = np.fft.fft(trace)
        n = trace.size
        padded = np.zeros(n_out, dtype=complex)
        half = n // 2
        padded[:half] = spec[:half]
        padded[n_out - (n - half):] = spec[half:]
        if n % 2 == 0:
            # split the Nyquist bin so the result stays real
            padded[half] = 0.5 * spec[half]
            padded[n_out - half] = 0.5 * spec[half]
        return np.real(np.fft.ifft(padded)) * up
    return resample_poly(trace, up, down)


def resample(quad: IntensityQuad, target_rate: float) -> IntensityQuad:
    """Resample every trace to ``target_rate``.

    Upsampling is band-limited (FFT interpolation of the periodic record).
    Integer-factor downsampling models an ideal sampling oscilloscope by
    taking every ``k``-th sample. The intensity of a field occupying
    bandwidth ``B`` spans ``2B`` and can exceed the new Nyquist rate. That
    aliased fraction is logged as a warning and never silently dropped.
    """
    if target_rate == quad.sample_rate:
        return replace(quad)
    ratio = Fraction(target_rate / quad.sample_rate).limit_denominator(1000)
    if abs(float(ratio) * quad.sample_rate - target_rate) > 1e-6 * target_rate:
        raise ValueError("target rate is not a rational multiple of the source rate")
    if (len(quad) * ratio.numerator) % ratio.denominator:
        raise ValueError("record length does not resample to an integer number of samples")
    if ratio < 1:
        alias = max(aliased_energy_fraction(t, quad.sample_rate, target_rate)
                    for t in quad.channels().values())
        if alias > 1e-6:
            log.warning("intensity undersampled at %.3g Sa/s: %.2e of AC energy aliases",
                        target_rate, alias)
    out = {k: np.clip(_resample_trace(np.asarray(v, float), ratio), 0.0, None)
           for k, v in quad.channels().items()}
    return IntensityQuad(out["a_x"], out["b_x"], out.get("a_y"), out.get("b_y"), target_rate)


def receive(rx, cfg: FrontendConfig) -> IntensityQuad:
    """Detect at the simulation rate, then sample at ``cfg.adc_rate``."""
    return resample(detect(rx, cfg), cfg.adc_rate)
