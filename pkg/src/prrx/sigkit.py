"""Signal containers, unitary spectral transforms and the dispersion operator.

Conventions
-----------
* Spectra use the unitary DFT (``norm="ortho"``), so energies are equal in
  both domains.
* The baseband frequency grid is ``f = fftfreq(n, 1/fs)``; after
  ``fftshift`` it spans ``[-fs/2, fs/2)``.
* Dispersion is applied as ``exp(+j*pi*D*lambda**2/c * f**2)`` with ``D`` the
  accumulated dispersion in s/m (1 ps/nm = 1e-3 s/m). Positive ``D`` is the
  anomalous (standard SMF) sign. The receiver inverts with the same spec, so
  the sign only has to be consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import c as C_LIGHT

PS_PER_NM = 1e-3  # s/m

# out-of-support energy below this (relative) counts as already projected
_SUPPORT_TOL = 1e-24


@dataclass(frozen=True)
class ComplexFrame:
    """Uniformly sampled complex baseband waveform of one polarization."""

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if s.size < 1:
            raise ValueError("frame must contain at least one sample")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2))

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    @property
    def time(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "ComplexFrame":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class DualPolFrame:
    """Pair of frames (x, y) on a shared time base."""

    x: ComplexFrame
    y: ComplexFrame

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("polarizations must have equal length")
        if self.x.sample_rate != self.y.sample_rate or self.x.t0 != self.y.t0:
            raise ValueError("polarizations must share a time base")

    @classmethod
    def from_array(cls, arr: np.ndarray, sample_rate: float, t0: float = 0.0) -> "DualPolFrame":
        arr = np.asarray(arr)
        if arr.shape[0] != 2:
            raise ValueError("expected an array of shape (2, n)")
        return cls(ComplexFrame(arr[0], sample_rate, t0), ComplexFrame(arr[1], sample_rate, t0))

    def to_array(self) -> np.ndarray:
        return np.vstack([self.x.samples, self.y.samples])

    def __len__(self) -> int:
        return len(self.x)

    @property
    def sample_rate(self) -> float:
        return self.x.sample_rate

    @property
    def energy(self) -> float:
        return self.x.energy + self.y.energy

    def map(self, fn) -> "DualPolFrame":
        return DualPolFrame(fn(self.x), fn(self.y))


@dataclass(frozen=True)
class DispersionSpec:
    """Accumulated chromatic dispersion of a purely quadratic-phase element.

    Parameters
    ----------
    dispersion : float
        Total D*L in ps/nm.
    center_wavelength : float
        Carrier wavelength in nm.
    """

    dispersion: float
    center_wavelength: float = 1550.0
    sign_convention: str = "anomalous-positive"

    def __post_init__(self):
        if not 1200.0 <= self.center_wavelength <= 1700.0:
            raise ValueError("center_wavelength must lie in [1200, 1700] nm")
        if not np.isfinite(self.dispersion):
            raise ValueError("dispersion must be finite")
        if self.sign_convention != "anomalous-positive":
            raise ValueError(f"unsupported sign convention {self.sign_convention!r}")

    def negated(self) -> "DispersionSpec":
        return replace(self, dispersion=-self.dispersion)

    @property
    def phase_coefficient(self) -> float:
        """pi * D * lambda^2 / c in s^2; spectral phase is this times f^2."""
        lam = self.center_wavelength * 1e-9
        return np.pi * self.dispersion * PS_PER_NM * lam**2 / C_LIGHT

    def group_delay_span(self, bandwidth: float) -> float:
        """Spread of group delay (s) across a band of the given width (Hz)."""
        return abs(self.phase_coefficient * bandwidth / np.pi)

    def transfer(self, n: int, sample_rate: float) -> np.ndarray:
        """Transfer function on the unshifted ``fftfreq`` grid."""
        f = np.fft.fftfreq(n, 1.0 / sample_rate)
        return np.exp(1j * self.phase_coefficient * f**2)


@dataclass(frozen=True)
class SpectralSupport:
    """Rectangular pass band ``[low, high]`` in Hz relative to baseband center."""

    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("support requires low < high")

    @classmethod
    def nyquist(cls, baud: float, rolloff: float) -> "SpectralSupport":
        half = 0.5 * (1.0 + rolloff) * baud
        return cls(-half, half)

    @property
    def width(self) -> float:
        return self.high - self.low

    def check(self, sample_rate: float) -> None:
        if self.low < -sample_rate / 2 or self.high > sample_rate / 2:
            raise ValueError(
                f"support [{self.low:g}, {self.high:g}] Hz exceeds the "
                f"+/-{sample_rate / 2:g} Hz band of the sampling grid"
            )

    def mask(self, n: int, sample_rate: float) -> np.ndarray:
        self.check(sample_rate)
        f = np.fft.fftfreq(n, 1.0 / sample_rate)
        return (f >= self.low) & (f <= self.high)


@dataclass(frozen=True)
class ComplexSpectrum:
    """Unitary spectrum, stored in shifted order alongside its frequency grid."""

    values: np.ndarray
    frequencies: np.ndarray = field(repr=False)

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


def frequency_grid(n: int, sample_rate: float) -> np.ndarray:
    """Shifted baseband grid covering ``[-fs/2, fs/2)``."""
    return np.fft.fftshift(np.fft.fftfreq(n, 1.0 / sample_rate))


def forward_spectrum(frame: ComplexFrame) -> ComplexSpectrum:
    if len(frame) == 0:
        raise ValueError("zero-length frame")
    values = np.fft.fftshift(np.fft.fft(frame.samples, norm="ortho"))
    return ComplexSpectrum(values, frequency_grid(len(frame), frame.sample_rate))


def inverse_spectrum(spectrum: ComplexSpectrum, sample_rate: float, t0: float = 0.0) -> ComplexFrame:
    samples = np.fft.ifft(np.fft.ifftshift(spectrum.values), norm="ortho")
    return ComplexFrame(samples, sample_rate, t0)


def disperse(samples: np.ndarray, spec: DispersionSpec, sample_rate: float) -> np.ndarray:
    """Array-level dispersion along the last axis; identity when D == 0."""
    samples = np.asarray(samples, dtype=np.complex128)
    if spec.dispersion == 0.0:
        return samples.copy()
    h = spec.transfer(samples.shape[-1], sample_rate)
    return np.fft.ifft(np.fft.fft(samples, axis=-1) * h, axis=-1)


def apply_dispersion(frame: ComplexFrame, spec: DispersionSpec) -> ComplexFrame:
    return frame.with_samples(disperse(frame.samples, spec, frame.sample_rate))


def invert_dispersion(frame: ComplexFrame, spec: DispersionSpec) -> ComplexFrame:
    return apply_dispersion(frame, spec.negated())


def project_support(samples: np.ndarray, support: SpectralSupport, sample_rate: float) -> np.ndarray:
    """Zero the spectrum outside ``support`` along the last axis.

    Input that already lies in the support (to rounding) is returned
    unchanged, which makes the projection exactly idempotent.
    """
    samples = np.asarray(samples, dtype=np.complex128)
    spec = np.fft.fft(samples, axis=-1)
    mask = support.mask(samples.shape[-1], sample_rate)
    outside = float(np.sum(np.abs(spec[..., ~mask]) ** 2))
    total = float(np.sum(np.abs(spec) ** 2))
    if outside <= _SUPPORT_TOL * max(total, np.finfo(float).tiny):
        return samples.copy()
    spec[..., ~mask] = 0.0
    return np.fft.ifft(spec, axis=-1)


def project_spectral_support(frame: ComplexFrame, support: SpectralSupport) -> ComplexFrame:
    return frame.with_samples(project_support(frame.samples, support, frame.sample_rate))
