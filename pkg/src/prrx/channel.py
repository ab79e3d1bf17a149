"""Linear fiber link: chromatic dispersion, first-order PMD, Jones mixing, ASE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import unitary_group

from .sigkit import DispersionSpec, DualPolFrame, disperse

#: 0.1 nm at 1550 nm, in Hz
REFERENCE_BANDWIDTH = 12.49e9


@dataclass(frozen=True)
class LinkConfig:
    """Link parameters.

    ``jones_seed=None`` means no polarization rotation (back-to-back) and
    ``osnr_db=inf`` disables noise loading.
    """

    total_dispersion: float = 0.0  # ps/nm
    jones_seed: int | None = None
    dgd: float = 0.0  # ps
    osnr_db: float = math.inf
    center_wavelength: float = 1550.0  # nm
    noise_seed: int = 0

    def __post_init__(self):
        if math.isnan(self.osnr_db) or self.osnr_db == -math.inf:
            raise ValueError("osnr_db must be a number or +inf")
        if self.total_dispersion < 0:
            raise ValueError("total_dispersion must be >= 0")
        if self.dgd < 0:
            raise ValueError("dgd must be >= 0")

    @property
    def dispersion(self) -> DispersionSpec:
        return DispersionSpec(self.total_dispersion, self.center_wavelength)


def random_unitary_jones(seed: int | None) -> np.ndarray:
    """Haar-distributed 2x2 unitary; identity for ``seed=None``."""
    if seed is None:
        return np.eye(2, dtype=np.complex128)
    return np.asarray(unitary_group.rvs(2, random_state=np.random.default_rng(seed)),
                      dtype=np.complex128)


def _dgd_transfer(n: int, sample_rate: float, dgd_ps: float) -> np.ndarray:
    f = np.fft.fftfreq(n, 1.0 / sample_rate)
    half = 0.5 * dgd_ps * 1e-12
    return np.vstack([np.exp(-2j * np.pi * f * half), np.exp(2j * np.pi * f * half)])


def propagate_array(field: np.ndarray, cfg: LinkConfig, sample_rate: float,
                    jones: np.ndarray | None = None) -> np.ndarray:
    """Noiseless link on a ``(2, n)`` array: CD, then DGD, then Jones."""
    out = disperse(field, cfg.dispersion, sample_rate)
    if cfg.dgd > 0:
        out = np.fft.ifft(np.fft.fft(out, axis=-1) * _dgd_transfer(out.shape[-1], sample_rate, cfg.dgd),
                          axis=-1)
    J = random_unitary_jones(cfg.jones_seed) if jones is None else jones
    return J @ out


def propagate(tx: DualPolFrame, cfg: LinkConfig) -> DualPolFrame:
    out = propagate_array(tx.to_array(), cfg, tx.sample_rate)
    return DualPolFrame.from_array(out, tx.sample_rate, tx.x.t0)


def invert_link(rx: DualPolFrame, cfg: LinkConfig) -> DualPolFrame:
    """Exact inverse of :func:`propagate` (Jones, DGD, then dispersion)."""
    J = random_unitary_jones(cfg.jones_seed)
    out = J.conj().T @ rx.to_array()
    if cfg.dgd > 0:
        out = np.fft.ifft(np.fft.fft(out, axis=-1) / _dgd_transfer(out.shape[-1], rx.sample_rate, cfg.dgd),
                          axis=-1)
    out = disperse(out, cfg.dispersion.negated(), rx.sample_rate)
    return DualPolFrame.from_array(out, rx.sample_rate, rx.x.t0)


def ase_noise_psd(signal_power: float, osnr_db: float,
                  reference_bandwidth: float = REFERENCE_BANDWIDTH) -> float:
    """Two-polarization ASE power spectral density (W/Hz) giving ``osnr_db``."""
    return signal_power / (10.0 ** (osnr_db / 10.0) * reference_bandwidth)


def load_ase_noise_array(field: np.ndarray, osnr_db: float, sample_rate: float, seed: int = 0,
                         reference_bandwidth: float = REFERENCE_BANDWIDTH) -> np.ndarray:
    """Add white circular Gaussian ASE to every row of ``field``.

    OSNR is total signal power over the ASE power (both polarizations) in
    ``reference_bandwidth``. Each polarization therefore gets half of the
    two-polarization PSD, whether or not it carries signal.
    """
    if math.isnan(osnr_db) or osnr_db == -math.inf:
        raise ValueError("osnr_db must be finite or +inf")
    field = np.asarray(field, dtype=np.complex128)
    if osnr_db == math.inf:
        return field.copy()
    rows = field if field.ndim == 2 else field[np.newaxis]
    power = float(np.sum(np.mean(np.abs(rows) ** 2, axis=-1)))
    psd_per_pol = 0.5 * ase_noise_psd(power, osnr_db, reference_bandwidth)
    sigma = np.sqrt(0.5 * psd_per_pol * sample_rate)
    rng = np.random.default_rng(seed)
    noise = sigma * (rng.standard_normal(rows.shape) + 1j * rng.standard_normal(rows.shape))
    out = rows + noise
    return out if field.ndim == 2 else out[0]


def load_ase_noise(frame: DualPolFrame, osnr_db: float, seed: int = 0,
                   reference_bandwidth: float = REFERENCE_BANDWIDTH) -> DualPolFrame:
    out = load_ase_noise_array(frame.to_array(), osnr_db, frame.sample_rate, seed, reference_bandwidth)
    return DualPolFrame.from_array(out, frame.sample_rate, frame.x.t0)


def link(tx: DualPolFrame, cfg: LinkConfig) -> DualPolFrame:
    """Full channel: :func:`propagate` followed by receiver-side noise loading."""
    return load_ase_noise(propagate(tx, cfg), cfg.osnr_db, cfg.noise_seed)
