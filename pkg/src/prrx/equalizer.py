"""Post-retrieval DSP: CD compensation, data-aided 2x2 MIMO and pilot feedback.

Channel model (symbol-spaced, circular over the record)::

    y_p[k] = sum_q sum_m taps[p, q, m] * x_q[k - (m - c)],   c = n_taps // 2

so ``taps[:, :, c]`` is the memoryless part. ``y`` are the symbol-center
samples of the CD-compensated retrieved field and ``x`` the transmitted
symbols. The response includes the absolute field scale.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .frontend import FrontendConfig, IntensityQuad
from .metrics import evm_db, score_ber
from .retrieval import (BlockProblem, ChannelPilotSchedule, GsConfig, block_layout,
                        random_phase_field, retrieve_stream, run_block)
from .sigkit import DispersionSpec, DualPolFrame, disperse
from .txgen import PilotMask, TxSymbols

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EqualizerConfig:
    """Equalizer and outer-loop settings.

    ``regularization=None`` selects MMSE with the noise level taken from the
    estimation residual; ``0`` is zero-forcing. ``ridge`` is the relative
    Tikhonov term of the least-squares tap fit. Passes after the first run
    at most ``refine_iterations`` and stop at ``refine_epsilon`` (``None``
    keeps the retrieval epsilon).
    """

    n_taps: int = 20
    n_outer_iterations: int = 5
    bulk_cd: float = 0.0  # ps/nm
    regularization: float | None = None
    ridge: float = 1e-9
    center_wavelength: float = 1550.0
    phase_block: int = 1024  # symbols per linear-phase fit
    jones_search: bool = True
    search_points: int = 48
    search_iterations: int = 100
    refine_iterations: int = 200
    refine_epsilon: float | None = 1e-4
    pilot_guard: int | None = None

    def __post_init__(self):
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")
        if self.n_outer_iterations < 1:
            raise ValueError("n_outer_iterations must be >= 1")
        if self.bulk_cd < 0:
            raise ValueError("bulk_cd must be >= 0")
        if self.regularization is not None and self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.refine_epsilon is not None and not self.refine_epsilon > 0:
            raise ValueError("refine_epsilon must be positive")
        if self.phase_block < 2:
            raise ValueError("phase_block must be >= 2")

    @property
    def bulk_dispersion(self) -> DispersionSpec:
        return DispersionSpec(self.bulk_cd, self.center_wavelength)


@dataclass(frozen=True)
class ChannelEstimate:
    taps: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.complex128)
        if t.ndim != 3 or t.shape[0] != t.shape[1] or t.shape[2] < 1:
            raise ValueError("taps must have shape (n_pol, n_pol, n_taps)")
        if not np.all(np.isfinite(t)):
            raise ValueError("taps must be finite")
        object.__setattr__(self, "taps", t)

    @property
    def n_pol(self) -> int:
        return self.taps.shape[0]

    @property
    def n_taps(self) -> int:
        return self.taps.shape[2]

    @property
    def center(self) -> int:
        return self.n_taps // 2

    @classmethod
    def from_matrix(cls, matrix, n_taps: int = 1) -> "ChannelEstimate":
        m = np.atleast_2d(np.asarray(matrix, dtype=np.complex128))
        taps = np.zeros(m.shape + (n_taps,), dtype=np.complex128)
        taps[:, :, n_taps // 2] = m
        return cls(taps)

    @classmethod
    def identity(cls, n_pol: int = 2, n_taps: int = 1) -> "ChannelEstimate":
        return cls.from_matrix(np.eye(n_pol), n_taps)

    def response(self, nu) -> np.ndarray:
        """``H(nu)`` of shape ``(n_pol, n_pol, len(nu))``; ``nu`` in cycles/symbol."""
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        delays = np.arange(self.n_taps) - self.center
        phasor = np.exp(-2j * np.pi * np.outer(delays, nu))
        return np.einsum("pqm,mk->pqk", self.taps, phasor)

    def response_hz(self, f, baud: float) -> np.ndarray:
        return self.response(np.asarray(f, dtype=float) / baud)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Circular channel output ``H * x`` for symbols ``(n_pol, n)``."""
        x = np.atleast_2d(x)
        y = np.zeros(x.shape, dtype=np.complex128)
        for m in range(self.n_taps):
            y += self.taps[:, :, m] @ np.roll(x, m - self.center, axis=-1)
        return y

    def to_dict(self) -> dict:
        return {
            "n_pol": self.n_pol,
            "n_taps": self.n_taps,
            "center": self.center,
            "residual": self.residual,
            "taps_re": self.taps.real.tolist(),
            "taps_im": self.taps.imag.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelEstimate":
        return cls(np.asarray(d["taps_re"]) + 1j * np.asarray(d["taps_im"]), d.get("residual", 0.0))

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


def compensate_cd_array(field: np.ndarray, bulk: DispersionSpec, sample_rate: float) -> np.ndarray:
    return disperse(field, bulk.negated(), sample_rate)


def compensate_cd(field: DualPolFrame, bulk_cd: float | DispersionSpec,
                  center_wavelength: float = 1550.0) -> DualPolFrame:
    """Undo the bulk fiber dispersion on both polarizations."""
    spec = bulk_cd if isinstance(bulk_cd, DispersionSpec) else DispersionSpec(bulk_cd, center_wavelength)
    out = compensate_cd_array(field.to_array(), spec, field.sample_rate)
    return DualPolFrame.from_array(out, field.sample_rate, field.x.t0)


def _regressors(x: np.ndarray, rows: np.ndarray, n_taps: int) -> np.ndarray:
    """``Phi[k, q*n_taps + m] = x_q[rows[k] - (m - c)]`` (circular)."""
    n_pol, n = x.shape
    c = n_taps // 2
    delays = np.arange(n_taps) - c
    idx = (rows[:, np.newaxis] - delays[np.newaxis, :]) % n
    return np.concatenate([x[q][idx] for q in range(n_pol)], axis=1)


def estimate_channel(received: np.ndarray, reference: np.ndarray, positions=None,
                     n_taps: int = 20, ridge: float = 1e-9) -> ChannelEstimate:
    """Least-squares MIMO FIR fit of ``received = H * reference``.

    Only output samples at ``positions`` enter the fit; the FIR memory of
    each of those samples must be known in ``reference``. ``ridge`` is
    relative to the regressor energy per unknown.
    """
    y = np.atleast_2d(np.asarray(received, dtype=np.complex128))
    x = np.atleast_2d(np.asarray(reference, dtype=np.complex128))
    if y.shape != x.shape:
        raise ValueError("received and reference must have the same shape")
    n_pol, n = y.shape
    rows = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
    if rows.size < 4 * n_taps:
        raise ValueError(f"{rows.size} known symbols cannot identify {n_taps} taps (need {4 * n_taps})")
    phi = _regressors(x, rows, n_taps)
    gram = phi.conj().T @ phi
    lam = ridge * np.real(np.trace(gram)) / gram.shape[0]
    rhs = phi.conj().T @ y[:, rows].T
    sol = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs)  # (n_pol*n_taps, n_pol)
    taps = sol.T.reshape(n_pol, n_pol, n_taps)
    fit = (phi @ sol).T
    target = y[:, rows]
    denom = float(np.sum(np.abs(target) ** 2))
    residual = float(np.sum(np.abs(target - fit) ** 2) / denom) if denom > 0 else 0.0
    return ChannelEstimate(taps, residual)


def equalize(received: np.ndarray, est: ChannelEstimate, regularization: float | None = None) -> np.ndarray:
    """Frequency-domain (regularized) inverse of ``est`` over the circular record.

    ``regularization=None`` uses the estimate's residual as the MMSE noise
    term; ``0`` is zero-forcing and raises on a singular response.
    """
    y = np.atleast_2d(np.asarray(received, dtype=np.complex128))
    n_pol, n = y.shape
    if est.n_pol != n_pol:
        raise ValueError("estimate and signal differ in polarization count")
    H = np.moveaxis(est.response(np.fft.fftfreq(n)), -1, 0)  # (n, p, q)
    Y = np.fft.fft(y, axis=-1).T[:, :, np.newaxis]
    gram = np.conj(np.swapaxes(H, 1, 2)) @ H
    power = float(np.mean(np.real(np.trace(gram, axis1=1, axis2=2)))) / n_pol
    reg = est.residual if regularization is None else regularization
    if reg == 0:
        s = np.linalg.svd(H, compute_uv=False)
        if np.any(s[:, -1] <= 1e-12 * max(float(s[:, 0].max()), 1e-300)):
            raise ValueError("channel response is singular; use a non-zero regularization")
        X = np.linalg.solve(H, Y)
    else:
        X = np.linalg.solve(gram + reg * power * np.eye(n_pol), np.conj(np.swapaxes(H, 1, 2)) @ Y)
    return np.fft.ifft(X[:, :, 0].T, axis=-1)


def remove_linear_phase(symbols: np.ndarray, pilots, block: int = 1024):
    """Per-polarization pilot-based fit of ``offset + slope * k`` per block.

    Returns ``(corrected, phase)`` where ``phase`` is the removed phase.
    Blocks with fewer than two pilots get only an offset; none, nothing.
    """
    z = np.atleast_2d(np.asarray(symbols, dtype=np.complex128)).copy()
    n_pol, n = z.shape
    pilots = (pilots,) if isinstance(pilots, PilotMask) else tuple(pilots)
    phase = np.zeros(z.shape)
    for p in range(n_pol):
        mask = pilots[min(p, len(pilots) - 1)]
        for start in range(0, n, block):
            stop = min(start + block, n)
            sel = (mask.positions >= start) & (mask.positions < stop)
            pos = mask.positions[sel]
            if pos.size == 0:
                continue
            err = np.unwrap(np.angle(z[p, pos] * np.conj(mask.values[sel])))
            k = np.arange(start, stop)
            if pos.size >= 2:
                slope, offset = np.polyfit(pos - start, err, 1)
                phase[p, start:stop] = offset + slope * (k - start)
            else:
                phase[p, start:stop] = err[0]
    return z * np.exp(-1j * phase), phase


def feedback_pilots(est: ChannelEstimate, pilots, sample_rate: float, baud: float,
                    bulk: DispersionSpec | None = None, weight: float = 1.0,
                    guard: int | None = None) -> ChannelPilotSchedule:
    """Pilot constraint for the next retrieval pass, ``p = H s``.

    Transmitted pilots are mapped through the estimated channel and the bulk
    dispersion into the retrieval domain.
    """
    pilots = (pilots,) if isinstance(pilots, PilotMask) else tuple(pilots)
    sps = int(round(sample_rate / baud))
    positions = pilots[0].positions * sps
    targets = np.vstack([p.values for p in pilots])
    if est.n_taps == 1 and (bulk is None or bulk.dispersion == 0):
        channel = est.taps[:, :, 0]
    else:
        def channel(f, _est=est, _baud=baud):
            return _est.response_hz(f, _baud)
    return ChannelPilotSchedule(positions, targets, channel, sample_rate, bulk, weight, guard, baud)


def received_pilot_targets(est: ChannelEstimate, pilots) -> np.ndarray:
    """Expected received field at pilot positions for a dispersion-free,
    memoryless link: ``H0 @ s_pilot``."""
    pilots = (pilots,) if isinstance(pilots, PilotMask) else tuple(pilots)
    return est.taps[:, :, est.center] @ np.vstack([p.values for p in pilots])


# --------------------------------------------------------------------------
# bootstrap


def jones_from_angles(theta: float, phi: float) -> np.ndarray:
    """Unitary representative of a Jones matrix modulo per-output phases."""
    c, s = math.cos(theta), math.sin(theta)
    e = complex(math.cos(phi), math.sin(phi))
    return np.array([[c, s * e], [-s, c * e]], dtype=np.complex128)


def _sphere_points(n: int) -> list[tuple[float, float]]:
    golden = math.pi * (3.0 - math.sqrt(5.0))
    pts = []
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        pts.append((0.5 * math.acos(z), (i * golden) % (2 * math.pi)))
    return pts


@dataclass(frozen=True)
class JonesSearchResult:
    jones: np.ndarray
    score_db: float
    evaluations: int


def search_jones(quad: IntensityQuad, element: DispersionSpec, gs: GsConfig, pilots,
                 baud: float, scale: float, bulk: DispersionSpec | None = None,
                 points: int = 48, iterations: int = 100, guard: int | None = None,
                 refine: bool = True) -> JonesSearchResult:
    """Pick the bootstrap Jones matrix by how well the first block retrieves.

    Each candidate defines a pilot constraint ``scale * J``; the first block
    is iterated briefly from a fixed start and scored by its mean intensity
    error. A grid on the Poincare sphere is refined with Nelder-Mead.
    """
    fs = quad.sample_rate
    a, b = quad.a, quad.b
    idx, keep, _ = block_layout(a.shape[-1], gs)[0]
    short = replace(gs, max_iterations=iterations, epsilon=1e-12, max_attempts=1)
    start = random_phase_field(a[:, idx].shape, np.random.default_rng([gs.seed, 7919]))
    pilots = (pilots,) if isinstance(pilots, PilotMask) else tuple(pilots)
    targets = np.vstack([p.values for p in pilots])
    positions = pilots[0].positions * int(round(fs / baud))
    evals = 0

    def score(angles) -> float:
        nonlocal evals
        evals += 1
        J = scale * jones_from_angles(*angles)
        sched = ChannelPilotSchedule(positions, targets, J, fs, bulk, gs.pilot_weight, guard, baud)
        problem = BlockProblem(a[:, idx], b[:, idx], element, fs, gs.spectral_support,
                               sched.for_block(idx, gs.block_length), keep)
        res = run_block(problem, short, start, np.random.default_rng(gs.seed))
        return res.best_db

    grid = [(score(p), p) for p in _sphere_points(points)]
    best_db, best = min(grid, key=lambda t: t[0])
    if refine:
        step = 0.5 * math.sqrt(4 * math.pi / points)
        simplex = np.array([best, (best[0] + step / 2, best[1]), (best[0], best[1] + step)])
        opt = minimize(score, np.array(best), method="Nelder-Mead",
                       options={"initial_simplex": simplex, "maxfev": 30, "xatol": 1e-3, "fatol": 0.05})
        if opt.fun < best_db:
            best_db, best = float(opt.fun), tuple(opt.x)
    log.info("jones search: %.1f dB after %d evaluations", best_db, evals)
    return JonesSearchResult(jones_from_angles(*best), best_db, evals)


# --------------------------------------------------------------------------
# outer loop


@dataclass
class OuterLoopResult:
    symbols: np.ndarray
    estimate: ChannelEstimate
    field: np.ndarray
    diagnostics: list[dict] = field(default_factory=list)
    traces: list[list[list[float]]] = field(default_factory=list)
    estimates: list[ChannelEstimate] = field(default_factory=list)

    @property
    def ber(self) -> float:
        return self.diagnostics[-1]["ber"]


def _symbol_rate_samples(field: np.ndarray, sps: int) -> np.ndarray:
    return field[:, ::sps]


def raised_cosine_peak(rolloff: float) -> float:
    """Symbol-center amplitude of a unit-power raised-cosine symbol train."""
    return 1.0 / math.sqrt(1.0 - rolloff / 4.0)


def outer_loop(quad: IntensityQuad, truth: TxSymbols, baud: float, frontend: FrontendConfig,
               gs: GsConfig, cfg: EqualizerConfig, rolloff: float = 0.1,
               workers: int = 1) -> OuterLoopResult:
    """Alternate retrieval and data-aided channel estimation.

    Pass 1 bootstraps the pilots with a fixed matrix: the scaled identity,
    or the result of :func:`search_jones` for two polarizations. Each pass
    retrieves, compensates bulk CD, estimates a memoryless channel from
    pilots, decides, fits the full FIR channel on pilots plus decisions,
    equalizes, removes residual linear phase and feeds ``H`` back.
    """
    fs = quad.sample_rate
    sps = int(round(fs / baud))
    if abs(sps * baud - fs) > 1e-6 * fs:
        raise ValueError("ADC rate must be an integer multiple of the baud rate")
    n_pol = quad.n_polarizations
    if truth.symbols.shape[0] != n_pol:
        raise ValueError("reference and capture differ in polarization count")
    fmt = truth.format
    pilots = truth.pilots
    pos = pilots[0].positions
    if pos.size < 4:
        raise ValueError("the outer loop needs pilot symbols")
    bulk = cfg.bulk_dispersion
    element = frontend.element
    gain = float(np.mean(quad.a)) ** 0.5 * raised_cosine_peak(rolloff)

    if n_pol == 2 and cfg.jones_search:
        found = search_jones(quad, element, gs, pilots, baud, gain, bulk,
                             cfg.search_points, cfg.search_iterations, cfg.pilot_guard)
        J0 = found.jones
    else:
        J0 = np.eye(n_pol, dtype=np.complex128)
    est = ChannelEstimate.from_matrix(gain * J0)
    schedule = feedback_pilots(est, pilots, fs, baud, bulk, gs.pilot_weight, cfg.pilot_guard)
    result = OuterLoopResult(np.zeros(truth.symbols.shape, complex), est, np.zeros((n_pol, quad.a.shape[-1])))

    prev = None
    known = np.zeros_like(truth.symbols)
    known[:, pos] = truth.symbols[:, pos]
    for it in range(cfg.n_outer_iterations):
        n_iter = gs.max_iterations if it == 0 else cfg.refine_iterations
        pass_gs = gs if it == 0 or cfg.refine_epsilon is None else replace(gs, epsilon=cfg.refine_epsilon)
        stream = retrieve_stream(quad.a, quad.b, element, pass_gs, fs, schedule, init=prev,
                                 workers=workers, max_iterations=n_iter)
        prev = stream.field
        y = _symbol_rate_samples(compensate_cd_array(stream.field, bulk, fs), sps)
        if y.shape != truth.symbols.shape:
            raise ValueError("retrieved record does not match the reference length")
        first = estimate_channel(y, known, pos, 1, cfg.ridge)
        z = equalize(y, first, cfg.regularization)
        ref = fmt.decide(z)
        ref[:, pos] = truth.symbols[:, pos]
        n_taps = min(cfg.n_taps, max(1, y.shape[1] // 4))
        est = estimate_channel(y, ref, None, n_taps, cfg.ridge)
        z = equalize(y, est, cfg.regularization)
        z_raw = z
        z, _ = remove_linear_phase(z, pilots, cfg.phase_block)
        report = score_ber(z, truth.bits, pilots, fmt)
        data = pilots[0].data_mask(y.shape[1])
        diag = {
            "iteration": it + 1,
            "ber": report.ber,
            "bit_errors": report.bit_errors,
            "bits_counted": report.bits_counted,
            "evm_db": evm_db(z[:, data], truth.symbols[:, data]),
            "evm_db_before_phase_removal": evm_db(z_raw[:, data], truth.symbols[:, data]),
            "residual": est.residual,
            "blocks_converged": float(np.mean(stream.final_db < gs.epsilon_db)),
            "median_block_db": float(np.median(stream.final_db)),
            "gs_iterations": n_iter,
        }
        log.info("outer iteration %d: BER %.3g", it + 1, report.ber)
        result.diagnostics.append(diag)
        result.traces.append(stream.traces)
        result.estimates.append(est)
        schedule = feedback_pilots(est, pilots, fs, baud, bulk, gs.pilot_weight, cfg.pilot_guard)
    result.symbols, result.estimate, result.field = z, est, prev
    return result
