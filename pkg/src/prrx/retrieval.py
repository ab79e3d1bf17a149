"""Modified Gerchberg-Saxton phase retrieval from two intensity planes.

Each polarization is described by an intensity ``a`` measured before a
dispersive element and ``b`` measured after it. One loop of the engine:

1. amplitude replacement at plane A, ``s <- sqrt(a) exp(j angle(s))``
2. pilot constraint
3. propagation through the element, ``d = D s``
4. amplitude replacement at plane B, ``d <- sqrt(b) exp(j angle(d))``
5. back-propagation, ``s <- D^-1 d``
6. projection onto the rectangular signal spectrum

Steps 1-2 form the projector ``P_A`` and steps 3-6 the projector ``P_B``.
With ``relaxation == 0`` the update is the textbook alternation
``s <- P_B(P_A(s))``. A positive relaxation ``beta`` uses the averaged
reflection update

    z <- beta/2 * (R_B R_A z + z) + (1 - beta) * P_A z,   R = 2P - I,

whose fixed points are the same consistent fields but which leaves the
local minima plain alternation gets trapped in. Every ``restart_period``
iterations, samples whose intensity error exceeds a threshold get a fresh
random phase.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft

from .sigkit import DispersionSpec, SpectralSupport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GsConfig:
    """Retrieval parameters.

    ``epsilon`` is the target for the mean intensity error (linear; 1e-3 is
    -30 dB). The per-sample escape threshold is ``restart_factor`` times the
    current mean error. ``spectral_support=None`` disables step 6.
    """

    max_iterations: int = 500
    epsilon: float = 1e-3
    restart_period: int = 100
    restart_factor: float = 3.0
    block_length: int = 256
    save_fraction: float = 0.5
    spectral_support: SpectralSupport | None = None
    seed: int = 0
    relaxation: float = 0.9
    pilot_weight: float = 0.5
    max_attempts: int = 3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.block_length < 2 or self.block_length & (self.block_length - 1):
            raise ValueError("block_length must be a power of two")
        if not 0 < self.save_fraction <= 1:
            raise ValueError("save_fraction must lie in (0, 1]")
        if not 0 <= self.relaxation < 1:
            raise ValueError("relaxation must lie in [0, 1)")
        if not 0 < self.pilot_weight <= 1:
            raise ValueError("pilot_weight must lie in (0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.save_fraction * self.block_length)))

    @property
    def epsilon_db(self) -> float:
        return 10 * math.log10(self.epsilon)


def _db(x: float) -> float:
    return 10.0 * math.log10(max(x, 1e-300))


def random_phase_field(shape, rng: np.random.Generator) -> np.ndarray:
    """Unit-amplitude field with uniform random phase."""
    return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=shape))


# --------------------------------------------------------------------------
# pilot constraints


@dataclass(frozen=True)
class PilotConstraint:
    """Known received-field values at sample positions of one polarization.

    Applied as the convex blend ``s <- (1 - w) s + w target``; ``w = 1`` is
    hard replacement.
    """

    positions: np.ndarray
    targets: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        tgt = np.asarray(self.targets, dtype=np.complex128)
        if pos.shape != tgt.shape:
            raise ValueError("positions and targets must have equal length")
        if not 0 < self.weight <= 1:
            raise ValueError("weight must lie in (0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "targets", tgt)

    def project(self, row: np.ndarray, scale: float = 1.0) -> np.ndarray:
        if self.positions.size == 0:
            return row
        if np.any((self.positions < 0) | (self.positions >= row.size)):
            raise ValueError("pilot positions fall outside the block")
        p, w = self.positions, self.weight
        row[p] = (1.0 - w) * row[p] + w * self.targets / math.sqrt(scale)
        return row


@dataclass(frozen=True)
class ChannelPilots:
    """Pilot constraint imposed in the transmitted-symbol domain of one block.

    The field estimate ``s`` (all polarizations) is mapped back through the
    bulk dispersion and the channel matrix ``H``,
    ``u = H^-1 D_bulk^-1 s``. Known symbols are blended in at ``positions``
    and the change is mapped forward again. For a unitary channel this is
    the orthogonal projection onto fields whose transmitted-domain samples
    match the pilots. ``channel`` is either one ``(n_pol, n_pol)`` matrix or a
    per-bin response of shape ``(n_pol, n_pol, L)`` on the fftfreq grid.
    """

    positions: np.ndarray
    targets: np.ndarray
    channel: np.ndarray
    bulk_transfer: np.ndarray | None = None
    weight: float = 1.0
    _inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        tgt = np.atleast_2d(np.asarray(self.targets, dtype=np.complex128))
        H = np.asarray(self.channel, dtype=np.complex128)
        if H.ndim == 3:
            inv = np.linalg.inv(np.moveaxis(H, -1, 0))
            inv = np.moveaxis(inv, 0, -1)
        else:
            inv = np.linalg.inv(H)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "channel", H)
        object.__setattr__(self, "_inverse", inv)

    @property
    def memoryless(self) -> bool:
        return self.channel.ndim == 2 and self.bulk_transfer is None

    def to_transmitted(self, s: np.ndarray) -> np.ndarray:
        if self.memoryless:
            return self._inverse @ s
        S = sfft.fft(s, axis=-1)
        if self.bulk_transfer is not None:
            S = S / self.bulk_transfer
        S = _apply_matrix(self._inverse, S)
        return sfft.ifft(S, axis=-1)

    def to_received(self, u: np.ndarray) -> np.ndarray:
        if self.memoryless:
            return self.channel @ u
        U = _apply_matrix(self.channel, sfft.fft(u, axis=-1))
        if self.bulk_transfer is not None:
            U = U * self.bulk_transfer
        return sfft.ifft(U, axis=-1)

    def project(self, s: np.ndarray, scale: float = 1.0) -> np.ndarray:
        if self.positions.size == 0:
            return s
        p, w = self.positions, self.weight
        tgt = self.targets / math.sqrt(scale)
        if self.memoryless:
            u_p = self._inverse @ s[:, p]
            s[:, p] += self.channel @ (w * (tgt - u_p))
            return s
        u = self.to_transmitted(s)
        delta = np.zeros_like(s)
        delta[:, p] = w * (tgt - u[:, p])
        return s + self.to_received(delta)


def _apply_matrix(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    if M.ndim == 2:
        return M @ X
    return np.einsum("pqk,qk->pk", M, X)


# --------------------------------------------------------------------------
# block engine


@dataclass
class GsState:
    """Iteration state.

    ``s_estimate`` is the current field guess and ``iterate`` the internal
    relaxed variable (identical to the estimate for plain alternation).
    """

    s_estimate: np.ndarray
    iterate: np.ndarray
    iteration: int = 0
    a_err_trace: list[float] = field(default_factory=list)

    @classmethod
    def initial(cls, field0: np.ndarray) -> "GsState":
        f = np.array(field0, dtype=np.complex128)
        return cls(f, f.copy())


class BlockProblem:
    """Measurements, operators and constraints for one block.

    Intensities are rescaled so that their mean is 1, which removes the
    photodiode scale; pilot targets follow the same scaling.
    """

    def __init__(self, a, b, element: DispersionSpec, sample_rate: float,
                 support: SpectralSupport | None = None, pilots=None,
                 retained: slice | None = None):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if a.shape != b.shape:
            raise ValueError("a and b must have the same shape")
        if np.any(a < 0) or np.any(b < 0):
            raise ValueError("intensities must be non-negative")
        n = a.shape[-1]
        mean = float(a.mean())
        self.scale = mean if mean > 0 else 1.0
        self.a = a / self.scale
        self.sqrt_a = np.sqrt(self.a)
        self.sqrt_b = np.sqrt(b / self.scale)
        self.h = element.transfer(n, sample_rate)
        self.keep = None if support is None else support.mask(n, sample_rate)
        self.pilots = pilots
        self.retained = slice(None) if retained is None else retained

    @property
    def shape(self):
        return self.a.shape

    def apply_pilots(self, s: np.ndarray) -> np.ndarray:
        p = self.pilots
        if p is None:
            return s
        if isinstance(p, ChannelPilots):
            return p.project(s, self.scale)
        if isinstance(p, PilotConstraint):
            p = (p,)
        for row, c in zip(s, p):
            if c is not None:
                c.project(row, self.scale)
        return s

    def project_a(self, s: np.ndarray) -> np.ndarray:
        out = self.sqrt_a * np.exp(1j * np.angle(s))
        return self.apply_pilots(out)

    def project_b(self, s: np.ndarray) -> np.ndarray:
        d = sfft.ifft(sfft.fft(s, axis=-1) * self.h, axis=-1)
        d = self.sqrt_b * np.exp(1j * np.angle(d))
        S = sfft.fft(d, axis=-1) / self.h
        if self.keep is not None:
            S[..., ~self.keep] = 0.0
        return sfft.ifft(S, axis=-1)

    def a_err(self, s: np.ndarray) -> np.ndarray:
        return (self.a - np.abs(s) ** 2) ** 2

    def mean_a_err(self, s: np.ndarray) -> float:
        return float(self.a_err(s)[..., self.retained].mean())

    def consistency(self, s: np.ndarray) -> float:
        """Worse of the plane-A and plane-B mean errors over the retained part."""
        d = sfft.ifft(sfft.fft(s, axis=-1) * self.h, axis=-1)
        b_err = (self.sqrt_b ** 2 - np.abs(d) ** 2) ** 2
        return max(self.mean_a_err(s), float(b_err[..., self.retained].mean()))

    def step(self, state: GsState, relaxation: float, pa: np.ndarray | None = None):
        """One loop; returns ``(new_state_arrays, pa_of_new_iterate)``."""
        z = state.iterate
        if relaxation == 0.0:
            new = self.project_b(self.project_a(z))
            return new, new, None
        if pa is None:
            pa = self.project_a(z)
        ra = 2.0 * pa - z
        rb = 2.0 * self.project_b(ra) - ra
        z_new = 0.5 * relaxation * (rb + z) + (1.0 - relaxation) * pa
        pa_new = self.project_a(z_new)
        estimate = self.project_b(pa_new)
        return z_new, estimate, pa_new


def stagnation_escape(state: GsState, a: np.ndarray, epsilon: float,
                      rng: np.random.Generator) -> GsState:
    """Re-draw the phase of every sample whose intensity error exceeds ``epsilon``.

    ``a`` must be on the same scale as the estimate. Amplitudes are kept.
    Samples at or below the threshold are left bit-for-bit untouched.
    """
    a = np.asarray(a, dtype=float).reshape(np.shape(state.s_estimate))
    err = (a - np.abs(state.s_estimate) ** 2) ** 2
    hit = err > epsilon
    if not hit.any():
        return state
    rot = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=int(hit.sum())))
    s = state.s_estimate.copy()
    z = state.iterate.copy()
    s[hit] *= rot
    z[hit] *= rot
    return replace(state, s_estimate=s, iterate=z)


def _escape_thresholds(problem: BlockProblem, estimate: np.ndarray, factor: float) -> np.ndarray:
    err = problem.a_err(estimate)
    per_row = err[..., problem.retained].mean(axis=-1, keepdims=True)
    return err > factor * per_row


def gs_iterate(state: GsState, a, b, element: DispersionSpec, cfg: GsConfig,
               sample_rate: float, pilots=None) -> GsState:
    """Advance ``state`` by one full loop and append the mean error (dB).

    ``a``, ``b`` and the estimate share one scale. Pilot targets are given
    on that scale too.
    """
    shape = np.shape(state.s_estimate)
    a2 = np.atleast_2d(np.asarray(a, dtype=float))
    b2 = np.atleast_2d(np.asarray(b, dtype=float))
    if a2.shape != b2.shape or a2.shape != np.atleast_2d(state.s_estimate).shape:
        raise ValueError("a, b and the estimate must have the same length")
    problem = BlockProblem(a2, b2, element, sample_rate, cfg.spectral_support, pilots)
    # operate on the caller's scale
    problem.scale = 1.0
    problem.a, problem.sqrt_a, problem.sqrt_b = a2, np.sqrt(a2), np.sqrt(b2)
    s2 = GsState(np.atleast_2d(state.s_estimate).copy(), np.atleast_2d(state.iterate).copy())
    z_new, est, _ = problem.step(s2, cfg.relaxation)
    trace = list(state.a_err_trace) + [_db(problem.mean_a_err(est))]
    return GsState(est.reshape(shape), z_new.reshape(shape), state.iteration + 1, trace)


@dataclass(frozen=True)
class BlockResult:
    field: np.ndarray
    trace: list[float]
    best_db: float
    converged: bool


def run_block(problem: BlockProblem, cfg: GsConfig, init: np.ndarray,
              rng: np.random.Generator, max_iterations: int | None = None) -> BlockResult:
    """Iterate ``problem`` from ``init`` (on the raw intensity scale).

    The returned field is the lowest-error estimate seen, since an escape
    step can leave a block worse than it was just before. A start that
    already meets ``epsilon`` at both planes ends the run after one
    evaluation and is returned unchanged.
    """
    n_iter = cfg.max_iterations if max_iterations is None else max_iterations
    z0 = np.atleast_2d(np.array(init, dtype=np.complex128)) / math.sqrt(problem.scale)
    # a start that already explains both measurements is returned as is
    start_err = problem.consistency(z0)
    if start_err < cfg.epsilon:
        return BlockResult(z0 * math.sqrt(problem.scale), [_db(start_err)], _db(start_err), True)
    state = GsState.initial(z0)
    trace: list[float] = []
    pa = None
    best, best_err = z0, math.inf
    for it in range(1, n_iter + 1):
        z_new, estimate, pa = problem.step(state, cfg.relaxation, pa)
        state.iterate = z_new
        state.s_estimate = estimate
        mean = problem.mean_a_err(estimate)
        trace.append(_db(mean))
        if mean < best_err:
            best, best_err = estimate, mean
        if mean < cfg.epsilon:
            break
        if it % cfg.restart_period == 0 and it < n_iter:
            hit = _escape_thresholds(problem, estimate, cfg.restart_factor)
            if hit.any():
                rot = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, size=int(hit.sum())))
                state.iterate = state.iterate.copy()
                state.iterate[hit] *= rot
                pa = None
    return BlockResult(best * math.sqrt(problem.scale), trace, _db(best_err), best_err < cfg.epsilon)


def central_slice(length: int, save_fraction: float) -> slice:
    keep = max(1, int(round(save_fraction * length)))
    start = (length - keep) // 2
    return slice(start, start + keep)


def retrieve_block(a, b, element: DispersionSpec, cfg: GsConfig, sample_rate: float,
                   pilots=None, init: np.ndarray | None = None,
                   rng: np.random.Generator | None = None):
    """Retrieve one block; returns ``(field, trace_db)``.

    Runs until the mean error over the retained (central ``save_fraction``)
    part drops below ``cfg.epsilon`` or ``max_iterations`` is reached.
    Non-convergence is reported through the trace only. 1-D inputs give a
    1-D field.
    """
    one_d = np.ndim(a) == 1
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    a2 = np.atleast_2d(a)
    problem = BlockProblem(a2, b, element, sample_rate, cfg.spectral_support, pilots,
                           central_slice(a2.shape[-1], cfg.save_fraction))
    if init is None:
        init = random_phase_field(a2.shape, rng)
    res = run_block(problem, cfg, init, rng)
    out = res.field[0] if one_d else res.field
    return out, res.trace


# --------------------------------------------------------------------------
# pilot schedules for streams


class ReceivedPilotSchedule:
    """Per-polarization received-domain pilots over a whole record."""

    def __init__(self, positions, targets, n_samples: int, weight: float = 1.0):
        positions = [np.asarray(p, dtype=np.int64) for p in positions]
        targets = [np.asarray(t, dtype=np.complex128) for t in targets]
        self.n_pol = len(positions)
        self.weight = weight
        self._mask = np.zeros((self.n_pol, n_samples), dtype=bool)
        self._target = np.zeros((self.n_pol, n_samples), dtype=np.complex128)
        for i, (p, t) in enumerate(zip(positions, targets)):
            self._mask[i, p] = True
            self._target[i, p] = t

    def for_block(self, indices: np.ndarray, length: int):
        out = []
        for i in range(self.n_pol):
            m = self._mask[i, indices]
            pos = np.flatnonzero(m)
            out.append(PilotConstraint(pos, self._target[i, indices[pos]], self.weight))
        return tuple(out)


class ChannelPilotSchedule:
    """Transmitted-domain pilots mapped through bulk dispersion and a channel.

    Parameters
    ----------
    positions : array
        Record sample indices of the pilot symbol centers.
    targets : array, shape (n_pol, P)
        Pilot symbol values.
    channel : array or callable
        Either a fixed ``(n_pol, n_pol)`` matrix (symbol -> received sample)
        or a callable ``f_hz -> (n_pol, n_pol, len(f_hz))`` response.
    bulk_dispersion : DispersionSpec, optional
        Dispersion between the transmitted domain and the retrieval plane.
    guard : int
        Pilots closer than this to a block edge are ignored; within that
        distance circular block processing corrupts the mapping.
    """

    def __init__(self, positions, targets, channel, sample_rate: float,
                 bulk_dispersion: DispersionSpec | None = None, weight: float = 1.0,
                 guard: int | None = None, baud: float | None = None):
        self.positions = np.asarray(positions, dtype=np.int64)
        self.targets = np.atleast_2d(np.asarray(targets, dtype=np.complex128))
        self.channel = channel
        self.sample_rate = sample_rate
        self.bulk = bulk_dispersion if bulk_dispersion and bulk_dispersion.dispersion != 0 else None
        self.weight = weight
        if guard is None:
            guard = 0
            if self.bulk is not None:
                band = baud * 1.1 if baud else sample_rate
                guard = int(math.ceil(0.5 * self.bulk.group_delay_span(band) * sample_rate)) + 8
        self.guard = guard
        self._cache: dict[int, tuple] = {}

    @property
    def n_pol(self) -> int:
        return self.targets.shape[0]

    def _operators(self, length: int):
        if length not in self._cache:
            bulk = None if self.bulk is None else self.bulk.transfer(length, self.sample_rate)
            if callable(self.channel):
                H = self.channel(np.fft.fftfreq(length, 1.0 / self.sample_rate))
            else:
                H = np.asarray(self.channel, dtype=np.complex128)
                H = H.reshape(self.n_pol, self.n_pol)
            self._cache[length] = (bulk, H)
        return self._cache[length]

    def for_block(self, indices: np.ndarray, length: int) -> ChannelPilots:
        bulk, H = self._operators(length)
        lookup = np.full(indices.max() + 1, -1, dtype=np.int64)
        lookup[indices] = np.arange(length)
        sel = np.flatnonzero(np.isin(self.positions, indices))
        local = lookup[self.positions[sel]]
        ok = (local >= self.guard) & (local < length - self.guard)
        sel, local = sel[ok], local[ok]
        order = np.argsort(local)
        return ChannelPilots(local[order], self.targets[:, sel[order]], H, bulk, self.weight)


# --------------------------------------------------------------------------
# streams


@dataclass
class StreamResult:
    field: np.ndarray
    traces: list[list[float]]
    block_db: np.ndarray
    converged: list[bool]

    @property
    def final_db(self) -> np.ndarray:
        """Error of the estimate kept for each block (dB)."""
        return self.block_db

    def converged_fraction(self, threshold_db: float) -> float:
        return float(np.mean(self.final_db < threshold_db))


def block_layout(n: int, cfg: GsConfig):
    """Yield ``(window_indices, retained_slice, center_indices)`` per block."""
    L, stride = cfg.block_length, cfg.stride
    if n < L:
        raise ValueError(f"record of {n} samples is shorter than one block ({L})")
    margin = (L - stride) // 2
    n_blocks = -(-n // stride)
    out = []
    for k in range(n_blocks):
        c0 = k * stride
        keep = min(stride, n - c0)
        idx = (c0 - margin + np.arange(L)) % n
        out.append((idx, slice(margin, margin + keep), idx[margin:margin + keep]))
    return out


def retrieve_stream(a, b, element: DispersionSpec, cfg: GsConfig, sample_rate: float,
                    pilot_schedule=None, init: np.ndarray | None = None,
                    warm_start: bool = True, workers: int = 1,
                    max_iterations: int | None = None) -> StreamResult:
    """Overlap-save retrieval over a full (circular) record.

    Blocks advance by ``save_fraction * block_length`` samples and only
    their central part is kept. With ``warm_start`` each block starts from
    the previous block's estimate on the overlap (sequential). Otherwise
    blocks are independent and may run on ``workers`` threads. Blocks
    without pilots have their phase rotated to match the previous block on
    the overlap; pilots already pin that phase.
    """
    a2 = np.atleast_2d(np.asarray(a, dtype=float))
    b2 = np.atleast_2d(np.asarray(b, dtype=float))
    n_pol, n = a2.shape
    layout = block_layout(n, cfg)
    L, stride = cfg.block_length, cfg.stride
    overlap = L - stride
    out = np.zeros((n_pol, n), dtype=np.complex128)
    traces: list[list[float]] = [None] * len(layout)  # type: ignore[list-item]
    conv: list[bool] = [False] * len(layout)
    best = np.zeros(len(layout))

    def solve(k, prev_est):
        idx, keep, _ = layout[k]
        rng = np.random.default_rng([cfg.seed, k])
        pil = None if pilot_schedule is None else pilot_schedule.for_block(idx, L)
        problem = BlockProblem(a2[:, idx], b2[:, idx], element, sample_rate,
                               cfg.spectral_support, pil, keep)
        start = random_phase_field((n_pol, L), rng)
        if init is not None:
            start = np.atleast_2d(init)[:, idx].copy()
        if prev_est is not None and overlap > 0:
            start[:, :overlap] = prev_est[:, stride:]
        res = run_block(problem, cfg, start, rng, max_iterations)
        for _ in range(cfg.max_attempts - 1):
            if res.converged:
                break
            again = run_block(problem, cfg, random_phase_field((n_pol, L), rng), rng, max_iterations)
            if again.best_db < res.best_db:
                res = again
        est = res.field
        if pil is None and prev_est is not None and overlap > 0:
            dots = np.sum(prev_est[:, stride:] * np.conj(est[:, :overlap]), axis=-1)
            est = est * np.exp(1j * np.angle(dots))[:, np.newaxis]
        return res, est

    if warm_start:
        prev = None
        for k in range(len(layout)):
            res, est = solve(k, prev)
            prev = est
            _, keep, centers = layout[k]
            out[:, centers] = est[:, keep]
            traces[k], conv[k], best[k] = res.trace, res.converged, res.best_db
    else:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(lambda k: solve(k, None), range(len(layout))))
        for k, (res, est) in enumerate(results):
            _, keep, centers = layout[k]
            out[:, centers] = est[:, keep]
            traces[k], conv[k], best[k] = res.trace, res.converged, res.best_db
    log.debug("retrieved %d blocks, %d converged", len(layout), sum(conv))
    return StreamResult(out, traces, best, conv)
