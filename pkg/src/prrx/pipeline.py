"""Experiment configuration, end-to-end simulation and artifact writing."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from .channel import LinkConfig, load_ase_noise_array, propagate_array
from .equalizer import ChannelEstimate, EqualizerConfig, outer_loop, raised_cosine_peak
from .frontend import FrontendConfig, IntensityQuad, detect_array, optical_filter, resample
from .metrics import (cluster_separation, evm_db, osnr_penalty, phase_error_trace,
                      qpsk_theory_ber, write_ber_table, write_constellation_csv, write_csv,
                      write_trace_csv)
from .retrieval import GsConfig, retrieve_stream
from .sigkit import ComplexFrame, DualPolFrame, SpectralSupport
from .txgen import TxConfig, TxSignal, transmit, truth_from_dict, truth_to_dict
from .wavio import read_quad, read_waveform, write_quad, write_waveform

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

SECTIONS = ("tx", "link", "frontend", "gs", "eq", "run")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


@dataclass(frozen=True)
class RunOptions:
    save_waveforms: bool = False
    workers: int = 1
    constellation_points: int = 4096
    phase_trace_samples: int = 256

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.phase_trace_samples < 2:
            raise ValueError("phase_trace_samples must be >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    tx: TxConfig
    link: LinkConfig
    frontend: FrontendConfig
    gs: GsConfig
    eq: EqualizerConfig
    run: RunOptions = RunOptions()
    sweep: dict[str, list] = field(default_factory=dict)
    output_dir: str = "out"
    seed: int = 0
    name: str = "experiment"
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def resolved(self) -> dict:
        """Every effective parameter, JSON-ready."""
        def clean(obj):
            d = dataclasses.asdict(obj)
            return {k: _jsonable(v) for k, v in d.items()}
        gs = clean(self.gs)
        sup = self.gs.spectral_support
        gs["spectral_support"] = None if sup is None else [sup.low, sup.high]
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "tx": clean(self.tx),
            "link": clean(self.link),
            "frontend": clean(self.frontend),
            "gs": gs,
            "eq": clean(self.eq),
            "run": clean(self.run),
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# --------------------------------------------------------------------------
# config parsing

_DERIVED_SEEDS = {("tx", "seed"): 1, ("link", "noise_seed"): 2, ("frontend", "seed"): 3, ("gs", "seed"): 4}


def derive_seed(master: int, stream: int) -> int:
    return int(np.random.SeedSequence([master, stream]).generate_state(1)[0])


def _coerce(path: str, ftype, value):
    t = str(ftype).replace(" ", "")
    base = t.removesuffix("|None")
    if value is None and base != t:
        return None
    if base == "float" and value in ("inf", "+inf"):
        return math.inf
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    elif base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _build(cls, section: str, data: dict, extra: dict | None = None):
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    kwargs = dict(extra or {})
    for key, value in data.items():
        path = f"{section}.{key}"
        if key not in fields:
            raise ConfigError(f"{path}: unknown field (known: {', '.join(sorted(fields))})")
        kwargs[key] = _coerce(path, fields[key].type, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        name = _field_in_message(str(exc), fields)
        raise ConfigError(f"{section}.{name}: {exc}" if name else f"{section}: {exc}") from None


def _field_in_message(msg: str, fields) -> str | None:
    for name in sorted(fields, key=len, reverse=True):
        if msg.startswith(name) or f" {name} " in f" {msg} ":
            return name
    return None


def parse_config(data: dict, seed_offset: int = 0) -> ExperimentConfig:
    """Validate a config mapping (as read from TOML)."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a table")
    known = set(SECTIONS) | {"sweep", "output_dir", "seed", "name"}
    for key in data:
        if key not in known:
            raise ConfigError(f"{key}: unknown top-level key")
    for sec in SECTIONS:
        if sec in data and not isinstance(data[sec], dict):
            raise ConfigError(f"{sec}: expected a table")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    seed += seed_offset
    sec = {s: dict(data.get(s, {})) for s in SECTIONS}
    for (s, k), stream in _DERIVED_SEEDS.items():
        sec[s].setdefault(k, derive_seed(seed, stream))

    tx = _build(TxConfig, "tx", sec["tx"])
    link_data = sec["link"]
    if link_data.get("jones_seed") == "derived":
        link_data["jones_seed"] = derive_seed(seed, 5)
    link = _build(LinkConfig, "link", link_data)
    if tx.n_polarizations == 1 and (link.jones_seed is not None or link.dgd > 0):
        raise ConfigError("link.jones_seed: polarization effects need tx.n_polarizations = 2")

    fe_data = sec["frontend"]
    ob = fe_data.get("optical_bandwidth", "nyquist")
    if ob == "nyquist":
        fe_data["optical_bandwidth"] = (1.0 + tx.rolloff) * tx.baud
    elif ob == "none":
        fe_data["optical_bandwidth"] = None
    frontend = _build(FrontendConfig, "frontend", fe_data)
    if frontend.optical_bandwidth is not None and frontend.optical_bandwidth > tx.sample_rate:
        raise ConfigError("frontend.optical_bandwidth: wider than the simulation band")
    if tx.sample_rate % frontend.adc_rate and frontend.adc_rate % tx.sample_rate:
        raise ConfigError("frontend.adc_rate: must be an integer ratio of the simulation rate")

    gs_data = sec["gs"]
    support = gs_data.pop("spectral_support", "nyquist")
    if "epsilon_db" in gs_data:
        gs_data["epsilon"] = 10.0 ** (_coerce("gs.epsilon_db", "float", gs_data.pop("epsilon_db")) / 10.0)
    if support == "nyquist":
        sup = SpectralSupport.nyquist(tx.baud, tx.rolloff)
    elif support == "none":
        sup = None
    elif isinstance(support, list) and len(support) == 2:
        try:
            sup = SpectralSupport(float(support[0]), float(support[1]))
        except ValueError as exc:
            raise ConfigError(f"gs.spectral_support: {exc}") from None
    else:
        raise ConfigError("gs.spectral_support: expected 'nyquist', 'none' or [low, high]")
    if sup is not None:
        try:
            sup.check(frontend.adc_rate)
        except ValueError as exc:
            raise ConfigError(f"gs.spectral_support: {exc}") from None
    gs = _build(GsConfig, "gs", gs_data, {"spectral_support": sup})

    eq_data = sec["eq"]
    eq_data.setdefault("bulk_cd", link.total_dispersion)
    if eq_data.get("regularization") == "mmse":
        eq_data["regularization"] = None
    eq = _build(EqualizerConfig, "eq", eq_data)
    run = _build(RunOptions, "run", sec["run"])

    sweep = _flatten_sweep(data.get("sweep", {}))
    out = data.get("output_dir", "out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a non-empty string")
    name = data.get("name", Path(out).name)
    return ExperimentConfig(tx, link, frontend, gs, eq, run, sweep, out, seed, str(name), data)


def _flatten_sweep(sweep) -> dict[str, list]:
    if not isinstance(sweep, dict):
        raise ConfigError("sweep: expected a table")
    flat: dict[str, list] = {}

    def walk(prefix, node):
        for k, v in node.items():
            key = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(key, v)
            else:
                flat[key] = v
    walk("", sweep)
    for key, values in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"sweep.{key}: sweep keys must look like '<section>.<field>'")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}: expected a non-empty list")
    return flat


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian grid; point ``i`` runs with master seed ``seed + i``."""
    if not cfg.sweep:
        return [({}, cfg)]
    keys = list(cfg.sweep)
    out = []
    for i, combo in enumerate(itertools.product(*(cfg.sweep[k] for k in keys))):
        data = json.loads(json.dumps(cfg.raw))
        data.pop("sweep", None)
        for k, v in zip(keys, combo):
            section, _, name = k.partition(".")
            data.setdefault(section, {})[name] = v
        params = dict(zip(keys, combo))
        point = parse_config(data, seed_offset=i)
        point = dataclasses.replace(point, name=f"{cfg.name}[{i}]", output_dir=f"point_{i:03d}")
        out.append((params, point))
    return out


# --------------------------------------------------------------------------
# simulation


@dataclass
class Capture:
    tx: TxSignal
    field: np.ndarray  # received optical field at the simulation rate
    reference: np.ndarray  # band-limited received field on the ADC grid
    quad: IntensityQuad


def simulate(cfg: ExperimentConfig) -> Capture:
    sig = transmit(cfg.tx)
    fs = cfg.tx.sample_rate
    fld = sig.field_array()
    if cfg.tx.n_polarizations == 2:
        fld = propagate_array(fld, cfg.link, fs)
    else:
        fld = propagate_array(fld, dataclasses.replace(cfg.link, jones_seed=None), fs,
                              jones=np.eye(1))
    fld = load_ase_noise_array(fld, cfg.link.osnr_db, fs, cfg.link.noise_seed)
    a, b = detect_array(fld, cfg.frontend, fs)
    quad = resample(IntensityQuad.from_arrays(a, b, fs), cfg.frontend.adc_rate)
    ref = fld if cfg.frontend.optical_bandwidth is None else optical_filter(fld, cfg.frontend.optical_bandwidth, fs)
    step = int(round(fs / cfg.frontend.adc_rate))
    ref = ref[:, ::step] if step >= 1 else ref
    return Capture(sig, fld, ref, quad)


def load_capture(cfg: ExperimentConfig, directory) -> Capture:
    """Rebuild a :class:`Capture` from the ``waveforms/`` dump of a run."""
    d = Path(directory)
    try:
        tx_field, _ = read_waveform(d / "tx_field")
        rx_field, _ = read_waveform(d / "rx_field")
        reference, _ = read_waveform(d / "reference")
        truth = truth_from_dict(json.loads((d / "truth.json").read_text()))
        quad = read_quad(d / "intensity")
    except FileNotFoundError as exc:
        raise ConfigError(f"{d}: incomplete waveform dump ({exc.filename})") from None
    tx_field = np.atleast_2d(tx_field)
    field_obj = (DualPolFrame.from_array(tx_field, cfg.tx.sample_rate) if tx_field.shape[0] == 2
                 else ComplexFrame(tx_field[0], cfg.tx.sample_rate))
    tx = TxSignal(cfg.tx, truth, field_obj, raised_cosine_peak(cfg.tx.rolloff))
    return Capture(tx, np.atleast_2d(rx_field), np.atleast_2d(reference), quad)


@dataclass
class Outcome:
    metrics: dict
    traces: list[list[float]]
    symbols: np.ndarray | None = None
    estimate: ChannelEstimate | None = None
    per_iteration: list[dict] = field(default_factory=list)
    phase_error: np.ndarray | None = None


def process(cfg: ExperimentConfig, cap: Capture) -> Outcome:
    quad = cap.quad
    truth = cap.tx.truth
    n_pol = quad.n_polarizations
    metrics: dict[str, Any] = {
        "osnr_db": _jsonable(cfg.link.osnr_db),
        "pilot_fraction": cfg.tx.pilot_fraction,
        "n_polarizations": n_pol,
        "theory_ber": _jsonable(qpsk_theory_ber(cfg.link.osnr_db, cfg.tx.baud, n_pol))
        if cfg.tx.modulation.upper() == "QPSK" and math.isfinite(cfg.link.osnr_db) else None,
    }
    if truth.pilots[0].positions.size >= 4:
        res = outer_loop(quad, truth, cfg.tx.baud, cfg.frontend, cfg.gs, cfg.eq,
                         cfg.tx.rolloff, cfg.run.workers)
        final = res.diagnostics[-1]
        traces = res.traces[0]
        fld = res.field
        metrics.update(
            ber=final["ber"], bit_errors=final["bit_errors"], bits_counted=final["bits_counted"],
            evm_db=final["evm_db"], channel_residual=final["residual"],
            cluster_separation=min(cluster_separation(row[truth.pilots[0].data_mask(row.size)], truth.format)
                                   for row in res.symbols),
        )
        out = Outcome(metrics, traces, res.symbols, res.estimate, res.diagnostics)
    else:
        stream = retrieve_stream(quad.a, quad.b, cfg.frontend.element, cfg.gs, quad.sample_rate,
                                 None, workers=cfg.run.workers,
                                 warm_start=True)
        traces = stream.traces
        fld = stream.field
        metrics.update(ber=None, bit_errors=None, bits_counted=None, evm_db=None)
        out = Outcome(metrics, traces)
    final_db = np.array([min(t) for t in traces])
    metrics.update(
        blocks=len(traces),
        blocks_converged=float(np.mean(final_db < cfg.gs.epsilon_db)),
        final_a_err_db_median=float(np.median(final_db)),
        final_a_err_db_mean=float(10 * np.log10(np.mean(10 ** (final_db / 10)))),
        final_a_err_db_max=float(final_db.max()),
    )
    m = min(cfg.run.phase_trace_samples, fld.shape[-1])
    trace = phase_error_trace(fld[0, :m], cap.reference[0, :m])
    metrics["phase_error_std"] = trace.std
    out.phase_error = trace.values
    return out


# --------------------------------------------------------------------------
# artifacts


def _versions() -> dict:
    return {"prrx": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 12) if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_round(obj), indent=2, sort_keys=True) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig, out_dir, capture: Capture | None = None) -> dict:
    """Run one point and write its artifacts; returns the manifest.

    ``capture`` (see :func:`load_capture`) skips the simulation and
    processes previously dumped waveforms instead.

    The manifest holds no timing so repeated runs are byte-identical;
    timings go to ``timing.json``. A failing stage is recorded and the
    outputs written so far are kept.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {
        "name": cfg.name,
        "config": cfg.resolved(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
        "status": "ok",
        "outputs": [],
        "metrics": {},
    }
    timing: dict[str, float] = {}
    files: list[str] = []

    def keep(p: Path):
        files.append(p.relative_to(out).as_posix())

    stage = "simulate"
    try:
        t0 = time.perf_counter()
        cap = simulate(cfg) if capture is None else capture
        timing["simulate_s"] = time.perf_counter() - t0
        if cfg.run.save_waveforms and capture is None:
            wd = out / "waveforms"
            wd.mkdir(exist_ok=True)
            fs = cfg.tx.sample_rate
            keep(write_waveform(wd / "tx_field", cap.tx.field_array(), fs, label="transmitted field"))
            keep(write_waveform(wd / "rx_field", cap.field, fs, label="received field"))
            keep(write_waveform(wd / "reference", cap.reference, cfg.frontend.adc_rate,
                                label="band-limited received field on the ADC grid"))
            keep(write_quad(wd / "intensity", cap.quad))
            truth_path = wd / "truth.json"
            truth_path.write_text(json.dumps(truth_to_dict(cap.tx.truth)) + "\n")
            keep(truth_path)
        stage = "process"
        t0 = time.perf_counter()
        res = process(cfg, cap)
        timing["process_s"] = time.perf_counter() - t0
        stage = "write"
        manifest["metrics"] = res.metrics
        keep(write_trace_csv(out / "convergence.csv", res.traces))
        keep(write_csv(out / "convergence_summary.csv", ["iteration", "median_db", "mean_db"],
                       _trace_summary(res.traces)))
        keep(write_csv(out / "phase_error.csv", ["sample", "phase_error_rad"],
                       ((i, float(v)) for i, v in enumerate(res.phase_error))))
        if res.symbols is not None:
            keep(write_constellation_csv(out / "constellation.csv", res.symbols, cfg.run.constellation_points))
            keep(write_csv(out / "outer_loop.csv", list(res.per_iteration[0]),
                           (list(d.values()) for d in res.per_iteration)))
            manifest["per_iteration"] = res.per_iteration
        if res.estimate is not None:
            keep(res.estimate.write_json(out / "channel.json"))
            keep(_write_response(out / "channel_response.csv", res.estimate, cfg.tx.baud))
    except Exception as exc:  # stage failures are data, not crashes
        log.exception("stage %s failed", stage)
        manifest["status"] = "failed"
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    manifest["outputs"] = sorted(files)
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", timing)
    return manifest


def _trace_summary(traces):
    n = max(len(t) for t in traces)
    padded = np.array([t + [t[-1]] * (n - len(t)) for t in traces])
    med = np.median(padded, axis=0)
    mean = 10 * np.log10(np.mean(10 ** (padded / 10), axis=0))
    return [(i + 1, float(a), float(b)) for i, (a, b) in enumerate(zip(med, mean))]


def _write_response(path: Path, est: ChannelEstimate, baud: float, n: int = 256) -> Path:
    nu = np.fft.fftshift(np.fft.fftfreq(n))
    H = est.response(nu)
    header = ["frequency_hz"] + [f"abs2_db_{p}{q}" for p in range(est.n_pol) for q in range(est.n_pol)]
    rows = []
    for k in range(n):
        vals = [10 * math.log10(max(abs(H[p, q, k]) ** 2, 1e-30))
                for p in range(est.n_pol) for q in range(est.n_pol)]
        rows.append([float(nu[k] * baud)] + vals)
    return write_csv(path, header, rows)


def run_sweep(cfg: ExperimentConfig, out_dir, workers: int = 1) -> dict:
    """Run every grid point in isolation and aggregate ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = sweep_points(cfg)
    keys = list(cfg.sweep)

    def one(item):
        params, point = item
        try:
            return params, point, run_experiment(point, out / point.output_dir)
        except Exception as exc:  # isolation: record and continue
            return params, point, {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "metrics": {}}

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point_star, [(p, c, str(out)) for p, c in points]))
    else:
        results = [one(item) for item in points]
    cols = ["ber", "theory_ber", "evm_db", "blocks_converged", "final_a_err_db_median", "phase_error_std"]
    rows = []
    for i, (params, point, man) in enumerate(results):
        m = man.get("metrics", {})
        rows.append([i] + [params[k] for k in keys] + [man["status"], point.seed]
                    + [m.get(c) for c in cols] + [f"{point.output_dir}/manifest.json"])
    write_csv(out / "summary.csv", ["point"] + keys + ["status", "seed"] + cols + ["manifest"],
              ([("" if v is None else v) for v in r] for r in rows))
    summary: dict[str, Any] = {
        "name": cfg.name,
        "config": cfg.resolved(),
        "config_sha256": cfg.digest(),
        "points": len(points),
        "failed": sum(1 for _, _, m in results if m["status"] != "ok"),
        "results": [{"values": params, "status": man["status"], "ber": man.get("metrics", {}).get("ber")}
                    for params, _, man in results],
        "versions": _versions(),
    }
    penalties = _penalties(keys, results, cfg)
    if penalties:
        summary["osnr_penalty_db_at_2e-2"] = penalties
        table = [(p["link.osnr_db"], p.get("tx.pilot_fraction", cfg.tx.pilot_fraction),
                  m["metrics"].get("ber"), m["metrics"].get("theory_ber"))
                 for p, _, m in results if m["status"] == "ok"]
        write_ber_table(out / "ber_vs_osnr.csv", table)
    write_json(out / "sweep.json", summary)
    return summary


def _run_point_star(args):
    params, point, root = args
    return params, point, run_experiment(point, Path(root) / point.output_dir)


def _penalties(keys, results, cfg) -> dict:
    if "link.osnr_db" not in keys:
        return {}
    groups: dict[str, list] = {}
    for params, point, man in results:
        ber = man.get("metrics", {}).get("ber")
        if man["status"] != "ok" or ber is None:
            continue
        label = f"pilot_fraction={params.get('tx.pilot_fraction', cfg.tx.pilot_fraction)}"
        groups.setdefault(label, []).append((params["link.osnr_db"], ber, point.tx.n_polarizations))
    out = {}
    for label, pts in groups.items():
        o, b, npol = zip(*pts)
        try:
            out[label] = osnr_penalty(o, b, 2e-2, cfg.tx.baud, npol[0])
        except ValueError:
            out[label] = None
    return out
