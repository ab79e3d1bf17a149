"""Binary waveform files with a JSON sidecar.

A waveform file holds little-endian float64 values. Complex data are stored
as interleaved ``(re, im)`` pairs; multi-channel data are stored sample-major
(all channels of sample 0, then sample 1, ...). The sidecar ``<name>.json``
records ``sample_rate``, ``length``, ``label``, ``channels`` and ``dtype``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sigkit import ComplexFrame, DualPolFrame

_LE_F64 = np.dtype("<f8")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_waveform(path, data: np.ndarray, sample_rate: float, label: str = "",
                   channels: list[str] | None = None, extra: dict | None = None) -> Path:
    """Write ``data`` of shape ``(n,)`` or ``(n_channels, n)``."""
    path = Path(path)
    data = np.asarray(data)
    arr = data[np.newaxis] if data.ndim == 1 else data
    n_ch, n = arr.shape
    is_complex = np.iscomplexobj(arr)
    if is_complex:
        flat = np.stack([arr.real, arr.imag], axis=-1).transpose(1, 0, 2).reshape(-1)
    else:
        flat = arr.T.reshape(-1)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat.astype(_LE_F64).tofile(path)
    meta = {
        "sample_rate": float(sample_rate),
        "length": int(n),
        "label": label,
        "channels": channels or [f"ch{i}" for i in range(n_ch)],
        "dtype": "complex128" if is_complex else "float64",
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_waveform(path) -> tuple[np.ndarray, dict]:
    """Return ``(data, meta)``; ``data`` is 1-D for single-channel files."""
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    raw = np.fromfile(path, dtype=_LE_F64)
    n, n_ch = meta["length"], len(meta["channels"])
    if meta["dtype"] == "complex128":
        pairs = raw.reshape(n, n_ch, 2)
        data = (pairs[..., 0] + 1j * pairs[..., 1]).T
    else:
        data = raw.reshape(n, n_ch).T
    if n_ch == 1:
        data = data[0]
    return np.ascontiguousarray(data), meta


def write_frame(path, frame: ComplexFrame | DualPolFrame, label: str = "") -> Path:
    if isinstance(frame, DualPolFrame):
        return write_waveform(path, frame.to_array(), frame.sample_rate, label, ["x", "y"],
                              {"t0": frame.x.t0})
    return write_waveform(path, frame.samples, frame.sample_rate, label, ["field"], {"t0": frame.t0})


def read_frame(path) -> ComplexFrame | DualPolFrame:
    data, meta = read_waveform(path)
    t0 = meta.get("t0", 0.0)
    if data.ndim == 2:
        return DualPolFrame.from_array(data, meta["sample_rate"], t0)
    return ComplexFrame(data, meta["sample_rate"], t0)


def write_quad(path, quad) -> Path:
    """Store an :class:`~prrx.frontend.IntensityQuad` as a float64 multi-channel file."""
    chans = quad.channels()
    return write_waveform(path, np.vstack(list(chans.values())), quad.sample_rate,
                          "intensity quad", list(chans))


def read_quad(path):
    from .frontend import IntensityQuad

    data, meta = read_waveform(path)
    data = np.atleast_2d(data)
    ch = dict(zip(meta["channels"], data))
    return IntensityQuad(ch["a_x"], ch["b_x"], ch.get("a_y"), ch.get("b_y"), meta["sample_rate"])
