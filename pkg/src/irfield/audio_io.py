"""IR file formats.

* ``.wav``: IEEE float32 little-endian, mono or 2-channel, rate in the header.
* ``.f32``: raw little-endian float32, interleaved by frame, with a sidecar
  ``<name>.json`` holding ``{"sample_rate": <Hz>, "channels": <n>}``.
"""

import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signals import SampledIR


def sidecar_path(path):
    """Provenance sidecar next to an output file: ``ir.wav`` -> ``ir.wav.json``."""
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_ir(path, ir):
    path = Path(path)
    data = ir.samples.T if ir.samples.ndim == 2 else ir.samples
    data = np.ascontiguousarray(data, dtype="<f4")
    if path.suffix == ".f32":
        path.write_bytes(data.tobytes())
        meta = {"sample_rate": ir.sample_rate, "channels": ir.n_channels}
        path.with_suffix(".json").write_text(json.dumps(meta))
    else:
        rate = int(round(ir.sample_rate))
        if rate != ir.sample_rate:
            raise ValueError("WAV headers hold integer sample rates")
        wavfile.write(path, rate, data)
    return path


def read_ir(path):
    path = Path(path)
    if path.suffix == ".f32":
        meta = json.loads(path.with_suffix(".json").read_text())
        channels = int(meta.get("channels", 1))
        data = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
        if channels > 1:
            data = data.reshape(-1, channels).T
        return SampledIR(data, float(meta["sample_rate"]))
    rate, data = wavfile.read(path)
    if data.dtype.kind == "i":
        data = data / float(np.iinfo(data.dtype).max)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data.T
    return SampledIR(data, float(rate))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
