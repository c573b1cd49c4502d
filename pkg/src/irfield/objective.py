"""Training losses (with gradients) and evaluation metrics.

Every loss is a mean over its elements so weights transfer across IR
lengths. Gradients follow the complex cotangent convention
``g = dL/dRe + 1j dL/dIm`` for spectra and plain ``dL/dh`` for signals.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signals import SampledIR, Spectrum, StftConfig, frame_signal, hann, hilbert_envelope

log = logging.getLogger(__name__)

STFT_MAG_FLOOR = 1e-7
ENERGY_FLOOR_DB = 60.0


@dataclass(frozen=True)
class LossWeights:
    amp: float = 0.5
    phase: float = 0.5
    time: float = 100.0
    stft: float = 1.0
    energy: float = 5.0

    def __post_init__(self):
        if min(self.amp, self.phase, self.time, self.stft, self.energy) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def zeros(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _bins(x):
    return x.bins if isinstance(x, Spectrum) else np.asarray(x, dtype=np.complex128)


def _samples(x):
    return x.samples if isinstance(x, SampledIR) else np.asarray(x, dtype=np.float64)


def _pair(a, b, kind):
    a, b = (_bins(a), _bins(b)) if kind == "spec" else (_samples(a), _samples(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unit_phasor(z):
    r = np.abs(z)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, z.real / safe, 1.0), np.where(r > 0, z.imag / safe, 0.0)


# -- spectral losses ------------------------------------------------------------------


def loss_spec(H, H_ref, grad=False):
    """Mean L1 of real parts plus mean L1 of imaginary parts."""
    a, b = _pair(H, H_ref, "spec")
    d = a - b
    val = float(np.mean(np.abs(d.real)) + np.mean(np.abs(d.imag)))
    if not grad:
        return val
    return val, (np.sign(d.real) + 1j * np.sign(d.imag)) / d.size


def loss_amp(H, H_ref, grad=False):
    a, b = _pair(H, H_ref, "spec")
    ra = np.abs(a)
    d = ra - np.abs(b)
    val = float(np.mean(np.abs(d)))
    if not grad:
        return val
    safe = np.where(ra > 0, ra, 1.0)
    g = np.where(ra > 0, np.sign(d) * a / safe, 0.0) / d.size
    return val, g


def loss_phase(H, H_ref, grad=False):
    """Mean L1 between unit-phasor cosines plus mean L1 between sines."""
    a, b = _pair(H, H_ref, "spec")
    ca, sa = _unit_phasor(a)
    cb, sb = _unit_phasor(b)
    val = float(np.mean(np.abs(ca - cb)) + np.mean(np.abs(sa - sb)))
    if not grad:
        return val
    r = np.abs(a)
    sc = np.sign(ca - cb)
    ss = np.sign(sa - sb)
    safe = np.where(r > 0, r, 1.0)
    g = np.where(r > 0, (sc * a.imag - ss * a.real) * (-1j * a) / safe ** 3, 0.0) / a.size
    return val, g


def loss_time(h, h_ref, grad=False):
    a, b = _pair(h, h_ref, "time")
    d = a - b
    val = float(np.mean(np.abs(d)))
    if not grad:
        return val
    return val, np.sign(d) / d.size


# -- multi-resolution STFT ------------------------------------------------------------


def _stft_term(x, y, fft_size, hop, win, grad):
    """Spectral convergence + mean log-magnitude L1 for one resolution."""
    w = hann(win)
    fx = frame_signal(x, hop, win)
    fy = frame_signal(y, hop, win)
    X = np.fft.rfft(fx * w, n=fft_size, axis=-1)
    Y = np.fft.rfft(fy * w, n=fft_size, axis=-1)
    px = np.abs(X) ** 2
    mx = np.sqrt(np.maximum(px, STFT_MAG_FLOOR))
    my = np.sqrt(np.maximum(np.abs(Y) ** 2, STFT_MAG_FLOOR))
    diff = my - mx
    num = np.linalg.norm(diff)
    den = np.linalg.norm(my)
    sc = num / den
    ldiff = np.log(mx) - np.log(my)
    lm = np.mean(np.abs(ldiff))
    val = sc + lm
    if not grad:
        return val, None
    d_m = np.zeros_like(mx)
    if num > 0:
        d_m += -diff / (num * den)
    d_m += np.sign(ldiff) / (mx * ldiff.size)
    live = px > STFT_MAG_FLOOR
    g_x = np.where(live, d_m * X / np.where(live, mx, 1.0), 0.0)
    # adjoint of rfft over each frame, then of the windowed framing
    g_x[:, 1:-1] *= 0.5
    g_frames = fft_size * np.fft.irfft(g_x, n=fft_size, axis=-1)[:, :win] * w
    g = np.zeros(len(x))
    for i in range(len(g_frames)):
        g[i * hop:i * hop + win] += g_frames[i]
    return val, g


def loss_stft(h, h_ref, cfg=StftConfig(), grad=False):
    """Sum over resolutions of spectral convergence and log-magnitude L1.

    Spectral convergence is ``||M_ref - M||_F / ||M_ref||_F`` with magnitudes
    ``M = sqrt(max(|X|^2, 1e-7))`` of a periodic-Hann STFT.
    """
    a, b = _pair(h, h_ref, "time")
    if a.ndim != 1:
        raise ValueError("loss_stft expects mono signals")
    if len(a) < cfg.max_window:
        raise ValueError(f"signal of {len(a)} samples is shorter than window {cfg.max_window}")
    total = 0.0
    g = np.zeros(len(a)) if grad else None
    for res in cfg.resolutions:
        v, gi = _stft_term(a, b, *res, grad)
        total += v
        if grad:
            g += gi
    return (float(total), g) if grad else float(total)


# -- energy decay ---------------------------------------------------------------------


def schroeder_db(h):
    """Backward-integrated energy in dB (not normalised)."""
    e = np.cumsum(np.asarray(h, dtype=np.float64)[::-1] ** 2)[::-1]
    return 10.0 * np.log10(np.maximum(e, np.finfo(float).tiny)), e


def loss_energy(h, h_ref, grad=False):
    """Mean L1 between Schroeder decay curves in dB, both clamped at the
    reference's initial level minus 60 dB."""
    a, b = _pair(h, h_ref, "time")
    db_a, e_a = schroeder_db(a)
    db_b, e_b = schroeder_db(b)
    if e_b[0] <= 0:
        raise ValueError("reference IR is all zero")
    floor = db_b[0] - ENERGY_FLOOR_DB
    ca = np.maximum(db_a, floor)
    cb = np.maximum(db_b, floor)
    d = ca - cb
    val = float(np.mean(np.abs(d)))
    if not grad:
        return val
    live = (db_a > floor) & (e_a > 0)
    d_db = np.where(live, np.sign(d), 0.0) / d.size
    d_e = np.where(live, d_db * 10.0 / (np.log(10.0) * np.where(e_a > 0, e_a, 1.0)), 0.0)
    return val, 2.0 * a * np.cumsum(d_e)


# -- combination ----------------------------------------------------------------------


TERMS = ("spec", "amp", "phase", "time", "stft", "energy")


def total_loss(h, H, h_ref, H_ref, weights=LossWeights(), stft_cfg=StftConfig(), grad=False):
    """Weighted sum of all terms.

    Returns ``(total, breakdown)`` where ``breakdown`` maps each term to its
    weighted contribution; with ``grad=True`` also ``(g_H, g_h)``.
    """
    w = {"spec": 1.0, "amp": weights.amp, "phase": weights.phase, "time": weights.time,
         "stft": weights.stft, "energy": weights.energy}
    spectral = {"spec": loss_spec, "amp": loss_amp, "phase": loss_phase}
    temporal = {"time": loss_time, "energy": loss_energy}
    parts = {}
    g_H = np.zeros_like(_bins(H)) if grad else None
    g_h = np.zeros(_samples(h).shape) if grad else None
    for name in TERMS:
        if w[name] == 0:
            parts[name] = 0.0
            continue
        if name in spectral:
            out = spectral[name](H, H_ref, grad=grad)
        elif name in temporal:
            out = temporal[name](h, h_ref, grad=grad)
        else:
            out = loss_stft(h, h_ref, stft_cfg, grad=grad)
        val, g = out if grad else (out, None)
        parts[name] = w[name] * val
        if grad:
            if name in spectral:
                g_H += w[name] * g
            else:
                g_h += w[name] * g
    total = math.fsum(parts.values())
    if grad:
        return total, parts, (g_H, g_h)
    return total, parts


# -- metrics --------------------------------------------------------------------------


def metric_phase(H, H_ref):
    return loss_phase(H, H_ref)


def metric_amp(H, H_ref, rel_floor=1e-8):
    """Mean of ``| |H_ref| - |H| | / |H_ref|`` over bins above ``rel_floor * max|H_ref|``."""
    a, b = _pair(H, H_ref, "spec")
    rb = np.abs(b)
    keep = rb >= rel_floor * rb.max() if rb.max() > 0 else np.zeros(rb.shape, bool)
    excluded = int(rb.size - keep.sum())
    if excluded:
        log.warning("metric_amp: excluded %d near-zero reference bins", excluded)
    if not keep.any():
        raise ValueError("reference spectrum has no usable bins")
    return float(np.mean(np.abs(rb[keep] - np.abs(a)[keep]) / rb[keep]))


def metric_envelope(h, h_ref):
    """100 x mean |Env - Env_ref| / max(Env_ref) with Hilbert envelopes."""
    a, b = _pair(h, h_ref, "time")
    ea = hilbert_envelope(SampledIR(a, 1.0))
    eb = hilbert_envelope(SampledIR(b, 1.0))
    if eb.max() <= 0:
        raise ValueError("reference envelope is zero")
    return float(100.0 * np.mean(np.abs(ea - eb)) / eb.max())


def _decay_fit(h, sample_rate, hi_db, lo_db):
    """Seconds per 60 dB from a line fit to the normalised Schroeder curve."""
    db, e = schroeder_db(h)
    if e[0] <= 0:
        return math.nan
    db = db - db[0]
    sel = (db <= hi_db) & (db >= lo_db)
    if np.min(db) > lo_db or sel.sum() < 2:
        return math.nan
    t = np.nonzero(sel)[0] / sample_rate
    slope = np.polyfit(t, db[sel], 1)[0]
    if slope >= 0:
        return math.nan
    return -60.0 / slope


def t60(h, sample_rate):
    """Reverberation time from the -5..-25 dB decay; NaN when unreliable."""
    return _decay_fit(_samples(h), sample_rate, -5.0, -25.0)


def edt(h, sample_rate):
    """Early decay time from the 0..-10 dB decay."""
    return _decay_fit(_samples(h), sample_rate, 0.0, -10.0)


def c50(h, sample_rate):
    x = _samples(h)
    n50 = int(round(0.05 * sample_rate))
    early = float(np.sum(x[:n50] ** 2))
    late = float(np.sum(x[n50:] ** 2))
    if early <= 0 or late <= 0:
        return math.nan
    return 10.0 * math.log10(early / late)


def metric_t60(h, h_ref, sample_rate):
    """Percent error of T60; NaN when either decay cannot be fitted."""
    a, b = t60(h, sample_rate), t60(h_ref, sample_rate)
    return 100.0 * abs(a - b) / b


def metric_c50(h, h_ref, sample_rate):
    return abs(c50(h, sample_rate) - c50(h_ref, sample_rate))


def metric_edt(h, h_ref, sample_rate):
    """Absolute EDT error in milliseconds."""
    return 1000.0 * abs(edt(h, sample_rate) - edt(h_ref, sample_rate))


@dataclass
class MetricReport:
    phase_error: float
    amp_error: float
    envelope_error: float
    t60_error: float
    c50_error: float
    edt_error: float
    flags: list = field(default_factory=list)

    def as_dict(self):
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


METRIC_NAMES = ("phase_error", "amp_error", "envelope_error", "t60_error", "c50_error", "edt_error")


def evaluate(h, h_ref, n_fft=None):
    """All metrics for a predicted IR against a reference (same rate and length)."""
    if h.sample_rate != h_ref.sample_rate:
        raise ValueError("sample rates differ")
    if len(h) != len(h_ref):
        raise ValueError("IR lengths differ")
    n_fft = n_fft or 2 * len(h_ref)
    n_fft += n_fft % 2
    H = np.fft.rfft(h.samples, n_fft)
    H_ref = np.fft.rfft(h_ref.samples, n_fft)
    sr = h.sample_rate
    rep = MetricReport(metric_phase(H, H_ref), metric_amp(H, H_ref),
                       metric_envelope(h.samples, h_ref.samples),
                       metric_t60(h.samples, h_ref.samples, sr),
                       metric_c50(h.samples, h_ref.samples, sr),
                       metric_edt(h.samples, h_ref.samples, sr))
    for name in ("t60_error", "c50_error", "edt_error"):
        if math.isnan(getattr(rep, name)):
            rep.flags.append(f"{name} unreliable")
    return rep


def aggregate(reports):
    """Mean of each metric over reports, skipping flagged (NaN) values."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if not math.isnan(getattr(r, name))]
        out[name] = float(np.mean(vals)) if vals else None
        out[name + "_count"] = len(vals)
    return out
