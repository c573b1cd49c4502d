"""Geometric-acoustics impulse response simulation.

Paths come from two sources. Purely specular paths up to three bounces (and
the direct path) are built deterministically with image construction and
validated against the scene. Everything else is sampled by launching rays
from the emitter: scattered energy reaches the listener by next-event
connection, deeper specular chains by hitting a receiver sphere.

Each arrival carries a signed per-band amplitude. Specular bounces multiply
by ``(1 - a) * (-b)``; ``assemble_ir`` deposits band-limited kernels at the
arrival delays and blends the bands in the frequency domain.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import trace as _trace
from .geometry import EPS_HIT, segment_visible, uniform_sphere
from .signals import SampledIR, next_fft_size, rfft_frequencies

log = logging.getLogger(__name__)

DETERMINISTIC_DEPTH = 3
KIND_NAMES = {
    _trace.KIND_DIRECT: "direct",
    _trace.KIND_SCATTER: "scatter",
    _trace.KIND_SPECULAR: "specular",
    _trace.KIND_IMAGE: "specular",
}


@dataclass(frozen=True)
class SimConfig:
    n_rays: int = 1_000_000
    max_depth: int = 30
    receiver_radius: float = 0.2
    ir_duration: float = 0.1
    sample_rate: float = 16000.0
    taps: int = 81
    block_size: int = 2048

    def __post_init__(self):
        if self.n_rays < 1 or self.max_depth < 1:
            raise ValueError("n_rays and max_depth must be >= 1")
        if self.receiver_radius <= 0 or self.ir_duration <= 0 or self.sample_rate <= 0:
            raise ValueError("receiver_radius, ir_duration and sample_rate must be positive")
        if self.taps % 2 == 0:
            raise ValueError("taps must be odd")

    @property
    def n_samples(self):
        return int(round(self.ir_duration * self.sample_rate))


@dataclass(frozen=True)
class Interaction:
    surface: int
    kind: str
    factors: np.ndarray


@dataclass(frozen=True)
class RayPath:
    total_length: float
    amplitude: np.ndarray  # signed, per band, includes distance decay
    interactions: tuple = ()
    order: int = 0
    kind: str = "direct"
    launch_weight: float = 1.0

    @property
    def attenuation(self):
        """Product of interaction factors (per band)."""
        if not self.interactions:
            return np.ones_like(self.amplitude)
        return np.prod([i.factors for i in self.interactions], axis=0)


@dataclass
class PathSet:
    """Columnar store of arrivals; iterating yields :class:`RayPath` views."""

    lengths: np.ndarray
    amplitudes: np.ndarray
    orders: np.ndarray
    kinds: np.ndarray
    rays: np.ndarray
    explicit: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self):
        return len(self.lengths)

    def __iter__(self):
        n_exp = len(self.explicit)
        for i in range(len(self)):
            if i < n_exp:
                yield self.explicit[i]
            else:
                yield RayPath(float(self.lengths[i]), self.amplitudes[i].copy(),
                              order=int(self.orders[i]), kind=KIND_NAMES[int(self.kinds[i])])

    @classmethod
    def empty(cls, n_bands):
        return cls(np.zeros(0), np.zeros((0, n_bands)), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def from_paths(cls, paths, n_bands=None):
        paths = list(paths)
        if not paths:
            return cls.empty(n_bands or 1)
        kinds = [_trace.KIND_DIRECT if p.order == 0 else
                 (_trace.KIND_SCATTER if p.kind == "scatter" else _trace.KIND_IMAGE) for p in paths]
        return cls(np.array([p.total_length for p in paths], dtype=np.float64),
                   np.array([np.atleast_1d(p.amplitude) for p in paths], dtype=np.float64),
                   np.array([p.order for p in paths], dtype=np.int64),
                   np.array(kinds, dtype=np.int64),
                   np.full(len(paths), -1, dtype=np.int64),
                   explicit=paths)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if p is not None]
        out = cls(np.concatenate([p.lengths for p in parts]),
                  np.concatenate([p.amplitudes for p in parts]),
                  np.concatenate([p.orders for p in parts]),
                  np.concatenate([p.kinds for p in parts]),
                  np.concatenate([p.rays for p in parts]),
                  dropped=sum(p.dropped for p in parts))
        # explicit records always sit at the front
        out.explicit = parts[0].explicit if parts else []
        return out

    def stats(self):
        by_order = Counter(int(o) for o in self.orders)
        by_kind = Counter(KIND_NAMES[int(k)] for k in self.kinds)
        return {
            "n_paths": len(self),
            "count_per_order": {str(k): v for k, v in sorted(by_order.items())},
            "count_per_kind": dict(by_kind),
            "dropped": int(self.dropped),
        }


# -- deterministic paths -----------------------------------------------------------


def _mirror(p, normal, offset):
    return p - 2.0 * (normal @ p - offset) * normal


def _validate_chain(scene, emitter, listener, seq, images):
    """Back-trace listener -> images; returns hit points or ``None`` if invalid."""
    pk = scene.packed
    point = listener
    hits = []
    for s, img in zip(reversed(seq), reversed(images)):
        n = pk.normals[s]
        c = pk.offsets[s]
        d = img - point
        denom = n @ d
        if abs(denom) < 1e-12:
            return None
        t = (c - n @ point) / denom
        if not (1e-9 < t < 1.0):
            return None
        hit = point + t * d
        if np.any(pk.edge_normals[s] @ hit < pk.edge_offsets[s] - 1e-9):
            return None
        if np.linalg.norm(hit - point) <= EPS_HIT or not segment_visible(point, hit, scene):
            return None
        hits.append(hit)
        point = hit
    if not segment_visible(point, emitter, scene):
        return None
    return hits[::-1]


def specular_paths(scene, emitter, listener, max_order):
    """Valid purely specular paths with 1..``max_order`` bounces."""
    pk = scene.packed
    n_s = len(pk.offsets)
    out = []

    def rec(seq, images):
        if seq:
            if _validate_chain(scene, emitter, listener, seq, images) is not None:
                out.append((tuple(seq), images[-1]))
        if len(seq) == max_order:
            return
        prev = images[-1] if images else emitter
        for s in range(n_s):
            if seq and seq[-1] == s:
                continue
            rec(seq + [s], images + [_mirror(prev, pk.normals[s], pk.offsets[s])])

    rec([], [])
    paths = []
    for seq, img in out:
        length = float(np.linalg.norm(listener - img))
        inter = tuple(
            Interaction(s, "specular", -(1.0 - pk.scattering[s]) * pk.reflection[s]) for s in seq
        )
        att = np.prod([i.factors for i in inter], axis=0)
        paths.append(RayPath(length, att / length, inter, order=len(seq), kind="specular"))
    return paths


def _check_poses(scene, emitter, listener):
    e = np.asarray(emitter.position, dtype=np.float64)
    l = np.asarray(listener.position, dtype=np.float64)
    if np.linalg.norm(e - l) < 1e-9:
        raise ValueError("listener coincides with emitter")
    if scene.surfaces and not (scene.contains(e) and scene.contains(l)):
        raise ValueError("emitter and listener must lie inside the scene bounds")
    return e, l


def _block_randoms(seed, block, n, max_depth):
    rng = np.random.default_rng([int(seed), int(block)])
    u = rng.random((n, 2))
    dirs = uniform_sphere(u[:, 0], u[:, 1])
    rnd = rng.random((n, max_depth + 1, 3))
    rnd[..., 1] = np.minimum(rnd[..., 1], 1.0 - 1e-12)
    return dirs, rnd


def _trace_one_block(scene, e, l, cfg, seed, block, max_len):
    start = block * cfg.block_size
    n = min(cfg.block_size, cfg.n_rays - start)
    dirs, rnd = _block_randoms(seed, block, n, cfg.max_depth)
    pk = scene.packed
    det_depth = min(DETERMINISTIC_DEPTH, cfg.max_depth)
    lengths, amps, orders, kinds, rays, dropped = _trace.trace_block(
        pk.normals, pk.offsets, pk.edge_normals, pk.edge_offsets, pk.reflection, pk.scattering,
        e, l, float(cfg.receiver_radius), dirs, rnd, int(cfg.max_depth), int(det_depth),
        float(cfg.n_rays), float(max_len), int(start), EPS_HIT,
    )
    return PathSet(lengths, amps, orders, kinds, rays, dropped=int(dropped))


def _deterministic(scene, e, l, cfg):
    paths = []
    nb = scene.n_bands
    d = float(np.linalg.norm(l - e))
    if segment_visible(e, l, scene):
        paths.append(RayPath(d, np.full(nb, 1.0 / d), (), order=0, kind="direct"))
    if scene.surfaces:
        paths.extend(specular_paths(scene, e, l, min(DETERMINISTIC_DEPTH, cfg.max_depth)))
    return paths


def _iter_blocks(scene, e, l, cfg, seed, threads):
    if not scene.surfaces:
        return
    n_blocks = -(-cfg.n_rays // cfg.block_size)
    max_len = cfg.ir_duration * scene.speed_of_sound
    if threads <= 1:
        for b in range(n_blocks):
            yield _trace_one_block(scene, e, l, cfg, seed, b, max_len)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map preserves block order, so merging is thread-count independent
        yield from pool.map(lambda b: _trace_one_block(scene, e, l, cfg, seed, b, max_len),
                            range(n_blocks))


def trace_paths(scene, emitter, listener, cfg, seed=0, threads=1):
    """All arrivals from ``emitter`` to ``listener`` as a :class:`PathSet`."""
    e, l = _check_poses(scene, emitter, listener)
    det = PathSet.from_paths(_deterministic(scene, e, l, cfg), scene.n_bands)
    parts = [det] + list(_iter_blocks(scene, e, l, cfg, seed, threads))
    return PathSet.concat(parts)


# -- assembly ------------------------------------------------------------------------


def band_weights(freqs, band_centres):
    """Piecewise-linear interpolation weights in log frequency (partition of unity)."""
    freqs = np.asarray(freqs, dtype=np.float64)
    centres = np.asarray(band_centres, dtype=np.float64)
    nb = len(centres)
    w = np.zeros((nb, len(freqs)))
    if nb == 1:
        w[0] = 1.0
        return w
    lf = np.log(np.maximum(freqs, 1e-6))
    lc = np.log(centres)
    pos = np.interp(lf, lc, np.arange(nb))  # clamps outside the centre range
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, nb - 1)
    frac = pos - lo
    cols = np.arange(len(freqs))
    np.add.at(w, (lo, cols), 1.0 - frac)
    np.add.at(w, (hi, cols), frac)
    return w


class _Accumulator:
    def __init__(self, scene, cfg):
        self.scene = scene
        self.cfg = cfg
        self.pad = (cfg.taps - 1) // 2 + 1
        self.n = cfg.n_samples
        self.buffers = np.zeros((scene.n_bands, self.n + 2 * self.pad + 1))
        self.dropped = 0

    def add(self, paths):
        if len(paths) == 0:
            return
        delays = paths.lengths / self.scene.speed_of_sound * self.cfg.sample_rate
        keep = delays < self.n
        self.dropped += int(np.sum(~keep)) + int(paths.dropped)
        amps = paths.amplitudes[keep]
        if amps.shape[1] != self.scene.n_bands:
            raise ValueError("path amplitudes and scene disagree on band count")
        _trace.deposit(self.buffers, delays[keep], amps, self.cfg.taps, self.pad)

    def finish(self):
        nb, length = self.buffers.shape
        n_fft = next_fft_size(2 * length)
        spec = np.fft.rfft(self.buffers, n=n_fft, axis=1)
        w = band_weights(rfft_frequencies(n_fft, self.cfg.sample_rate), self.scene.octave_bands)
        x = np.fft.irfft(np.sum(spec * w, axis=0), n=n_fft)
        return SampledIR(x[self.pad:self.pad + self.n], self.cfg.sample_rate)


def assemble_ir(paths, scene, cfg):
    """Broadband IR from arrivals; arrivals past ``ir_duration`` are dropped and counted."""
    if not isinstance(paths, PathSet):
        paths = PathSet.from_paths(paths, scene.n_bands)
    acc = _Accumulator(scene, cfg)
    acc.add(paths)
    if acc.dropped:
        log.info("assemble_ir: dropped %d arrivals beyond %.3fs", acc.dropped, cfg.ir_duration)
    return acc.finish()


def simulate(scene, emitter, listener, cfg, seed=0, threads=1, stats=None):
    """Trace and assemble in bounded memory; deterministic for a fixed seed.

    If ``stats`` is a dict it is filled with path counts and the dropped count.
    """
    e, l = _check_poses(scene, emitter, listener)
    acc = _Accumulator(scene, cfg)
    det = PathSet.from_paths(_deterministic(scene, e, l, cfg), scene.n_bands)
    acc.add(det)
    per_order = Counter(int(o) for o in det.orders)
    per_kind = Counter(KIND_NAMES[int(k)] for k in det.kinds)
    for block in _iter_blocks(scene, e, l, cfg, seed, threads):
        acc.add(block)
        per_order.update(int(o) for o in block.orders)
        per_kind.update(KIND_NAMES[int(k)] for k in block.kinds)
    if stats is not None:
        stats.update({
            "n_paths": int(sum(per_order.values())),
            "count_per_order": {str(k): v for k, v in sorted(per_order.items())},
            "count_per_kind": dict(per_kind),
            "dropped": acc.dropped,
            "n_rays": cfg.n_rays,
            "max_depth": cfg.max_depth,
        })
    return acc.finish()


def first_arrival_time(ir, threshold=0.5, upsample=16):
    """Time of the first peak reaching ``threshold`` x the global peak magnitude.

    The peak is refined on a band-limited (FFT) upsampling of the signal.
    """
    x = ir.samples
    mag = np.abs(x)
    if mag.max() == 0:
        return None
    above = np.nonzero(mag >= threshold * mag.max())[0]
    i0 = int(above[0])
    # climb to the local maximum of this arrival
    while i0 + 1 < len(x) and mag[i0 + 1] > mag[i0]:
        i0 += 1
    lo = max(0, i0 - 32)
    seg = x[lo:i0 + 33]
    n = len(seg)
    n_up = n * upsample
    up = np.fft.irfft(np.fft.rfft(seg, 2 * n), 2 * n * upsample) * upsample
    up = up[:n_up]
    centre = (i0 - lo) * upsample
    win = slice(max(0, centre - upsample), min(n_up, centre + upsample + 1))
    j = win.start + int(np.argmax(np.abs(up[win])))
    if 0 < j < n_up - 1:
        y0, y1, y2 = np.abs(up[j - 1:j + 2])
        denom = y0 - 2 * y1 + y2
        j = j + (0.5 * (y0 - y2) / denom if denom != 0 else 0.0)
    return (lo + j / upsample) / ir.sample_rate
