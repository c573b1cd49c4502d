"""Frequency-domain acoustic volume rendering.

For each listener direction ``omega`` the renderer marches ``N_r`` samples
``u_m = u_n + m * du`` (``m = 1..N_r``) and forms::

    H_omega[f] = sum_m T_m (1 - exp(-sigma_m du)) S_m[f] exp(-j 2 pi f u_m / v)

with ``T_m = exp(-sum_{x<m} sigma_x du)``. Directions are averaged with the
listener gain ``G``; the time-domain result is then divided by the travelled
distance ``max(t, t_min) * v``.

Directions are processed in fixed-size chunks and their partial sums are
added in chunk order, so results do not depend on the worker count.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import render as _kr
from .field import FieldGradients
from .geometry import Pose
from .signals import SampledIR, Spectrum, rfft_frequencies

CHUNK_DIRECTIONS = 64


@dataclass(frozen=True)
class RenderConfig:
    """Sampling and transform layout for rendering.

    ``seed`` fixes the stratified azimuth jitter, so a config always renders
    with the same direction set.
    """

    N_theta: int = 80
    N_phi: int = 40
    N_r: int = 64
    u_n: float = 0.1
    u_f: float = 3.0
    v: float = 343.0
    n_fft: int = 4096
    sample_rate: float = 16000.0
    ir_len: int = 1600
    seed: int = 0

    def __post_init__(self):
        if min(self.N_theta, self.N_phi, self.N_r) < 1:
            raise ValueError("N_theta, N_phi and N_r must be >= 1")
        if not 0 <= self.u_n < self.u_f:
            raise ValueError("need 0 <= u_n < u_f")
        if self.v <= 0 or self.sample_rate <= 0:
            raise ValueError("v and sample_rate must be positive")
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError("n_fft must be even")
        if not 1 <= self.ir_len <= self.n_fft:
            raise ValueError("ir_len must lie in 1..n_fft")
        if self.u_f / self.v >= self.n_fft / self.sample_rate:
            raise ValueError(
                f"far bound delay {self.u_f / self.v:.4g}s exceeds the "
                f"{self.n_fft / self.sample_rate:.4g}s transform window"
            )

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    @property
    def du(self):
        return (self.u_f - self.u_n) / self.N_r

    @property
    def u_values(self):
        return self.u_n + self.du * np.arange(1, self.N_r + 1)

    @property
    def omega0(self):
        """Angular frequency step per bin (rad/s)."""
        return 2 * np.pi * self.sample_rate / self.n_fft

    @property
    def t_min(self):
        return max(self.u_n / self.v, 1.0 / self.sample_rate)

    def decay(self):
        t = np.maximum(np.arange(self.n_fft) / self.sample_rate, self.t_min)
        return 1.0 / (t * self.v)

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return RenderConfig(**d)


# -- gain patterns --------------------------------------------------------------------


class GainPattern:
    """Listener gain ``G(omega)``; ``evaluate`` returns ``(R, 1)`` or ``(R, K)`` complex."""

    def evaluate(self, dirs, n_bins):
        raise NotImplementedError

    def for_head(self, head):
        """Copy of the pattern attached to a head pose (for head-relative patterns)."""
        return self


class OmniGain(GainPattern):
    def __init__(self, scale=1.0):
        self.scale = complex(scale)

    def evaluate(self, dirs, n_bins):
        return np.full((len(dirs), 1), self.scale, dtype=np.complex128)


class CardioidGain(GainPattern):
    def __init__(self, axis):
        a = np.asarray(axis, dtype=np.float64)
        self.axis = a / np.linalg.norm(a)

    def evaluate(self, dirs, n_bins):
        return (0.5 * (1.0 + dirs @ self.axis)).astype(np.complex128)[:, None]


def head_frame(head):
    """Rows: forward, left, up for a head pose (up is world +z unless degenerate)."""
    fwd = head.orientation
    up = np.array([0.0, 0.0, 1.0])
    left = np.cross(up, fwd)
    if np.linalg.norm(left) < 1e-9:
        left = np.array([0.0, 1.0, 0.0])
    left /= np.linalg.norm(left)
    up = np.cross(fwd, left)
    return np.stack([fwd, left, up])


class HRTFTable:
    """Per-ear complex gains on an azimuth x elevation grid (head frame).

    Azimuth cell ``i`` is centred on ``2 pi i / n_az`` measured from forward
    toward left; elevation cell ``j`` on ``-pi/2 + pi (j + 0.5) / n_el``.
    ``gains`` has shape ``(2, n_az, n_el, n_fft // 2 + 1)``; ear 0 is left.
    """

    def __init__(self, gains, sample_rate, n_fft):
        g = np.asarray(gains, dtype=np.complex128)
        if g.ndim != 4 or g.shape[0] != 2 or g.shape[3] != n_fft // 2 + 1:
            raise ValueError("gains must be (2, n_az, n_el, n_fft//2+1)")
        if not np.all(np.isfinite(g)):
            raise ValueError("HRTF gains must be finite")
        self.gains = g
        self.sample_rate = float(sample_rate)
        self.n_fft = int(n_fft)

    @property
    def n_az(self):
        return self.gains.shape[1]

    @property
    def n_el(self):
        return self.gains.shape[2]

    def cell(self, local_dirs):
        az = np.arctan2(local_dirs[:, 1], local_dirs[:, 0])
        el = np.arcsin(np.clip(local_dirs[:, 2], -1, 1))
        i = np.rint(az / (2 * np.pi) * self.n_az).astype(np.int64) % self.n_az
        j = np.clip(np.floor((el + np.pi / 2) / np.pi * self.n_el).astype(np.int64), 0, self.n_el - 1)
        return i, j

    def ear(self, index, head=None):
        return HRTFGain(self, index, head)

    def save(self, path):
        header = json.dumps({"n_azimuth": self.n_az, "n_elevation": self.n_el,
                             "sample_rate": self.sample_rate, "n_fft": self.n_fft}).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.gains.view(np.float64).astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        (n,) = struct.unpack_from("<I", raw)
        meta = json.loads(raw[4:4 + n])
        shape = (2, meta["n_azimuth"], meta["n_elevation"], meta["n_fft"] // 2 + 1)
        body = np.frombuffer(raw, dtype="<f8", offset=4 + n).astype(np.float64)
        if body.size != 2 * np.prod(shape):
            raise ValueError("HRTF body size does not match header")
        return cls(body.view(np.complex128).reshape(shape), meta["sample_rate"], meta["n_fft"])


class HRTFGain(GainPattern):
    def __init__(self, table, ear, head=None):
        if ear not in (0, 1):
            raise ValueError("ear must be 0 (left) or 1 (right)")
        self.table = table
        self.ear_index = ear
        self.head = head if head is not None else Pose(np.zeros(3))

    def for_head(self, head):
        return HRTFGain(self.table, self.ear_index, head)

    def evaluate(self, dirs, n_bins):
        if n_bins != self.table.gains.shape[3]:
            raise ValueError("HRTF bin count does not match the render transform")
        local = dirs @ head_frame(self.head).T
        i, j = self.table.cell(local)
        return self.table.gains[self.ear_index, i, j]


def parse_gain(spec):
    """``omni``, ``cardioid[:x,y,z]`` or ``hrtf:<file>`` (returns a table for HRTF)."""
    if spec == "omni":
        return OmniGain()
    if spec.startswith("cardioid"):
        axis = [1.0, 0.0, 0.0]
        if ":" in spec:
            axis = [float(v) for v in spec.split(":", 1)[1].split(",")]
        return CardioidGain(axis)
    if spec.startswith("hrtf:"):
        return HRTFTable.load(spec[5:])
    raise ValueError(f"unknown gain pattern {spec!r}")


# -- sampling -------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionSet:
    dirs: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.dirs)


def sample_directions(N_theta, N_phi, rng):
    """Stratified azimuths and equal-area (midpoint) elevations.

    ``rng`` is a ``numpy.random.Generator`` or a seed.
    """
    if N_theta < 1 or N_phi < 1:
        raise ValueError("direction counts must be >= 1")
    rng = np.random.default_rng(rng)
    i = np.arange(N_theta)[:, None]
    theta = 2 * np.pi * (i + rng.random((N_theta, N_phi))) / N_theta
    j = np.arange(1, N_phi + 1)[None, :]
    phi = np.arccos(2 * (j - 0.5) / N_phi - 1) * np.ones((N_theta, 1))
    s = np.sin(phi)
    dirs = np.stack([s * np.cos(theta), s * np.sin(theta), np.cos(phi)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(dirs)
    return DirectionSet(dirs, np.full(n, 1.0 / n))


def sample_points(origin, direction, cfg):
    """``(positions (N_r, 3), u (N_r,), du)`` along one ray."""
    d = np.asarray(direction, dtype=np.float64)
    u = cfg.u_values
    return np.asarray(origin, dtype=np.float64) + u[:, None] * d, u, cfg.du


def quadrature_weights(s):
    """``w_m = T_m (1 - exp(-s_m))`` along the last axis for optical depths ``s``.

    Returns ``(w, T_next)`` where ``T_next[m] = T_{m+1}``.
    """
    s = np.asarray(s, dtype=np.float64)
    cs = np.cumsum(s, axis=-1)
    t_prev = np.exp(-(cs - s))
    return t_prev * -np.expm1(-s), np.exp(-cs)


# -- core -----------------------------------------------------------------------------


def _direction_set(cfg):
    return sample_directions(cfg.N_theta, cfg.N_phi, np.random.default_rng(cfg.seed))


def _chunks(n):
    return [slice(a, min(a + CHUNK_DIRECTIONS, n)) for a in range(0, n, CHUNK_DIRECTIONS)]


def _march(field, origin, dirs, cfg):
    """Sample the field along rays; returns points, sigma, coef, tau, w, T_next."""
    u = cfg.u_values
    n_rays, m = len(dirs), cfg.N_r
    pts = origin[None, None, :] + dirs[:, None, :] * u[None, :, None]
    flat_dirs = np.repeat(dirs, m, axis=0)
    ranges = np.tile(u, n_rays)
    sigma, coef, extra = field.sample(pts.reshape(-1, 3), flat_dirs, ranges)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(n_rays, m)
    coef = np.asarray(coef, dtype=np.complex128).reshape(n_rays, m, -1)
    tau = np.broadcast_to(u / cfg.v, (n_rays, m)).copy()
    if extra is not None:
        tau += np.asarray(extra).reshape(n_rays, m)
    w, t_next = quadrature_weights(sigma * cfg.du)
    return pts, flat_dirs, sigma, coef, tau, w, t_next


def _check_window(tau, cfg):
    hit = tau[np.isfinite(tau)]
    if hit.size and hit.max() >= cfg.n_fft / cfg.sample_rate:
        raise ValueError("sample delay exceeds the transform window; raise n_fft")


def _ray_block(field, origin, dirs, cfg):
    _, _, _, coef, tau, w, _ = _march(field, origin, dirs, cfg)
    _check_window(np.where(w > 0, tau, 0.0), cfg)
    return _kr.ray_spectra(w, tau, coef, cfg.n_bins, cfg.omega0)


def render_ray(field, listener_pos, omega, emitter, cfg):
    """Pre-decay spectrum along a single direction."""
    origin = np.asarray(listener_pos, dtype=np.float64).reshape(3)
    d = np.asarray(omega, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(d) - 1) > 1e-9:
        raise ValueError("direction must be unit length")
    bins = _ray_block(field, origin, d, cfg)[0]
    return Spectrum(bins, cfg.n_fft, cfg.sample_rate)


def _pre_decay_spectrum(field, origin, gain, cfg, threads):
    ds = _direction_set(cfg)
    slices = _chunks(len(ds))

    def work(sl):
        hw = _ray_block(field, origin, ds.dirs[sl], cfg)
        g = gain.evaluate(ds.dirs[sl], cfg.n_bins) * ds.weights[sl, None]
        return np.sum(g * hw, axis=0)

    total = np.zeros(cfg.n_bins, dtype=np.complex128)
    for part in _ordered_map(work, slices, threads):
        total += part
    return total


def _ordered_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded window keeps at most 2*threads partial results alive
        window = 2 * threads
        for start in range(0, len(items), window):
            yield from pool.map(fn, items[start:start + window])


def _position(pose):
    return np.asarray(pose.position if isinstance(pose, Pose) else pose, dtype=np.float64).reshape(3)


def render_ir(field, listener, gain, emitter, cfg, threads=1):
    """Render ``(Spectrum, SampledIR)`` at a listener pose.

    The returned spectrum is the transform of the returned (decayed,
    truncated) IR at ``cfg.n_fft``.
    """
    origin = _position(listener)
    if isinstance(listener, Pose):
        gain = gain.for_head(listener)
    h_pre = _pre_decay_spectrum(field, origin, gain, cfg, threads)
    h_full = np.fft.irfft(h_pre, n=cfg.n_fft)
    h = h_full[:cfg.ir_len] * cfg.decay()[:cfg.ir_len]
    spec = Spectrum(np.fft.rfft(h, n=cfg.n_fft), cfg.n_fft, cfg.sample_rate)
    return spec, SampledIR(h, cfg.sample_rate)


def ear_positions(head, ear_spacing):
    if not ear_spacing > 0:
        raise ValueError("ear_spacing must be positive")
    left_axis = head_frame(head)[1]
    half = 0.5 * ear_spacing * left_axis
    return head.position + half, head.position - half


def render_binaural(field, head, ear_spacing, gain_left, gain_right, emitter, cfg, threads=1):
    """Two-channel IR (left, right) from ears on the head's left-right axis."""
    left, right = ear_positions(head, ear_spacing)
    out = []
    for pos, g in ((left, gain_left), (right, gain_right)):
        _, ir = render_ir(field, Pose(pos, head.orientation), g, emitter, cfg, threads)
        out.append(ir.samples)
    return SampledIR(np.stack(out), cfg.sample_rate)


# -- adjoint --------------------------------------------------------------------------


def rfft_adjoint(g, n):
    """``dL/dx`` for ``X = rfft(x, n)`` given ``g = dL/dRe X + 1j dL/dIm X``."""
    g = np.array(g, dtype=np.complex128)
    g[1:-1] *= 0.5
    return n * np.fft.irfft(g, n=n)


def irfft_adjoint(a, n):
    """Cotangent of the half spectrum for ``x = irfft(X, n)`` given ``a = dL/dx``."""
    g = np.fft.rfft(a, n=n) / n
    g[1:-1] *= 2.0
    g[0] = g[0].real
    g[-1] = g[-1].real
    return g


def render_ir_adjoint(field, listener, gain, emitter, cfg, upstream, upstream_ir=None,
                      threads=1, out=None):
    """Exact gradients of ``render_ir`` outputs w.r.t. voxel field parameters.

    Parameters
    ----------
    upstream : Spectrum or array, shape (n_fft // 2 + 1,)
        ``dL/dRe H + 1j dL/dIm H`` for the returned spectrum.
    upstream_ir : array, shape (ir_len,), optional
        ``dL/dh`` for the returned IR samples.
    out : FieldGradients, optional
        Buffer overwritten with the result, to avoid a fresh allocation.
    """
    g_spec = upstream.bins if isinstance(upstream, Spectrum) else np.asarray(upstream)
    if g_spec.shape != (cfg.n_bins,):
        raise ValueError(f"upstream must have {cfg.n_bins} bins, got {g_spec.shape}")
    g_h = rfft_adjoint(g_spec, cfg.n_fft)[:cfg.ir_len]
    if upstream_ir is not None:
        upstream_ir = np.asarray(upstream_ir, dtype=np.float64)
        if upstream_ir.shape != (cfg.ir_len,):
            raise ValueError("upstream_ir must have ir_len samples")
        g_h = g_h + upstream_ir
    a = np.zeros(cfg.n_fft)
    a[:cfg.ir_len] = g_h * cfg.decay()[:cfg.ir_len]
    g_pre = irfft_adjoint(a, cfg.n_fft)

    origin = _position(listener)
    if isinstance(listener, Pose):
        gain = gain.for_head(listener)
    ds = _direction_set(cfg)

    if out is None:
        out = FieldGradients.zeros_like(field)
    else:
        out.zero()
    chunks = _chunks(len(ds))

    def work(sl):
        # the first chunk writes straight into ``out``; later ones into fresh parts
        target = out if sl == chunks[0] else None
        dirs = ds.dirs[sl]
        pts, flat_dirs, _, coef, tau, w, t_next = _march(field, origin, dirs, cfg)
        gain_w = gain.evaluate(dirs, cfg.n_bins) * ds.weights[sl, None]
        g_ray = np.conj(gain_w) * g_pre[None, :]
        dw, g_coef = _kr.ray_spectra_adjoint(w, tau, coef, g_ray, cfg.omega0)
        # w_m = T_m (1 - e^{-s_m}):  dL/ds_x = a_x T_{x+1} - sum_{m>x} a_m w_m
        aw = dw * w
        tail = np.cumsum(aw[:, ::-1], axis=1)[:, ::-1] - aw
        d_sigma = (dw * t_next - tail) * cfg.du
        return field.query_gradients(pts.reshape(-1, 3), flat_dirs, d_sigma.ravel(),
                                     g_coef.reshape(len(flat_dirs), -1), out=target)

    for part in _ordered_map(work, chunks, threads):
        if part is not out:
            out += part
    return out


def frequencies(cfg):
    return rfft_frequencies(cfg.n_fft, cfg.sample_rate)
