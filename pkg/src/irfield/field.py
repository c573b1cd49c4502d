"""Impulse-response fields: density plus a directional emitted spectrum per point.

Two implementations share the sampling protocol used by the renderer::

    sigma, coef, extra_delay = field.sample(points, dirs, ranges)

``ranges`` holds each point's distance from the ray origin (or ``None``).
``sigma`` is ``(P,)``; ``coef`` is ``(P, K)`` complex (or ``(P, 1)`` for a
flat spectrum); ``extra_delay`` is ``(P,)`` seconds of delay already carried
by the emitted signal, or ``None``.

:class:`VoxelGridField` is trainable and exposes exact gradients through
:meth:`VoxelGridField.query_gradients`. :class:`AnalyticPointSourceField` is
a fixed construction whose rendering reproduces free-field propagation.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import render as _kr
from .geometry import Pose
from .signals import Spectrum, delay_phasor

MAGIC = b"IRFV"
VERSION = 1
_HEADER = struct.Struct("<4sI6d3I2I d 6d 2d")


@dataclass(frozen=True)
class FieldResponse:
    sigma: float
    emission: Spectrum


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sh_basis(dirs, degree):
    """Real orthonormal spherical harmonics up to ``degree`` (<= 2); ``(N, (L+1)^2)``."""
    if not 0 <= degree <= 2:
        raise ValueError("SH degree must be 0, 1 or 2")
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(len(d), 0.28209479177387814)]
    if degree >= 1:
        c1 = 0.4886025119029199
        cols += [c1 * y, c1 * z, c1 * x]
    if degree >= 2:
        c2 = 1.0925484305920792
        cols += [c2 * x * y, c2 * y * z, 0.31539156525252005 * (3 * z * z - 1),
                 c2 * x * z, 0.5462742152960396 * (x * x - y * y)]
    return np.stack(cols, axis=1)


def _split_flat(flat, rho_shape, coef_shape):
    n = int(np.prod(rho_shape))
    rho = flat[:n].reshape(rho_shape)
    coef = flat[n:].view(np.complex128).reshape(coef_shape)
    return rho, coef


@dataclass
class FieldGradients:
    """Gradients matching :class:`VoxelGridField` parameters.

    ``coef`` holds ``dL/dRe + 1j dL/dIm`` for each complex coefficient.
    """

    rho: np.ndarray
    coef: np.ndarray
    flat: np.ndarray | None = None   # shared storage of rho and coef, when contiguous

    @classmethod
    def zeros_like(cls, field):
        flat = np.zeros(field.rho.size + 2 * field.coef.size)
        return cls(*_split_flat(flat, field.rho.shape, field.coef.shape), flat=flat)

    def zero(self):
        self.rho[...] = 0.0
        self.coef[...] = 0.0
        return self

    def __iadd__(self, other):
        if self.flat is not None and other.flat is not None:
            self.flat += other.flat
        else:
            self.rho += other.rho
            self.coef += other.coef
        return self

    def scale(self, c):
        return FieldGradients(self.rho * c, self.coef * c)

    def as_vector(self):
        """Flat ``float64`` vector, ordered like ``VoxelGridField.parameter_vector``.

        A view (no copy) when the gradients were built by :meth:`zeros_like`.
        """
        if self.flat is not None:
            return self.flat
        return np.concatenate([self.rho.ravel(), self.coef.view(np.float64).ravel()])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.coef)))


class VoxelGridField:
    """Trilinear voxel grid of density logits and SH emission spectra.

    Nodes sit on a regular lattice spanning ``bounds`` inclusive; an axis with
    a single node is constant along that axis. The field is bound to one
    emitter pose.

    Parameters
    ----------
    bounds : array_like, shape (2, 3)
        Lower and upper corners in metres.
    resolution : tuple of int
        Node counts per axis.
    n_fft, sample_rate
        Layout of the emitted spectra (``n_fft // 2 + 1`` bins).
    sh_degree : int
        Directional degree ``L`` of the emission, 0 to 2.
    density_scale, emission_scale : float
        Units of the stored parameters: ``sigma = softplus(density_scale * rho)``
        and emission ``= emission_scale * sum_lm Y_lm coef_lm``. Larger units
        let a fixed optimiser step move the field further.
    """

    def __init__(self, bounds, resolution, n_fft, sample_rate, sh_degree=0, emitter=None,
                 rho=None, coef=None, init_sigma=1e-2, density_scale=1.0, emission_scale=1.0):
        b = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        if np.any(b[1] < b[0]):
            raise ValueError("bounds must satisfy lower <= upper")
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 1:
            raise ValueError("resolution needs three counts >= 1")
        for axis in range(3):
            if res[axis] > 1 and b[1, axis] == b[0, axis]:
                raise ValueError("an axis with several nodes needs non-zero extent")
        if n_fft < 2 or n_fft % 2:
            raise ValueError("n_fft must be even")
        if not 0 <= sh_degree <= 2:
            raise ValueError("sh_degree must lie in 0..2")
        self.bounds = b
        self.resolution = res
        self.n_fft = int(n_fft)
        self.sample_rate = float(sample_rate)
        self.sh_degree = int(sh_degree)
        if not (density_scale > 0 and emission_scale > 0):
            raise ValueError("parameter scales must be positive")
        self.density_scale = float(density_scale)
        self.emission_scale = float(emission_scale)
        self.emitter = emitter if emitter is not None else Pose(b.mean(axis=0))
        shape_c = res + (self.n_sh, self.n_bins)
        # rho and coef are views into one flat buffer so optimisers can update in place
        self._flat = np.zeros(int(np.prod(res)) + 2 * int(np.prod(shape_c)))
        self.rho, self.coef = _split_flat(self._flat, res, shape_c)
        self.rho[...] = (softplus_inverse(init_sigma) / self.density_scale if rho is None
                         else np.asarray(rho, dtype=np.float64).reshape(res))
        if coef is not None:
            self.coef[...] = np.asarray(coef, dtype=np.complex128).reshape(shape_c)
        if not (np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.coef))):
            raise ValueError("parameters must be finite")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    @property
    def n_sh(self):
        return (self.sh_degree + 1) ** 2

    @property
    def n_voxels(self):
        return int(np.prod(self.resolution))

    def copy(self):
        return VoxelGridField(self.bounds, self.resolution, self.n_fft, self.sample_rate,
                              self.sh_degree, self.emitter, self.rho.copy(), self.coef.copy(),
                              density_scale=self.density_scale, emission_scale=self.emission_scale)

    @property
    def sigma_nodes(self):
        return softplus(self.density_scale * self.rho)

    @property
    def emission_nodes(self):
        """Per-node SH emission coefficients in physical units."""
        return self.emission_scale * self.coef

    def node_position(self, index):
        index = np.asarray(index, dtype=np.float64)
        res = np.asarray(self.resolution)
        span = self.bounds[1] - self.bounds[0]
        step = np.where(res > 1, span / np.maximum(res - 1, 1), 0.0)
        return self.bounds[0] + index * step

    # -- interpolation ----------------------------------------------------------

    def corners(self, points):
        """Flat node indices ``(P, 8)`` and trilinear weights ``(P, 8)``.

        Points outside the bounds get all-zero weights.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo, hi = self.bounds
        tol = 1e-12 * max(1.0, float(np.max(np.abs(self.bounds))))
        inside = np.all((p >= lo - tol) & (p <= hi + tol), axis=1)
        i0 = np.zeros((len(p), 3), dtype=np.int64)
        frac = np.zeros((len(p), 3))
        for a, n in enumerate(self.resolution):
            if n == 1:
                continue
            s = np.clip((p[:, a] - lo[a]) / (hi[a] - lo[a]) * (n - 1), 0.0, n - 1)
            i = np.minimum(np.floor(s).astype(np.int64), n - 2)
            i0[:, a] = i
            frac[:, a] = s - i
        nx, ny, nz = self.resolution
        idx = np.empty((len(p), 8), dtype=np.int64)
        tw = np.empty((len(p), 8))
        c = 0
        for dx in (0, 1):
            ix = np.minimum(i0[:, 0] + dx, nx - 1)
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            for dy in (0, 1):
                iy = np.minimum(i0[:, 1] + dy, ny - 1)
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                for dz in (0, 1):
                    iz = np.minimum(i0[:, 2] + dz, nz - 1)
                    wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                    idx[:, c] = (ix * ny + iy) * nz + iz
                    tw[:, c] = wx * wy * wz
                    c += 1
        tw[~inside] = 0.0
        idx[~inside] = 0
        return idx, tw

    def sample(self, points, dirs, ranges=None):
        idx, tw = self.corners(points)
        sig_nodes = self.sigma_nodes.ravel()
        sigma = np.sum(tw * sig_nodes[idx], axis=1)
        sh = sh_basis(dirs, self.sh_degree)
        table = self.coef.reshape(self.n_voxels, self.n_sh, self.n_bins)
        emission = _kr.gather_emission(idx, tw, sh, table)
        if self.emission_scale != 1.0:
            emission *= self.emission_scale
        return sigma, emission, None

    def query(self, p, omega, emitter=None):
        """Density and emitted spectrum at ``p`` toward ``-omega``.

        The field is bound to its emitter; ``emitter`` is accepted for a
        uniform call signature and not used.
        """
        return self.query_batch(np.reshape(p, (1, 3)), np.reshape(omega, (1, 3)), emitter)[0]

    def query_batch(self, points, dirs, emitter=None):
        points = np.atleast_2d(points)
        dirs = np.atleast_2d(dirs)
        if points.shape != dirs.shape:
            raise ValueError("points and directions must pair up")
        sigma, emission, _ = self.sample(points, dirs)
        return [FieldResponse(float(s), Spectrum(e, self.n_fft, self.sample_rate))
                for s, e in zip(sigma, emission)]

    def query_gradients(self, points, dirs, g_sigma, g_emission, out=None):
        """Accumulate parameter gradients for upstream adjoints at sampled points.

        Parameters
        ----------
        g_sigma : (P,) real
            ``dL/dsigma`` per point.
        g_emission : (P, K) complex
            ``dL/dRe + 1j dL/dIm`` of each emitted bin.
        out : FieldGradients, optional
            Accumulator; a new zeroed one is created when omitted.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g_sigma = np.asarray(g_sigma, dtype=np.float64).reshape(-1)
        g_emission = np.ascontiguousarray(g_emission, dtype=np.complex128)
        if g_emission.ndim == 1:
            g_emission = g_emission[None, :]
        if len(g_sigma) != len(points) or len(g_emission) != len(points):
            raise ValueError("adjoint count does not match point count")
        if g_emission.shape[1] != self.n_bins:
            raise ValueError(f"expected {self.n_bins} emission bins, got {g_emission.shape[1]}")
        if out is None:
            out = FieldGradients.zeros_like(self)
        idx, tw = self.corners(points)
        dsig = (tw * g_sigma[:, None]).ravel()
        flat = np.zeros(self.n_voxels)
        np.add.at(flat, idx.ravel(), dsig)
        ds = self.density_scale
        out.rho += flat.reshape(self.resolution) * (ds * sigmoid(ds * self.rho))
        sh = sh_basis(np.atleast_2d(dirs), self.sh_degree)
        if self.emission_scale != 1.0:
            g_emission = g_emission * self.emission_scale
        gc = out.coef.reshape(self.n_voxels, self.n_sh, self.n_bins)
        _kr.scatter_emission(idx, tw, sh, g_emission, gc)
        return out

    # -- parameters -------------------------------------------------------------

    def parameter_vector(self):
        """Copy of all parameters: ``rho`` then ``coef`` as (re, im) pairs."""
        return self._flat.copy()

    def parameter_buffer(self):
        """Live flat view of the parameters, for in-place optimiser updates."""
        return self._flat

    def set_parameter_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        n = self.rho.size
        if vec.size != n + 2 * self.coef.size:
            raise ValueError("parameter vector has the wrong length")
        self._flat[:] = vec.ravel()

    # -- checkpoint -------------------------------------------------------------

    def save(self, path):
        e = self.emitter
        header = _HEADER.pack(MAGIC, VERSION, *self.bounds.ravel(), *self.resolution,
                              self.sh_degree, self.n_fft, self.sample_rate,
                              *e.position, *e.orientation,
                              self.density_scale, self.emission_scale)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.rho.astype("<f8").tobytes())
            fh.write(self.coef.view(np.float64).astype("<f8").tobytes())
        return Path(path)

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError("truncated field checkpoint")
        fields = _HEADER.unpack_from(raw)
        magic, version = fields[0], fields[1]
        if magic != MAGIC:
            raise ValueError("not a field checkpoint (bad magic)")
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        bounds = np.array(fields[2:8]).reshape(2, 3)
        res = tuple(fields[8:11])
        degree, n_fft, sr = fields[11], fields[12], fields[13]
        emitter = Pose(np.array(fields[14:17]), np.array(fields[17:20]))
        d_scale, e_scale = fields[20], fields[21]
        n_vox = int(np.prod(res))
        n_coef = n_vox * (degree + 1) ** 2 * (n_fft // 2 + 1)
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != n_vox + 2 * n_coef:
            raise ValueError("checkpoint body size does not match header")
        rho = body[:n_vox].astype(np.float64)
        coef = body[n_vox:].astype(np.float64).view(np.complex128)
        return cls(bounds, res, n_fft, sr, degree, emitter, rho, coef,
                   density_scale=d_scale, emission_scale=e_scale)


class AnalyticPointSourceField:
    """Fixed field whose rendering reproduces free-field propagation from ``source``.

    Every point outside a ball of radius ``epsilon`` around the source holds
    density ``density`` and re-emits the source wave toward the ray origin
    ``o = p - u * omega``: a flat spectrum weighted by a von Mises-Fisher lobe
    over the angle between ``omega`` and ``source - o``, delayed so that it
    reaches ``o`` at ``|o - source| / v``. The lobe integrates to ``4 pi``, so
    the direction average with unit gain has unit weight and the renderer's
    ``1 / (t v)`` decay gives the ``1 / d`` amplitude.

    The emitted lobe needs the ray origin: with ``ranges=None`` (single-point
    queries) the lobe is taken about ``p - source`` instead, which equals the
    ranged form in the limit ``u -> 0``.
    """

    def __init__(self, source, epsilon=0.05, speed_of_sound=343.0, sample_rate=16000.0,
                 density=50.0, concentration=20.0, n_fft=1024):
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not density > 0 or not concentration > 0:
            raise ValueError("density and concentration must be positive")
        self.source = np.asarray(source, dtype=np.float64).reshape(3)
        self.epsilon = float(epsilon)
        self.speed_of_sound = float(speed_of_sound)
        self.sample_rate = float(sample_rate)
        self.density = float(density)
        self.concentration = float(concentration)
        self.n_fft = int(n_fft)

    def lobe(self, cos_psi):
        k = self.concentration
        return 2.0 * k * np.exp(k * (cos_psi - 1.0)) / (-np.expm1(-2.0 * k))

    def sample(self, points, dirs, ranges=None):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        r = np.linalg.norm(p - self.source, axis=1)
        outside = r > self.epsilon
        sigma = np.where(outside, self.density, 0.0)
        if ranges is None:
            u = np.zeros(len(p))
        else:
            u = np.asarray(ranges, dtype=np.float64).reshape(-1)
        to_src = self.source - (p - u[:, None] * d)
        dist = np.linalg.norm(to_src, axis=1)
        cos_psi = np.einsum("ij,ij->i", d, to_src) / np.maximum(dist, 1e-300)
        coef = np.where(outside, self.lobe(cos_psi), 0.0).astype(np.complex128)[:, None]
        extra = np.maximum(dist - u, 0.0) / self.speed_of_sound
        return sigma, coef, extra

    def query(self, p, omega, emitter=None):
        return self.query_batch(np.reshape(p, (1, 3)), np.reshape(omega, (1, 3)), emitter)[0]

    def query_batch(self, points, dirs, emitter=None):
        sigma, coef, delay = self.sample(points, dirs)
        out = []
        for s, c, t in zip(sigma, coef[:, 0], delay):
            bins = c * delay_phasor(self.n_fft, self.sample_rate, t)
            out.append(FieldResponse(float(s), Spectrum(bins, self.n_fft, self.sample_rate)))
        return out


def make_analytic_point_source(source, epsilon, speed_of_sound, sample_rate, **kwargs):
    return AnalyticPointSourceField(source, epsilon, speed_of_sound, sample_rate, **kwargs)
