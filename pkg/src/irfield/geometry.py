"""Scene description, ray-surface queries and the shoebox image-source oracle.

Surfaces are planar convex polygons and are two-sided: a hit reports the
normal facing the incoming ray. Materials carry per-octave-band reflection
and scattering coefficients.
"""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

EPS_HIT = 1e-6  # m, self-intersection guard
PLANARITY_TOL = 1e-6
DEFAULT_BANDS = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)
DEFAULT_SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class Material:
    name: str
    reflection: np.ndarray
    scattering: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.reflection, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.scattering, dtype=np.float64))
        if r.shape != s.shape or r.ndim != 1:
            raise ValueError(f"material {self.name!r}: reflection/scattering band counts differ")
        for label, arr in (("reflection", r), ("scattering", s)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"material {self.name!r}: {label} must lie in [0, 1]")
        object.__setattr__(self, "reflection", r)
        object.__setattr__(self, "scattering", s)

    @property
    def n_bands(self):
        return len(self.reflection)

    @classmethod
    def uniform(cls, name, reflection, scattering=0.0, n_bands=len(DEFAULT_BANDS)):
        return cls(name, np.full(n_bands, reflection), np.full(n_bands, scattering))


@dataclass(frozen=True)
class Surface:
    vertices: np.ndarray
    material: str

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise ValueError("surface needs >= 3 vertices in 3-D")
        object.__setattr__(self, "vertices", v)
        n = self.normal  # validates area
        dev = np.abs((v - v[0]) @ n)
        if dev.max() > PLANARITY_TOL:
            raise ValueError(f"surface vertices not coplanar (deviation {dev.max():.3g} m)")

    @property
    def area_vector(self):
        v = self.vertices
        return 0.5 * np.sum(np.cross(v, np.roll(v, -1, axis=0)), axis=0)

    @property
    def area(self):
        return float(np.linalg.norm(self.area_vector))

    @property
    def normal(self):
        a = self.area_vector
        norm = np.linalg.norm(a)
        if norm < 1e-12:
            raise ValueError("degenerate surface (zero area)")
        return a / norm

    @property
    def offset(self):
        return float(self.normal @ self.vertices[0])


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        o = np.asarray(self.orientation, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(o)
        if norm == 0:
            raise ValueError("orientation must be non-zero")
        if abs(norm - 1) > 1e-9:
            o = o / norm
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o)


class Hit(NamedTuple):
    surface: int
    point: np.ndarray
    distance: float
    normal: np.ndarray


class PackedScene(NamedTuple):
    """Flat arrays consumed by the tracing kernels."""

    normals: np.ndarray  # (S, 3)
    offsets: np.ndarray  # (S,)
    edge_normals: np.ndarray  # (S, Vmax, 3) in-plane, pointing inwards
    edge_offsets: np.ndarray  # (S, Vmax)
    reflection: np.ndarray  # (S, B)
    scattering: np.ndarray  # (S, B)


class Scene:
    """Immutable collection of surfaces plus the material table."""

    def __init__(self, surfaces, materials, octave_bands=DEFAULT_BANDS,
                 speed_of_sound=DEFAULT_SPEED_OF_SOUND, name=""):
        self.surfaces = tuple(surfaces)
        self.materials = dict(materials)
        self.octave_bands = np.asarray(octave_bands, dtype=np.float64)
        self.speed_of_sound = float(speed_of_sound)
        self.name = name
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        if len(self.octave_bands) < 1 or np.any(np.diff(self.octave_bands) <= 0):
            raise ValueError("octave band centres must be strictly increasing")
        for m in self.materials.values():
            if m.n_bands != len(self.octave_bands):
                raise ValueError(
                    f"material {m.name!r} has {m.n_bands} bands, scene has {len(self.octave_bands)}"
                )
        for s in self.surfaces:
            if s.material not in self.materials:
                raise ValueError(f"unknown material {s.material!r}")
        self.packed = self._pack()

    @property
    def n_bands(self):
        return len(self.octave_bands)

    def _pack(self):
        n_s = len(self.surfaces)
        n_b = self.n_bands
        vmax = max((len(s.vertices) for s in self.surfaces), default=3)
        normals = np.zeros((n_s, 3))
        offsets = np.zeros(n_s)
        edge_n = np.zeros((n_s, vmax, 3))
        edge_c = np.full((n_s, vmax), -1.0)  # padding edges always pass
        refl = np.zeros((n_s, n_b))
        scat = np.zeros((n_s, n_b))
        for i, s in enumerate(self.surfaces):
            n = s.normal
            normals[i] = n
            offsets[i] = s.offset
            v = s.vertices
            for j in range(len(v)):
                e = np.cross(n, v[(j + 1) % len(v)] - v[j])
                e /= np.linalg.norm(e)
                edge_n[i, j] = e
                edge_c[i, j] = e @ v[j]
            m = self.materials[s.material]
            refl[i] = m.reflection
            scat[i] = m.scattering
        return PackedScene(normals, offsets, edge_n, edge_c, refl, scat)

    def bounds(self):
        if not self.surfaces:
            return None
        v = np.concatenate([s.vertices for s in self.surfaces])
        return v.min(axis=0), v.max(axis=0)

    def contains(self, p, margin=0.0):
        b = self.bounds()
        if b is None:
            return True
        lo, hi = b
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p > lo + margin) and np.all(p < hi - margin))

    # -- serialisation ---------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "speed_of_sound": self.speed_of_sound,
            "octave_bands": self.octave_bands.tolist(),
            "materials": {
                k: {"reflection": m.reflection.tolist(), "scattering": m.scattering.tolist()}
                for k, m in self.materials.items()
            },
            "surfaces": [
                {"vertices": s.vertices.tolist(), "material": s.material} for s in self.surfaces
            ],
        }

    @classmethod
    def from_dict(cls, d):
        materials = {
            k: Material(k, v["reflection"], v.get("scattering", np.zeros(len(v["reflection"]))))
            for k, v in d.get("materials", {}).items()
        }
        surfaces = [Surface(s["vertices"], s["material"]) for s in d.get("surfaces", [])]
        return cls(
            surfaces,
            materials,
            octave_bands=d.get("octave_bands", DEFAULT_BANDS),
            speed_of_sound=d.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND),
            name=d.get("name", ""),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def translated(self, offset):
        offset = np.asarray(offset, dtype=np.float64)
        surfaces = [Surface(s.vertices + offset, s.material) for s in self.surfaces]
        return Scene(surfaces, self.materials, self.octave_bands, self.speed_of_sound, self.name)


def shoebox(dims, materials="wall", reflection=0.9, scattering=0.0,
            octave_bands=DEFAULT_BANDS, speed_of_sound=DEFAULT_SPEED_OF_SOUND, origin=(0, 0, 0)):
    """Axis-aligned box room ``[origin, origin + dims]``.

    ``materials`` is one :class:`Material`, a material name (built from the
    uniform ``reflection``/``scattering``), or a sequence of six materials in
    wall order ``x0, x1, y0, y1, z0, z1``.
    """
    lx, ly, lz = dims
    o = np.asarray(origin, dtype=np.float64)
    nb = len(octave_bands)
    if isinstance(materials, str):
        materials = Material.uniform(materials, reflection, scattering, nb)
    if isinstance(materials, Material):
        materials = [materials] * 6
    materials = list(materials)
    # CCW when seen from outside the box (outward normals)
    quads = [
        [(0, 0, 0), (0, 0, lz), (0, ly, lz), (0, ly, 0)],  # x = 0, normal -x
        [(lx, 0, 0), (lx, ly, 0), (lx, ly, lz), (lx, 0, lz)],  # x = lx, normal +x
        [(0, 0, 0), (lx, 0, 0), (lx, 0, lz), (0, 0, lz)],  # y = 0, normal -y
        [(0, ly, 0), (0, ly, lz), (lx, ly, lz), (lx, ly, 0)],  # y = ly, normal +y
        [(0, 0, 0), (0, ly, 0), (lx, ly, 0), (lx, 0, 0)],  # z = 0, normal -z
        [(0, 0, lz), (lx, 0, lz), (lx, ly, lz), (0, ly, lz)],  # z = lz, normal +z
    ]
    surfaces = [Surface(np.asarray(q, dtype=np.float64) + o, m.name) for q, m in zip(quads, materials)]
    table = {m.name: m for m in materials}
    return Scene(surfaces, table, octave_bands, speed_of_sound, name="shoebox")


# -- queries -----------------------------------------------------------------


def intersect_all(origin, direction, scene, t_min=EPS_HIT):
    """Distance to every surface along the ray (``inf`` where missed)."""
    pk = scene.packed
    if len(pk.offsets) == 0:
        return np.zeros(0)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    denom = pk.normals @ d
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (pk.offsets - pk.normals @ o) / denom
    t = np.where(np.abs(denom) > 1e-12, t, np.inf)
    t = np.where(t > t_min, t, np.inf)
    hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    inside = np.all(np.einsum("svk,sk->sv", pk.edge_normals, hit) >= pk.edge_offsets - 1e-9, axis=1)
    return np.where(inside, t, np.inf)


def intersect(origin, direction, scene):
    """Nearest hit beyond :data:`EPS_HIT`, or ``None`` if the ray escapes."""
    t = intersect_all(origin, direction, scene)
    if len(t) == 0 or not np.isfinite(t.min()):
        return None
    i = int(np.argmin(t))
    d = np.asarray(direction, dtype=np.float64)
    n = scene.packed.normals[i]
    if n @ d > 0:
        n = -n
    return Hit(i, np.asarray(origin, dtype=np.float64) + t[i] * d, float(t[i]), n.copy())


def segment_visible(a, b, scene):
    """True when nothing blocks the open segment between ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    length = np.linalg.norm(d)
    if length == 0:
        return True
    t = intersect_all(a, d / length, scene)
    return not np.any(t < length - EPS_HIT)


def specular_reflect(direction, normal):
    d = np.asarray(direction, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    return d - 2.0 * (d @ n) * n


def orthonormal_basis(n):
    """Two unit vectors completing ``n`` to a right-handed frame."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = np.cross(n, helper)
    t /= np.linalg.norm(t)
    return t, np.cross(n, t)


def cosine_hemisphere(normal, u1, u2):
    """Map uniforms to cosine-weighted directions about ``normal`` (vectorised)."""
    t, b = orthonormal_basis(normal)
    r = np.sqrt(u1)
    phi = 2 * np.pi * u2
    z = np.sqrt(np.maximum(0.0, 1.0 - u1))
    return (r * np.cos(phi))[..., None] * t + (r * np.sin(phi))[..., None] * b + z[..., None] * np.asarray(normal)


def scatter_direction(normal, rng):
    """One cosine-weighted direction in the hemisphere of ``normal``."""
    u1, u2 = rng.random(2)
    # keep strictly inside the hemisphere
    u1 = min(u1, 1.0 - 1e-12)
    return cosine_hemisphere(normal, np.array(u1), np.array(u2))


def uniform_sphere(u1, u2):
    z = 1.0 - 2.0 * u1
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


# -- image sources -----------------------------------------------------------


class ImageSource(NamedTuple):
    position: np.ndarray
    path_length: float
    reflections: tuple  # per wall, order x0, x1, y0, y1, z0, z1

    @property
    def order(self):
        return int(sum(self.reflections))


def image_sources(dims, emitter, listener, max_order):
    """All shoebox image sources with total reflection order <= ``max_order``.

    Uses the lattice form: along each axis an image is indexed by ``(n, q)``
    with coordinate ``2 n L + (1 - 2 q) x`` and ``|n - q|`` hits on the low wall,
    ``|n|`` on the high wall.
    """
    dims = np.asarray(dims, dtype=np.float64)
    e = np.asarray(emitter, dtype=np.float64)
    l = np.asarray(listener, dtype=np.float64)
    if max_order < 0 or max_order > 10:
        raise ValueError("max_order must be in [0, 10]")
    for label, p in (("emitter", e), ("listener", l)):
        if np.any(p <= 0) or np.any(p >= dims):
            raise ValueError(f"{label} must lie strictly inside the box")
    per_axis = []
    for ax in range(3):
        opts = []
        for n in range(-max_order, max_order + 1):
            for q in (0, 1):
                lo, hi = abs(n - q), abs(n)
                if lo + hi <= max_order:
                    opts.append((2 * n * dims[ax] + (1 - 2 * q) * e[ax], lo, hi))
        per_axis.append(opts)
    out = []
    for (x, x0, x1), (y, y0, y1), (z, z0, z1) in itertools.product(*per_axis):
        refl = (x0, x1, y0, y1, z0, z1)
        if sum(refl) <= max_order:
            pos = np.array([x, y, z])
            out.append(ImageSource(pos, float(np.linalg.norm(pos - l)), refl))
    out.sort(key=lambda s: (s.order, s.path_length))
    return out
