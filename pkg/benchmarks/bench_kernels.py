"""Time the numba and numpy kernel backends on representative workloads.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (numba compiles on first call),
then timed ``--repeat`` times; the best wall time is reported.
"""

import argparse
import time

import numpy as np

from irfield._accel import NUMBA_AVAILABLE, backend
from irfield._kernels.optim import adam_update
from irfield._kernels.render import (gather_emission, ray_spectra, ray_spectra_adjoint,
                                     scatter_emission)
from irfield.field import AnalyticPointSourceField
from irfield.geometry import Pose, shoebox
from irfield.renderer import OmniGain, RenderConfig, render_ir
from irfield.simulator import SimConfig, simulate


def _workloads(rng):
    n_rays, n_pts, n_bins = 64, 48, 257
    w = rng.uniform(size=(n_rays, n_pts))
    tau = rng.uniform(0, 0.02, size=(n_rays, n_pts))
    coef = rng.normal(size=(n_rays, n_pts, n_bins)) + 1j * rng.normal(size=(n_rays, n_pts, n_bins))
    g = rng.normal(size=(n_rays, n_bins)) + 1j * rng.normal(size=(n_rays, n_bins))
    omega0 = 2 * np.pi * 16000.0 / 512

    n_p = n_rays * n_pts
    idx = rng.integers(0, 64 * 64, size=(n_p, 8))
    tw = rng.uniform(size=(n_p, 8))
    sh = rng.normal(size=(n_p, 4))
    table = rng.normal(size=(64 * 64, 4, n_bins)) + 0j
    gp = rng.normal(size=(n_p, n_bins)) + 0j
    out = np.zeros_like(table)

    n_par = 4_000_000
    p, gr = rng.normal(size=n_par), rng.normal(size=n_par)
    m, v = np.zeros(n_par), np.zeros(n_par)

    scene = shoebox((5.0, 4.0, 3.0), reflection=0.8, scattering=0.3)
    sim = SimConfig(n_rays=2000, max_depth=20, ir_duration=0.3, sample_rate=16000.0)
    src = AnalyticPointSourceField([1.0, 1.0, 0.0], n_fft=512)
    rcfg = RenderConfig(N_theta=64, N_phi=1, N_r=48, n_fft=512, ir_len=256)

    return {
        "ray_spectra": lambda: ray_spectra(w, tau, coef, n_bins, omega0),
        "ray_spectra_adjoint": lambda: ray_spectra_adjoint(w, tau, coef, g, omega0),
        "gather_emission": lambda: gather_emission(idx, tw, sh, table),
        "scatter_emission": lambda: scatter_emission(idx, tw, sh, gp, out),
        "adam_update (4M params)": lambda: adam_update(p, gr, m, v, 1.0, 1e-3, 0.9, 0.999,
                                                       1e-8, 1),
        "simulate (2000 rays)": lambda: simulate(scene, Pose([1.0, 1.0, 1.5]),
                                                  Pose([3.5, 2.5, 1.2]), sim),
        "render_ir (64 dirs)": lambda: render_ir(src, Pose([0.2, 0.3, 0.0]), OmniGain(),
                                                Pose([1.0, 1.0, 0.0]), rcfg),
    }


def _best(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    work = _workloads(np.random.default_rng(0))
    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, fn in work.items():
        with backend(True):
            t_nb = _best(fn, args.repeat)
        with backend(False):
            t_np = _best(fn, args.repeat)
        print(f"{name:<26}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
