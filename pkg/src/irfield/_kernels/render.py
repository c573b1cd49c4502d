"""Hot loops for volume rendering and the voxel field.

``ray_spectra`` evaluates, for each ray ``r``::

    H[r, k] = sum_m w[r, m] * c[r, m, k] * exp(-1j * omega0 * k * tau[r, m])

where ``c`` has either ``K`` bins or a single broadcast column. The numba
version walks the bins with a phasor recurrence instead of calling ``exp``.
"""

import numpy as np

from .._accel import njit, numba_enabled


@njit
def _ray_spectra_nb(w, tau, coef, n_bins, omega0):
    n_rays, n_pts = w.shape
    kc = coef.shape[2]
    out = np.zeros((n_rays, n_bins), dtype=np.complex128)
    for r in range(n_rays):
        for m in range(n_pts):
            wm = w[r, m]
            if wm == 0.0:
                continue
            step = np.exp(-1j * omega0 * tau[r, m])
            ph = wm + 0j
            if kc == 1:
                c0 = coef[r, m, 0]
                if c0 == 0:
                    continue
                ph = ph * c0
                for k in range(n_bins):
                    out[r, k] += ph
                    ph *= step
            else:
                for k in range(n_bins):
                    out[r, k] += ph * coef[r, m, k]
                    ph *= step
    return out


def _ray_spectra_np(w, tau, coef, n_bins, omega0):
    n_rays, n_pts = w.shape
    k = np.arange(n_bins)
    out = np.zeros((n_rays, n_bins), dtype=np.complex128)
    for m in range(n_pts):
        ph = np.exp(-1j * omega0 * tau[:, m, None] * k[None, :])
        out += w[:, m, None] * coef[:, m, :] * ph
    return out


def ray_spectra(w, tau, coef, n_bins, omega0):
    w = np.ascontiguousarray(w, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.complex128)
    if numba_enabled():
        return _ray_spectra_nb(w, tau, coef, int(n_bins), float(omega0))
    return _ray_spectra_np(w, tau, coef, int(n_bins), float(omega0))


@njit
def _ray_spectra_adjoint_nb(w, tau, coef, g, omega0):
    n_rays, n_pts = w.shape
    n_bins = g.shape[1]
    kc = coef.shape[2]
    dw = np.zeros((n_rays, n_pts))
    gc = np.zeros((n_rays, n_pts, kc), dtype=np.complex128)
    for r in range(n_rays):
        for m in range(n_pts):
            step = np.exp(-1j * omega0 * tau[r, m])
            ph = 1.0 + 0j
            acc_w = 0.0
            acc_c = 0j
            wm = w[r, m]
            for k in range(n_bins):
                gk = g[r, k]
                c = coef[r, m, 0] if kc == 1 else coef[r, m, k]
                z = c * ph
                acc_w += gk.real * z.real + gk.imag * z.imag
                q = wm * (ph.real * gk.real + ph.imag * gk.imag
                          + 1j * (ph.real * gk.imag - ph.imag * gk.real))
                if kc == 1:
                    acc_c += q
                else:
                    gc[r, m, k] = q
                ph *= step
            dw[r, m] = acc_w
            if kc == 1:
                gc[r, m, 0] = acc_c
    return dw, gc


def _ray_spectra_adjoint_np(w, tau, coef, g, omega0):
    n_rays, n_pts = w.shape
    n_bins = g.shape[1]
    kc = coef.shape[2]
    k = np.arange(n_bins)
    dw = np.zeros((n_rays, n_pts))
    gc = np.zeros((n_rays, n_pts, kc), dtype=np.complex128)
    for m in range(n_pts):
        ph = np.exp(-1j * omega0 * tau[:, m, None] * k[None, :])
        z = coef[:, m, :] * ph
        dw[:, m] = np.sum((np.conj(g) * z).real, axis=1)
        q = w[:, m, None] * np.conj(ph) * g
        gc[:, m, :] = q if kc > 1 else q.sum(axis=1, keepdims=True)
    return dw, gc


def ray_spectra_adjoint(w, tau, coef, g, omega0):
    """Cotangents of ``ray_spectra`` w.r.t. ``w`` (real) and ``coef`` (complex).

    ``g`` holds ``dL/dRe H + 1j dL/dIm H`` per ray and bin.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.complex128)
    g = np.ascontiguousarray(g, dtype=np.complex128)
    if numba_enabled():
        return _ray_spectra_adjoint_nb(w, tau, coef, g, float(omega0))
    return _ray_spectra_adjoint_np(w, tau, coef, g, float(omega0))


# -- voxel gather / scatter ---------------------------------------------------------


@njit
def _gather_nb(idx, tw, sh, table):
    n_pts, n_corner = idx.shape
    n_sh = sh.shape[1]
    n_bins = table.shape[2]
    out = np.zeros((n_pts, n_bins), dtype=np.complex128)
    for p in range(n_pts):
        for c in range(n_corner):
            t = tw[p, c]
            if t == 0.0:
                continue
            v = idx[p, c]
            for j in range(n_sh):
                a = t * sh[p, j]
                if a == 0.0:
                    continue
                for k in range(n_bins):
                    out[p, k] += a * table[v, j, k]
    return out


def _gather_np(idx, tw, sh, table):
    # (P, 8, S) weights against (P, 8, S, K) gathered coefficients
    a = tw[:, :, None] * sh[:, None, :]
    return np.einsum("pcs,pcsk->pk", a, table[idx])


def gather_emission(idx, tw, sh, table):
    """Emission spectra ``sum_c tw[p,c] sum_j sh[p,j] table[idx[p,c], j, :]``."""
    if numba_enabled():
        return _gather_nb(idx, tw, sh, table)
    return _gather_np(idx, tw, sh, table)


@njit
def _scatter_nb(idx, tw, sh, g, out):
    n_pts, n_corner = idx.shape
    n_sh = sh.shape[1]
    n_bins = g.shape[1]
    for p in range(n_pts):
        for c in range(n_corner):
            t = tw[p, c]
            if t == 0.0:
                continue
            v = idx[p, c]
            for j in range(n_sh):
                a = t * sh[p, j]
                if a == 0.0:
                    continue
                for k in range(n_bins):
                    out[v, j, k] += a * g[p, k]


def _scatter_np(idx, tw, sh, g, out):
    a = tw[:, :, None] * sh[:, None, :]
    contrib = a[:, :, :, None] * g[:, None, None, :]
    np.add.at(out, idx.ravel(), contrib.reshape(-1, sh.shape[1], g.shape[1]))


def scatter_emission(idx, tw, sh, g, out):
    """Adjoint of :func:`gather_emission`; accumulates into ``out`` in place."""
    if numba_enabled():
        _scatter_nb(idx, tw, sh, g, out)
    else:
        _scatter_np(idx, tw, sh, g, out)
