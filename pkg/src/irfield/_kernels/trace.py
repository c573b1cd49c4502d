"""Stochastic ray tracing of one block of launch rays.

Both implementations consume the same pre-drawn random numbers and emit the
same arrivals, so results do not depend on the backend or on how blocks are
spread over threads. Arrival kinds: ``KIND_SCATTER`` for next-event
connections from a scattering vertex, ``KIND_SPECULAR`` for receiver-sphere
hits after a specular bounce.
"""

import numpy as np

from .. import _accel

KIND_DIRECT = 0
KIND_SCATTER = 1
KIND_SPECULAR = 2
KIND_IMAGE = 3  # deterministic specular path (image construction)

AMP_FLOOR = 1e-9
INSIDE_TOL = 1e-9


# -- numba ---------------------------------------------------------------------


@_accel.njit
def _nearest_hit_nb(p, d, normals, offsets, edge_n, edge_c, t_min):
    best_t = np.inf
    best_s = -1
    for s in range(normals.shape[0]):
        denom = normals[s, 0] * d[0] + normals[s, 1] * d[1] + normals[s, 2] * d[2]
        if abs(denom) <= 1e-12:
            continue
        t = (offsets[s] - (normals[s, 0] * p[0] + normals[s, 1] * p[1] + normals[s, 2] * p[2])) / denom
        if t <= t_min or t >= best_t:
            continue
        hx = p[0] + t * d[0]
        hy = p[1] + t * d[1]
        hz = p[2] + t * d[2]
        inside = True
        for v in range(edge_n.shape[1]):
            if edge_n[s, v, 0] * hx + edge_n[s, v, 1] * hy + edge_n[s, v, 2] * hz < edge_c[s, v] - INSIDE_TOL:
                inside = False
                break
        if inside:
            best_t = t
            best_s = s
    return best_s, best_t


@_accel.njit
def _trace_block_nb(normals, offsets, edge_n, edge_c, refl, scat,
                    emitter, listener, radius, dirs, rnd, max_depth, det_depth,
                    n_total, max_len, ray_offset, eps):
    n_rays = dirs.shape[0]
    n_bands = refl.shape[1]
    cap = n_rays * max_depth * 2
    out_len = np.empty(cap)
    out_amp = np.empty((cap, n_bands))
    out_order = np.empty(cap, np.int64)
    out_kind = np.empty(cap, np.int64)
    out_ray = np.empty(cap, np.int64)
    n_out = 0
    dropped = 0
    inv_sqrt_n = 1.0 / np.sqrt(n_total)
    amp = np.empty(n_bands)
    p = np.empty(3)
    d = np.empty(3)
    seg = np.empty(3)
    for r in range(n_rays):
        for b in range(n_bands):
            amp[b] = 1.0
        p[:] = emitter
        d[:] = dirs[r]
        travelled = 0.0
        n_spec = 0
        any_scatter = False
        last_specular = False
        for depth in range(max_depth + 1):
            s, t = _nearest_hit_nb(p, d, normals, offsets, edge_n, edge_c, eps)
            # receiver sphere on this segment (specular continuation not covered elsewhere)
            if depth > 0 and last_specular and (any_scatter or n_spec > det_depth):
                tc = (listener[0] - p[0]) * d[0] + (listener[1] - p[1]) * d[1] + (listener[2] - p[2]) * d[2]
                if tc > 0.0 and tc < t:
                    cx = p[0] + tc * d[0] - listener[0]
                    cy = p[1] + tc * d[1] - listener[1]
                    cz = p[2] + tc * d[2] - listener[2]
                    if cx * cx + cy * cy + cz * cz <= radius * radius:
                        total = travelled + tc
                        if total <= max_len:
                            g = 2.0 * inv_sqrt_n / radius
                            for b in range(n_bands):
                                out_amp[n_out, b] = amp[b] * g
                            out_len[n_out] = total
                            out_order[n_out] = depth
                            out_kind[n_out] = KIND_SPECULAR
                            out_ray[n_out] = ray_offset + r
                            n_out += 1
                        else:
                            dropped += 1
            if s < 0 or depth == max_depth:
                break
            travelled += t
            if travelled > max_len:
                break
            for k in range(3):
                p[k] = p[k] + t * d[k]
            nx = normals[s, 0]
            ny = normals[s, 1]
            nz = normals[s, 2]
            dn = nx * d[0] + ny * d[1] + nz * d[2]
            if dn > 0.0:
                nx = -nx
                ny = -ny
                nz = -nz
                dn = -dn
            p_scatter = 0.0
            for b in range(n_bands):
                p_scatter += scat[s, b]
            p_scatter /= n_bands
            # next-event connection of the scattered part
            if p_scatter > 0.0:
                for k in range(3):
                    seg[k] = listener[k] - p[k]
                ell = np.sqrt(seg[0] * seg[0] + seg[1] * seg[1] + seg[2] * seg[2])
                if ell > 0.0:
                    for k in range(3):
                        seg[k] /= ell
                    cos_t = seg[0] * nx + seg[1] * ny + seg[2] * nz
                    if cos_t > 0.0:
                        s2, t2 = _nearest_hit_nb(p, seg, normals, offsets, edge_n, edge_c, eps)
                        if s2 < 0 or t2 >= ell - eps:
                            total = travelled + ell
                            if total <= max_len:
                                g = 2.0 * inv_sqrt_n * np.sqrt(cos_t) / ell
                                for b in range(n_bands):
                                    out_amp[n_out, b] = amp[b] * scat[s, b] * refl[s, b] * g
                                out_len[n_out] = total
                                out_order[n_out] = depth + 1
                                out_kind[n_out] = KIND_SCATTER
                                out_ray[n_out] = ray_offset + r
                                n_out += 1
                            else:
                                dropped += 1
            # continuation: scatter with probability p_scatter, else specular
            peak = 0.0
            if rnd[r, depth, 0] < p_scatter:
                u1 = rnd[r, depth, 1]
                u2 = rnd[r, depth, 2]
                rr = np.sqrt(u1)
                phi = 2.0 * np.pi * u2
                z = np.sqrt(max(0.0, 1.0 - u1))
                if abs(nx) < 0.9:
                    tx, ty, tz = 0.0, nz, -ny
                else:
                    tx, ty, tz = -nz, 0.0, nx
                tn = np.sqrt(tx * tx + ty * ty + tz * tz)
                tx /= tn
                ty /= tn
                tz /= tn
                bx = ny * tz - nz * ty
                by = nz * tx - nx * tz
                bz = nx * ty - ny * tx
                a = rr * np.cos(phi)
                c = rr * np.sin(phi)
                d[0] = a * tx + c * bx + z * nx
                d[1] = a * ty + c * by + z * ny
                d[2] = a * tz + c * bz + z * nz
                w = 1.0 / np.sqrt(p_scatter)
                for b in range(n_bands):
                    amp[b] *= scat[s, b] * refl[s, b] * w
                    peak = max(peak, abs(amp[b]))
                any_scatter = True
                last_specular = False
            else:
                d[0] -= 2.0 * dn * nx
                d[1] -= 2.0 * dn * ny
                d[2] -= 2.0 * dn * nz
                w = 1.0 / np.sqrt(1.0 - p_scatter)
                for b in range(n_bands):
                    amp[b] *= -(1.0 - scat[s, b]) * refl[s, b] * w
                    peak = max(peak, abs(amp[b]))
                n_spec += 1
                last_specular = True
            if peak < AMP_FLOOR:
                break
    return (out_len[:n_out].copy(), out_amp[:n_out].copy(), out_order[:n_out].copy(),
            out_kind[:n_out].copy(), out_ray[:n_out].copy(), dropped)


# -- numpy -----------------------------------------------------------------------


def _nearest_hit_np(p, d, normals, offsets, edge_n, edge_c, t_min):
    """Vectorised over rays: ``p, d`` are ``(R, 3)``; returns ``(surface, t)``."""
    n_r = len(p)
    if normals.shape[0] == 0:
        return np.full(n_r, -1), np.full(n_r, np.inf)
    denom = d @ normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offsets[None, :] - p @ normals.T) / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > t_min), t, np.inf)
    h = p[:, None, :] + np.where(np.isfinite(t), t, 0.0)[..., None] * d[:, None, :]
    inside = np.all(np.einsum("svk,rsk->rsv", edge_n, h) >= edge_c[None] - INSIDE_TOL, axis=2)
    t = np.where(inside, t, np.inf)
    s = np.argmin(t, axis=1)
    tb = t[np.arange(n_r), s]
    return np.where(np.isfinite(tb), s, -1), tb


def _trace_block_np(normals, offsets, edge_n, edge_c, refl, scat,
                    emitter, listener, radius, dirs, rnd, max_depth, det_depth,
                    n_total, max_len, ray_offset, eps):
    n_rays = len(dirs)
    n_bands = refl.shape[1]
    inv_sqrt_n = 1.0 / np.sqrt(n_total)
    amp = np.ones((n_rays, n_bands))
    p = np.repeat(emitter[None, :].astype(np.float64), n_rays, axis=0)
    d = dirs.astype(np.float64).copy()
    travelled = np.zeros(n_rays)
    n_spec = np.zeros(n_rays, np.int64)
    any_scatter = np.zeros(n_rays, bool)
    last_specular = np.zeros(n_rays, bool)
    alive = np.ones(n_rays, bool)
    rays = np.arange(n_rays)
    records = []
    dropped = 0
    p_scatter_s = scat.mean(axis=1) if n_bands else np.zeros(len(scat))

    for depth in range(max_depth + 1):
        idx = rays[alive]
        if len(idx) == 0:
            break
        s, t = _nearest_hit_np(p[idx], d[idx], normals, offsets, edge_n, edge_c, eps)
        if depth > 0:
            cand = last_specular[idx] & (any_scatter[idx] | (n_spec[idx] > det_depth))
            tc = np.einsum("rk,rk->r", listener[None, :] - p[idx], d[idx])
            closest = p[idx] + tc[:, None] * d[idx] - listener[None, :]
            inball = np.einsum("rk,rk->r", closest, closest) <= radius * radius
            sel = cand & (tc > 0) & (tc < t) & inball
            total = travelled[idx] + tc
            dropped += int(np.sum(sel & (total > max_len)))
            sel &= total <= max_len
            if np.any(sel):
                records.append((total[sel], amp[idx[sel]] * (2.0 * inv_sqrt_n / radius),
                                np.full(sel.sum(), depth), np.full(sel.sum(), KIND_SPECULAR),
                                idx[sel], np.full(sel.sum(), depth), np.zeros(sel.sum(), np.int64)))
        stop = (s < 0) | (depth == max_depth)
        travelled_new = travelled[idx] + np.where(stop, 0.0, t)
        stop |= travelled_new > max_len
        alive[idx[stop]] = False
        go = ~stop
        idx = idx[go]
        if len(idx) == 0:
            break
        s = s[go]
        t = t[go]
        travelled[idx] = travelled_new[go]
        p[idx] = p[idx] + t[:, None] * d[idx]
        n = normals[s].copy()
        dn = np.einsum("rk,rk->r", n, d[idx])
        flip = dn > 0
        n[flip] *= -1
        dn[flip] *= -1
        ps = p_scatter_s[s]
        # next-event connection
        seg = listener[None, :] - p[idx]
        ell = np.linalg.norm(seg, axis=1)
        ok = (ps > 0) & (ell > 0)
        segn = seg / np.where(ell > 0, ell, 1.0)[:, None]
        cos_t = np.einsum("rk,rk->r", segn, n)
        ok &= cos_t > 0
        if np.any(ok):
            s2, t2 = _nearest_hit_np(p[idx[ok]], segn[ok], normals, offsets, edge_n, edge_c, eps)
            vis = np.zeros(len(idx), bool)
            vis[ok] = (s2 < 0) | (t2 >= ell[ok] - eps)
            total = travelled[idx] + ell
            dropped += int(np.sum(vis & (total > max_len)))
            vis &= total <= max_len
            if np.any(vis):
                g = 2.0 * inv_sqrt_n * np.sqrt(cos_t[vis]) / ell[vis]
                a = amp[idx[vis]] * scat[s[vis]] * refl[s[vis]] * g[:, None]
                records.append((total[vis], a, np.full(vis.sum(), depth + 1),
                                np.full(vis.sum(), KIND_SCATTER), idx[vis],
                                np.full(vis.sum(), depth), np.ones(vis.sum(), np.int64)))
        # continuation
        u = rnd[idx, depth]
        sc = u[:, 0] < ps
        new_d = d[idx] - 2.0 * dn[:, None] * n
        if np.any(sc):
            nn = n[sc]
            helper_x = np.abs(nn[:, 0]) < 0.9
            tvec = np.where(helper_x[:, None],
                            np.stack([np.zeros(len(nn)), nn[:, 2], -nn[:, 1]], axis=1),
                            np.stack([-nn[:, 2], np.zeros(len(nn)), nn[:, 0]], axis=1))
            tvec /= np.linalg.norm(tvec, axis=1)[:, None]
            bvec = np.cross(nn, tvec)
            rr = np.sqrt(u[sc, 1])
            phi = 2.0 * np.pi * u[sc, 2]
            z = np.sqrt(np.maximum(0.0, 1.0 - u[sc, 1]))
            new_d[sc] = ((rr * np.cos(phi))[:, None] * tvec + (rr * np.sin(phi))[:, None] * bvec
                         + z[:, None] * nn)
        with np.errstate(divide="ignore"):
            w_sc = 1.0 / np.sqrt(np.where(sc, ps, 1.0))
            w_sp = 1.0 / np.sqrt(np.where(sc, 1.0, 1.0 - ps))
        factor = np.where(sc[:, None], scat[s] * refl[s] * w_sc[:, None],
                          -(1.0 - scat[s]) * refl[s] * w_sp[:, None])
        amp[idx] *= factor
        d[idx] = new_d
        any_scatter[idx] |= sc
        last_specular[idx] = ~sc
        n_spec[idx] += ~sc
        alive[idx[np.max(np.abs(amp[idx]), axis=1) < AMP_FLOOR]] = False

    if not records:
        return (np.zeros(0), np.zeros((0, n_bands)), np.zeros(0, np.int64),
                np.zeros(0, np.int64), np.zeros(0, np.int64), dropped)
    cols = [np.concatenate(c) for c in zip(*records)]
    total, a, order, kind, ray, depth_col, sub = cols
    # same ordering as the per-ray loop: by ray, then depth, sphere hit before NEE
    order_idx = np.lexsort((sub, depth_col, ray))
    return (total[order_idx], a[order_idx], order[order_idx].astype(np.int64),
            kind[order_idx].astype(np.int64), ray[order_idx] + ray_offset, dropped)


def trace_block(*args):
    if _accel.numba_enabled():
        return _trace_block_nb(*args)
    return _trace_block_np(*args)


# -- arrival deposit ---------------------------------------------------------------


@_accel.njit
def _deposit_nb(buffers, delays, amps, taps, pad):
    half = (taps - 1) // 2
    n_bands = buffers.shape[0]
    t = np.empty(taps)
    k = np.empty(taps)
    for a in range(delays.shape[0]):
        tau = delays[a]
        n0 = int(np.floor(tau))
        frac = tau - n0
        for i in range(taps):
            t[i] = i - half - frac
            x = np.pi * t[i]
            sinc = 1.0 if x == 0.0 else np.sin(x) / x
            k[i] = sinc * (0.5 + 0.5 * np.cos(2.0 * np.pi * t[i] / (taps + 1)))
        start = n0 - half + pad
        for b in range(n_bands):
            g = amps[a, b]
            if g == 0.0:
                continue
            for i in range(taps):
                buffers[b, start + i] += g * k[i]


def _deposit_np(buffers, delays, amps, taps, pad):
    half = (taps - 1) // 2
    n0 = np.floor(delays).astype(np.int64)
    frac = delays - n0
    t = np.arange(taps)[None, :] - half - frac[:, None]
    k = np.sinc(t) * (0.5 + 0.5 * np.cos(2.0 * np.pi * t / (taps + 1)))
    cols = (n0 - half + pad)[:, None] + np.arange(taps)[None, :]
    for b in range(buffers.shape[0]):
        np.add.at(buffers[b], cols.ravel(), (amps[:, b][:, None] * k).ravel())


def deposit(buffers, delays, amps, taps, pad):
    """Add band-limited arrivals into per-band buffers (in place).

    ``delays`` are in samples; ``buffers`` carry ``pad`` leading samples so
    kernels of early arrivals are not clipped.
    """
    if len(delays) == 0:
        return
    if _accel.numba_enabled():
        _deposit_nb(buffers, np.ascontiguousarray(delays, np.float64),
                    np.ascontiguousarray(amps, np.float64), taps, pad)
    else:
        _deposit_np(buffers, delays, amps, taps, pad)
