"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 numerical failure (NaN).
"""

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .audio_io import read_ir, sidecar_path, write_ir, write_json
from .field import VoxelGridField
from .fit import (DENSITY_SCALE, EMISSION_SCALE, Dataset, DatasetItem, FitConfig, TrainingDiverged, auto_bounds,
                  field_for_dataset, train)
from .geometry import Pose, Scene
from .objective import LossWeights, aggregate, evaluate
from .renderer import (HRTFTable, OmniGain, RenderConfig, parse_gain, render_binaural,
                       render_ir)
from .signals import SampledIR, convolve, next_fft_size
from .simulator import SimConfig, simulate

log = logging.getLogger("irfield")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
SENTINEL_DB = -999.0


class NumericalFailure(RuntimeError):
    pass


# -- parsing helpers ------------------------------------------------------------------


def parse_vector(text, sizes=(3,)):
    vals = [float(v) for v in text.split(",")]
    if len(vals) not in sizes:
        raise ValueError(f"expected {' or '.join(map(str, sizes))} comma-separated numbers, got {text!r}")
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite value in {text!r}")
    return vals


def parse_pose(text):
    vals = parse_vector(text, (3, 6))
    if len(vals) == 6:
        return Pose(vals[:3], vals[3:])
    return Pose(vals)


def _threads(n):
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def _provenance(argv):
    return {"command": " ".join(["irfield"] + list(argv))}


def _write_ir_with_sidecar(path, ir, argv, extra):
    write_ir(path, ir)
    meta = {**_provenance(argv), "sample_rate": ir.sample_rate, "channels": ir.n_channels,
            "n_samples": len(ir), "units": {"samples": "pressure (linear)", "sample_rate": "Hz"},
            **extra}
    if Path(path).suffix == ".f32":
        # the raw format keeps its own header in <name>.json; extend it
        meta_path = Path(path).with_suffix(".json")
        base = json.loads(meta_path.read_text())
        base.update(meta)
        write_json(meta_path, base)
    else:
        write_json(sidecar_path(path), meta)


# -- operations -----------------------------------------------------------------------


def listener_positions(spec, scene, height, seed):
    """Positions for ``random:N`` or ``grid:NXxNY`` inside the scene bounds."""
    lo, hi = scene.bounds()
    z = height if height is not None else 0.5 * (lo[2] + hi[2])
    margin = 0.05 * np.minimum(hi - lo, 1.0)
    kind, _, arg = spec.partition(":")
    if kind == "random":
        n = int(arg)
        rng = np.random.default_rng([seed, 7])
        xy = rng.uniform(lo[:2] + margin[:2], hi[:2] - margin[:2], size=(n, 2))
        return [np.array([x, y, z]) for x, y in xy]
    if kind == "grid":
        nx, ny = (int(v) for v in arg.lower().split("x"))
        xs = np.linspace(lo[0] + margin[0], hi[0] - margin[0], nx)
        ys = np.linspace(lo[1] + margin[1], hi[1] - margin[1], ny)
        return [np.array([x, y, z]) for x in xs for y in ys]
    raise ValueError(f"listener spec must be random:N or grid:NXxNY, got {spec!r}")


def generate_dataset(scene, emitter, positions, cfg, seed, out_dir, threads=1, ext=".wav"):
    """Simulate one IR per listener position and write a dataset directory."""
    items, skipped = [], 0
    for i, p in enumerate(positions):
        if not scene.contains(p) or np.linalg.norm(p - emitter.position) < 1e-9:
            log.warning("skipping unreachable listener %s", p.tolist())
            skipped += 1
            continue
        ir = simulate(scene, emitter, Pose(p), cfg, seed=seed + i, threads=threads)
        items.append(DatasetItem(Pose(p), emitter, ir, f"ir_{i:05d}{ext}"))
    ds = Dataset(items)
    manifest = ds.save(out_dir, ext)
    manifest["skipped"] = skipped
    return manifest


def loudness_map(fld, cfg, height, spacing=0.1, bounds=None, threads=1):
    """Energy in dB at cell centres of a horizontal slice.

    Returns ``(values, origin, spacing)``; cells outside the field or with
    zero energy hold :data:`SENTINEL_DB`.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if bounds is None:
        lo, hi = fld.bounds[0][:2], fld.bounds[1][:2]
    else:
        lo, hi = np.asarray(bounds[:2], float), np.asarray(bounds[2:], float)
    nx = max(1, int(math.floor((hi[0] - lo[0]) / spacing + 1e-9)))
    ny = max(1, int(math.floor((hi[1] - lo[1]) / spacing + 1e-9)))
    origin = np.array([lo[0], lo[1]])
    values = np.full((ny, nx), SENTINEL_DB)
    flo, fhi = _field_box(fld)
    for j in range(ny):
        for i in range(nx):
            p = np.array([origin[0] + (i + 0.5) * spacing, origin[1] + (j + 0.5) * spacing, height])
            if flo is not None and (np.any(p < flo - 1e-9) or np.any(p > fhi + 1e-9)):
                continue
            _, ir = render_ir(fld, Pose(p), OmniGain(), None, cfg, threads)
            e = float(np.sum(ir.samples ** 2))
            if e > 0 and math.isfinite(e):
                values[j, i] = 10 * math.log10(e)
    return values, origin, spacing


def _field_box(fld):
    if isinstance(fld, VoxelGridField):
        return fld.bounds[0], fld.bounds[1]
    return None, None


def map_to_pgm_bytes(values):
    """8-bit min-max normalisation (sentinel cells map to 0); returns ``(bytes, lo, hi)``."""
    live = values != SENTINEL_DB
    if not live.any():
        return np.zeros(values.shape, np.uint8), None, None
    lo, hi = float(values[live].min()), float(values[live].max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.where(live, np.rint((values - lo) * scale), 0).astype(np.uint8)
    if hi == lo:
        img[live] = 255
    return img, lo, hi


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, np.uint8).tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def convolve_render(ir, audio):
    """Convolve mono or 2-channel ``ir`` with ``audio``; returns ``(SampledIR, gain)``.

    The output is peak-normalised to 1; ``gain`` is the factor applied.
    """
    if ir.sample_rate != audio.sample_rate:
        raise ValueError("IR and audio sample rates differ (no resampling)")
    src = audio.samples if audio.samples.ndim == 1 else audio.samples
    hs = ir.samples if ir.samples.ndim == 2 else ir.samples[None, :]
    xs = src if src.ndim == 2 else src[None, :]
    if xs.shape[0] > 1 and hs.shape[0] > 1 and xs.shape[0] != hs.shape[0]:
        raise ValueError("channel counts of IR and audio are incompatible")
    n_ch = max(xs.shape[0], hs.shape[0])
    out = np.stack([convolve(xs[min(c, len(xs) - 1)], hs[min(c, len(hs) - 1)]) for c in range(n_ch)])
    peak = float(np.max(np.abs(out)))
    gain = 1.0 / peak if peak > 0 else 1.0
    out = out * gain
    return SampledIR(out[0] if n_ch == 1 else out, ir.sample_rate), gain


def render_config_for(fld, ir_len=None, n_theta=None, n_phi=None, n_r=None, u_near=0.1,
                      u_far=None, v=343.0, seed=0):
    """Render layout matching a field's transform; flat fields render in-plane."""
    lo, hi = fld.bounds
    flat = (hi[2] - lo[2]) == 0
    diag = float(np.linalg.norm(hi - lo)) or 1.0
    u_far = u_far or diag
    if n_phi is None:
        n_phi = 1 if flat else 40
    return RenderConfig(N_theta=n_theta or 80, N_phi=n_phi, N_r=n_r or 64, u_n=u_near,
                        u_f=u_far, v=v, n_fft=fld.n_fft, sample_rate=fld.sample_rate,
                        ir_len=ir_len or fld.n_fft // 2, seed=seed)


def _render_cfg_from_sidecar(path):
    p = sidecar_path(path)
    if p.exists():
        meta = json.loads(p.read_text())
        if "render" in meta:
            return RenderConfig(**meta["render"])
    return None


def _hash_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -------------------------------------------------------------------------


def cmd_simulate(args, argv):
    scene = Scene.load(args.scene)
    cfg = SimConfig(n_rays=args.rays, max_depth=args.depth, receiver_radius=args.radius,
                    ir_duration=args.duration, sample_rate=args.sr)
    stats = {}
    ir = simulate(scene, parse_pose(args.emitter), parse_pose(args.listener), cfg,
                  seed=args.seed, threads=_threads(args.threads), stats=stats)
    _check_finite(ir.samples)
    _write_ir_with_sidecar(args.out, ir, argv, {"path_statistics": stats, "seed": args.seed})
    return EXIT_OK


def cmd_gen_dataset(args, argv):
    scene = Scene.load(args.scene)
    emitter = parse_pose(args.emitter)
    cfg = SimConfig(n_rays=args.rays, max_depth=args.depth, receiver_radius=args.radius,
                    ir_duration=args.duration, sample_rate=args.sr)
    positions = listener_positions(args.listeners, scene, args.height, args.seed)
    manifest = generate_dataset(scene, emitter, positions, cfg, args.seed, args.out,
                                _threads(args.threads))
    write_json(Path(args.out) / "manifest.json.meta.json",
               {**_provenance(argv), "n_items": len(manifest["items"]),
                "skipped": manifest["skipped"]})
    return EXIT_OK


def cmd_fit(args, argv):
    ds = Dataset.load(args.dataset)
    if args.scene_bounds == "auto":
        bounds = auto_bounds(ds)
    else:
        b = parse_vector(args.scene_bounds, (6,))
        bounds = np.array([b[:3], b[3:]])
    n_fft = args.n_fft or next_fft_size(2 * ds.ir_len)
    fld = field_for_dataset(ds, bounds, args.grid, n_fft, density_scale=args.density_scale,
                            emission_scale=args.emission_scale)
    rcfg = render_config_for(fld, ds.ir_len, args.n_theta, args.n_phi, args.n_r, args.u_near,
                             args.u_far, seed=args.seed)
    cfg = FitConfig(epochs=args.epochs, lr_start=args.lr_start, lr_end=args.lr_end,
                    batch_size=args.batch_size, seed=args.seed, weights=LossWeights(),
                    render=rcfg, threads=_threads(args.threads), eval_every=args.eval_every)
    try:
        train(ds, fld, cfg, log_path=args.log, checkpoint_path=args.out)
    finally:
        if Path(args.out).exists():
            write_json(sidecar_path(args.out),
                       {**_provenance(argv), "render": rcfg.__dict__, "grid": fld.resolution,
                        "bounds": fld.bounds, "epochs": args.epochs, "seed": args.seed})
    return EXIT_OK


def _load_field_and_cfg(args):
    fld = VoxelGridField.load(args.field)
    cfg = _render_cfg_from_sidecar(args.field) or render_config_for(fld)
    overrides = {k: v for k, v in (("N_theta", args.n_theta), ("N_phi", args.n_phi),
                                   ("N_r", args.n_r), ("ir_len", args.ir_len)) if v}
    return fld, cfg.replace(**overrides) if overrides else cfg


def cmd_render(args, argv):
    fld, cfg = _load_field_and_cfg(args)
    listener = parse_pose(args.listener)
    lo, hi = fld.bounds
    if np.any(listener.position < lo - 1e-9) or np.any(listener.position > hi + 1e-9):
        raise ValueError(f"listener {listener.position.tolist()} lies outside the field bounds")
    gain = parse_gain(args.gain)
    threads = _threads(args.threads)
    if args.binaural:
        if isinstance(gain, HRTFTable):
            gl, gr = gain.ear(0), gain.ear(1)
        else:
            gl = gr = gain
        ir = render_binaural(fld, listener, args.ear_spacing, gl, gr, fld.emitter, cfg, threads)
    else:
        if isinstance(gain, HRTFTable):
            raise ValueError("an HRTF gain needs --binaural")
        _, ir = render_ir(fld, listener, gain, fld.emitter, cfg, threads)
    _check_finite(ir.samples)
    _write_ir_with_sidecar(args.out, ir, argv, {"render": cfg.__dict__, "gain": args.gain})
    return EXIT_OK


def _pairs(pred, ref):
    pred, ref = Path(pred), Path(ref)
    if pred.is_dir() != ref.is_dir():
        raise ValueError("--pred and --ref must both be files or both directories")
    if not pred.is_dir():
        return [(pred.name, pred, ref)]
    exts = {".wav", ".f32"}
    names = sorted(p.name for p in ref.iterdir() if p.suffix in exts)
    missing = [n for n in names if not (pred / n).exists()]
    if missing:
        raise ValueError(f"prediction directory lacks {len(missing)} reference files, e.g. {missing[0]}")
    return [(n, pred / n, ref / n) for n in names]


def cmd_eval(args, argv):
    per_item, reports = [], []
    for name, p, r in _pairs(args.pred, args.ref):
        rep = evaluate(read_ir(p), read_ir(r))
        reports.append(rep)
        per_item.append({"item": name, **rep.as_dict()})
    out = {**_provenance(argv), "items": per_item, "aggregate": aggregate(reports),
           "units": {"envelope_error": "percent", "t60_error": "percent", "c50_error": "dB",
                     "edt_error": "ms"}}
    write_json(args.out, out)
    return EXIT_OK


def cmd_compare(args, argv):
    pairs = _pairs(args.pred, args.ref)
    with open(args.out, "w") as fh:
        if len(pairs) == 1 and not Path(args.pred).is_dir():
            a, b = read_ir(pairs[0][1]), read_ir(pairs[0][2])
            n = max(len(a), len(b))
            fh.write("sample,time_s,pred,ref\n")
            xa = np.pad(a.samples, (0, n - len(a)))
            xb = np.pad(b.samples, (0, n - len(b)))
            for i in range(n):
                fh.write(f"{i},{i / a.sample_rate:.9g},{xa[i]:.9g},{xb[i]:.9g}\n")
        else:
            fh.write("item,phase_error,amp_error,envelope_error,t60_error,c50_error,edt_error\n")
            for name, p, r in pairs:
                d = evaluate(read_ir(p), read_ir(r)).as_dict()
                row = [d[k] for k in ("phase_error", "amp_error", "envelope_error",
                                      "t60_error", "c50_error", "edt_error")]
                fh.write(name + "," + ",".join("" if v is None else f"{v:.9g}" for v in row) + "\n")
    write_json(sidecar_path(args.out), _provenance(argv))
    return EXIT_OK


def cmd_loudness_map(args, argv):
    fld, cfg = _load_field_and_cfg(args)
    bounds = parse_vector(args.bounds, (4,)) if args.bounds else None
    height = args.height if args.height is not None else float(fld.bounds[:, 2].mean())
    values, origin, spacing = loudness_map(fld, cfg, height, args.spacing, bounds,
                                           _threads(args.threads))
    prefix = Path(args.out)
    np.savetxt(prefix.with_suffix(".csv"), values, delimiter=",", fmt="%.6f")
    img, lo, hi = map_to_pgm_bytes(values)
    write_pgm(prefix.with_suffix(".pgm"), img)
    write_json(prefix.with_suffix(".json"), {
        **_provenance(argv), "origin": origin, "spacing": spacing, "height": height,
        "shape": values.shape, "units": "dB (10 log10 sum h^2)", "sentinel": SENTINEL_DB,
        "pgm_range_db": [lo, hi], "rows": "y index ascending", "cols": "x index ascending"})
    return EXIT_OK


def cmd_convolve(args, argv):
    out, gain = convolve_render(read_ir(args.ir), read_ir(args.audio))
    _check_finite(out.samples)
    _write_ir_with_sidecar(args.out, out, argv, {"normalisation_gain": gain})
    return EXIT_OK


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("output contains non-finite values")


# -- parser ---------------------------------------------------------------------------


def _global_flags(p, suppress):
    d = argparse.SUPPRESS
    p.add_argument("--threads", type=int, default=d if suppress else 1,
                   help="worker threads (0 = all cores)")
    p.add_argument("--verbose", action="store_true", default=d if suppress else False)
    p.add_argument("--seed", type=int, default=d if suppress else 0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="irfield",
        description="Room impulse response simulation and IR-field fitting.",
        epilog="exit codes: 0 success, 2 validation error, 3 numerical failure (NaN)",
    )
    _global_flags(parser, False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, True)
        p.set_defaults(func=fn)
        return p

    def sim_flags(p):
        p.add_argument("--scene", required=True, help="scene JSON")
        p.add_argument("--emitter", required=True, help="x,y,z[,ox,oy,oz]")
        p.add_argument("--rays", type=int, default=100_000)
        p.add_argument("--depth", type=int, default=30)
        p.add_argument("--radius", type=float, default=0.2, help="receiver radius (m)")
        p.add_argument("--duration", type=float, default=0.1, help="IR length (s)")
        p.add_argument("--sr", type=float, default=16000.0)

    p = add("simulate", cmd_simulate, "simulate one IR by ray tracing")
    sim_flags(p)
    p.add_argument("--listener", required=True)
    p.add_argument("--out", required=True)

    p = add("gen-dataset", cmd_gen_dataset, "simulate a dataset of IRs")
    sim_flags(p)
    p.add_argument("--listeners", required=True, help="random:N or grid:NXxNY")
    p.add_argument("--height", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = add("fit", cmd_fit, "fit a voxel field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-bounds", default="auto")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-4)
    p.add_argument("--n-fft", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--density-scale", type=float, default=DENSITY_SCALE)
    p.add_argument("--emission-scale", type=float, default=EMISSION_SCALE)
    _render_flags(p)
    p.add_argument("--log", default=None, help="JSONL training log")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = add("render", cmd_render, "render an IR from a fitted field")
    p.add_argument("--field", required=True)
    p.add_argument("--listener", required=True)
    p.add_argument("--gain", default="omni", help="omni | cardioid[:x,y,z] | hrtf:<file>")
    p.add_argument("--binaural", action="store_true")
    p.add_argument("--ear-spacing", type=float, default=0.2)
    p.add_argument("--ir-len", type=int, default=None)
    _render_flags(p, near_far=False)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "metrics of predicted against reference IRs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = add("compare", cmd_compare, "side-by-side CSV of predicted and reference IRs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = add("loudness-map", cmd_loudness_map, "energy map over a horizontal slice")
    p.add_argument("--field", required=True)
    p.add_argument("--height", type=float, default=None)
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--bounds", default=None, help="x0,y0,x1,y1")
    p.add_argument("--ir-len", type=int, default=None)
    _render_flags(p, near_far=False)
    p.add_argument("--out", required=True, help="output prefix (.csv, .pgm, .json)")

    p = add("convolve", cmd_convolve, "convolve source audio with an IR")
    p.add_argument("--ir", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    return parser


def _render_flags(p, near_far=True):
    p.add_argument("--n-theta", type=int, default=None)
    p.add_argument("--n-phi", type=int, default=None)
    p.add_argument("--n-r", type=int, default=None)
    if near_far:
        p.add_argument("--u-near", type=float, default=0.1)
        p.add_argument("--u-far", type=float, default=None)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"irfield: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"irfield: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
