"""Fitting a voxel field to measured or simulated impulse responses."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._kernels.optim import adam_update
from .audio_io import read_ir, write_ir
from .field import FieldGradients, VoxelGridField
from .geometry import Pose
from .objective import LossWeights, aggregate, evaluate, total_loss
from .renderer import OmniGain, RenderConfig, render_ir, render_ir_adjoint
from .signals import SampledIR, StftConfig

log = logging.getLogger(__name__)

# Parameter units of fitted fields. At a step size near 1e-3 these let density
# and emission reach room-scale values within a few epochs.
DENSITY_SCALE = 100.0
EMISSION_SCALE = 10000.0


# -- dataset --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetItem:
    listener: Pose
    emitter: Pose
    ir: SampledIR
    name: str = ""


def _pose_dict(p):
    return {"position": p.position.tolist(), "orientation": p.orientation.tolist()}


def _pose_from(d):
    if isinstance(d, dict):
        return Pose(d["position"], d.get("orientation", [1.0, 0.0, 0.0]))
    return Pose(d)


class Dataset:
    """IRs with listener and emitter poses; shared rate and length."""

    def __init__(self, items):
        items = list(items)
        if len(items) < 2:
            raise ValueError("a dataset needs at least 2 items")
        sr = items[0].ir.sample_rate
        n = len(items[0].ir)
        for it in items:
            if it.ir.sample_rate != sr or len(it.ir) != n:
                raise ValueError("dataset items differ in sample rate or length")
            if it.ir.n_channels != 1:
                raise ValueError("dataset IRs must be mono")
        self.items = items
        self.sample_rate = sr
        self.ir_len = n

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    def subset(self, indices):
        return _Subset([self.items[i] for i in indices])

    def positions(self):
        return np.array([it.listener.position for it in self.items])

    def save(self, directory, ext=".wav"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        emitters, entries = [], []
        for i, it in enumerate(self.items):
            key = _pose_dict(it.emitter)
            if key not in emitters:
                emitters.append(key)
            fname = it.name or f"ir_{i:05d}{ext}"
            write_ir(d / fname, it.ir)
            entries.append({"listener": _pose_dict(it.listener),
                            "emitter": emitters.index(key), "file": fname})
        manifest = {"sample_rate": self.sample_rate, "ir_len": self.ir_len,
                    "emitters": emitters, "items": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return manifest

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        emitters = [_pose_from(e) for e in manifest["emitters"]]
        items = []
        for e in manifest["items"]:
            path = d / e["file"]
            if not path.exists():
                raise FileNotFoundError(f"manifest references missing file {path}")
            ir = read_ir(path)
            if ir.sample_rate != manifest["sample_rate"] or len(ir) != manifest["ir_len"]:
                raise ValueError(f"{path} disagrees with the manifest rate/length")
            items.append(DatasetItem(_pose_from(e["listener"]), emitters[e.get("emitter", 0)],
                                     ir, e["file"]))
        return cls(items)


class _Subset(Dataset):
    def __init__(self, items):
        # a split side may hold a single item
        self.items = list(items)
        self.sample_rate = self.items[0].ir.sample_rate
        self.ir_len = len(self.items[0].ir)


def split_dataset(ds, ratio=0.9, seed=0):
    """Deterministic shuffled split into ``(train, test)``."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(ds)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"ratio {ratio} leaves one side of a {n}-item split empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(sorted(perm[:n_train])), ds.subset(sorted(perm[n_train:]))


# -- optimiser ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    rejected: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr, hyper=AdamHyper(), grad_scale=1.0, inplace=False):
    """One bias-corrected Adam update; returns ``(params, state, accepted)``.

    The gradient used is ``grads * grad_scale``. A non-finite gradient leaves
    parameters and moments untouched. With ``inplace`` the given ``params``
    and ``state`` arrays are updated rather than copied.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.ascontiguousarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimiser state must match in shape")
    if not inplace:
        params = params.copy()
        state = AdamState(state.m.copy(), state.v.copy(), state.step, state.rejected)
    ok = adam_update(params, grads, state.m, state.v, grad_scale, lr, hyper.beta1,
                     hyper.beta2, hyper.eps, state.step + 1)
    if not ok:
        log.warning("adam_step: non-finite gradient, step rejected")
        return params, replace(state, rejected=state.rejected + 1), False
    return params, replace(state, step=state.step + 1), True


def cosine_lr(step, total_steps, lr_start=1e-3, lr_end=1e-4):
    if total_steps <= 0:
        return lr_start
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in 0..total_steps")
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


# -- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 200
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 4
    adam: AdamHyper = AdamHyper()
    seed: int = 0
    weights: LossWeights = LossWeights()
    render: RenderConfig = RenderConfig()
    stft: StftConfig = None
    split_ratio: float = 0.9
    eval_every: int = 1
    threads: int = 1
    resample_directions: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def stft_config(self):
        if self.stft is not None:
            return self.stft
        return default_stft(self.render.ir_len)


def default_stft(ir_len):
    """Three resolutions at (1, 2, 4) x a base window, the largest fitting ``ir_len``."""
    base = 1 << int(math.floor(math.log2(max(ir_len // 4, 16))))
    return StftConfig.scaled(base)


@dataclass
class FitResult:
    field: VoxelGridField
    log: list = field(default_factory=list)
    aborted: bool = False


class TrainingDiverged(FloatingPointError):
    pass


def _target(item, cfg):
    h_ref = item.ir.samples
    return h_ref, np.fft.rfft(h_ref, n=cfg.n_fft)


def item_loss_and_grad(fld, item, cfg, weights, stft_cfg, out=None):
    """Loss breakdown and parameter gradients for one training item.

    ``out`` is an optional :class:`FieldGradients` buffer to overwrite.
    """
    gain = OmniGain()
    spec, ir = render_ir(fld, item.listener, gain, item.emitter, cfg)
    h_ref, H_ref = _target(item, cfg)
    total, parts, (g_H, g_h) = total_loss(ir.samples, spec.bins, h_ref, H_ref, weights,
                                          stft_cfg, grad=True)
    grads = render_ir_adjoint(fld, item.listener, gain, item.emitter, cfg, g_H, g_h, out=out)
    return total, parts, grads


def item_loss(fld, item, cfg, weights, stft_cfg):
    spec, ir = render_ir(fld, item.listener, OmniGain(), item.emitter, cfg)
    h_ref, H_ref = _target(item, cfg)
    return total_loss(ir.samples, spec.bins, h_ref, H_ref, weights, stft_cfg)


def evaluate_field(fld, ds, cfg, threads=1):
    """Metric reports for every item of ``ds`` and their aggregate."""
    def one(item):
        _, ir = render_ir(fld, item.listener, OmniGain(), item.emitter, cfg)
        return evaluate(ir, item.ir, cfg.n_fft)

    reports = list(_map(one, list(ds), threads))
    return reports, aggregate(reports)


def _map(fn, items, threads):
    if threads <= 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=threads)
    try:
        return list(pool.map(fn, items))
    finally:
        pool.shutdown()


def _check_dataset(ds, fld, cfg):
    if ds.ir_len != cfg.render.ir_len:
        raise ValueError(f"dataset IR length {ds.ir_len} != render ir_len {cfg.render.ir_len}")
    if ds.sample_rate != cfg.render.sample_rate:
        raise ValueError("dataset and render sample rates differ")
    if fld.n_fft != cfg.render.n_fft or fld.sample_rate != cfg.render.sample_rate:
        raise ValueError("field spectra do not match the render transform")
    lo, hi = fld.bounds
    pos = ds.positions()
    if np.any(pos < lo - 1e-9) or np.any(pos > hi + 1e-9):
        raise ValueError("dataset poses must lie within the field bounds")


def _step_render_configs(cfg, step, n):
    """Render configs for the ``n`` items of one step.

    With ``resample_directions`` every item draws its own stratified jitter
    from ``(seed, step, slot)``, so successive steps see different ray sets
    while runs stay reproducible.
    """
    if not cfg.resample_directions:
        return [cfg.render] * n
    seeds = np.random.SeedSequence([cfg.seed, step]).generate_state(n, dtype=np.uint64)
    return [cfg.render.replace(seed=int(s)) for s in seeds]


def train(ds, fld, cfg, log_path=None, checkpoint_path=None, on_epoch=None):
    """Fit ``fld`` in place on the training split of ``ds``.

    Each epoch shuffles the training items, steps Adam once per batch on
    the batch-mean gradient (rendered with freshly jittered directions unless
    ``cfg.resample_directions`` is off), and (every ``eval_every`` epochs) reports test
    metrics. One JSON record per epoch is appended to ``log_path``.
    """
    _check_dataset(ds, fld, cfg)
    train_set, test_set = split_dataset(ds, cfg.split_ratio, cfg.seed)
    stft_cfg = cfg.stft_config()
    rcfg = cfg.render
    n_train = len(train_set)
    steps_per_epoch = -(-n_train // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    params = fld.parameter_buffer()
    state = AdamState.zeros(params.size)
    last_good = params.copy()
    # one gradient buffer per batch slot, reused across steps
    slots = [FieldGradients.zeros_like(fld) for _ in range(min(cfg.batch_size, n_train))]
    result = FitResult(fld)
    log_fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
            losses, breakdowns, rejected = [], [], 0
            for b in range(steps_per_epoch):
                batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                cfgs = _step_render_configs(cfg, step, len(batch))
                outs = list(_map(lambda a: item_loss_and_grad(fld, a[0], a[2], cfg.weights,
                                                              stft_cfg, out=a[1]),
                                 list(zip(batch, slots, cfgs)), cfg.threads))
                grads = outs[0][2]
                for total, parts, g in outs:
                    losses.append(total)
                    breakdowns.append(parts)
                    if g is not grads:
                        grads += g
                if not all(math.isfinite(o[0]) for o in outs):
                    _abort(fld, last_good, checkpoint_path, log_fh, epoch)
                last_good[:] = params
                lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end)
                _, state, ok = adam_step(params, grads.as_vector(), state, lr, cfg.adam,
                                         grad_scale=1.0 / len(batch), inplace=True)
                rejected += not ok
                step += 1
            record = {
                "epoch": epoch,
                "lr": cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end),
                "train_loss": float(np.mean(losses)),
                "breakdown": {k: float(np.mean([p[k] for p in breakdowns])) for k in breakdowns[0]},
                "rejected_steps": rejected,
            }
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                _, agg = evaluate_field(fld, test_set, rcfg, cfg.threads)
                record["test_metrics"] = agg
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record)
            log.info("epoch %d loss %.6g", epoch, record["train_loss"])
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        fld.save(checkpoint_path)
    return result


def _abort(fld, last_good, checkpoint_path, log_fh, epoch):
    fld.set_parameter_vector(last_good)
    if checkpoint_path:
        fld.save(checkpoint_path)
    if log_fh:
        log_fh.write(json.dumps({"epoch": epoch, "error": "non-finite loss"}) + "\n")
    raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")


def field_for_dataset(ds, bounds, grid, n_fft, sh_degree=0, density_scale=DENSITY_SCALE,
                      emission_scale=EMISSION_SCALE):
    """Fresh field over ``bounds``; ``grid`` nodes on the long axes, 1 on flat ones."""
    b = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    span = b[1] - b[0]
    res = tuple(int(grid) if s > 0 else 1 for s in span)
    return VoxelGridField(b, res, n_fft, ds.sample_rate, sh_degree, ds[0].emitter,
                          density_scale=density_scale, emission_scale=emission_scale)


def auto_bounds(ds, margin=0.0):
    pos = ds.positions()
    emit = np.array([it.emitter.position for it in ds])
    allp = np.vstack([pos, emit])
    return np.stack([allp.min(axis=0) - margin, allp.max(axis=0) + margin])
