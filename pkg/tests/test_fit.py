import hashlib
import json

import numpy as np
import pytest

import irfield.fit as fit_mod
from irfield.field import AnalyticPointSourceField
from irfield.fit import (AdamHyper, AdamState, Dataset, DatasetItem, FitConfig, TrainingDiverged,
                         adam_step, cosine_lr, field_for_dataset, item_loss, split_dataset, train)
from irfield.geometry import Pose
from irfield.objective import LossWeights
from irfield.renderer import OmniGain, RenderConfig, render_ir
from irfield.signals import SampledIR

SR = 16000.0
Z = 0.2
BOUNDS = [[0.0, 0.0, Z], [2.0, 1.5, Z]]
RCFG = RenderConfig(N_theta=32, N_phi=1, N_r=24, u_n=0.1, u_f=2.5, n_fft=512, ir_len=256)


def ir_items(n, seed=0):
    rng = np.random.default_rng(seed)
    return [DatasetItem(Pose([*rng.uniform([0, 0], [2, 1.5]), Z]), Pose([1.0, 0.75, Z]),
                        SampledIR(rng.normal(size=32), SR), f"i{k}") for k in range(n)]


def rendered_dataset(fld, listeners, cfg=RCFG):
    items = []
    for k, p in enumerate(listeners):
        _, ir = render_ir(fld, Pose(p), OmniGain(), Pose([1.0, 0.75, Z]), cfg)
        items.append(DatasetItem(Pose(p), Pose([1.0, 0.75, Z]), ir, f"ir_{k}.wav"))
    return Dataset(items)


# -- dataset / split -------------------------------------------------------------------


def test_dataset_validation():
    items = ir_items(3)
    with pytest.raises(ValueError):
        Dataset(items[:1])
    bad = DatasetItem(items[0].listener, items[0].emitter, SampledIR(np.ones(5), SR))
    with pytest.raises(ValueError):
        Dataset(items[:2] + [bad])


def test_dataset_save_load(tmp_path):
    ds = Dataset(ir_items(4))
    ds.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert len(back) == 4
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.listener.position, b.listener.position)
        np.testing.assert_allclose(a.ir.samples, b.ir.samples, rtol=1e-6)   # float32 on disk
    (tmp_path / "i2").unlink()
    with pytest.raises(FileNotFoundError):
        Dataset.load(tmp_path)


def test_split_ten_items():
    tr, te = split_dataset(Dataset(ir_items(10)), 0.9, seed=3)
    assert (len(tr), len(te)) == (9, 1)
    tr2, te2 = split_dataset(Dataset(ir_items(10)), 0.9, seed=3)
    assert [i.name for i in tr] == [i.name for i in tr2]


@pytest.mark.parametrize("n", [2, 5, 13, 40])
def test_split_partitions(n):
    ds = Dataset(ir_items(n))
    tr, te = split_dataset(ds, 0.7 if n > 2 else 0.5, seed=n)
    a, b = {i.name for i in tr}, {i.name for i in te}
    assert not a & b
    assert a | b == {i.name for i in ds}


def test_split_rejects_degenerate():
    with pytest.raises(ValueError):
        split_dataset(Dataset(ir_items(3)), 0.99)
    with pytest.raises(ValueError):
        split_dataset(Dataset(ir_items(3)), 1.0)


# -- optimiser -------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    new, st, ok = adam_step(p, np.zeros(2), AdamState.zeros(2), 1e-3)
    assert ok and st.step == 1
    np.testing.assert_array_equal(new, p)


def test_adam_first_step_closed_form(any_backend):
    g = np.array([0.5, -3.0, 1e-3])
    new, _, _ = adam_step(np.zeros(3), g, AdamState.zeros(3), 1e-3)
    # bias-corrected m / sqrt(v) equals g / |g| at t = 1
    np.testing.assert_allclose(new, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_matches_reference_loop(any_backend, rng):
    h = AdamHyper()
    p_ref = rng.normal(size=6)
    m = np.zeros(6)
    v = np.zeros(6)
    p, st = p_ref.copy(), AdamState.zeros(6)
    for t in range(1, 6):
        g = rng.normal(size=6)
        m = h.beta1 * m + (1 - h.beta1) * g
        v = h.beta2 * v + (1 - h.beta2) * g * g
        p_ref = p_ref - 1e-2 * (m / (1 - h.beta1 ** t)) / (np.sqrt(v / (1 - h.beta2 ** t)) + h.eps)
        p, st, _ = adam_step(p, g, st, 1e-2)
    np.testing.assert_allclose(p, p_ref, rtol=1e-12)


def test_adam_rejects_non_finite():
    p = np.ones(3)
    st = AdamState.zeros(3)
    new, st2, ok = adam_step(p, np.array([1.0, np.nan, 0.0]), st, 1e-3)
    assert not ok and st2.rejected == 1 and st2.step == 0
    np.testing.assert_array_equal(new, p)
    assert not np.any(st2.m)


def test_adam_deterministic_and_inplace(rng):
    grads = rng.normal(size=(5, 4))
    runs = []
    for _ in range(2):
        p, st = np.zeros(4), AdamState.zeros(4)
        for g in grads:
            p, st, _ = adam_step(p, g, st, 1e-3)
        runs.append(p)
    assert runs[0].tobytes() == runs[1].tobytes()
    buf, st = np.zeros(4), AdamState.zeros(4)
    for g in grads:
        out, st, _ = adam_step(buf, 2 * g, st, 1e-3, grad_scale=0.5, inplace=True)
        assert out is buf
    assert buf.tobytes() == runs[0].tobytes()


def test_cosine_schedule():
    assert cosine_lr(0, 100) == pytest.approx(1e-3)
    assert cosine_lr(100, 100) == pytest.approx(1e-4)
    assert cosine_lr(50, 100) == pytest.approx(5.5e-4)
    with pytest.raises(ValueError):
        cosine_lr(101, 100)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(epochs=0)
    with pytest.raises(ValueError):
        FitConfig(lr_start=1e-4, lr_end=1e-3)


# -- training --------------------------------------------------------------------------


def small_fit_cfg(**kw):
    base = dict(epochs=2, render=RCFG, batch_size=2, split_ratio=0.75, eval_every=0)
    base.update(kw)
    return FitConfig(**base)


@pytest.fixture(scope="module")
def analytic_ds():
    src = AnalyticPointSourceField([1.0, 0.75, Z], n_fft=RCFG.n_fft)
    rng = np.random.default_rng(11)
    pts = [[*rng.uniform([0.1, 0.1], [1.9, 1.4]), Z] for _ in range(8)]
    pts = [p for p in pts if np.hypot(p[0] - 1.0, p[1] - 0.75) > 0.3]
    return rendered_dataset(src, pts)


def test_fixed_point_is_stationary():
    fld = field_for_dataset(Dataset(ir_items(2)), BOUNDS, 16, RCFG.n_fft)
    rng = np.random.default_rng(0)
    fld.rho[...] = rng.normal(0.0, 0.02, fld.rho.shape)
    fld.coef[..., :40] = 1e-4 * (rng.normal(size=fld.coef[..., :40].shape) + 0j)
    ds = rendered_dataset(fld, [[0.5, 0.5, Z], [1.5, 1.0, Z], [0.3, 1.2, Z], [1.7, 0.2, Z]])
    before = fld.parameter_vector()
    cfg = small_fit_cfg(resample_directions=False, weights=LossWeights())
    res = train(ds, fld, cfg)
    assert res.log[0]["train_loss"] == 0.0
    assert np.array_equal(fld.parameter_vector(), before)


def test_single_listener_loss_decreases_monotonically():
    src = AnalyticPointSourceField([1.0, 0.75, Z], n_fft=RCFG.n_fft)
    ds = rendered_dataset(src, [[0.4, 0.6, Z], [1.6, 1.1, Z]])
    fld = field_for_dataset(ds, BOUNDS, 64, RCFG.n_fft)
    cfg = small_fit_cfg(epochs=10, split_ratio=0.5, batch_size=1)
    losses = [r["train_loss"] for r in train(ds, fld, cfg).log]
    assert np.all(np.diff(losses) < 0), losses


def test_one_step_does_not_increase_loss(analytic_ds):
    item = analytic_ds[0]
    ds = Dataset([item, analytic_ds[1]])
    fld = field_for_dataset(ds, BOUNDS, 32, RCFG.n_fft)
    cfg = small_fit_cfg(epochs=1, split_ratio=0.5, batch_size=1, resample_directions=False)
    stft = cfg.stft_config()
    train_item = split_dataset(ds, 0.5, cfg.seed)[0][0]
    before = item_loss(fld, train_item, RCFG, cfg.weights, stft)[0]
    train(ds, fld, cfg)
    after = item_loss(fld, train_item, RCFG, cfg.weights, stft)[0]
    assert after <= before


def test_training_never_touches_test_items(analytic_ds, monkeypatch):
    seen = []
    real = fit_mod.item_loss_and_grad

    def spy(fld, item, *a, **kw):
        seen.append(item.name)
        return real(fld, item, *a, **kw)

    monkeypatch.setattr(fit_mod, "item_loss_and_grad", spy)
    fld = field_for_dataset(analytic_ds, BOUNDS, 16, RCFG.n_fft)
    cfg = small_fit_cfg(eval_every=1)
    res = train(analytic_ds, fld, cfg)
    _, test = split_dataset(analytic_ds, cfg.split_ratio, cfg.seed)
    assert seen and not set(seen) & {it.name for it in test}
    assert "test_metrics" in res.log[-1]


def test_log_and_checkpoint(analytic_ds, tmp_path):
    fld = field_for_dataset(analytic_ds, BOUNDS, 16, RCFG.n_fft)
    train(analytic_ds, fld, small_fit_cfg(eval_every=1), log_path=tmp_path / "log.jsonl",
          checkpoint_path=tmp_path / "f.bin")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert set(lines[0]["breakdown"]) == {"spec", "amp", "phase", "time", "stft", "energy"}
    assert lines[1]["lr"] == pytest.approx(1e-4)
    assert "phase_error" in lines[1]["test_metrics"]
    assert (tmp_path / "f.bin").stat().st_size > 0


def _hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_training_is_deterministic(analytic_ds, tmp_path):
    hashes = []
    for k, threads in enumerate((1, 1, 4)):
        fld = field_for_dataset(analytic_ds, BOUNDS, 16, RCFG.n_fft)
        train(analytic_ds, fld, small_fit_cfg(threads=threads),
              checkpoint_path=tmp_path / f"{k}.bin")
        hashes.append(_hash(tmp_path / f"{k}.bin"))
    assert len(set(hashes)) == 1


def test_divergence_restores_last_good(analytic_ds, tmp_path, monkeypatch):
    real = fit_mod.total_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        if calls["n"] > 5:
            return (float("nan"),) + out[1:]
        return out

    monkeypatch.setattr(fit_mod, "total_loss", flaky)
    fld = field_for_dataset(analytic_ds, BOUNDS, 16, RCFG.n_fft)
    with pytest.raises(TrainingDiverged):
        train(analytic_ds, fld, small_fit_cfg(epochs=5), log_path=tmp_path / "log.jsonl",
              checkpoint_path=tmp_path / "f.bin")
    assert np.all(np.isfinite(fld.parameter_vector()))
    assert (tmp_path / "f.bin").exists()
    assert "non-finite" in (tmp_path / "log.jsonl").read_text()


def test_dataset_outside_bounds_rejected(analytic_ds):
    fld = field_for_dataset(analytic_ds, [[0, 0, Z], [0.5, 0.5, Z]], 8, RCFG.n_fft)
    with pytest.raises(ValueError):
        train(analytic_ds, fld, small_fit_cfg())
