import hashlib
import json

import numpy as np
import pytest

from irfield import cli
from irfield.audio_io import read_ir, write_ir
from irfield.field import AnalyticPointSourceField, VoxelGridField
from irfield.geometry import shoebox
from irfield.renderer import RenderConfig
from irfield.signals import SampledIR

SR = 16000.0
SIM = ["--rays", "300", "--depth", "4", "--duration", "0.04", "--sr", "16000"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "room.json"
    shoebox((2.0, 1.5, 0.4), reflection=0.7, scattering=0.2).save(path)
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, scene_file):
    out = tmp_path_factory.mktemp("ds")
    code = cli.main(["gen-dataset", "--scene", str(scene_file), "--emitter", "1.0,0.75,0.2",
                     "--listeners", "random:10", "--height", "0.2", "--seed", "5", *SIM,
                     "--out", str(out)])
    assert code == 0
    return out


# -- dataset generation ----------------------------------------------------------------


def test_gen_dataset_random(dataset_dir):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert len(manifest["items"]) == 10
    assert len(list(dataset_dir.glob("*.wav"))) == 10
    assert manifest["sample_rate"] == SR and manifest["ir_len"] == 640


def test_gen_dataset_grid(tmp_path, scene_file):
    code = cli.main(["gen-dataset", "--scene", str(scene_file), "--emitter", "0.6,0.5,0.2",
                     "--listeners", "grid:3x3", "--height", "0.2", *SIM, "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    pos = np.array([it["listener"]["position"] for it in manifest["items"]])
    assert len(pos) == 9
    margin = 0.05 * np.minimum([2.0, 1.5], 1.0)
    np.testing.assert_allclose(sorted(set(pos[:, 0])), np.linspace(margin[0], 2 - margin[0], 3))
    np.testing.assert_allclose(sorted(set(pos[:, 1])), np.linspace(margin[1], 1.5 - margin[1], 3))


def test_gen_dataset_deterministic_across_threads(tmp_path, scene_file, dataset_dir):
    out = tmp_path / "again"
    cli.main(["gen-dataset", "--scene", str(scene_file), "--emitter", "1.0,0.75,0.2",
              "--listeners", "random:10", "--height", "0.2", "--seed", "5", "--threads", "8",
              *SIM, "--out", str(out)])
    assert (out / "manifest.json").read_bytes() == (dataset_dir / "manifest.json").read_bytes()
    for f in sorted(dataset_dir.glob("*.wav")):
        assert sha(out / f.name) == sha(f)


def test_listener_spec_rejected(tmp_path, scene_file):
    code = cli.main(["gen-dataset", "--scene", str(scene_file), "--emitter", "1,0.75,0.2",
                     "--listeners", "spiral:4", *SIM, "--out", str(tmp_path)])
    assert code == cli.EXIT_VALIDATION


# -- simulate --------------------------------------------------------------------------


def test_simulate_threads_bit_identical(tmp_path, scene_file):
    outs = []
    for t in ("1", "8"):
        out = tmp_path / f"ir{t}.wav"
        assert cli.main(["simulate", "--scene", str(scene_file), "--emitter", "0.5,0.5,0.2",
                         "--listener", "1.5,1.0,0.2", "--seed", "3", "--threads", t, *SIM,
                         "--out", str(out)]) == 0
        outs.append(sha(out))
    assert outs[0] == outs[1]
    meta = json.loads((tmp_path / "ir1.wav.json").read_text())
    assert meta["sample_rate"] == SR and "path_statistics" in meta and "command" in meta


def test_exit_codes(tmp_path, scene_file):
    assert cli.main(["simulate", "--scene", str(tmp_path / "missing.json"), "--emitter",
                     "1,1,0.2", "--listener", "1,0.5,0.2", "--out", str(tmp_path / "x.wav")]) == 2
    assert cli.main(["simulate", "--scene", str(scene_file), "--emitter", "1,1,0.2",
                     "--listener", "9,0.5,0.2", *SIM, "--out", str(tmp_path / "x.wav")]) == 2
    assert cli.main(["simulate", "--scene", str(scene_file), "--emitter", "1,1",
                     "--listener", "1,0.5,0.2", *SIM, "--out", str(tmp_path / "x.wav")]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    ir = tmp_path / "a.wav"
    write_ir(ir, SampledIR(np.array([1.0, 0.5]), SR))

    def boom(*a, **kw):
        raise cli.NumericalFailure("nan")

    monkeypatch.setattr(cli, "convolve_render", boom)
    assert cli.main(["convolve", "--ir", str(ir), "--audio", str(ir),
                     "--out", str(tmp_path / "o.wav")]) == cli.EXIT_NUMERICAL


# -- fit / render / eval ---------------------------------------------------------------


FIT = ["--grid", "12", "--epochs", "1", "--n-theta", "16", "--n-r", "12", "--eval-every", "1",
       "--seed", "2"]


@pytest.fixture(scope="module")
def fitted(tmp_path_factory, dataset_dir):
    d = tmp_path_factory.mktemp("fit")
    ckpt = d / "f.bin"
    assert cli.main(["fit", "--dataset", str(dataset_dir), *FIT, "--log", str(d / "log.jsonl"),
                     "--out", str(ckpt)]) == 0
    return ckpt


def test_fit_outputs(fitted):
    log = [json.loads(s) for s in (fitted.parent / "log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and "test_metrics" in log[0]
    fld = VoxelGridField.load(fitted)
    assert fld.resolution == (12, 12, 1)
    meta = json.loads((fitted.parent / "f.bin.json").read_text())
    assert meta["render"]["N_theta"] == 16


def test_fit_threads_bit_identical(tmp_path, dataset_dir, fitted):
    ckpt = tmp_path / "g.bin"
    assert cli.main(["fit", "--dataset", str(dataset_dir), *FIT, "--threads", "8",
                     "--out", str(ckpt)]) == 0
    assert sha(ckpt) == sha(fitted)


def test_render_and_eval(tmp_path, fitted, dataset_dir):
    outs = []
    for t in ("1", "8"):
        out = tmp_path / f"r{t}.wav"
        assert cli.main(["render", "--field", str(fitted), "--listener", "0.5,0.5,0.2",
                         "--threads", t, "--out", str(out)]) == 0
        outs.append(sha(out))
    assert outs[0] == outs[1]
    ir = read_ir(tmp_path / "r1.wav")
    assert len(ir) == 640
    stereo = tmp_path / "b.wav"
    assert cli.main(["render", "--field", str(fitted), "--listener", "0.5,0.5,0.2,1,0,0",
                     "--binaural", "--out", str(stereo)]) == 0
    assert read_ir(stereo).n_channels == 2
    # out-of-bounds listener is a validation error
    assert cli.main(["render", "--field", str(fitted), "--listener", "0.5,0.5,3.0",
                     "--out", str(tmp_path / "z.wav")]) == cli.EXIT_VALIDATION
    ref = sorted(dataset_dir.glob("*.wav"))[0]
    rep = tmp_path / "rep.json"
    assert cli.main(["eval", "--pred", str(ref), "--ref", str(ref), "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert report["aggregate"]["phase_error"] == 0.0
    csv = tmp_path / "cmp.csv"
    assert cli.main(["compare", "--pred", str(tmp_path / "r1.wav"), "--ref", str(ref),
                     "--out", str(csv)]) == 0
    rows = csv.read_text().splitlines()
    assert rows[0] == "sample,time_s,pred,ref" and len(rows) == 641


def test_eval_directory_mismatch(tmp_path, dataset_dir):
    (tmp_path / "pred").mkdir()
    code = cli.main(["eval", "--pred", str(tmp_path / "pred"), "--ref", str(dataset_dir),
                     "--out", str(tmp_path / "r.json")])
    assert code == cli.EXIT_VALIDATION


# -- loudness map ----------------------------------------------------------------------


def test_zero_field_map_is_sentinel(tmp_path):
    fld = VoxelGridField([[0, 0, 0.2], [1, 1, 0.2]], (4, 4, 1), 256, SR)
    ckpt = fld.save(tmp_path / "z.bin")
    assert cli.main(["loudness-map", "--field", str(ckpt), "--spacing", "0.25", "--n-theta", "8",
                     "--out", str(tmp_path / "m")]) == 0
    vals = np.loadtxt(tmp_path / "m.csv", delimiter=",")
    assert vals.shape == (4, 4)
    assert np.all(vals == cli.SENTINEL_DB)
    assert np.all(cli.read_pgm(tmp_path / "m.pgm") == 0)


def test_analytic_map_decreases_with_distance():
    src = AnalyticPointSourceField([0.05, 0.05, 0.0], n_fft=512)
    cfg = RenderConfig(N_theta=32, N_phi=16, N_r=48, u_n=0.05, u_f=2.0, n_fft=512, ir_len=256)
    vals, origin, spacing = cli.loudness_map(src, cfg, 0.0, 0.1, bounds=[0.0, 0.0, 1.6, 0.1])
    row = vals[0]
    assert np.all(row != cli.SENTINEL_DB)
    # from 0.3 m outward, where the arrival clears the start of the IR window
    assert np.all(np.diff(row[3:]) < 1.0)      # monotone within 1 dB noise
    assert row[3] - row[-1] > 10.0


def test_csv_and_pgm_agree(tmp_path):
    vals = np.array([[-10.0, -20.0, cli.SENTINEL_DB], [-15.0, -30.0, -25.0]])
    img, lo, hi = cli.map_to_pgm_bytes(vals)
    cli.write_pgm(tmp_path / "m.pgm", img)
    back = cli.read_pgm(tmp_path / "m.pgm")
    assert (lo, hi) == (-30.0, -10.0)
    live = vals != cli.SENTINEL_DB
    np.testing.assert_allclose(lo + back[live] / 255 * (hi - lo), vals[live], atol=(hi - lo) / 255)
    assert back[0, 2] == 0


# -- convolve --------------------------------------------------------------------------


def test_convolve_impulse_and_delay(rng):
    audio = SampledIR(rng.normal(size=200), SR)
    out, gain = cli.convolve_render(SampledIR(np.array([1.0]), SR), audio)
    np.testing.assert_allclose(out.samples / gain, audio.samples, atol=1e-12)
    delayed = np.zeros(8)
    delayed[5] = 1.0
    out, gain = cli.convolve_render(SampledIR(delayed, SR), audio)
    np.testing.assert_allclose(out.samples[5:205] / gain, audio.samples, atol=1e-12)
    assert np.max(np.abs(out.samples)) == pytest.approx(1.0)


def test_convolve_matches_naive_oracle(rng):
    h, x = rng.normal(size=(2, 17)), rng.normal(size=40)
    out, gain = cli.convolve_render(SampledIR(h, SR), SampledIR(x, SR))
    for c in range(2):
        naive = np.array([sum(x[k] * h[c, n - k] for k in range(40) if 0 <= n - k < 17)
                          for n in range(56)])
        np.testing.assert_allclose(out.samples[c] / gain, naive, atol=1e-6)


def test_convolve_rate_mismatch(tmp_path):
    with pytest.raises(ValueError):
        cli.convolve_render(SampledIR(np.ones(3), SR), SampledIR(np.ones(3), 8000.0))
    a, b = tmp_path / "a.wav", tmp_path / "b.wav"
    write_ir(a, SampledIR(np.ones(3), SR))
    write_ir(b, SampledIR(np.ones(3), 8000.0))
    assert cli.main(["convolve", "--ir", str(a), "--audio", str(b),
                     "--out", str(tmp_path / "o.wav")]) == cli.EXIT_VALIDATION
