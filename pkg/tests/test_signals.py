import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irfield.signals import (SampledIR, Spectrum, StftConfig, apply_delay, convolve,
                             forward_transform, frame_signal, hann, hilbert_envelope, inverse_transform,
                             next_fft_size, stft_frames, stft_magnitudes, windowed_sinc_kernel)

SR = 16000.0
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def naive_dft(x, n_fft):
    x = np.concatenate([x, np.zeros(n_fft - len(x))])
    n = np.arange(n_fft)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * n / n_fft))
                     for k in range(n_fft // 2 + 1)])


# -- containers ------------------------------------------------------------------------


def test_sampled_ir_rejects_bad_input():
    with pytest.raises(ValueError):
        SampledIR(np.array([]), SR)
    with pytest.raises(ValueError):
        SampledIR(np.array([1.0, np.nan]), SR)
    with pytest.raises(ValueError):
        SampledIR(np.ones(4), 0.0)


def test_spectrum_bin_count_checked():
    with pytest.raises(ValueError):
        Spectrum(np.ones(4), 8, SR)
    with pytest.raises(ValueError):
        Spectrum(np.ones(5), 9, SR)
    assert Spectrum(np.ones(5), 8, SR).is_real_signal()


# -- transforms ------------------------------------------------------------------------


def test_impulse_has_flat_spectrum():
    spec = forward_transform(SampledIR(np.array([1.0, 0, 0, 0]), SR), 8)
    np.testing.assert_allclose(spec.bins, np.ones(5))


def test_constant_is_dc_only():
    spec = forward_transform(SampledIR(np.ones(4), SR), 4)
    np.testing.assert_allclose(spec.bins, [4, 0, 0], atol=1e-15)


def test_forward_matches_naive_dft(rng):
    x = rng.normal(size=37)
    spec = forward_transform(SampledIR(x, SR), 64)
    np.testing.assert_allclose(spec.bins, naive_dft(x, 64), atol=1e-9)


def test_forward_rejects_truncation():
    with pytest.raises(ValueError):
        forward_transform(SampledIR(np.ones(10), SR), 8)


def test_inverse_of_flat_spectrum_is_impulse():
    ir = inverse_transform(Spectrum(np.ones(5), 8, SR), 4)
    np.testing.assert_allclose(ir.samples, [1, 0, 0, 0], atol=1e-15)


def test_inverse_single_bin_closed_form():
    bins = np.zeros(5, complex)
    bins[1] = 1.0
    ir = inverse_transform(Spectrum(bins, 8, SR), 8)
    n = np.arange(8)
    np.testing.assert_allclose(ir.samples, 2 / 8 * np.cos(2 * np.pi * n / 8), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 200), elements=finite), st.integers(0, 3))
def test_round_trip_is_identity(x, extra_pow):
    n_fft = next_fft_size(len(x)) << extra_pow
    n_fft = max(n_fft, 2)
    back = inverse_transform(forward_transform(SampledIR(x, SR), n_fft), len(x))
    np.testing.assert_allclose(back.samples, x, atol=1e-9)


# -- delays ----------------------------------------------------------------------------


def test_zero_delay_is_identity(rng):
    spec = forward_transform(SampledIR(rng.normal(size=16), SR), 64)
    assert apply_delay(spec, 0.0) is spec


@pytest.mark.parametrize("m", [1, 5, 17])
def test_integer_delay_shifts_samples(rng, m):
    x = rng.normal(size=32)
    out = inverse_transform(apply_delay(forward_transform(SampledIR(x, SR), 128), m / SR), 128)
    np.testing.assert_allclose(out.samples[m:m + 32], x, atol=1e-9)
    np.testing.assert_allclose(out.samples[:m], 0, atol=1e-9)


def test_fractional_delay_of_impulse_matches_periodic_sinc():
    n_fft = 64
    x = np.zeros(n_fft)
    x[0] = 1.0
    out = inverse_transform(apply_delay(forward_transform(SampledIR(x, SR), n_fft), 1.5 / SR), n_fft)
    # band-limited periodic interpolation of a delta, evaluated by direct summation
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)
    c = np.where((k == 0) | (k == n_fft // 2), 1.0, 2.0)
    oracle = np.array([np.sum(c * np.cos(2 * np.pi * k * (ni - 1.5) / n_fft)) / n_fft for ni in n])
    np.testing.assert_allclose(out.samples, oracle, atol=1e-6)


def test_delay_outside_window_rejected():
    spec = Spectrum(np.ones(5), 8, SR)
    with pytest.raises(ValueError):
        apply_delay(spec, 8 / SR)
    with pytest.raises(ValueError):
        apply_delay(spec, -1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 20), st.floats(0, 20))
def test_delay_composition_and_unimodularity(a, b):
    x = np.random.default_rng(0).normal(size=16)
    spec = forward_transform(SampledIR(x, SR), 128)
    two = apply_delay(apply_delay(spec, a / SR), b / SR)
    one = apply_delay(spec, (a + b) / SR)
    np.testing.assert_allclose(two.bins, one.bins, atol=1e-12)
    np.testing.assert_allclose(np.abs(one.bins), np.abs(spec.bins), atol=1e-12)


def test_delay_is_linear(rng):
    s1 = forward_transform(SampledIR(rng.normal(size=16), SR), 64)
    s2 = forward_transform(SampledIR(rng.normal(size=16), SR), 64)
    d = 3.3 / SR
    lhs = apply_delay(s1.scale(2.0) + s2.scale(-0.5), d)
    rhs = apply_delay(s1, d).scale(2.0) + apply_delay(s2, d).scale(-0.5)
    np.testing.assert_allclose(lhs.bins, rhs.bins, atol=1e-12)


# -- envelope / STFT -------------------------------------------------------------------


def test_envelope_of_cosine():
    n = np.arange(512)
    x = 0.7 * np.cos(2 * np.pi * 16 * n / 512)
    env = hilbert_envelope(SampledIR(x, SR))
    np.testing.assert_allclose(env[32:-32], 0.7, rtol=0.02)
    np.testing.assert_array_equal(hilbert_envelope(SampledIR(-x, SR)), env)
    assert np.all(hilbert_envelope(SampledIR(np.zeros(64), SR)) == 0)


def test_stft_zero_and_impulse():
    cfg = StftConfig(((64, 16, 64),))
    assert np.all(stft_magnitudes(SampledIR(np.zeros(256), SR), cfg)[0] == 0)
    x = np.zeros(256)
    x[32 + 10] = 1.0  # frame 2 starts at 32; offset 10 in that frame
    mags = stft_magnitudes(SampledIR(x, SR), cfg)[0]
    np.testing.assert_allclose(mags[2], hann(64)[10], atol=1e-12)


def test_stft_parseval_rectangular_frame(rng):
    x = rng.normal(size=128)
    frame = frame_signal(x, 64, 64)[1]
    half = np.fft.rfft(frame)
    energy = abs(half[0]) ** 2 + 2 * np.sum(np.abs(half[1:-1]) ** 2) + abs(half[-1]) ** 2
    assert np.isclose(energy, 64 * np.sum(frame ** 2), rtol=1e-12)


def test_stft_rejects_short_signal():
    with pytest.raises(ValueError):
        stft_magnitudes(SampledIR(np.zeros(100), SR))


def test_stft_scaled_layout():
    cfg = StftConfig.scaled(64)
    assert cfg.resolutions == ((64, 16, 64), (128, 32, 128), (256, 64, 256))


# -- fractional-delay kernel -----------------------------------------------------------


def test_kernel_integer_delay_is_delta():
    k = windowed_sinc_kernel(0.0, 81)
    expect = np.zeros(81)
    expect[40] = 1.0
    np.testing.assert_allclose(k, expect, atol=1e-15)


def test_kernel_half_sample_is_symmetric():
    k = windowed_sinc_kernel(0.5, 81)
    # symmetric about 40.5: k[40 - i] == k[41 + i]
    np.testing.assert_allclose(k[1:41][::-1], k[41:], atol=1e-15)


@pytest.mark.parametrize("frac", [0.1, 0.25, 0.5, 0.8])
def test_kernel_phase_delay_on_tone(frac):
    f = 0.1 * 0.5  # cycles/sample at 0.1 x Nyquist
    n = np.arange(2000)
    x = np.cos(2 * np.pi * f * n)
    y = np.convolve(x, windowed_sinc_kernel(frac, 81))[40:40 + 2000]
    seg = slice(200, 1800)
    # least-squares phase of each signal
    basis = np.stack([np.cos(2 * np.pi * f * n[seg]), np.sin(2 * np.pi * f * n[seg])], axis=1)
    cx = np.linalg.lstsq(basis, x[seg], rcond=None)[0]
    cy = np.linalg.lstsq(basis, y[seg], rcond=None)[0]
    dphi = np.arctan2(cy[1], cy[0]) - np.arctan2(cx[1], cx[0])
    delay = dphi / (2 * np.pi * f)
    assert abs(delay - frac) < 0.01


def test_kernel_argument_checks():
    with pytest.raises(ValueError):
        windowed_sinc_kernel(1.0)
    with pytest.raises(ValueError):
        windowed_sinc_kernel(0.2, 80)


def test_convolve_matches_numpy(rng):
    a, b = rng.normal(size=50), rng.normal(size=13)
    np.testing.assert_allclose(convolve(a, b), np.convolve(a, b), atol=1e-12)
