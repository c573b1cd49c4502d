"""Time/frequency signal core.

Real signals are stored as :class:`SampledIR` (samples plus rate) and their
transforms as :class:`Spectrum`, a half spectrum of ``n_fft // 2 + 1`` bins.
Delays are applied as bin-wise phase rotations, so a transform must be padded
well past the signal length or the delayed tail wraps around.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert


@dataclass(frozen=True)
class SampledIR:
    """Discrete impulse response.

    ``samples`` is 1-D for mono or ``(n_channels, n_samples)`` for multichannel.
    """

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] < 1:
            raise ValueError("samples must be 1-D or (channels, n) with n >= 1")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def n_channels(self):
        return 1 if self.samples.ndim == 1 else self.samples.shape[0]

    @property
    def period(self):
        return 1.0 / self.sample_rate

    @property
    def duration(self):
        return len(self) / self.sample_rate

    def channel(self, i):
        if self.samples.ndim == 1:
            if i != 0:
                raise IndexError(i)
            return self
        return SampledIR(self.samples[i], self.sample_rate)


@dataclass(frozen=True)
class Spectrum:
    """Half spectrum of a real signal; bin ``k`` sits at ``k * sample_rate / n_fft``."""

    bins: np.ndarray
    n_fft: int
    sample_rate: float

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError("n_fft must be even and >= 2")
        if b.shape[-1] != self.n_fft // 2 + 1:
            raise ValueError(
                f"expected {self.n_fft // 2 + 1} bins for n_fft={self.n_fft}, got {b.shape[-1]}"
            )
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "bins", b)

    @property
    def frequencies(self):
        return rfft_frequencies(self.n_fft, self.sample_rate)

    @property
    def window_duration(self):
        return self.n_fft / self.sample_rate

    def is_real_signal(self, atol=1e-12):
        """True when DC and Nyquist bins are real, as for any real signal."""
        return bool(
            np.all(np.abs(self.bins[..., 0].imag) <= atol)
            and np.all(np.abs(self.bins[..., -1].imag) <= atol)
        )

    def __add__(self, other):
        _check_compatible(self, other)
        return Spectrum(self.bins + other.bins, self.n_fft, self.sample_rate)

    def __sub__(self, other):
        _check_compatible(self, other)
        return Spectrum(self.bins - other.bins, self.n_fft, self.sample_rate)

    def scale(self, c):
        return Spectrum(self.bins * c, self.n_fft, self.sample_rate)


def _check_compatible(a, b):
    if a.n_fft != b.n_fft or a.sample_rate != b.sample_rate:
        raise ValueError("spectra differ in n_fft or sample_rate")


@dataclass(frozen=True)
class StftConfig:
    """Multi-resolution STFT layout: tuples of ``(fft_size, hop_size, window_size)``."""

    resolutions: tuple = ((512, 128, 512), (1024, 256, 1024), (2048, 512, 2048))

    def __post_init__(self):
        res = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        if not res:
            raise ValueError("at least one resolution required")
        for fft_size, hop, win in res:
            if not (0 < hop <= win <= fft_size):
                raise ValueError(f"need 0 < hop <= window <= fft_size, got {(fft_size, hop, win)}")
        object.__setattr__(self, "resolutions", res)

    @property
    def max_window(self):
        return max(r[2] for r in self.resolutions)

    @classmethod
    def scaled(cls, base_window):
        """Three resolutions at ``base_window`` x (1, 2, 4) with 75% overlap."""
        return cls(tuple((w, w // 4, w) for w in (base_window, 2 * base_window, 4 * base_window)))


def rfft_frequencies(n_fft, sample_rate):
    return np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)


def next_fft_size(n):
    """Smallest power of two >= ``n`` (and >= 2)."""
    return max(2, 1 << int(np.ceil(np.log2(max(n, 1)))))


def forward_transform(ir, n_fft):
    if n_fft < len(ir):
        raise ValueError(f"n_fft={n_fft} would truncate a {len(ir)}-sample signal")
    if n_fft % 2:
        raise ValueError("n_fft must be even")
    return Spectrum(np.fft.rfft(ir.samples, n=n_fft), n_fft, ir.sample_rate)


def inverse_transform(spec, out_len):
    if out_len > spec.n_fft:
        raise ValueError(f"out_len={out_len} exceeds n_fft={spec.n_fft}")
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    x = np.fft.irfft(spec.bins, n=spec.n_fft)
    return SampledIR(x[..., :out_len], spec.sample_rate)


def delay_phasor(n_fft, sample_rate, delay):
    """Bin-wise factor ``exp(-j 2 pi f_k delay)``."""
    f = rfft_frequencies(n_fft, sample_rate)
    return np.exp(-2j * np.pi * f * delay)


def apply_delay(spec, delay):
    if delay < 0:
        raise ValueError("delay must be non-negative")
    if delay >= spec.window_duration:
        raise ValueError(
            f"delay {delay:.6g}s does not fit in the {spec.window_duration:.6g}s transform window"
        )
    if delay == 0:
        return spec
    return Spectrum(spec.bins * delay_phasor(spec.n_fft, spec.sample_rate, delay),
                    spec.n_fft, spec.sample_rate)


def hilbert_envelope(ir):
    if len(ir) < 2:
        raise ValueError("envelope needs at least 2 samples")
    return np.abs(hilbert(ir.samples, axis=-1))


def hann(n):
    """Periodic Hann window (the usual STFT choice)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x, hop, window):
    """Strided view of frames; shape ``(n_frames, window)``."""
    n_frames = (len(x) - window) // hop + 1
    return np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, window), strides=(x.strides[0] * hop, x.strides[0]), writeable=False
    )


def stft_frames(x, fft_size, hop, window):
    """Complex STFT of a 1-D array, Hann window, no centring; shape ``(frames, bins)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if len(x) < window:
        raise ValueError(f"signal of {len(x)} samples is shorter than window {window}")
    frames = frame_signal(x, hop, window) * hann(window)
    return np.fft.rfft(frames, n=fft_size, axis=-1)


def stft_magnitudes(ir, cfg=StftConfig()):
    x = ir.samples
    if x.ndim != 1:
        raise ValueError("stft_magnitudes expects a mono signal")
    if len(x) < cfg.max_window:
        raise ValueError(f"signal of {len(x)} samples is shorter than window {cfg.max_window}")
    return [np.abs(stft_frames(x, *res)) for res in cfg.resolutions]


def windowed_sinc_kernel(fractional_delay, taps=81):
    """Hann-windowed sinc peaking at ``(taps - 1) / 2 + fractional_delay``.

    The window is centred on the peak, so the kernel is symmetric about it and
    has exactly linear phase.
    """
    if taps % 2 == 0 or taps < 9:
        raise ValueError("taps must be odd and >= 9")
    if not 0 <= fractional_delay < 1:
        raise ValueError("fractional_delay must lie in [0, 1)")
    t = np.arange(taps) - (taps - 1) / 2 - fractional_delay
    window = 0.5 + 0.5 * np.cos(2 * np.pi * t / (taps + 1))
    return np.sinc(t) * window


def convolve(x, h):
    """Linear convolution via zero-padded FFT."""
    n = len(x) + len(h) - 1
    nf = next_fft_size(n)
    return np.fft.irfft(np.fft.rfft(x, nf) * np.fft.rfft(h, nf), nf)[:n]
