"""Hardware-emulation signal chain: chirp echoes to transient histograms.

Processing order for a raw capture: background subtraction, group-delay
correction (a linear phase in the frequency domain), conversion to the
analytic domain via the Hilbert transform, matched filtering against the
transmitted chirp, magnitude, then accumulation of lag magnitudes into
range bins with ``range = c * lag / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import next_fast_len
from scipy.io import wavfile
from scipy.signal import hilbert

from .render import SonarConfig, TransientHistogram

SPEED_OF_SOUND_AIR = 343.0
SPEED_OF_SOUND_WATER = 1500.0


@dataclass
class Waveform:
    """Real sampled signal with its sampling rate."""

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1)
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


def synth_chirp(f0: float, f1: float, duration: float, fs: float) -> Waveform:
    """Linear frequency-modulated chirp sweeping f0 -> f1 over ``duration``.

    ``s(t) = sin(2 pi (f0 t + (f1 - f0) t^2 / (2 duration)))`` sampled at
    ``fs``; both band edges must respect Nyquist.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not (0 < f0 < fs / 2 and 0 < f1 < fs / 2):
        raise ValueError("chirp band must lie strictly inside (0, fs/2)")
    n = round(duration * fs)
    t = np.arange(n) / fs
    phase = 2.0 * np.pi * (f0 * t + (f1 - f0) * t * t / (2.0 * duration))
    return Waveform(np.sin(phase), fs)


def hilbert_analytic(x: Waveform) -> np.ndarray:
    """FFT-based analytic signal: negative frequencies zeroed, positive
    ones doubled.  The real part equals the input."""
    if len(x) < 2:
        raise ValueError("need at least two samples")
    return hilbert(x.samples)


def background_subtract(rx: Waveform, bg: Waveform) -> Waveform:
    """Remove the static-scene response measured with no target."""
    if len(rx) != len(bg):
        raise ValueError("length mismatch between capture and background")
    if rx.fs != bg.fs:
        raise ValueError("sampling rate mismatch")
    return Waveform(rx.samples - bg.samples, rx.fs)


def matched_filter(rx: Waveform, template: Waveform) -> np.ndarray:
    """Magnitude of the analytic cross-correlation of rx with the template.

    Output index k is the correlation at lag k samples (k >= 0), so a
    received copy of the template delayed by k samples peaks at index k;
    lag 0 is aligned to the transmit time.  Output length equals len(rx).
    """
    if rx.fs != template.fs:
        raise ValueError("sampling rate mismatch")
    a_rx = hilbert_analytic(rx)
    a_t = hilbert_analytic(template)
    n = len(a_rx) + len(a_t) - 1
    nfft = next_fast_len(n)
    spec = np.fft.fft(a_rx, nfft) * np.conj(np.fft.fft(a_t, nfft))
    corr = np.fft.ifft(spec)
    return np.abs(corr[: len(rx)])


def _shift_phase(samples: np.ndarray, fs: float, advance: float) -> np.ndarray:
    """Advance a signal by ``advance`` seconds via a linear spectral phase."""
    n = len(samples)
    spec = np.fft.rfft(samples)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec *= np.exp(2j * np.pi * freqs * advance)
    return np.fft.irfft(spec, n)


def echo_to_histogram(
    rx: Waveform,
    bg: Waveform | None,
    template: Waveform,
    c_sound: float = SPEED_OF_SOUND_AIR,
    group_delay: float = 0.0,
    cfg: SonarConfig | None = None,
) -> TransientHistogram:
    """Full capture-to-transient chain.

    Lag ``k`` maps to range ``c * k / (2 fs)``; matched-filter magnitudes
    are accumulated into the configured range bins.
    """
    if cfg is None:
        raise ValueError("a SonarConfig with range binning is required")
    x = background_subtract(rx, bg) if bg is not None else rx
    if group_delay != 0.0:
        x = Waveform(_shift_phase(x.samples, x.fs, group_delay), x.fs)
    mags = matched_filter(x, template)
    lags = np.arange(len(mags)) / rx.fs
    ranges = c_sound * lags / 2.0
    idx = np.floor((ranges - cfg.range_min) / cfg.bin_width).astype(np.int64)
    ok = (idx >= 0) & (idx < cfg.bins)
    values = np.bincount(idx[ok], weights=mags[ok], minlength=cfg.bins)
    return TransientHistogram(values, cfg.range_min, cfg.range_max)


def load_wav(path) -> Waveform:
    """Read a PCM or float WAV file as a mono waveform in [-1, 1]."""
    fs, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(float)
    return Waveform(data, float(fs))


def save_wav(path, wave: Waveform) -> None:
    wavfile.write(path, int(wave.fs), wave.samples.astype(np.float32))
