"""Turn raw recordings into normalized BCG/ECG segment pairs.

Pipeline per recording: downsample every channel and the ECG to the target
rate, band-pass the BCG channels (zero-phase), cut sliding windows, pick the
strongest raw BCG channel per window, and min-max normalize each window.
The ECG is downsampled and normalized but not band-passed, so R-peak shape
is left intact.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .recording_io import SEGMENT_LEN, Recording, SegmentPair

ANTIALIAS_FRACTION = 0.45
ANTIALIAS_ORDER = 8


class ConfigError(ValueError):
    """A configuration field holds an invalid value."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class PreprocessConfig:
    target_rate_hz: float = 100.0
    band_low_hz: float = 0.7
    band_high_hz: float = 10.0
    filter_order: int = 6
    window_s: float = 5.0
    step_s: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("target_rate_hz", "band_low_hz", "band_high_hz", "window_s", "step_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.filter_order < 1:
            raise ConfigError("filter_order", "must be a positive integer")
        nyquist = self.target_rate_hz / 2
        if self.band_high_hz >= nyquist:
            raise ConfigError(
                "band_high_hz", f"{self.band_high_hz} Hz must be below Nyquist ({nyquist} Hz)"
            )
        if self.band_low_hz >= self.band_high_hz:
            raise ConfigError("band_low_hz", "must be below band_high_hz")
        for name in ("window_s", "step_s"):
            n = getattr(self, name) * self.target_rate_hz
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(name, f"must span an integer number of samples (got {n})")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.target_rate_hz))

    @property
    def step_samples(self) -> int:
        return int(round(self.step_s * self.target_rate_hz))

    def to_dict(self) -> dict:
        return asdict(self)


def n_windows(n_samples: int, config: PreprocessConfig) -> int:
    """Number of sliding windows that fit in `n_samples` target-rate samples."""
    w, s = config.window_samples, config.step_samples
    if n_samples < w:
        return 0
    return (n_samples - w) // s + 1


def _channel_strength(channels: np.ndarray, start: int, stop: int, demean: bool) -> np.ndarray:
    win = channels[:, start:stop]
    if demean:
        win = win - win.mean(axis=1, keepdims=True)
    return np.abs(win).mean(axis=1)


def select_channel(recording, window, demean: bool = True) -> int:
    """Index of the channel with the largest mean absolute amplitude in `window`.

    `recording` is a Recording or a [C, T] array; `window` a ``slice`` or a
    ``(start, stop)`` pair of raw sample indices. Each channel's window mean
    is removed first (transducer outputs sit on a pressure offset) unless
    ``demean=False``. Ties go to the lowest index.
    """
    channels = recording.bcg_channels if isinstance(recording, Recording) else np.atleast_2d(recording)
    if isinstance(window, slice):
        start, stop, _ = window.indices(channels.shape[1])
    else:
        start, stop = window
    if channels.shape[0] < 1:
        raise ValueError("no channels to select from")
    if not 0 <= start < stop <= channels.shape[1]:
        raise ValueError(f"empty or out-of-bounds window [{start}, {stop})")
    # argmax returns the first maximum, which is the tie rule we want
    return int(np.argmax(_channel_strength(channels, start, stop, demean)))


def _ratio(from_hz: float, to_hz: float) -> Fraction:
    return Fraction(from_hz / to_hz).limit_denominator(1000)


def resample(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Downsample `x` from `from_hz` to `to_hz`.

    Integer ratios use a zero-phase 8th-order Butterworth low-pass at
    0.45 x `to_hz` followed by decimation; other rational ratios go through
    a polyphase resampler. Output length is ``floor(len(x) * to_hz / from_hz)``.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    if to_hz > from_hz:
        raise ValueError(f"upsampling ({from_hz} -> {to_hz} Hz) is not supported")
    x = np.asarray(x, dtype=np.float64)
    n_out = int(math.floor(x.size * to_hz / from_hz + 1e-9))
    if from_hz == to_hz:
        return x.copy()
    ratio = _ratio(from_hz, to_hz)
    if ratio.denominator == 1:
        q = ratio.numerator
        sos = sps.butter(ANTIALIAS_ORDER, ANTIALIAS_FRACTION * to_hz, btype="low",
                         fs=from_hz, output="sos")
        y = sps.sosfiltfilt(sos, x)[::q]
    else:
        y = sps.resample_poly(x, ratio.denominator, ratio.numerator)
    return y[:n_out]


def bandpass_sos(config: PreprocessConfig) -> np.ndarray:
    """Second-order sections of the Butterworth band-pass for `config`.

    ``filter_order`` is the low-pass prototype order (the band-pass has twice
    as many poles), matching scipy's ``butter`` convention.
    """
    sos = sps.butter(
        config.filter_order,
        [config.band_low_hz, config.band_high_hz],
        btype="bandpass",
        fs=config.target_rate_hz,
        output="sos",
    )
    _, poles, _ = sps.sos2zpk(sos)
    if not np.all(np.abs(poles) < 1.0):
        raise ConfigError("band_high_hz", "band-pass design is unstable for these cutoffs")
    return sos


def bandpass(x: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Zero-phase (forward then reverse) Butterworth band-pass at the target rate."""
    x = np.asarray(x, dtype=np.float64)
    if x.size <= 3 * config.filter_order:
        raise ValueError(
            f"signal of {x.size} samples is too short for order-{config.filter_order} filtering"
        )
    sos = bandpass_sos(config)
    if not np.any(x):
        return np.zeros_like(x)
    padlen = min(3 * (2 * len(sos) + 1), x.size - 1)
    return sps.sosfiltfilt(sos, x, padlen=padlen)


def normalize_unit(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; a flat input maps to all 0.5 and sets the flag."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty vector")
    lo, hi = x.min(), x.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full_like(x, 0.5), True
    out = (x - lo) / (hi - lo)
    # guard against rounding just outside the unit interval
    np.clip(out, 0.0, 1.0, out=out)
    return out, False


def segment(
    bcg: np.ndarray,
    ecg: np.ndarray,
    config: PreprocessConfig,
    subject_id: str = "",
    channels=None,
) -> list[SegmentPair]:
    """Cut windows every ``step`` samples and normalize each signal per window.

    `bcg` is either one filtered channel [T] or all filtered channels [C, T];
    in the latter case `channels[k]` names the channel used for window k.
    Flat windows come back as all-0.5 signals (``SegmentPair.degenerate``).
    """
    bcg = np.asarray(bcg, dtype=np.float64)
    ecg = np.asarray(ecg, dtype=np.float64)
    if bcg.shape[-1] != ecg.size:
        raise ValueError("bcg and ecg must have the same length")
    if config.window_samples != SEGMENT_LEN:
        raise ValueError(f"window must span {SEGMENT_LEN} samples, got {config.window_samples}")
    k_total = n_windows(ecg.size, config)
    if k_total == 0:
        raise ValueError(
            f"recording of {ecg.size} samples is shorter than one {config.window_samples}-sample window"
        )
    if bcg.ndim == 2 and (channels is None or len(channels) < k_total):
        raise ValueError("per-window channel indices required for multi-channel input")
    w, s = config.window_samples, config.step_samples
    out = []
    for k in range(k_total):
        a = k * s
        if bcg.ndim == 2:
            ch = int(channels[k])
            src = bcg[ch, a : a + w]
        else:
            ch = None
            src = bcg[a : a + w]
        b_norm, _ = normalize_unit(src)
        e_norm, _ = normalize_unit(ecg[a : a + w])
        out.append(
            SegmentPair(subject_id, k, a / config.target_rate_hz, b_norm, e_norm, channel=ch)
        )
    return out


def preprocess_recording(rec: Recording, config: PreprocessConfig = PreprocessConfig()) -> list[SegmentPair]:
    """Full raw-recording to segment-pair conversion."""
    fs = rec.sample_rate_hz
    ecg = resample(rec.ecg, fs, config.target_rate_hz)
    filtered = np.vstack(
        [bandpass(resample(ch, fs, config.target_rate_hz), config) for ch in rec.bcg_channels]
    )
    k_total = n_windows(ecg.size, config)
    raw_w = int(round(config.window_s * fs))
    channels = []
    for k in range(k_total):
        start = int(round(k * config.step_s * fs))
        stop = min(start + raw_w, rec.n_samples)
        channels.append(select_channel(rec.bcg_channels, (start, stop)))
    return segment(filtered, ecg, config, subject_id=rec.subject_id, channels=channels)
