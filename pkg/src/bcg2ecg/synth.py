"""Synthetic paired ECG/BCG recordings with known beat times.

Waveforms are idealized templates rather than physiological simulations:
the ECG is a narrow R pulse with small P and T bumps, the BCG an H-I-J-K-L
complex delayed by the R-J interval. ``j_peak_dominance`` blends that sharp
complex with a broad ringing component whose timing jitters from beat to
beat; at low dominance the ringing carries most of the energy while only the
weak sharp complex stays locked to the R-peak.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .recording_io import Recording

AR_COEF = 0.5
NOISE_RESOLUTION_HZ = 100.0

# (offset from J in s, amplitude, width sigma in s); J amplitude is set by dominance
_BCG_COMPLEX = (
    (-0.150, 0.20, 0.025),  # H
    (-0.075, -0.55, 0.022),  # I
    (0.000, 1.00, 0.022),  # J
    (0.075, -0.55, 0.022),  # K
    (0.150, 0.20, 0.025),  # L
)
_ECG_WAVES = (
    (-0.160, 0.10, 0.025),  # P
    (0.000, 1.00, 0.010),  # R
)
_T_WAVE = (0.250, 0.20, 0.040)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 1
    duration_s: float = 600.0
    base_hr_bpm: float = 68.0
    hrv_rmssd_target_ms: float = 30.0
    rj_interval_ms: float = 200.0
    j_peak_dominance: float = 0.9
    noise_snr_db: float = 15.0
    respiration_hz: float = 0.25
    seed: int = 0
    sample_rate_hz: float = 2000.0
    hr_spread_bpm: float = 12.0
    hr_drift_bpm: float = 4.0
    respiration_amplitude: float = 3.0
    beat_amplitude_jitter: float = 0.1
    ring_jitter_ms: float = 20.0
    morphology_variation: float = 0.0
    n_channels: int = 4
    subject_prefix: str = "s"

    def __post_init__(self):
        if not 30 < self.base_hr_bpm < 200:
            raise ValueError("base_hr_bpm must lie in (30, 200)")
        if not 50 < self.rj_interval_ms < 400:
            raise ValueError("rj_interval_ms must lie in (50, 400)")
        if not 0 <= self.j_peak_dominance <= 1:
            raise ValueError("j_peak_dominance must lie in [0, 1]")
        if self.n_subjects < 1 or self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("n_subjects, duration_s and sample_rate_hz must be positive")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.hrv_rmssd_target_ms < 0:
            raise ValueError("hrv_rmssd_target_ms must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "lab": SynthConfig(
        base_hr_bpm=66.0, hrv_rmssd_target_ms=30.0, j_peak_dominance=0.9,
        noise_snr_db=15.0, beat_amplitude_jitter=0.1, subject_prefix="lab-",
    ),
    "elder": SynthConfig(
        base_hr_bpm=70.0, hrv_rmssd_target_ms=45.0, j_peak_dominance=0.3,
        noise_snr_db=5.0, beat_amplitude_jitter=0.3, subject_prefix="elder-",
    ),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def _rng(cfg: SynthConfig, subject: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, subject, stream]))


@dataclass(frozen=True)
class SubjectTraits:
    base_hr_bpm: float
    rj_s: float
    dominance: float
    width_scale: float
    side_scale: float
    ring_hz: float
    ring_delay_s: float


def subject_traits(cfg: SynthConfig, subject: int) -> SubjectTraits:
    rng = _rng(cfg, subject, 0)
    u = rng.uniform(-1.0, 1.0, size=7)
    m = cfg.morphology_variation
    return SubjectTraits(
        base_hr_bpm=float(np.clip(cfg.base_hr_bpm + cfg.hr_spread_bpm * u[0], 35.0, 190.0)),
        rj_s=cfg.rj_interval_ms / 1000.0 * (1 + 0.3 * m * u[1]),
        dominance=float(np.clip(cfg.j_peak_dominance + 0.25 * m * u[2], 0.0, 1.0)),
        width_scale=1 + 0.35 * m * u[3],
        side_scale=1 + 0.5 * m * u[4],
        ring_hz=5.0 * (1 + 0.3 * m * u[5]),
        ring_delay_s=0.10 * (1 + 0.8 * m * u[6]),
    )


def generate_rr_series(cfg: SynthConfig, subject: int = 0) -> np.ndarray:
    """RR intervals (s) covering ``duration_s`` for one subject.

    Short-term jitter is AR(1), rescaled so the series' RMSSD equals the
    target exactly (before the physiological clip); a slow drift adds
    within-subject HR variation.
    """
    traits = subject_traits(cfg, subject)
    rng = _rng(cfg, subject, 1)
    mean_rr = 60.0 / traits.base_hr_bpm
    n = int(math.ceil(cfg.duration_s / (mean_rr * 0.6))) + 4

    if cfg.hr_drift_bpm > 0:
        t_approx = np.arange(n) * mean_rr
        f1, f2 = rng.uniform(1 / 300, 1 / 90, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        hr = traits.base_hr_bpm + cfg.hr_drift_bpm * (
            0.6 * np.sin(2 * np.pi * f1 * t_approx + ph[0])
            + 0.4 * np.sin(2 * np.pi * f2 * t_approx + ph[1])
        )
        base = 60.0 / hr
    else:
        base = np.full(n, mean_rr)

    target = cfg.hrv_rmssd_target_ms / 1000.0
    jitter = np.zeros(n)
    if target > 0:
        xi = rng.standard_normal(n)
        for i in range(1, n):
            jitter[i] = AR_COEF * jitter[i - 1] + xi[i]
        jitter *= target / np.sqrt(np.mean(np.diff(jitter) ** 2))
    rr = np.clip(base + jitter, 0.3, 2.5)
    keep = np.cumsum(rr) < cfg.duration_s + 2 * mean_rr
    return rr[: max(int(keep.sum()) + 1, 2)]


def beat_times(rr: np.ndarray, cfg: SynthConfig, subject: int = 0) -> np.ndarray:
    """R-peak times (s) inside the recording; the first beat lands half an RR in."""
    t = float(rr[0]) * 0.5 + np.concatenate([[0.0], np.cumsum(rr[1:])])
    return t[t < cfg.duration_s]


def _add_pulses(out, fs, centers, amps, sigma):
    half = int(math.ceil(5 * sigma * fs))
    n = out.size
    offs = np.arange(-half, half + 1)
    for c, a in zip(centers, amps):
        i0 = int(round(c * fs))
        idx = i0 + offs
        ok = (idx >= 0) & (idx < n)
        if not ok.any():
            continue
        t = idx[ok] / fs - c
        out[idx[ok]] += a * np.exp(-0.5 * (t / sigma) ** 2)


def ecg_waveform(beats: np.ndarray, rr_mean: np.ndarray, n: int, fs: float) -> np.ndarray:
    ecg = np.zeros(n)
    for off, amp, sig in _ECG_WAVES:
        _add_pulses(ecg, fs, beats + off, np.full(beats.size, amp), sig)
    t_off, t_amp, t_sig = _T_WAVE
    _add_pulses(ecg, fs, beats + t_off * np.sqrt(rr_mean), np.full(beats.size, t_amp), t_sig)
    return ecg


def bcg_waveform(beats: np.ndarray, n: int, fs: float, traits: SubjectTraits,
                 amps: np.ndarray, ring_shift: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sharp H-I-J-K-L complex and the broad ringing part, returned separately."""
    sharp = np.zeros(n)
    j_times = beats + traits.rj_s
    d = traits.dominance
    for k, (off, amp, sig) in enumerate(_BCG_COMPLEX):
        a = d if k == 2 else amp * d * traits.side_scale
        _add_pulses(sharp, fs, j_times + off * traits.width_scale, amps * a,
                    sig * traits.width_scale)
    ring = np.zeros(n)
    if d < 1:
        sig = 0.15
        half = int(math.ceil(3 * sig * fs))
        offs = np.arange(-half, half + 1)
        for c, a in zip(j_times + traits.ring_delay_s + ring_shift, amps):
            idx = int(round(c * fs)) + offs
            ok = (idx >= 0) & (idx < n)
            t = idx[ok] / fs - c
            ring[idx[ok]] += (1 - d) * 1.6 * a * np.exp(-0.5 * (t / sig) ** 2) * np.cos(
                2 * np.pi * traits.ring_hz * t
            )
    return sharp, ring


def _band_noise(rng, n: int, fs: float) -> np.ndarray:
    """Unit-variance white noise at the analysis resolution, interpolated to `fs`."""
    if fs <= NOISE_RESOLUTION_HZ:
        return rng.standard_normal(n)
    n_coarse = int(math.ceil(n * NOISE_RESOLUTION_HZ / fs)) + 2
    coarse = rng.standard_normal(n_coarse)
    t = np.arange(n) * (NOISE_RESOLUTION_HZ / fs)
    fine = np.interp(t, np.arange(n_coarse), coarse)
    return fine / fine.std()


def synthesize_pair(rr: np.ndarray, cfg: SynthConfig, subject: int = 0):
    """Build one Recording from an RR series.

    Returns ``(recording, beat_times_s)`` where the beat times are the R-peak
    times used to place the ECG pulses.
    """
    traits = subject_traits(cfg, subject)
    rng = _rng(cfg, subject, 2)
    fs = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * fs))
    beats = beat_times(np.asarray(rr, dtype=np.float64), cfg, subject)
    rr_local = np.asarray(rr[: beats.size], dtype=np.float64)

    ecg = ecg_waveform(beats, rr_local, n, fs)
    ecg += 0.005 * rng.standard_normal(n)

    amps = 1 + cfg.beat_amplitude_jitter * rng.standard_normal(beats.size)
    amps = np.clip(amps, 0.2, None)
    shift = cfg.ring_jitter_ms / 1000.0 * rng.standard_normal(beats.size)
    sharp, ring = bcg_waveform(beats, n, fs, traits, amps, shift)
    cardiac = sharp + ring

    t = np.arange(n) / fs
    resp = cfg.respiration_amplitude * np.sin(
        2 * np.pi * cfg.respiration_hz * t + rng.uniform(0, 2 * np.pi)
    )
    power = float(np.mean(cardiac**2))
    noise_sd = 0.0 if math.isinf(cfg.noise_snr_db) else math.sqrt(power / 10 ** (cfg.noise_snr_db / 10))

    gains = rng.uniform(0.3, 1.2, size=cfg.n_channels)
    offsets = rng.uniform(1.0, 3.0, size=cfg.n_channels)
    channels = np.empty((cfg.n_channels, n))
    for c in range(cfg.n_channels):
        noise = noise_sd * _band_noise(rng, n, fs) if noise_sd > 0 else 0.0
        channels[c] = offsets[c] + gains[c] * (cardiac + resp + noise)

    sid = f"{cfg.subject_prefix}{subject:03d}"
    return Recording(sid, fs, channels, ecg), beats


def generate_subject(cfg: SynthConfig, subject: int):
    return synthesize_pair(generate_rr_series(cfg, subject), cfg, subject)


def generate_cohort(cfg: SynthConfig):
    """Yield ``(recording, beat_times_s)`` for every subject, one at a time."""
    for i in range(cfg.n_subjects):
        yield generate_subject(cfg, i)
