"""Synthetic 18-channel color signals with a known heart rate.

Each channel is a baseline plus a two-harmonic pulse wave, slow baseline
drift and Gaussian noise. Green channels carry the strongest pulse; ROI
gains differ per sequence. Noise level is set from the SNR of the
strongest channel, so weaker channels are noisier.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .data import FPS, N_ROIS, ColorSignalSequence
from .grid import HR_MAX, HR_MIN

COLOR_GAIN = np.array([0.4, 1.0, 0.2])  # R, G, B
HARMONIC = 0.3

# in-band interference tone (Hz) and channel gain tilt per camera, used
# only when ``camera_effects`` is on
CAMERA_PROFILES = {
    "Cam1": {"tone_hz": 1.15, "tilt": np.array([1.0, 1.0, 1.0])},
    "Cam2": {"tone_hz": 1.55, "tilt": np.array([1.6, 0.8, 0.6])},
    "Cam3": {"tone_hz": 0.95, "tilt": np.array([0.6, 0.9, 1.8])},
}


@dataclass
class SynthConfig:
    n_sequences: int = 12
    duration_s: float = 60.0
    hr_range: tuple[float, float] = (50.0, 110.0)
    snr_db: float = 15.0
    seed: int = 0
    hr_drift_bpm: float = 3.0
    baseline_drift: float = 0.3
    motion_amplitude: float = 0.0
    cameras: tuple[str, ...] = ("Cam1", "Cam2", "Cam3")
    scenarios: tuple[str, ...] = ("stationary",)
    camera_effects: bool = False
    interference: float = 0.8

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        """Typed config from ``key = value`` strings; tuples are comma-separated."""
        cfg = cls()
        for key, raw in values.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown synth key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple):
                items = [v.strip() for v in str(raw).split(",")]
                value = tuple(float(v) for v in items) if key == "hr_range" else tuple(items)
            elif isinstance(current, bool):
                value = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                value = type(current)(float(raw)) if isinstance(current, int) else float(raw)
            setattr(cfg, key, value)
        return cfg

    def validate(self):
        lo, hi = self.hr_range
        if not (HR_MIN <= lo <= hi <= HR_MAX):
            raise ValueError(f"hr_range {self.hr_range} must lie within [{HR_MIN}, {HR_MAX}]")
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be positive")
        if self.duration_s * FPS < 64:
            raise ValueError("duration too short for a single 64-frame window")


def _sequence_rng(seed: int, seq_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(seq_id.encode())])


def generate_sequence(seq_id: str, hr_bpm: float, cfg: SynthConfig, camera: str = "synthetic",
                      scenario: str = "synthetic", rng: np.random.Generator | None = None
                      ) -> ColorSignalSequence:
    rng = rng if rng is not None else _sequence_rng(cfg.seed, seq_id)
    n = int(round(cfg.duration_s * FPS))
    t = np.arange(n) / FPS

    hr = np.full(n, float(hr_bpm))
    if cfg.hr_drift_bpm > 0:
        period = rng.uniform(30.0, 90.0)
        hr = hr + cfg.hr_drift_bpm * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    hr = np.clip(hr, cfg.hr_range[0], cfg.hr_range[1])
    # integrate instantaneous frequency so drift stays phase-continuous
    phase = 2 * np.pi * np.cumsum(hr / 60.0) / FPS + rng.uniform(0, 2 * np.pi)

    roi_gain = rng.uniform(0.3, 1.0, size=N_ROIS)
    roi_gain[rng.integers(N_ROIS)] = 1.0
    gains = (roi_gain[:, None] * COLOR_GAIN[None, :])
    if cfg.camera_effects and camera in CAMERA_PROFILES:
        gains = gains * CAMERA_PROFILES[camera]["tilt"][None, :]
    gains = gains.reshape(-1)

    second = rng.uniform(0, 2 * np.pi)
    wave = np.sin(phase) + HARMONIC * np.sin(2 * phase + second)
    signals = gains[:, None] * wave[None, :]

    strongest = float(np.max(np.abs(gains)))
    signal_power = strongest ** 2 * (0.5 + 0.5 * HARMONIC ** 2)

    if cfg.baseline_drift > 0:
        for c in range(signals.shape[0]):
            f = rng.uniform(0.01, 0.1, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            amp = cfg.baseline_drift * strongest * rng.uniform(0.5, 1.0, size=2)
            signals[c] += (amp[:, None] * np.sin(2 * np.pi * f[:, None] * t + ph[:, None])).sum(0)

    if scenario == "mixed_motion" and cfg.motion_amplitude > 0:
        # head motion: common low-frequency disturbance, strongest on large ROIs
        f = rng.uniform(0.15, 0.5)
        motion = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        weight = rng.uniform(0.5, 1.5, size=signals.shape[0])
        signals += cfg.motion_amplitude * strongest * weight[:, None] * motion[None, :]

    if cfg.camera_effects and camera in CAMERA_PROFILES:
        tone = np.sin(2 * np.pi * CAMERA_PROFILES[camera]["tone_hz"] * t + rng.uniform(0, 2 * np.pi))
        mix = rng.uniform(0.5, 1.0, size=signals.shape[0])
        signals += cfg.interference * strongest * mix[:, None] * tone[None, :]

    if np.isfinite(cfg.snr_db):
        noise_std = np.sqrt(signal_power / 10 ** (cfg.snr_db / 10))
        signals += rng.normal(0.0, noise_std, size=signals.shape)

    baseline = rng.uniform(60.0, 200.0, size=(signals.shape[0], 1))
    return ColorSignalSequence(id=seq_id, camera=camera, scenario=scenario,
                               signals=baseline + signals, ref_hr=hr, fps=FPS)


def synth_generate(cfg: SynthConfig) -> list[ColorSignalSequence]:
    cfg.validate()
    master = np.random.default_rng(cfg.seed)
    hrs = master.uniform(cfg.hr_range[0], cfg.hr_range[1], size=cfg.n_sequences)
    out = []
    for i, hr in enumerate(hrs):
        camera = cfg.cameras[i % len(cfg.cameras)]
        scenario = cfg.scenarios[(i // len(cfg.cameras)) % len(cfg.scenarios)]
        seq_id = f"syn{i:03d}"
        out.append(generate_sequence(seq_id, hr, cfg, camera=camera, scenario=scenario))
    return out
