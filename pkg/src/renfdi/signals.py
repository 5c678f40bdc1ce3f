"""Seeded multisine road inputs and synthetic sensor faults.

All randomness comes from Philox generators. A master seed is split into
child streams with ``SeedSequence(master, spawn_key=key)``, where ``key`` is a
tuple of small integers naming the stream (scenario index, channel, ...).
Adding scenarios therefore never changes the streams of earlier ones.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class MultisineSpec:
    amp_range: tuple[float, float] = (0.01, 0.1)
    freq_range: tuple[float, float] = (0.6 * np.pi, 3 * np.pi)
    phase_range: tuple[float, float] = (0.0, 0.94 * np.pi)
    n_range: tuple[int, int] = (2, 10)
    sample_rate: float = 100.0
    duration: float = 20.0

    def __post_init__(self):
        for name in ("amp_range", "freq_range", "phase_range", "n_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-degenerate interval")
        if self.n_range[0] < 1:
            raise ValueError("n_range must start at >= 1")
        if not (self.sample_rate > 0 and self.duration > 0):
            raise ValueError("sample_rate and duration must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate)) + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in asdict(self).items()}


ROAD_SPEC = MultisineSpec()
FAULT_SPEC = MultisineSpec(freq_range=(0.6 * np.pi, 5 * np.pi),
                           sample_rate=4.0)


@dataclass(frozen=True)
class MultisineDraw:
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray

    def to_dict(self) -> dict:
        return {"amplitudes": self.amplitudes.tolist(),
                "frequencies": self.frequencies.tolist(),
                "phases": self.phases.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MultisineDraw":
        return cls(*(np.asarray(d[k], dtype=float)
                     for k in ("amplitudes", "frequencies", "phases")))


@dataclass(frozen=True)
class FaultProfile:
    sensor_index: int
    onset_sample: int
    signal: np.ndarray
    draw: MultisineDraw | None = None


def make_rng(seed, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def draw_multisine(spec: MultisineSpec, rng: np.random.Generator) -> MultisineDraw:
    n = int(rng.integers(spec.n_range[0], spec.n_range[1], endpoint=True))
    return MultisineDraw(amplitudes=rng.uniform(*spec.amp_range, size=n),
                         frequencies=rng.uniform(*spec.freq_range, size=n),
                         phases=rng.uniform(*spec.phase_range, size=n))


def evaluate_multisine(draw: MultisineDraw, t) -> np.ndarray:
    """Peak-normalized sum ``max(a)/sum(a) * sum_l a_l sin(w_l t + phi_l)``."""
    t = np.asarray(t, dtype=float)
    a = draw.amplitudes
    waves = np.sin(np.multiply.outer(t, draw.frequencies) + draw.phases) @ a
    return (a.max() / a.sum()) * waves


def multisine(spec: MultisineSpec, seed, *key: int, return_draw=False):
    """Draw and evaluate one multisine on ``t_k = k / sample_rate``."""
    draw = draw_multisine(spec, make_rng(seed, *key))
    t = np.arange(spec.n_samples) / spec.sample_rate
    s = evaluate_multisine(draw, t)
    return (s, draw) if return_draw else s


def synth_fault(spec: MultisineSpec, sensor_index: int, onset_sample: int | None,
                seed, *key: int, n_samples: int | None = None) -> FaultProfile:
    """Multisine fault on the ``spec`` grid, zero before ``onset_sample``.

    ``n_samples`` overrides the horizon length (defaults to the spec's).
    ``onset_sample=None`` puts the onset at half the horizon.
    """
    n = spec.n_samples if n_samples is None else int(n_samples)
    if onset_sample is None:
        onset_sample = n // 2
    if not 0 <= onset_sample <= n:
        raise ValueError(f"onset {onset_sample} outside horizon [0, {n}]")
    draw = draw_multisine(spec, make_rng(seed, *key))
    s = evaluate_multisine(draw, np.arange(n) / spec.sample_rate)
    s[:onset_sample] = 0.0
    return FaultProfile(sensor_index, int(onset_sample), s, draw)
