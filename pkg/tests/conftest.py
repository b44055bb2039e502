"""Shared helpers: experiment-scale scenarios and random instance draws."""

from __future__ import annotations

import numpy as np
import pytest

from gsclo.core import ScenarioConfig


def desk_config(**overrides) -> ScenarioConfig:
    """Default experiment parameters: 0.1 s slots over 1 MHz at -60 dBm noise,
    537.6 Kbit images against 192 bit poses, -30 dB pathloss at 10 m."""
    base = dict(
        num_frames=8,
        slot_duration_s=0.1,
        bandwidth_hz=1e6,
        noise_power_watt=1e-9,
        power_budget_watt=0.01,
        image_bits=537_600.0,
        pose_bits=192.0,
        rician_k=1.0,
        pathloss_ref=1e-3,
        pathloss_exp=3.0,
        distance_m=10.0,
    )
    base.update(overrides)
    base.setdefault("neighborhood_radius", min(5, base["num_frames"]))
    return ScenarioConfig(**base)


def rician_gain_vector(rng: np.random.Generator, cfg: ScenarioConfig,
                       num: int) -> np.ndarray:
    """Independent channel gains from the scenario's fading model."""
    from gsclo.channel import rician_sample

    return np.array([abs(rician_sample(cfg, rng)) ** 2 for _ in range(num)])


def mixture_losses(rng: np.random.Generator, num: int,
                   tail_fraction: float = 0.15) -> np.ndarray:
    """Bulk-plus-tail loss draw matching the synthetic trace generator."""
    tail = rng.random(num) < tail_fraction
    return np.where(tail, rng.uniform(0.02, 0.3, num),
                    rng.uniform(0.005, 0.02, num))


@pytest.fixture
def cfg() -> ScenarioConfig:
    return desk_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
