"""Fading channels, achievable rate, power inversion, and outage numerics.

The uplink model is a flat quasi-static channel per frame: Rician small-scale
fading on top of a distance power law, Shannon rate, and (for robust runs) a
complex-Gaussian estimation error that turns the conditional gain into a
noncentral chi-square variable whose tail is the first-order Marcum Q
function.

All stochastic operations take an explicit ``numpy.random.Generator`` so
Monte Carlo experiments are reproducible stream by stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import ScenarioConfig

__all__ = [
    "ChannelDraw",
    "MultiAntennaChannel",
    "rician_sample",
    "draw_channel",
    "achievable_rate",
    "min_power_for_payload",
    "marcum_q1",
    "outage_prob",
    "sample_true_gain",
    "zf_combiner",
    "zf_effective_gains",
]


@dataclass(frozen=True)
class ChannelDraw:
    """One conditional channel realisation for Monte Carlo evaluation."""

    estimate: complex
    uncertainty: float
    true_gain: float

    def __post_init__(self) -> None:
        if self.uncertainty < 0 or self.true_gain < 0:
            raise ValueError("gains and variances must be nonnegative")
        if self.uncertainty == 0.0:
            est_gain = abs(self.estimate) ** 2
            if not math.isclose(self.true_gain, est_gain, rel_tol=1e-9, abs_tol=0.0):
                raise ValueError("zero uncertainty requires true_gain == |estimate|^2")

    @property
    def estimate_gain(self) -> float:
        return abs(self.estimate) ** 2


@dataclass(frozen=True)
class MultiAntennaChannel:
    """Frequency-flat uplink matrix from K robots to an N-antenna server."""

    matrix: np.ndarray  # (N, K) complex

    def __post_init__(self) -> None:
        h = np.asarray(self.matrix, dtype=complex)
        if h.ndim != 2:
            raise ValueError("channel matrix must be 2-D (antennas x robots)")
        if h.shape[1] > h.shape[0]:
            raise ValueError("need at least as many antennas as robots")
        object.__setattr__(self, "matrix", h)

    @property
    def num_antennas(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def num_robots(self) -> int:
        return int(self.matrix.shape[1])


# ---------------------------------------------------------------------------
# Fading
# ---------------------------------------------------------------------------


def rician_sample(cfg: ScenarioConfig, rng: np.random.Generator) -> complex:
    """Draw one complex channel coefficient.

    Large-scale gain is ``pathloss_ref * extra_fading * distance^-alpha``; the
    small-scale part mixes a unit-modulus line-of-sight phasor (random phase
    angle) with a circularly symmetric scattered term, weighted by the Rician
    K-factor. ``rician_k == 0`` reduces to Rayleigh fading.
    """
    scale = math.sqrt(cfg.pathloss_ref * cfg.extra_fading
                      * cfg.distance_m ** (-cfg.pathloss_exp))
    k = cfg.rician_k
    psi = rng.uniform(-math.pi, math.pi)
    g_los = complex(math.cos(math.pi * math.sin(psi)),
                    -math.sin(math.pi * math.sin(psi)))
    re, im = rng.standard_normal(2)
    g_nlos = complex(re, im) / math.sqrt(2.0)
    mix = math.sqrt(k / (1.0 + k)) * g_los + math.sqrt(1.0 / (1.0 + k)) * g_nlos
    return scale * mix


def rician_gains(cfg: ScenarioConfig, num: int, rng: np.random.Generator) -> np.ndarray:
    """Vector of ``num`` independent channel gains ``|h|^2``."""
    return np.array([abs(rician_sample(cfg, rng)) ** 2 for _ in range(num)])


# ---------------------------------------------------------------------------
# Rate and its inverse
# ---------------------------------------------------------------------------


def achievable_rate(power_watt: float, gain: float, cfg: ScenarioConfig) -> float:
    """Shannon rate in bits/s at the given transmit power and linear gain."""
    if power_watt < 0:
        raise ValueError("power must be nonnegative")
    return cfg.bandwidth_hz * math.log2(1.0 + gain * power_watt / cfg.noise_power_watt)


def min_power_for_payload(bits: float, gain: float, cfg: ScenarioConfig) -> float:
    """Smallest power whose slot capacity covers ``bits``.

    Inverts the rate through ``p = (sigma^2/gain) * (2^(bits/(tau B)) - 1)``,
    which activates the rate constraint exactly.
    """
    if bits < 0:
        raise ValueError("payload must be nonnegative")
    if bits == 0.0:
        return 0.0
    if gain <= 0.0:
        raise ValueError("zero channel gain cannot carry a positive payload")
    return (cfg.noise_power_watt / gain) * (2.0 ** (bits / cfg.tau_b) - 1.0)


# ---------------------------------------------------------------------------
# Marcum Q numerics
# ---------------------------------------------------------------------------

# Above this product the Bessel series needs too many terms; switch to the
# uniform asymptotic expansion, whose error is O((ab)^-1.5) there.
_SERIES_AB_MAX = 1e8


def _marcum_series(a: float, b: float) -> float:
    """Canonical / complementary Bessel series with scaled terms.

    Both series share the prefactor exp(-(a-b)^2/2) once each modified Bessel
    term is exponentially scaled, which keeps every factor in [0, 1].
    """
    ab = a * b
    # Terms decay roughly like exp(-k^2 / (2ab)) on top of the geometric ratio,
    # so ~9*sqrt(ab) terms reach below 1e-17.
    kmax = int(9.0 * math.sqrt(ab)) + 64
    pref = math.exp(-0.5 * (a - b) ** 2)
    if b >= a:
        k = np.arange(kmax)
        terms = (a / b) ** k * special.ive(k, ab)
        return float(pref * np.sum(terms))
    k = np.arange(1, kmax)
    terms = (b / a) ** k * special.ive(k, ab)
    return float(1.0 - pref * np.sum(terms))


def _marcum_asymptotic(a: float, b: float) -> float:
    """Large-argument expansion around the Gaussian limit of the Rice tail."""
    c = b - a
    q = 0.5 * special.erfc(c / math.sqrt(2.0))
    phi = math.exp(-0.5 * c * c) / math.sqrt(2.0 * math.pi)
    val = q + phi / (2.0 * a) - c * phi / (8.0 * a * a)
    return min(1.0, max(0.0, val))


def marcum_q1(a: float, b: float) -> float:
    """First-order Marcum Q function ``Q1(a, b)``.

    Monotone increasing in ``a`` and decreasing in ``b``; equals the upper
    tail of a noncentral chi-square distribution with two degrees of freedom.
    Absolute accuracy is ~1e-12 in the series regime and better than 1e-10
    overall.
    """
    if math.isnan(a) or math.isnan(b):
        raise ValueError("marcum_q1 arguments must not be NaN")
    if a < 0 or b < 0:
        raise ValueError("marcum_q1 arguments must be nonnegative")
    if b == 0.0:
        return 1.0
    if a == 0.0:
        return math.exp(-0.5 * b * b)
    if a * b > _SERIES_AB_MAX:
        return _marcum_asymptotic(a, b)
    return min(1.0, max(0.0, _marcum_series(a, b)))


# ---------------------------------------------------------------------------
# Outage under channel uncertainty
# ---------------------------------------------------------------------------


def _gain_threshold(x_t: float, power_watt: float, cfg: ScenarioConfig) -> float:
    """Gain below which the chosen payload no longer fits in one slot."""
    payload = cfg.payload_bits(x_t)
    return (2.0 ** (payload / cfg.tau_b) - 1.0) * cfg.noise_power_watt / power_watt


def outage_prob(x_t: float, power_watt: float, estimate: complex,
                omega2: float, cfg: ScenarioConfig) -> float:
    """Probability that the realised gain cannot carry the chosen payload.

    Conditioned on the channel estimate, the true gain is noncentral
    chi-square; the outage probability is one minus the Marcum Q tail
    evaluated at the payload-dependent gain threshold. Strictly decreasing in
    the transmit power.
    """
    if power_watt < 0:
        raise ValueError("power must be nonnegative")
    if omega2 < 0:
        raise ValueError("omega2 must be nonnegative")
    if power_watt == 0.0:
        return 1.0
    thr = _gain_threshold(x_t, power_watt, cfg)
    est_gain = abs(estimate) ** 2
    if omega2 == 0.0:
        # Degenerate limit: the gain distribution collapses onto the estimate.
        return 1.0 if est_gain < thr else 0.0
    half = math.sqrt(omega2 / 2.0)
    return 1.0 - marcum_q1(math.sqrt(est_gain) / half, math.sqrt(thr) / half)


def draw_channel(estimate: complex, omega2: float,
                 rng: np.random.Generator) -> ChannelDraw:
    """One conditional channel record: estimate, error variance, true gain."""
    return ChannelDraw(estimate=estimate, uncertainty=omega2,
                       true_gain=sample_true_gain(estimate, omega2, rng))


def sample_true_gain(estimate: complex, omega2: float,
                     rng: np.random.Generator) -> float:
    """Draw ``|estimate + e|^2`` with ``e`` circular complex Gaussian.

    Real and imaginary parts of the error are independent with variance
    ``omega2 / 2`` each, so the expected gain is ``|estimate|^2 + omega2``.
    """
    if omega2 < 0:
        raise ValueError("omega2 must be nonnegative")
    if omega2 == 0.0:
        return abs(estimate) ** 2
    std = math.sqrt(omega2 / 2.0)
    re, im = rng.standard_normal(2)
    h = estimate + complex(std * re, std * im)
    return abs(h) ** 2


def sample_true_gains(estimates: np.ndarray, omega2: np.ndarray, runs: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Vectorised conditional gain draws, shape ``(runs, len(estimates))``."""
    est = np.asarray(estimates, dtype=complex)
    om = np.broadcast_to(np.asarray(omega2, dtype=float), est.shape)
    std = np.sqrt(om / 2.0)
    noise = std * (rng.standard_normal((runs, est.size))
                   + 1j * rng.standard_normal((runs, est.size)))
    return np.abs(est[None, :] + noise) ** 2


# ---------------------------------------------------------------------------
# Zero-forcing receiver
# ---------------------------------------------------------------------------

_RCOND = 1e-10


def zf_combiner(channel: MultiAntennaChannel) -> np.ndarray:
    """Rows ``w_k^H`` of the zero-forcing receive filter, shape (K, N).

    Computed as the left pseudo-inverse ``(H^H H)^-1 H^H``; raises on a
    rank-deficient channel matrix.
    """
    h = channel.matrix
    if np.linalg.matrix_rank(h, tol=None) < channel.num_robots:
        raise np.linalg.LinAlgError("channel matrix is rank deficient")
    gram = h.conj().T @ h
    return np.linalg.solve(gram, h.conj().T)


def zf_effective_gains(channel: MultiAntennaChannel) -> np.ndarray:
    """Post-combining gain of each robot's stream.

    Zero forcing nulls every cross term (``w_i^H h_j = 0`` for i != j) and
    scales the wanted one to unity, so the effective gain reduces to
    ``1 / ||w_k||^2``.
    """
    w = zf_combiner(channel)
    return 1.0 / np.sum(np.abs(w) ** 2, axis=1)
