"""Domain types, MR image fusion, the GSMR loss/metric stack, and allocation checks.

Everything here is shared by the solvers: scenario parameters, per-frame trace
records, allocations, image-quality metrics and the content-switching objective.
All types are immutable values after construction and all operations are pure,
so they are safe to call from concurrent workers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ScenarioConfig",
    "FrameTrace",
    "Allocation",
    "SolveReport",
    "ConstraintReport",
    "fuse_mr",
    "ssim",
    "gsmr_loss",
    "psnr",
    "objective_gsmr",
    "zero_one_penalty",
    "binary_violation",
    "validate_allocation",
    "load_trace_csv",
    "save_trace_csv",
    "load_image_png",
    "RATE_RTOL",
    "BUDGET_RTOL",
    "PSNR_CAP_DB",
]

# Relative tolerances for feasibility checks: powers come out of bisections and
# closed forms evaluated at finite precision.
RATE_RTOL = 1e-9
BUDGET_RTOL = 1e-9

# Frames with zero distortion would have infinite PSNR; they enter averages at
# this cap instead.
PSNR_CAP_DB = 60.0


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical and algorithmic parameters of one uplink scenario.

    Units are SI throughout: seconds, Hz, Watt, bits, meters. Channel-related
    quantities (`rician_k`, `pathloss_ref`, `extra_fading`) are linear ratios,
    not dB.
    """

    num_frames: int = 288
    slot_duration_s: float = 0.1
    bandwidth_hz: float = 1e6
    noise_power_watt: float = 1e-9          # -60 dBm
    power_budget_watt: float = 0.005        # per-frame average
    image_bits: float = 537_600.0
    pose_bits: float = 192.0
    loss_weight: float = 0.2                # SSIM share of the fused loss
    penalty_beta: Optional[float] = None    # None: solver picks a scale
    outage_target: float = 0.1
    neighborhood_radius: int = 5
    rician_k: float = 1.0                   # 0 dB; 0 means Rayleigh
    pathloss_ref: float = 1e-3              # -30 dB at 1 m
    pathloss_exp: float = 3.0
    distance_m: float = 10.0
    extra_fading: float = 1.0               # wall blockage, linear
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_frames < 1:
            raise ValueError("num_frames must be a positive integer")
        for name in ("slot_duration_s", "bandwidth_hz", "noise_power_watt",
                     "power_budget_watt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not self.pose_bits < self.image_bits:
            raise ValueError("pose_bits must be smaller than image_bits")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ValueError("loss_weight must lie in [0, 1]")
        if self.penalty_beta is not None and self.penalty_beta <= 0:
            raise ValueError("penalty_beta must be positive when given")
        if not 0.0 < self.outage_target < 1.0:
            raise ValueError("outage_target must lie in (0, 1)")
        if not 1 <= self.neighborhood_radius <= self.num_frames:
            raise ValueError("neighborhood_radius must lie in [1, num_frames]")
        if self.rician_k < 0:
            raise ValueError("rician_k must be >= 0")
        if self.pathloss_ref <= 0 or self.distance_m <= 0 or self.extra_fading <= 0:
            raise ValueError("pathloss parameters must be positive")

    @property
    def tau_b(self) -> float:
        """Bits carried per unit spectral efficiency in one slot."""
        return self.slot_duration_s * self.bandwidth_hz

    def payload_bits(self, x: float) -> float:
        """Payload of one frame for (possibly relaxed) switch value ``x``."""
        return x * self.image_bits + (1.0 - x) * self.pose_bits

    def with_budget(self, power_budget_watt: float) -> "ScenarioConfig":
        return replace(self, power_budget_watt=power_budget_watt)


@dataclass(frozen=True)
class FrameTrace:
    """One frame of a scenario trace.

    ``gs_loss`` is the distortion incurred when the frame is rendered from the
    server-side model instead of being uploaded. ``channel_gain`` is the linear
    power gain of the uplink. The estimate/uncertainty pair is only present for
    robust runs.
    """

    frame_index: int
    gs_loss: float
    channel_gain: float
    channel_estimate: Optional[complex] = None
    uncertainty: Optional[float] = None
    pose: Optional[tuple[float, float, float]] = None

    def __post_init__(self) -> None:
        if self.gs_loss < 0:
            raise ValueError("gs_loss must be >= 0")
        if self.channel_gain < 0:
            raise ValueError("channel_gain must be >= 0")
        if self.uncertainty is not None and self.uncertainty < 0:
            raise ValueError("uncertainty must be >= 0 when given")
        if (self.channel_estimate is not None
                and (self.uncertainty is None or self.uncertainty == 0.0)):
            est_gain = abs(self.channel_estimate) ** 2
            if not np.isclose(est_gain, self.channel_gain, rtol=1e-6, atol=1e-300):
                raise ValueError(
                    "with zero uncertainty the estimate magnitude must match "
                    "the stored channel gain")


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Allocation:
    """Per-frame switch vector ``x`` and transmit powers ``p`` (Watt)."""

    x: np.ndarray
    p: np.ndarray
    is_binary: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _as_readonly(np.atleast_1d(self.x)))
        object.__setattr__(self, "p", _as_readonly(np.atleast_1d(self.p)))
        if self.x.shape != self.p.shape:
            raise ValueError("x and p must have the same length")
        if np.any(self.x < -1e-12) or np.any(self.x > 1 + 1e-12):
            raise ValueError("switch values must lie in [0, 1]")
        if self.is_binary and not np.all((self.x == 0.0) | (self.x == 1.0)):
            raise ValueError("binary allocation contains fractional switches")
        if np.any(self.p < 0):
            raise ValueError("powers must be nonnegative")

    @property
    def num_frames(self) -> int:
        return int(self.x.shape[0])

    @property
    def mean_power(self) -> float:
        return float(np.mean(self.p))


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solver run.

    ``convergence_delta`` and ``binary_gap`` are iterate diagnostics of the
    DC-based solvers (step norm and mean x(1-x) of the final relaxed iterate);
    NaN for solvers without an iterate sequence.
    """

    allocation: Allocation
    objective: float
    objective_trajectory: tuple[float, ...]
    iterations: int
    feasible: bool
    wall_time: float
    convergence_delta: float = float("nan")
    binary_gap: float = float("nan")


@dataclass(frozen=True)
class ConstraintReport:
    """Per-constraint verdict for a binary allocation."""

    rate_ok: np.ndarray           # per frame
    budget_ok: bool
    binary_ok: bool
    rate_margin_bits: np.ndarray  # carried bits minus payload, per frame
    budget_margin_watt: float     # budget minus mean power

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate_ok", np.asarray(self.rate_ok, dtype=bool))
        object.__setattr__(self, "rate_margin_bits",
                           np.asarray(self.rate_margin_bits, dtype=float))

    @property
    def feasible(self) -> bool:
        return bool(self.budget_ok and self.binary_ok and np.all(self.rate_ok))

    @property
    def violated_frames(self) -> np.ndarray:
        return np.flatnonzero(~self.rate_ok)


# ---------------------------------------------------------------------------
# Image operations
# ---------------------------------------------------------------------------

_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5          # 11x11 window
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _check_image(img: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"{name} must be an (H, W, 3) array")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} has empty dimensions")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def fuse_mr(real: np.ndarray, virtual: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend a real and a virtual image through a binary mask.

    Pixels where the mask is 1 come from ``real``, pixels where it is 0 come
    from ``virtual``.
    """
    r = _check_image(real, "real")
    v = _check_image(virtual, "virtual")
    d = _check_image(mask, "mask")
    _check_same_shape(r, v)
    _check_same_shape(r, d)
    if not np.all((d == 0.0) | (d == 1.0)):
        raise ValueError("mask must be 0/1 valued")
    return d * r + (1.0 - d) * v


def _gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid region only."""
    r = len(kernel) // 2
    # along rows
    out = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), 0, img)
    out = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), 1, out)
    assert out.shape[0] == img.shape[0] - 2 * r
    return out


def _ssim_single_channel(a: np.ndarray, b: np.ndarray) -> float:
    k = _gaussian_kernel_1d(_SSIM_SIGMA, _SSIM_RADIUS)
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a * mu_a
    var_b = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity between two images.

    Single-scale SSIM over an 11x11 Gaussian window (sigma 1.5) with the usual
    stabilisers C1 = 0.01^2 and C2 = 0.03^2 on the unit dynamic range, computed
    per RGB channel and averaged. Windows are restricted to the valid interior
    so no padding convention leaks into the value.
    """
    ia = _check_image(a, "a")
    ib = _check_image(b, "b")
    _check_same_shape(ia, ib)
    size = 2 * _SSIM_RADIUS + 1
    if ia.shape[0] < size or ia.shape[1] < size:
        raise ValueError(f"images must be at least {size}x{size} for SSIM")
    return float(np.mean([_ssim_single_channel(ia[:, :, c], ib[:, :, c])
                          for c in range(3)]))


def gsmr_loss(m: np.ndarray, m_hat: np.ndarray, lam: float) -> float:
    """Distortion between a target MR frame and its reconstruction.

    Convex mix of mean absolute difference and structural dissimilarity:
    ``(1 - lam) * L1 + lam * (1 - ssim)``. The L1 term is normalised per
    element so both terms live on comparable scales.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    a = _check_image(m, "m")
    b = _check_image(m_hat, "m_hat")
    _check_same_shape(a, b)
    l1 = float(np.mean(np.abs(a - b)))
    ds = 1.0 - ssim(a, b) if lam > 0.0 else 0.0
    return (1.0 - lam) * l1 + lam * ds


def psnr(m: np.ndarray, m_hat: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB for unit peak, capped for exact frames."""
    a = _check_image(m, "m")
    b = _check_image(m_hat, "m_hat")
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Objective, penalty, validation
# ---------------------------------------------------------------------------


def objective_gsmr(x: np.ndarray, losses: np.ndarray) -> float:
    """Mean residual loss of a (possibly relaxed) switch vector.

    Frame ``t`` contributes ``losses[t] * (1 - x[t])``: uploading removes the
    rendering loss, keeping the pose leaves it in place.
    """
    xv = np.asarray(x, dtype=float)
    lv = np.asarray(losses, dtype=float)
    if xv.shape != lv.shape:
        raise ValueError("x and losses must have the same length")
    return float(np.mean(lv * (1.0 - xv)))


def zero_one_penalty(x: np.ndarray, beta: float) -> float:
    """Penalty ``(1/beta) * sum x_t (1 - x_t)``; zero iff ``x`` is binary."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    xv = np.asarray(x, dtype=float)
    return float(np.sum(xv * (1.0 - xv)) / beta)


def binary_violation(x: np.ndarray) -> float:
    """Scale-free binariness measure ``mean(x_t (1 - x_t))``."""
    xv = np.asarray(x, dtype=float)
    return float(np.mean(xv * (1.0 - xv)))


def validate_allocation(alloc: Allocation, cfg: ScenarioConfig,
                        gains: np.ndarray) -> ConstraintReport:
    """Check a binary allocation against rate, budget and binariness.

    The rate check compares the bits carried in one slot against the payload
    implied by the switch value, with relative tolerance ``RATE_RTOL``; the
    budget check uses ``BUDGET_RTOL`` on the per-frame average.
    """
    g = np.asarray(gains, dtype=float)
    if g.shape != alloc.x.shape:
        raise ValueError("gains length must match the allocation")
    binary_ok = bool(np.all((alloc.x == 0.0) | (alloc.x == 1.0)))
    payload = cfg.payload_bits(alloc.x)
    with np.errstate(divide="ignore"):
        carried = cfg.tau_b * np.log2(1.0 + g * alloc.p / cfg.noise_power_watt)
    rate_ok = carried >= payload * (1.0 - RATE_RTOL)
    mean_p = float(np.mean(alloc.p))
    budget_ok = mean_p <= cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
    return ConstraintReport(
        rate_ok=rate_ok,
        budget_ok=budget_ok,
        binary_ok=binary_ok,
        rate_margin_bits=carried - payload,
        budget_margin_watt=cfg.power_budget_watt - mean_p,
    )


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

_TRACE_BASE_FIELDS = ("frame", "gain", "gs_loss")
_TRACE_OPT_FIELDS = ("est_re", "est_im", "omega2")


def save_trace_csv(path: str | Path, frames: Sequence[FrameTrace]) -> None:
    """Write a trace as CSV: ``frame,gain,gs_loss[,est_re,est_im,omega2]``."""
    frames = list(frames)
    with_est = any(f.channel_estimate is not None for f in frames)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(_TRACE_BASE_FIELDS) + (list(_TRACE_OPT_FIELDS) if with_est else [])
    writer.writerow(header)
    for f in frames:
        row = [f.frame_index, repr(float(f.channel_gain)), repr(float(f.gs_loss))]
        if with_est:
            est = f.channel_estimate if f.channel_estimate is not None else 0j
            om = f.uncertainty if f.uncertainty is not None else 0.0
            row += [repr(float(est.real)), repr(float(est.imag)), repr(float(om))]
        writer.writerow(row)
    Path(path).write_text(buf.getvalue())


def load_trace_csv(path: str | Path) -> list[FrameTrace]:
    """Read a trace written by :func:`save_trace_csv` (or hand-authored)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty trace file")
        missing = [c for c in _TRACE_BASE_FIELDS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing trace columns {missing}")
        has_est = all(c in reader.fieldnames for c in _TRACE_OPT_FIELDS)
        frames = []
        for row in reader:
            est = None
            om = None
            if has_est:
                est = complex(float(row["est_re"]), float(row["est_im"]))
                om = float(row["omega2"])
            frames.append(FrameTrace(
                frame_index=int(row["frame"]),
                gs_loss=float(row["gs_loss"]),
                channel_gain=float(row["gain"]),
                channel_estimate=est,
                uncertainty=om,
            ))
    if not frames:
        raise ValueError(f"{path}: trace has no frames")
    return frames


def load_image_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG as an (H, W, 3) float array in [0, 1]."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return arr


def losses_and_gains(frames: Sequence[FrameTrace]) -> tuple[np.ndarray, np.ndarray]:
    """Column views of a trace, ordered by frame index."""
    fr = sorted(frames, key=lambda f: f.frame_index)
    losses = np.array([f.gs_loss for f in fr], dtype=float)
    gains = np.array([f.channel_gain for f in fr], dtype=float)
    return losses, gains


def estimates_and_uncertainty(
        frames: Sequence[FrameTrace]) -> tuple[np.ndarray, np.ndarray]:
    """Complex channel estimates and error variances of a robust trace."""
    fr = sorted(frames, key=lambda f: f.frame_index)
    if any(f.channel_estimate is None for f in fr):
        raise ValueError("trace has no channel estimates")
    est = np.array([f.channel_estimate for f in fr], dtype=complex)
    om = np.array([0.0 if f.uncertainty is None else f.uncertainty for f in fr],
                  dtype=float)
    return est, om
