"""Reference allocators: channel-only schemes, rounding, local search, oracle.

These are the comparison points for the penalty/DC solver. The channel-only
schemes (water-filling, max-min fairness) pick powers without looking at the
rendering losses and derive the content switch from the rate they achieve.
The exhaustive oracle enumerates every switch pattern at small horizon and
anchors all optimality tests.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional

import numpy as np

from .apo import (
    InfeasibleError,
    _check_inputs,
    activation_powers,
    binarize_and_repair,
    solve_dc_subproblem,
)
from .core import (
    Allocation,
    BUDGET_RTOL,
    RATE_RTOL,
    ScenarioConfig,
    objective_gsmr,
)
from .robust import BilsSettings, min_power_outage, sample_neighborhood

__all__ = [
    "waterfill_maxrate",
    "maxmin_fairness",
    "relax_round",
    "local_search_pgs",
    "max_img",
    "exhaustive_oracle",
    "all_upload",
    "no_upload",
]

_ORACLE_MAX_FRAMES = 20


def _switch_from_capacity(p: np.ndarray, gains: np.ndarray,
                          cfg: ScenarioConfig) -> np.ndarray:
    """Content rule for channel-only allocators: upload iff the image fits.

    The schemes below fix powers first; frames whose slot capacity covers the
    image payload upload it, everyone else sends the pose. (Frames that cannot
    even carry the pose keep x = 0 and show up in validation.)
    """
    carried = cfg.tau_b * np.log2(1.0 + gains * p / cfg.noise_power_watt)
    return (carried >= cfg.image_bits * (1.0 - RATE_RTOL)).astype(float)


def waterfill_maxrate(gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Sum-rate maximising water-filling over the frame sequence.

    ``p_t = max(nu - sigma^2/g_t, 0)`` with the water level chosen so the
    average power meets the budget exactly.
    """
    g = np.asarray(gains, dtype=float)
    if np.any(g <= 0.0):
        raise ValueError("all channel gains must be positive")
    floor = cfg.noise_power_watt / g
    target = g.size * cfg.power_budget_watt

    def total(nu: float) -> float:
        return float(np.maximum(nu - floor, 0.0).sum())

    lo = float(floor.min())
    hi = float(floor.min()) + target
    while total(hi) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    p = np.maximum(hi - floor, 0.0)
    return Allocation(x=_switch_from_capacity(p, g, cfg), p=p, is_binary=True)


def maxmin_fairness(gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Equal-rate allocation: every frame carries the same payload capacity.

    Bisects the common per-slot capacity ``c`` so that the powers
    ``(sigma^2/g_t)(2^(c/(tau B)) - 1)`` average exactly to the budget; weak
    channels receive the most power.
    """
    g = np.asarray(gains, dtype=float)
    if np.any(g <= 0.0):
        raise ValueError("all channel gains must be positive")
    target = g.size * cfg.power_budget_watt
    inv = (cfg.noise_power_watt / g).sum()

    def total(c_bits: float) -> float:
        return float(inv * (2.0 ** (c_bits / cfg.tau_b) - 1.0))

    lo, hi = 0.0, cfg.tau_b
    while total(hi) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    c_bits = hi
    p = (cfg.noise_power_watt / g) * (2.0 ** (c_bits / cfg.tau_b) - 1.0)
    x = np.full(g.size, 1.0 if c_bits >= cfg.image_bits * (1.0 - RATE_RTOL) else 0.0)
    return Allocation(x=x, p=p, is_binary=True)


def relax_round(losses: np.ndarray, gains: np.ndarray,
                cfg: ScenarioConfig) -> Allocation:
    """Continuous relaxation of the switching problem, rounded and repaired."""
    lv, g = _check_inputs(losses, gains)
    start = np.zeros(lv.size)
    sol = solve_dc_subproblem(start, lv, g, cfg, beta=math.inf)
    return binarize_and_repair(sol.allocation, lv, g, cfg)


def local_search_pgs(losses: np.ndarray, gains: np.ndarray, cfg: ScenarioConfig,
                     settings: BilsSettings | None = None) -> Allocation:
    """Iterated local search on the deterministic problem from all-pose.

    Same loop as the robust search, with the deterministic rate constraint as
    the feasibility oracle: a sampled pattern is priced at its activation
    powers and accepted when it fits the budget and does not worsen the mean
    loss.
    """
    settings = settings or BilsSettings()
    lv, g = _check_inputs(losses, gains)
    t_frames = lv.size
    radius = (settings.neighborhood_radius if settings.neighborhood_radius
              is not None else cfg.neighborhood_radius)
    radius = min(radius, t_frames)
    rng = np.random.default_rng(settings.rng_seed)
    budget = t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)

    x = np.zeros(t_frames)
    if activation_powers(x, g, cfg).sum() > budget:
        raise InfeasibleError("pose-only transmission already exceeds the budget")
    incumbent = objective_gsmr(x, lv)
    for _ in range(settings.max_outer_iterations):
        cand = sample_neighborhood(x, radius, rng)
        if activation_powers(cand, g, cfg).sum() > budget:
            continue
        obj = objective_gsmr(cand, lv)
        if obj <= incumbent:
            x, incumbent = cand, obj
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


def max_img(gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Upload as many images as the budget affords, cheapest first."""
    g = np.asarray(gains, dtype=float)
    if np.any(g <= 0.0):
        raise ValueError("all channel gains must be positive")
    t_frames = g.size
    cost_img = activation_powers(np.ones(t_frames), g, cfg)
    cost_pose = activation_powers(np.zeros(t_frames), g, cfg)
    budget = t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
    x = np.zeros(t_frames)
    used = cost_pose.sum()
    for t in np.argsort(cost_img - cost_pose, kind="stable"):
        step = cost_img[t] - cost_pose[t]
        if used + step <= budget:
            x[t] = 1.0
            used += step
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


def all_upload(gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Upload every frame at activation power, budget or not."""
    g = np.asarray(gains, dtype=float)
    x = np.ones(g.size)
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


def no_upload(gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Send only poses; rendering carries every frame."""
    g = np.asarray(gains, dtype=float)
    x = np.zeros(g.size)
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


@lru_cache(maxsize=_ORACLE_MAX_FRAMES)
def _enumerate_switches(t_frames: int) -> np.ndarray:
    bits = (np.arange(2 ** t_frames, dtype=np.int64)[:, None]
            >> np.arange(t_frames)) & 1
    out = bits.astype(float)
    out.flags.writeable = False
    return out


def exhaustive_oracle(losses: np.ndarray, gains: np.ndarray, cfg: ScenarioConfig,
                      variant: str = "pgs", l_th: Optional[float] = None,
                      estimates: Optional[np.ndarray] = None,
                      omega2: Optional[np.ndarray | float] = None,
                      power_cap: Optional[float] = None) -> Allocation:
    """Optimal allocation by enumerating all switch patterns (small horizons).

    Variants: ``pgs`` (min mean loss, budgeted, activation powers),
    ``qgs_prime`` (min mean power, per-frame distortion cap) and
    ``pgs_robust`` (min mean loss, budgeted, per-frame outage powers).
    Ties break toward lower total power, then lower pattern index.
    """
    lv, g = _check_inputs(losses, gains)
    t_frames = lv.size
    if t_frames > _ORACLE_MAX_FRAMES:
        raise ValueError(f"oracle enumeration is capped at {_ORACLE_MAX_FRAMES} frames")
    masks = _enumerate_switches(t_frames)

    if variant == "pgs_robust":
        if estimates is None or omega2 is None:
            raise ValueError("pgs_robust needs estimates and omega2")
        est = np.asarray(estimates, dtype=complex)
        om = np.broadcast_to(np.asarray(omega2, dtype=float), est.shape)
        cap = power_cap if power_cap is not None else t_frames * cfg.power_budget_watt
        p_img = np.array([min_power_outage(1.0, est[t], om[t], cfg.outage_target,
                                           cfg, cap) for t in range(t_frames)])
        p_pose = np.array([min_power_outage(0.0, est[t], om[t], cfg.outage_target,
                                            cfg, cap) for t in range(t_frames)])
    else:
        p_img = activation_powers(np.ones(t_frames), g, cfg)
        p_pose = activation_powers(np.zeros(t_frames), g, cfg)

    # Frames whose outage power is uncapped (inf) poison 0*inf products, so
    # mask them out of the sums and rule out the patterns that select them.
    img_bad = ~np.isfinite(p_img)
    pose_bad = ~np.isfinite(p_pose)
    total_power = (masks @ np.where(img_bad, 0.0, p_img)
                   + (1.0 - masks) @ np.where(pose_bad, 0.0, p_pose))
    selects_bad = ((masks @ img_bad.astype(float)
                    + (1.0 - masks) @ pose_bad.astype(float)) > 0.0)
    total_power = np.where(selects_bad, np.inf, total_power)
    residual = (1.0 - masks) @ lv / t_frames

    if variant in ("pgs", "pgs_robust"):
        feasible = total_power <= t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
        objective = np.where(feasible, residual, np.inf)
    elif variant == "qgs_prime":
        if l_th is None:
            raise ValueError("qgs_prime needs l_th")
        feasible = np.all(masks + (lv <= l_th)[None, :] >= 1.0, axis=1)
        objective = np.where(feasible, total_power / t_frames, np.inf)
    else:
        raise ValueError(f"unknown oracle variant: {variant!r}")

    if not np.any(np.isfinite(objective)):
        raise InfeasibleError(f"no feasible switch pattern for variant {variant!r}")
    best = int(np.lexsort((np.arange(masks.shape[0]), total_power, objective))[0])
    x = masks[best]
    p = np.where(x == 1.0, p_img, p_pose)
    return Allocation(x=x, p=p, is_binary=True)
