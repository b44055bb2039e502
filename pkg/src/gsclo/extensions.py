"""Power-minimising variants and the multi-robot reduction.

Two quality-constrained duals of the nominal problem: minimise mean transmit
power subject to an average distortion cap (solved with the same penalty/DC
machinery, with objective and constraint roles swapped) or subject to a
per-frame cap (closed form: upload exactly the frames whose rendering loss
exceeds the threshold). The gap between all-upload operation and the
threshold rule is the power saving attributable to the server-side model.

Multiple robots reduce to independent single-robot solves on zero-forcing
effective gains.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .apo import (
    ApoSettings,
    InfeasibleError,
    _check_inputs,
    activation_powers,
    apo_solve,
)
from .channel import MultiAntennaChannel, zf_effective_gains
from .core import Allocation, ScenarioConfig, SolveReport, binary_violation

__all__ = [
    "QoeSettings",
    "qgs_solve",
    "qgs_prime_closed_form",
    "power_saving_factor",
    "mgs_solve",
]

_QOE_RTOL = 1e-9


@dataclass(frozen=True)
class QoeSettings:
    """Distortion budget for the power-minimising problems."""

    loss_threshold: float = 0.03
    mode: str = "average"        # "average" or "per_frame"

    def __post_init__(self) -> None:
        if self.loss_threshold < 0:
            raise ValueError("loss_threshold must be >= 0")
        if self.mode not in ("average", "per_frame"):
            raise ValueError("mode must be 'average' or 'per_frame'")


# ---------------------------------------------------------------------------
# Average-QoE power minimisation
# ---------------------------------------------------------------------------


def _residual_loss(x: np.ndarray, losses: np.ndarray) -> float:
    return float(np.sum(losses * (1.0 - x)))


def _qoe_budget(losses: np.ndarray, l_th: float) -> float:
    return losses.size * l_th


def _x_of_qoe_dual(nu: float, tilt_term: np.ndarray, losses: np.ndarray,
                   gains: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Per-frame minimiser of ``f_t(x)/T + tilt_t x - nu L_t x`` over [0, 1]."""
    t_frames = losses.size
    span = cfg.image_bits - cfg.pose_bits
    slope0 = (cfg.noise_power_watt / gains) * math.log(2.0) * span / cfg.tau_b
    rhs = t_frames * (nu * losses - tilt_term)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(rhs > 0.0, rhs / slope0, 1.0)
        x_int = (cfg.tau_b * np.log2(arg) - cfg.pose_bits) / span
    return np.where(rhs <= 0.0, 0.0, np.clip(x_int, 0.0, 1.0))


def _solve_qoe_subproblem(x_star: np.ndarray, losses: np.ndarray,
                          gains: np.ndarray, cfg: ScenarioConfig,
                          tilt: float, l_th: float) -> np.ndarray:
    """Exact minimiser of one DC subproblem of the power-minimising variant.

    Minimises mean activation power plus the linearised zero-one penalty,
    subject to the average-distortion budget, by bisecting the budget
    multiplier. ``tilt = 0`` gives the pure relaxation.
    """
    tilt_term = tilt * (1.0 - 2.0 * np.asarray(x_star, dtype=float))
    budget = _qoe_budget(losses, l_th)

    def residual(nu: float) -> tuple[np.ndarray, float]:
        x = _x_of_qoe_dual(nu, tilt_term, losses, gains, cfg)
        return x, _residual_loss(x, losses)

    x0, r0 = residual(0.0)
    if r0 <= budget * (1.0 + _QOE_RTOL):
        return x0
    lo, hi = 0.0, 1.0
    while residual(hi)[1] > budget:
        hi *= 2.0
        if hi > 1e60:
            raise InfeasibleError("distortion budget cannot be met")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid)[1] > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    return residual(hi)[0]


def _upgrade_costs(losses: np.ndarray, gains: np.ndarray,
                   cfg: ScenarioConfig) -> np.ndarray:
    return (activation_powers(np.ones_like(losses), gains, cfg)
            - activation_powers(np.zeros_like(losses), gains, cfg))


def _qoe_repair(x: np.ndarray, losses: np.ndarray, gains: np.ndarray,
                cfg: ScenarioConfig, l_th: float) -> np.ndarray:
    """Flip pose frames to upload until the distortion budget holds.

    Flip order is loss removed per watt of upgrade cost, which maximises the
    residual reduction per unit power; at equal channels this is exactly
    descending-loss order.
    """
    out = np.round(np.asarray(x, dtype=float))
    budget = _qoe_budget(losses, l_th)
    density = losses / _upgrade_costs(losses, gains, cfg)
    order = np.lexsort((np.arange(losses.size), -density))
    pos = 0
    while _residual_loss(out, losses) > budget * (1.0 + _QOE_RTOL):
        while pos < order.size and out[order[pos]] == 1.0:
            pos += 1
        if pos == order.size:
            raise InfeasibleError("distortion budget unreachable even all-upload")
        out[order[pos]] = 1.0
    return out


def _qoe_exchange(x_in: np.ndarray, losses: np.ndarray, gains: np.ndarray,
                  cfg: ScenarioConfig, l_th: float) -> np.ndarray:
    """Greedy power reduction while the distortion budget keeps holding.

    Moves, best saving first: drop an upload, 1-for-1 swap toward a cheaper
    channel, and for short horizons 1-for-2 and 2-for-1 exchanges (an
    expensive upload is often best replaced by two cheap ones that jointly
    cover its loss).
    """
    x = x_in.copy()
    w = _upgrade_costs(losses, gains, cfg)
    budget = _qoe_budget(losses, l_th) * (1.0 + _QOE_RTOL)
    deep = x.size <= 32
    for _ in range(8 * x.size):
        resid = _residual_loss(x, losses)
        slack = budget - resid
        ones = np.flatnonzero(x == 1.0)
        zeros = np.flatnonzero(x == 0.0)
        if not ones.size:
            break
        move = None
        best = 1e-21
        droppable = ones[losses[ones] <= slack]
        if droppable.size:
            i = droppable[np.argmax(w[droppable])]
            best, move = float(w[i]), ([i], [])
        if zeros.size:
            save_mat = w[ones][:, None] - w[zeros][None, :]
            added = losses[ones][:, None] - losses[zeros][None, :]
            ok = (save_mat > best) & (added <= slack)
            if ok.any():
                i, j = np.unravel_index(np.where(ok, save_mat, -np.inf).argmax(),
                                        save_mat.shape)
                best = float(save_mat[i, j])
                move = ([ones[i]], [zeros[j]])
            if deep:
                for i in ones:
                    for a in range(zeros.size):
                        for b in range(a + 1, zeros.size):
                            ja, jb = zeros[a], zeros[b]
                            save = w[i] - w[ja] - w[jb]
                            if save > best and (losses[i] - losses[ja]
                                                - losses[jb]) <= slack:
                                best, move = float(save), ([i], [ja, jb])
                for a in range(ones.size):
                    for b in range(a + 1, ones.size):
                        ia, ib = ones[a], ones[b]
                        for j in zeros:
                            save = w[ia] + w[ib] - w[j]
                            if save > best and (losses[ia] + losses[ib]
                                                - losses[j]) <= slack:
                                best, move = float(save), ([ia, ib], [j])
        if move is None:
            break
        outs, ins = move
        for i in outs:
            x[i] = 0.0
        for j in ins:
            x[j] = 1.0
    return x


def qgs_solve(losses: np.ndarray, gains: np.ndarray, cfg: ScenarioConfig,
              qoe: QoeSettings | None = None,
              apo_settings: ApoSettings | None = None) -> SolveReport:
    """Minimise mean transmit power under an average distortion budget.

    Same pipeline as the loss-minimising solver with the roles swapped:
    powers are eliminated by constraint activation, the zero-one penalty is
    linearised and annealed, each subproblem is solved by dual bisection on
    the distortion constraint, and rounding repairs toward the distortion
    side (flipping the highest-loss pose frames to upload). The reported
    objective is the mean power of the returned binary allocation.
    """
    qoe = qoe or QoeSettings()
    settings = apo_settings or ApoSettings()
    lv, g = _check_inputs(losses, gains)
    t0 = time.perf_counter()
    l_th = qoe.loss_threshold
    t_frames = lv.size

    if qoe.mode == "per_frame":
        # Per-frame caps decouple: the closed form is exactly optimal.
        alloc = qgs_prime_closed_form(lv, g, cfg, l_th)
        obj = float(np.mean(alloc.p))
        return SolveReport(
            allocation=alloc, objective=obj, objective_trajectory=(obj,),
            iterations=0, feasible=True,
            wall_time=time.perf_counter() - t0)

    # Greedy warm start: repair the all-pose pattern (loss-per-watt order).
    warm_x = _qoe_repair(np.zeros(t_frames), lv, g, cfg, l_th)
    x = warm_x.copy()

    def mean_power(xb: np.ndarray) -> float:
        return float(np.mean(activation_powers(xb, g, cfg)))

    best_x = x.copy()
    best_obj = mean_power(x)
    trajectory = [best_obj]
    iterations = 0

    img_power = activation_powers(np.ones(t_frames), g, cfg)
    tilt = 0.05 * float(np.median(img_power)) / t_frames
    tilt_cap = 1e7 * float(np.max(img_power)) / t_frames

    def consider(x_relaxed: np.ndarray) -> None:
        nonlocal best_x, best_obj
        cand = _qoe_repair(x_relaxed, lv, g, cfg, l_th)
        obj = mean_power(cand)
        if obj < best_obj:
            best_obj, best_x = obj, cand

    x = _solve_qoe_subproblem(x, lv, g, cfg, 0.0, l_th)
    iterations += 1
    consider(x)
    trajectory.append(best_obj)

    delta = math.inf
    while iterations < settings.max_iterations:
        for _ in range(settings.phase_iterations):
            x_new = _solve_qoe_subproblem(x, lv, g, cfg, tilt, l_th)
            iterations += 1
            delta = float(np.linalg.norm(x_new - x))
            x = x_new
            consider(x)
            trajectory.append(best_obj)
            if delta <= settings.convergence_tol or iterations >= settings.max_iterations:
                break
        if delta <= settings.convergence_tol and binary_violation(x) <= settings.binary_tol:
            break
        tilt /= settings.beta_shrink
        if tilt > tilt_cap:
            break

    if settings.polish:
        # The incumbent, the greedy warm start and the all-upload pattern sit
        # in different basins (one big upload versus several cheap ones, or
        # pure drop-down); polish each and keep the cheapest outcome.
        for cand in (best_x, warm_x, np.ones(t_frames)):
            polished = _qoe_exchange(cand, lv, g, cfg, l_th)
            if mean_power(polished) < best_obj:
                best_obj, best_x = mean_power(polished), polished
        trajectory.append(best_obj)

    alloc = Allocation(x=best_x, p=activation_powers(best_x, g, cfg),
                       is_binary=True)
    return SolveReport(
        allocation=alloc,
        objective=best_obj,
        objective_trajectory=tuple(trajectory),
        iterations=iterations,
        feasible=True,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Per-frame QoE: closed form
# ---------------------------------------------------------------------------


def qgs_prime_closed_form(losses: np.ndarray, gains: np.ndarray,
                          cfg: ScenarioConfig, l_th: float) -> Allocation:
    """Optimal allocation under a per-frame distortion cap.

    At the optimum the rate constraint activates, and the resulting power is
    monotone in the payload, so every frame independently uploads iff its
    rendering loss exceeds the threshold.
    """
    lv, g = _check_inputs(losses, gains)
    if l_th < 0:
        raise ValueError("l_th must be >= 0")
    x = (lv > l_th).astype(float)
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


def power_saving_factor(losses: np.ndarray, gains: np.ndarray,
                        cfg: ScenarioConfig, l_th: float) -> float:
    """Total power saved by threshold switching versus uploading everything.

    Each frame whose rendering is good enough (loss at or below the threshold)
    downgrades its payload from image to pose, saving
    ``(2^(I/(tau B)) - 2^(S/(tau B))) * sigma^2 / gain``. Equals the
    difference between all-upload activation powers and the per-frame-QoE
    optimum.
    """
    lv, g = _check_inputs(losses, gains)
    if l_th < 0:
        raise ValueError("l_th must be >= 0")
    saved = (2.0 ** (cfg.image_bits / cfg.tau_b)
             - 2.0 ** (cfg.pose_bits / cfg.tau_b)) * cfg.noise_power_watt / g
    return float(np.sum(np.where(lv <= l_th, saved, 0.0)))


def all_upload_powers(gains: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Activation powers of the upload-everything policy."""
    g = np.asarray(gains, dtype=float)
    return activation_powers(np.ones_like(g), g, cfg)


# ---------------------------------------------------------------------------
# Multi-robot reduction
# ---------------------------------------------------------------------------


def mgs_solve(per_robot_losses: np.ndarray,
              channels: Sequence[MultiAntennaChannel], cfg: ScenarioConfig,
              apo_settings: ApoSettings | None = None) -> list[SolveReport]:
    """Solve the multi-robot problem as independent per-robot runs.

    Zero forcing at the server removes inter-robot interference, leaving each
    robot a scalar channel with its effective gain; budgets are per robot, so
    the joint problem separates into one nominal solve per robot.
    """
    lv = np.asarray(per_robot_losses, dtype=float)
    if lv.ndim != 2:
        raise ValueError("per_robot_losses must be (num_robots, num_frames)")
    num_robots, num_frames = lv.shape
    if len(channels) != num_frames:
        raise ValueError("need one channel matrix per frame")
    eff = np.empty((num_frames, num_robots))
    for t, ch in enumerate(channels):
        if ch.num_robots != num_robots:
            raise ValueError(f"frame {t}: channel has {ch.num_robots} robots, "
                             f"expected {num_robots}")
        eff[t] = zf_effective_gains(ch)
    return [
        apo_solve(lv[k], eff[:, k], cfg, apo_settings)
        for k in range(num_robots)
    ]
