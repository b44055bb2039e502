"""Penalty/DC solver for the loss-minimising content-switching problem.

The mixed-integer problem (choose per frame between uploading the image or
only the pose, plus transmit powers, under per-frame rate constraints and an
average power budget) is handled in three stages:

1. a ranking warm start that uploads the highest-loss frames the budget
   affords, with constraint-activating powers;
2. difference-of-convex iterations on the box relaxation with a concave
   zero-one penalty, linearised around the previous iterate, each subproblem
   solved exactly by Lagrangian dual bisection after eliminating the powers
   through constraint activation;
3. rounding with budget repair, keeping the best binary point visited and
   finishing with a greedy exchange pass.

The penalty weight starts soft (so the first iterations track the pure
relaxation) and is annealed harder until the iterate is numerically binary.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    Allocation,
    BUDGET_RTOL,
    ScenarioConfig,
    SolveReport,
    binary_violation,
    objective_gsmr,
)

__all__ = [
    "ApoSettings",
    "InfeasibleError",
    "activation_powers",
    "ranking_init",
    "dc_surrogate",
    "solve_dc_subproblem",
    "SubproblemSolution",
    "binarize_and_repair",
    "apo_solve",
]


class InfeasibleError(RuntimeError):
    """Raised when no allocation satisfies the constraints."""


@dataclass(frozen=True)
class ApoSettings:
    """Solver knobs.

    ``beta`` is the initial penalty weight; ``None`` picks a soft scale from
    the loss trace (penalty gradient 1/beta at 5 % of the median positive
    per-frame loss coefficient). ``beta_shrink`` multiplies ``beta`` whenever
    a converged iterate is still fractional, strengthening the penalty.
    """

    beta: Optional[float] = None
    max_iterations: int = 100
    convergence_tol: float = 1e-4   # on ||x_new - x_old||
    binary_tol: float = 0.01        # on mean x(1-x)
    dual_tol: float = 1e-12         # budget activation, relative
    beta_shrink: float = 0.25
    phase_iterations: int = 2
    polish: bool = True

    def __post_init__(self) -> None:
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive when given")
        for name in ("convergence_tol", "binary_tol", "dual_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.beta_shrink < 1.0:
            raise ValueError("beta_shrink must lie in (0, 1)")
        if self.max_iterations < 1 or self.phase_iterations < 1:
            raise ValueError("iteration limits must be >= 1")


# ---------------------------------------------------------------------------
# Power elimination
# ---------------------------------------------------------------------------


def activation_powers(x: np.ndarray, gains: np.ndarray,
                      cfg: ScenarioConfig) -> np.ndarray:
    """Per-frame powers that activate the rate constraint at switch values x.

    ``p_t(x_t) = (sigma^2 / g_t) * (2^(((I-S) x_t + S) / (tau B)) - 1)`` --
    convex and increasing in ``x_t``, which is what makes the power variables
    eliminable inside every subproblem.
    """
    xv = np.asarray(x, dtype=float)
    g = np.asarray(gains, dtype=float)
    payload = cfg.payload_bits(xv)
    return (cfg.noise_power_watt / g) * (2.0 ** (payload / cfg.tau_b) - 1.0)


def _check_inputs(losses: np.ndarray, gains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lv = np.asarray(losses, dtype=float)
    g = np.asarray(gains, dtype=float)
    if lv.shape != g.shape or lv.ndim != 1:
        raise ValueError("losses and gains must be 1-D arrays of equal length")
    if np.any(g <= 0.0):
        raise ValueError("all channel gains must be positive")
    if np.any(lv < 0.0):
        raise ValueError("losses must be nonnegative")
    return lv, g


# ---------------------------------------------------------------------------
# Ranking initialisation
# ---------------------------------------------------------------------------


def ranking_init(losses: np.ndarray, gains: np.ndarray,
                 cfg: ScenarioConfig) -> Allocation:
    """Upload the highest-loss frames the budget affords.

    Frames are sorted by loss (descending, ties by frame index); the number of
    uploads is the largest prefix of that order whose activation powers fit the
    total budget, found by bisection over the prefix length. Frames with zero
    loss never upload: switching them gains nothing and only spends power.
    """
    lv, g = _check_inputs(losses, gains)
    t_frames = lv.size
    order = np.lexsort((np.arange(t_frames), -lv))
    cost_img = activation_powers(np.ones(t_frames), g, cfg)
    cost_pose = activation_powers(np.zeros(t_frames), g, cfg)
    budget = t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)

    # Cumulative cost of uploading the mu highest-loss frames, pose for the rest.
    upgrade = np.concatenate(([0.0], np.cumsum((cost_img - cost_pose)[order])))
    total = cost_pose.sum() + upgrade
    if total[0] > budget:
        raise InfeasibleError(
            "pose-only transmission already exceeds the power budget")
    mu_cap = int(np.sum(lv > 0.0))

    lo, hi = 0, t_frames
    while lo < hi:                      # largest mu with total[mu] <= budget
        mid = (lo + hi + 1) // 2
        if total[mid] <= budget:
            lo = mid
        else:
            hi = mid - 1
    mu = min(lo, mu_cap)

    x = np.zeros(t_frames)
    x[order[:mu]] = 1.0
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


# ---------------------------------------------------------------------------
# DC surrogate and subproblem
# ---------------------------------------------------------------------------


def dc_surrogate(x: np.ndarray, x_star: np.ndarray, beta: float) -> float:
    """Affine majoriser of the zero-one penalty, expanded around ``x_star``.

    Dominates the penalty everywhere, touches it at ``x_star`` with matching
    gradient; the gap is exactly ``(1/beta) * sum (x - x_star)^2``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    xv = np.asarray(x, dtype=float)
    xs = np.asarray(x_star, dtype=float)
    if xv.shape != xs.shape:
        raise ValueError("x and x_star must have the same length")
    return float(np.sum(xv / beta - 2.0 * xs * xv / beta + xs * xs / beta))


@dataclass(frozen=True)
class SubproblemSolution:
    """Exact minimiser of one convex DC subproblem plus its dual state."""

    allocation: Allocation
    dual: float
    budget_gap_watt: float  # total budget minus total power at the solution


def _coefficients(x_star: np.ndarray, losses: np.ndarray, beta: float) -> np.ndarray:
    t_frames = losses.size
    c = -losses / t_frames
    if math.isfinite(beta):
        c = c + (1.0 - 2.0 * np.asarray(x_star, dtype=float)) / beta
    return c


def _x_of_dual(mu: float, c: np.ndarray, gains: np.ndarray,
               cfg: ScenarioConfig) -> np.ndarray:
    """Per-frame minimiser of ``c_t x + mu f_t(x)`` over [0, 1].

    ``f_t`` is the activation power, strictly convex in x, so for ``mu > 0``
    the stationary point is closed-form; negative-coefficient frames saturate
    at 1 when the budget multiplier vanishes. Ties ``c_t == 0`` resolve to 0,
    which saves power at equal objective.
    """
    if mu <= 0.0:
        return np.where(c < 0.0, 1.0, 0.0)
    span = cfg.image_bits - cfg.pose_bits
    slope0 = (cfg.noise_power_watt / gains) * math.log(2.0) * span / cfg.tau_b
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(c < 0.0, -c / (mu * slope0), 1.0)
        x_int = (cfg.tau_b * np.log2(arg) - cfg.pose_bits) / span
    return np.where(c >= 0.0, 0.0, np.clip(x_int, 0.0, 1.0))


def solve_dc_subproblem(x_star: np.ndarray, losses: np.ndarray,
                        gains: np.ndarray, cfg: ScenarioConfig,
                        settings: ApoSettings | None = None,
                        beta: float | None = None) -> SubproblemSolution:
    """Exactly minimise one convex subproblem of the DC iteration.

    The subproblem is ``min sum c_t x_t`` subject to the eliminated-power
    budget ``sum f_t(x_t) <= T P`` and the box, where
    ``c_t = -L_t/T + (1 - 2 x*_t)/beta``. Solved by bisection on the budget
    multiplier; each dual evaluation is a closed-form per-frame minimisation.
    ``beta = inf`` drops the penalty term (pure relaxation).
    """
    settings = settings or ApoSettings()
    lv, g = _check_inputs(losses, gains)
    if beta is None:
        beta = settings.beta if settings.beta is not None else math.inf
    t_frames = lv.size
    budget = t_frames * cfg.power_budget_watt
    if activation_powers(np.zeros(t_frames), g, cfg).sum() > budget * (1.0 + BUDGET_RTOL):
        raise InfeasibleError("pose-only transmission already exceeds the budget")

    c = _coefficients(np.asarray(x_star, dtype=float), lv, beta)

    def used(mu: float) -> tuple[np.ndarray, float]:
        x = _x_of_dual(mu, c, g, cfg)
        return x, float(activation_powers(x, g, cfg).sum())

    x0, total0 = used(0.0)
    if total0 <= budget:
        return SubproblemSolution(
            allocation=Allocation(x=x0, p=activation_powers(x0, g, cfg),
                                  is_binary=bool(np.all((x0 == 0) | (x0 == 1)))),
            dual=0.0,
            budget_gap_watt=budget - total0,
        )

    lo, hi = 0.0, 1.0
    while used(hi)[1] > budget:
        hi *= 2.0
        if hi > 1e60:
            raise InfeasibleError("budget multiplier diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if used(mid)[1] > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= settings.dual_tol * hi:
            break
    x, total = used(hi)
    return SubproblemSolution(
        allocation=Allocation(x=x, p=activation_powers(x, g, cfg),
                              is_binary=bool(np.all((x == 0) | (x == 1)))),
        dual=hi,
        budget_gap_watt=budget - total,
    )


# ---------------------------------------------------------------------------
# Binarisation, repair, greedy exchange
# ---------------------------------------------------------------------------


def binarize_and_repair(relaxed: Allocation, losses: np.ndarray,
                        gains: np.ndarray, cfg: ScenarioConfig) -> Allocation:
    """Round switch values, then drop the cheapest uploads until feasible.

    Rounds at 0.5, rebuilds activation powers for the rounded payloads, and
    while the average power exceeds the budget flips the uploading frame with
    the smallest loss back to pose.
    """
    lv, g = _check_inputs(losses, gains)
    x = np.round(np.asarray(relaxed.x, dtype=float))
    cost_img = activation_powers(np.ones_like(x), g, cfg)
    cost_pose = activation_powers(np.zeros_like(x), g, cfg)
    budget = x.size * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
    total = float(x @ cost_img + (1.0 - x) @ cost_pose)
    while total > budget:
        ones = np.flatnonzero(x == 1.0)
        if ones.size == 0:
            raise InfeasibleError(
                "pose-only transmission already exceeds the power budget")
        drop = ones[np.argmin(lv[ones])]
        x[drop] = 0.0
        total += cost_pose[drop] - cost_img[drop]
    return Allocation(x=x, p=activation_powers(x, g, cfg), is_binary=True)


def _density_fill(losses: np.ndarray, gains: np.ndarray,
                  cfg: ScenarioConfig) -> np.ndarray:
    """Feasible binary point that packs uploads by loss per watt."""
    t_frames = losses.size
    cost_img = activation_powers(np.ones(t_frames), gains, cfg)
    cost_pose = activation_powers(np.zeros(t_frames), gains, cfg)
    w = cost_img - cost_pose
    budget = t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
    x = np.zeros(t_frames)
    used = float(cost_pose.sum())
    density = np.where(losses > 0.0, losses / w, -1.0)
    for t in np.lexsort((np.arange(t_frames), -density)):
        if density[t] <= 0.0:
            break
        if used + w[t] <= budget:
            x[t] = 1.0
            used += w[t]
    return x


def _greedy_exchange(x_in: np.ndarray, losses: np.ndarray, gains: np.ndarray,
                     cfg: ScenarioConfig) -> np.ndarray:
    """Improve a feasible binary point by fills and exchanges.

    Repeats until stationary: absorb budget slack with the highest-loss
    affordable upload; otherwise take the best loss-improving 1-for-1 swap;
    for short horizons also try 1-for-2 and 2-for-1 exchanges. Every move
    strictly lowers the objective, so the loop terminates.
    """
    t_frames = x_in.size
    cost_img = activation_powers(np.ones(t_frames), gains, cfg)
    cost_pose = activation_powers(np.zeros(t_frames), gains, cfg)
    w = cost_img - cost_pose
    budget = t_frames * cfg.power_budget_watt * (1.0 + BUDGET_RTOL)
    x = x_in.copy()
    used = float(x @ cost_img + (1.0 - x) @ cost_pose)
    deep = t_frames <= 32

    for _ in range(8 * t_frames):
        zeros = np.flatnonzero((x == 0.0) & (losses > 0.0))
        afford = zeros[used + w[zeros] <= budget] if zeros.size else zeros
        if afford.size:
            t = afford[np.argmax(losses[afford])]
            x[t] = 1.0
            used += w[t]
            continue
        ones = np.flatnonzero(x == 1.0)
        if not ones.size or not zeros.size:
            break
        slack = budget - used
        gain_mat = losses[zeros][None, :] - losses[ones][:, None]
        need_mat = w[zeros][None, :] - w[ones][:, None]
        ok = (gain_mat > 1e-15) & (need_mat <= slack)
        move = None
        if ok.any():
            i, j = np.unravel_index(np.where(ok, gain_mat, -np.inf).argmax(),
                                    gain_mat.shape)
            move = ([ones[i]], [zeros[j]])
        elif deep:
            best = 1e-15
            for i in ones:
                room = slack + w[i]
                for a in range(zeros.size):
                    for b in range(a + 1, zeros.size):
                        ja, jb = zeros[a], zeros[b]
                        if w[ja] + w[jb] <= room:
                            g2 = losses[ja] + losses[jb] - losses[i]
                            if g2 > best:
                                best, move = g2, ([i], [ja, jb])
            for a in range(ones.size):
                for b in range(a + 1, ones.size):
                    ia, ib = ones[a], ones[b]
                    room = slack + w[ia] + w[ib]
                    for j in zeros:
                        if w[j] <= room:
                            g2 = losses[j] - losses[ia] - losses[ib]
                            if g2 > best:
                                best, move = g2, ([ia, ib], [j])
        if move is None:
            break
        outs, ins = move
        for t in outs:
            x[t] = 0.0
            used -= w[t]
        for t in ins:
            x[t] = 1.0
            used += w[t]
    return x


# ---------------------------------------------------------------------------
# Full solver
# ---------------------------------------------------------------------------


def _auto_beta(losses: np.ndarray) -> float:
    pos = losses[losses > 0.0]
    if pos.size == 0:
        return 1.0
    # Penalty gradient 1/beta at 5 % of the median loss coefficient: soft
    # enough that the first iterations follow the relaxation.
    return losses.size / (0.05 * float(np.median(pos)))


def apo_solve(losses: np.ndarray, gains: np.ndarray, cfg: ScenarioConfig,
              settings: ApoSettings | None = None) -> SolveReport:
    """Run the full penalty/DC pipeline and return the best binary allocation.

    Starts from the ranking allocation, solves the unpenalised relaxation
    once, then anneals the zero-one penalty (shrinking ``beta``) with a couple
    of DC iterations per level until the iterate is numerically binary or the
    iteration budget runs out. Every iterate is rounded and repaired; the
    incumbent is the best binary point seen, optionally improved by a final
    greedy exchange pass. The reported trajectory tracks the incumbent
    objective, hence it is non-increasing.
    """
    settings = settings or ApoSettings()
    lv, g = _check_inputs(losses, gains)
    t0 = time.perf_counter()

    init = ranking_init(lv, g, cfg)
    best_x = np.array(init.x)
    best_obj = objective_gsmr(best_x, lv)
    trajectory = [best_obj]
    iterations = 0
    final_delta = float("nan")
    final_gap = float("nan")

    if np.any(lv > 0.0):
        beta = settings.beta if settings.beta is not None else (
            cfg.penalty_beta if cfg.penalty_beta is not None else _auto_beta(lv))
        beta_floor = lv.size / (1e7 * float(np.max(lv)))
        x = np.array(init.x, dtype=float)

        def consider(x_relaxed: np.ndarray) -> None:
            nonlocal best_x, best_obj
            cand = binarize_and_repair(
                Allocation(x=x_relaxed, p=activation_powers(x_relaxed, g, cfg),
                           is_binary=False),
                lv, g, cfg)
            obj = objective_gsmr(cand.x, lv)
            if obj < best_obj:
                best_obj = obj
                best_x = np.array(cand.x)

        # Unpenalised relaxation first: its rounding is the natural incumbent
        # and the DC iterations then anneal it toward a binary point.
        sol = solve_dc_subproblem(x, lv, g, cfg, settings, beta=math.inf)
        x = np.array(sol.allocation.x)
        iterations += 1
        consider(x)
        trajectory.append(best_obj)

        delta = math.inf
        at_floor = False
        final_gap = binary_violation(x)
        while iterations < settings.max_iterations:
            for _ in range(settings.phase_iterations):
                sol = solve_dc_subproblem(x, lv, g, cfg, settings, beta=beta)
                x_new = np.array(sol.allocation.x)
                iterations += 1
                delta = float(np.linalg.norm(x_new - x))
                x = x_new
                consider(x)
                trajectory.append(best_obj)
                if delta <= settings.convergence_tol or iterations >= settings.max_iterations:
                    break
            final_delta = delta
            final_gap = binary_violation(x)
            if delta <= settings.convergence_tol:
                # Stationary: done if binary enough, or if the penalty is
                # already as strong as it is allowed to get.
                if final_gap <= settings.binary_tol or at_floor:
                    break
            if not at_floor:
                beta *= settings.beta_shrink
                if beta <= beta_floor:
                    beta = beta_floor
                    at_floor = True

        if settings.polish:
            # Exchange from three basins: the DC incumbent, the ranking
            # start, and a density packing. They disagree exactly on the
            # lumpy instances where a single pass gets stuck.
            for cand in (best_x, np.array(init.x),
                         _density_fill(lv, g, cfg)):
                polished = _greedy_exchange(cand, lv, g, cfg)
                obj = objective_gsmr(polished, lv)
                if obj < best_obj:
                    best_obj = obj
                    best_x = polished
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
        convergence_delta=final_delta,
        binary_gap=final_gap,
    )
