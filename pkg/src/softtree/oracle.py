"""Optimal-dispatch references for a single day.

Two independent routes to the best achievable cost over the discrete action
grid: brute-force enumeration of every action sequence (exact, exponential)
and backward induction over a rounded energy grid (fast, approximate to the
grid pitch). Both drive the real environment step function, and both report
the cost obtained by replaying the chosen actions through the environment,
so a plan is always self-consistent. These references have perfect
foresight of the day and bound what any causal policy can achieve.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .hems import BatteryConfig, HemsEnv, TariffConfig
from .profiles import ProfileDay, ProfileSet, T_HOURS

EXHAUSTIVE_LIMIT = 10_000_000


@dataclass(frozen=True)
class PlanResult:
    """An action plan with its replayed cost and energy trajectory."""

    total_cost: float
    actions: list
    energies: list  # stored energy before each step plus the final level


def _single_day_env(
    day: ProfileDay,
    battery: BatteryConfig,
    tariff: TariffConfig,
    dt: float,
    horizon: int,
) -> HemsEnv:
    return HemsEnv(
        ProfileSet([day], ["both"]), battery, tariff, dt=dt, horizon=horizon
    )


def replay(env: HemsEnv, actions, e0: float = 0.0) -> PlanResult:
    """Run an action sequence through the environment and tally the cost."""
    env.reset(0, e0=e0)
    energies = [env.e]
    total = 0.0
    for a in actions:
        res = env.step(int(a))
        total += res.cost
        energies.append(env.e)
    return PlanResult(total_cost=total, actions=[int(a) for a in actions], energies=energies)


def exhaustive_optimal(
    day: ProfileDay,
    horizon: int,
    battery: BatteryConfig | None = None,
    tariff: TariffConfig | None = None,
    dt: float = 1.0,
    e0: float = 0.0,
) -> PlanResult:
    """Exact optimum by enumerating all action sequences of length ``horizon``.

    Ties resolve to the lexicographically smallest sequence. Refuses
    problems beyond EXHAUSTIVE_LIMIT sequences; use :func:`dp_optimal` for
    those.
    """
    battery = battery if battery is not None else BatteryConfig()
    tariff = tariff if tariff is not None else TariffConfig()
    n_actions = battery.n_actions
    n_sequences = n_actions ** horizon
    if n_sequences > EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"{n_actions}^{horizon} = {n_sequences} sequences exceed the "
            f"enumeration limit {EXHAUSTIVE_LIMIT}; use dp_optimal instead"
        )
    env = _single_day_env(day, battery, tariff, dt, horizon)
    best_cost = np.inf
    best_actions = None
    for actions in itertools.product(range(n_actions), repeat=horizon):
        env.reset(0, e0=e0)
        total = 0.0
        for a in actions:
            total += env.step(a).cost
        if total < best_cost:
            best_cost = total
            best_actions = actions
    return replay(env, best_actions, e0=e0)


def dp_optimal(
    day: ProfileDay,
    battery: BatteryConfig | None = None,
    tariff: TariffConfig | None = None,
    e_grid: float = 0.01,
    dt: float = 1.0,
    e0: float = 0.0,
    horizon: int | None = None,
) -> PlanResult:
    """Near-exact optimum by backward induction on a rounded energy grid.

    The stored energy is rounded to the nearest multiple of ``e_grid``
    after every transition, which bounds the value error by roughly
    horizon * lambda_max * e_grid / eta. The returned cost comes from
    replaying the extracted plan through the real environment, so it is
    always achievable (and hence an upper bound on the true optimum).
    """
    battery = battery if battery is not None else BatteryConfig()
    tariff = tariff if tariff is not None else TariffConfig()
    if e_grid <= 0:
        raise ValueError(f"e_grid must be positive, got {e_grid}")
    horizon = T_HOURS if horizon is None else int(horizon)
    if not 1 <= horizon <= T_HOURS:
        raise ValueError(f"horizon {horizon} outside 1..{T_HOURS}")

    n_levels = int(round(battery.e_max / e_grid)) + 1
    levels = np.linspace(0.0, battery.e_max, n_levels) if battery.e_max > 0 else np.zeros(1)
    if battery.e_max <= 0:
        n_levels = 1
    pitch = battery.e_max / (n_levels - 1) if n_levels > 1 else 1.0
    env = _single_day_env(day, battery, tariff, dt, horizon)

    from .hems import aggregate_power, battery_step, capacity_cost, energy_cost

    n_actions = battery.n_actions
    value = np.zeros(n_levels)
    choice = np.zeros((horizon, n_levels), dtype=np.int64)
    # transitions depend on the level only, costs on (level, hour); cache per level
    next_level = np.zeros((n_levels, n_actions), dtype=np.int64)
    applied = np.zeros((n_levels, n_actions))
    for s, e in enumerate(levels):
        for k, g in enumerate(battery.action_grid):
            e2, ua = battery_step(float(e), g * battery.p_max, battery, dt)
            next_level[s, k] = min(max(int(round(e2 / pitch)), 0), n_levels - 1)
            applied[s, k] = ua
    for t in range(horizon - 1, -1, -1):
        lam = float(day.lambda_con[t])
        lam_inj = tariff.injection_ratio * lam
        p_con = float(day.p_con[t])
        p_pv = float(day.p_pv[t])
        new_value = np.empty(n_levels)
        for s in range(n_levels):
            best = np.inf
            best_k = 0
            for k in range(n_actions):
                p_agg = aggregate_power(p_con, p_pv, applied[s, k])
                cost = (
                    energy_cost(p_agg, lam, lam_inj, dt)
                    + capacity_cost(p_agg, tariff)
                    + value[next_level[s, k]]
                )
                if cost < best:
                    best = cost
                    best_k = k
            new_value[s] = best
            choice[t, s] = best_k
        value = new_value

    s = min(max(int(round(e0 / pitch)), 0), n_levels - 1)
    actions = []
    for t in range(horizon):
        k = int(choice[t, s])
        actions.append(k)
        s = int(next_level[s, k])
    return replay(env, actions, e0=e0)


def no_battery_cost(
    day: ProfileDay,
    tariff: TariffConfig | None = None,
    battery: BatteryConfig | None = None,
    dt: float = 1.0,
    horizon: int | None = None,
) -> float:
    """Cost of the always-idle plan from an empty store (pure passthrough)."""
    battery = battery if battery is not None else BatteryConfig()
    tariff = tariff if tariff is not None else TariffConfig()
    horizon = T_HOURS if horizon is None else int(horizon)
    env = _single_day_env(day, battery, tariff, dt, horizon)
    idle = battery.action_grid.index(0.0)
    return replay(env, [idle] * horizon, e0=0.0).total_cost
