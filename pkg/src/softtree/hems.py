"""Home energy management simulator: one battery behind the meter.

Each hourly step the household draws its inflexible load, PV generates
(nonpositive power), and the battery charges or discharges at the commanded
power, clipped to whatever its state of charge admits. The step cost is the
energy term (consumption price on net import, a cheaper injection price on
net export) plus a capacity term that bills the aggregate power above a
contractual floor every step. Costs are in EUR; a negative cost is revenue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .profiles import ProfileDay, ProfileSet, T_HOURS


@dataclass(frozen=True)
class BatteryConfig:
    """Battery limits; efficiency is the round-trip value, split evenly
    between charge and discharge (one-way factor sqrt(eta_rt))."""

    e_max: float = 10.0  # kWh
    p_max: float = 4.0   # kW
    eta_rt: float = 0.9
    action_grid: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)

    def __post_init__(self) -> None:
        problems = []
        # e_max == 0 is allowed as the degenerate no-battery case
        if self.e_max < 0:
            problems.append(f"e_max must be nonnegative, got {self.e_max}")
        if self.p_max <= 0:
            problems.append(f"p_max must be positive, got {self.p_max}")
        if not 0.0 < self.eta_rt <= 1.0:
            problems.append(f"eta_rt must lie in (0, 1], got {self.eta_rt}")
        grid = tuple(float(g) for g in self.action_grid)
        object.__setattr__(self, "action_grid", grid)
        if len(grid) < 1:
            problems.append("action grid is empty")
        else:
            if any(b <= a for a, b in zip(grid, grid[1:])):
                problems.append(f"action grid {grid} is not strictly increasing")
            if 0.0 not in grid:
                problems.append(f"action grid {grid} does not contain 0")
            mirrored = tuple(sorted(-g for g in grid))
            if any(abs(a - b) > 1e-12 for a, b in zip(grid, mirrored)):
                problems.append(f"action grid {grid} is not symmetric about 0")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def eta(self) -> float:
        """One-way efficiency."""
        return math.sqrt(self.eta_rt)

    @property
    def n_actions(self) -> int:
        return len(self.action_grid)


@dataclass(frozen=True)
class TariffConfig:
    """Capacity tariff parameters plus the injection price ratio.

    The injection price is injection_ratio times the hourly consumption
    price; the capacity term bills lambda_cap * max(p_agg, p_agg_min) at
    every step.
    """

    lambda_cap: float = 0.02    # EUR per kW per step
    p_agg_min: float = 4.0      # kW floor of the capacity term
    injection_ratio: float = 0.3

    def __post_init__(self) -> None:
        problems = []
        if self.lambda_cap < 0:
            problems.append(f"lambda_cap must be nonnegative, got {self.lambda_cap}")
        if self.p_agg_min < 0:
            problems.append(f"p_agg_min must be nonnegative, got {self.p_agg_min}")
        if not 0.0 <= self.injection_ratio <= 1.0:
            problems.append(
                f"injection_ratio must lie in [0, 1], got {self.injection_ratio}"
            )
        if problems:
            raise ValueError("; ".join(problems))


def battery_step(e: float, u_power: float, cfg: BatteryConfig, dt: float = 1.0):
    """Advance the stored energy one step at commanded power ``u_power`` (kW).

    Charging (u >= 0) loses the one-way efficiency on the way in, so the
    stored energy grows by eta * u * dt; discharging (u < 0) must pull
    u * dt / eta out of the store to deliver u * dt. Commands that would
    push the store outside [0, e_max] are clipped, and the power actually
    applied is returned alongside the next energy level.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not -1e-9 <= e <= cfg.e_max + 1e-9:
        raise ValueError(f"energy {e} outside [0, {cfg.e_max}]")
    e = min(max(e, 0.0), cfg.e_max)
    u = min(max(u_power, -cfg.p_max), cfg.p_max)
    eta = cfg.eta
    if u >= 0:
        delta = eta * u * dt
        if e + delta > cfg.e_max:
            delta = cfg.e_max - e
            u = delta / (eta * dt)
    else:
        delta = u * dt / eta
        if e + delta < 0.0:
            delta = -e
            u = delta * eta / dt
    return e + delta, u


def aggregate_power(p_con: float, p_pv: float, u_applied: float) -> float:
    """Net power at the meter: load plus (nonpositive) PV plus battery."""
    return p_con + p_pv + u_applied


def energy_cost(p_agg: float, lam_con: float, lam_inj: float, dt: float = 1.0) -> float:
    """Energy term: import billed at lam_con, export paid at lam_inj."""
    if p_agg >= 0:
        return lam_con * p_agg * dt
    return lam_inj * p_agg * dt


def capacity_cost(p_agg: float, tariff: TariffConfig) -> float:
    """Capacity term: lambda_cap * max(p_agg, p_agg_min), every step."""
    return tariff.lambda_cap * max(p_agg, tariff.p_agg_min)


@dataclass(frozen=True)
class StepDiagnostics:
    p_agg: float
    c_eng: float
    c_cap: float
    u_applied: float


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    cost: float
    done: bool
    diagnostics: StepDiagnostics


class HemsEnv:
    """Episodic single-day environment over a set of profile days.

    Observations are raw-unit 4-vectors (price, state of charge, load, pv).
    Actions are either an integer index into the battery's action grid or a
    continuous relative power in [-1, 1]; both scale by p_max. An episode
    ends after ``horizon`` steps (the full day by default); stepping a
    finished episode is a caller bug and raises.
    """

    def __init__(
        self,
        profile_set: ProfileSet | list,
        battery: BatteryConfig | None = None,
        tariff: TariffConfig | None = None,
        dt: float = 1.0,
        horizon: int | None = None,
    ):
        days = profile_set.days if isinstance(profile_set, ProfileSet) else list(profile_set)
        if not days:
            raise ValueError("environment needs at least one profile day")
        self.days = days
        self.battery = battery if battery is not None else BatteryConfig()
        self.tariff = tariff if tariff is not None else TariffConfig()
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.dt = float(dt)
        self.horizon = T_HOURS if horizon is None else int(horizon)
        if not 1 <= self.horizon <= T_HOURS:
            raise ValueError(f"horizon {horizon} outside 1..{T_HOURS}")
        self._day: ProfileDay | None = None
        self._t = 0
        self._e = 0.0
        self._done = True

    @property
    def t(self) -> int:
        return self._t

    @property
    def e(self) -> float:
        return self._e

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, day_index: int, e0: float = 0.0) -> np.ndarray:
        """Start an episode on one day with initial stored energy ``e0``."""
        if not 0 <= day_index < len(self.days):
            raise ValueError(f"day index {day_index} outside 0..{len(self.days) - 1}")
        if not 0.0 <= e0 <= self.battery.e_max:
            raise ValueError(f"e0 {e0} outside [0, {self.battery.e_max}]")
        self._day = self.days[day_index]
        self._t = 0
        self._e = float(e0)
        self._done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        """Current raw observation; after the last step the exogenous
        columns stay at the final hour while the state of charge is live."""
        if self._day is None:
            raise RuntimeError("reset the environment before observing")
        t = min(self._t, self.horizon - 1)
        soc = self._e / self.battery.e_max if self.battery.e_max > 0 else 0.0
        return np.array(
            [self._day.lambda_con[t], soc, self._day.p_con[t], self._day.p_pv[t]]
        )

    def _relative_power(self, action) -> float:
        if isinstance(action, (bool, np.bool_)):
            raise ValueError("boolean is not a valid action")
        if isinstance(action, (int, np.integer)):
            if not 0 <= action < self.battery.n_actions:
                raise ValueError(
                    f"action index {int(action)} outside "
                    f"0..{self.battery.n_actions - 1}"
                )
            return self.battery.action_grid[int(action)]
        if isinstance(action, (float, np.floating)):
            u_norm = float(action)
            if not -1.0 - 1e-9 <= u_norm <= 1.0 + 1e-9:
                raise ValueError(f"relative power {u_norm} outside [-1, 1]")
            return min(max(u_norm, -1.0), 1.0)
        raise ValueError(f"action must be an index or a float, got {type(action)}")

    def step(self, action) -> StepResult:
        """Apply one action, advance one hour, and bill the step."""
        if self._day is None:
            raise RuntimeError("reset the environment before stepping")
        if self._done:
            raise RuntimeError("episode is done; reset before stepping again")
        t = self._t
        u = self._relative_power(action) * self.battery.p_max
        e_next, u_applied = battery_step(self._e, u, self.battery, self.dt)
        p_agg = aggregate_power(
            float(self._day.p_con[t]), float(self._day.p_pv[t]), u_applied
        )
        lam = float(self._day.lambda_con[t])
        c_eng = energy_cost(p_agg, lam, self.tariff.injection_ratio * lam, self.dt)
        c_cap = capacity_cost(p_agg, self.tariff)
        self._e = e_next
        self._t = t + 1
        self._done = self._t >= self.horizon
        return StepResult(
            obs=self.observe(),
            cost=c_eng + c_cap,
            done=self._done,
            diagnostics=StepDiagnostics(
                p_agg=p_agg, c_eng=c_eng, c_cap=c_cap, u_applied=u_applied
            ),
        )
