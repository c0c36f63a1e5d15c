"""Day profiles: CSV parsing, synthetic generation, and feature scaling.

A profile day is 24 hourly rows of consumption price (EUR/kWh), inflexible
household load (kW, nonnegative) and PV generation (kW, nonpositive by sign
convention). Observations seen by policies are 4-vectors in the fixed order
(price, state of charge, load, pv); min-max scaling is fitted on the train
split only, and the state of charge passes through untouched because it
already lives in [0, 1].
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

T_HOURS = 24
N_FEATURES = 4
FEATURE_NAMES = ("price", "soc", "demand", "pv")
CSV_COLUMNS = ("date", "hour", "lambda_con_eur_per_kwh", "p_con_kw", "p_pv_kw")


class ProfileParseError(ValueError):
    """Raised for malformed profile CSV content."""


@dataclass(frozen=True)
class ProfileDay:
    """One day of exogenous data, hour 0 through 23."""

    date: str
    lambda_con: np.ndarray  # EUR/kWh, nonnegative
    p_con: np.ndarray       # kW, nonnegative
    p_pv: np.ndarray        # kW, nonpositive

    def __post_init__(self) -> None:
        for name in ("lambda_con", "p_con", "p_pv"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.float64)
            )
        for name in ("lambda_con", "p_con", "p_pv"):
            arr = getattr(self, name)
            if arr.shape != (T_HOURS,):
                raise ValueError(
                    f"day {self.date}: {name} has shape {arr.shape}, "
                    f"expected ({T_HOURS},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"day {self.date}: {name} contains non-finite values")
        if np.any(self.lambda_con < 0):
            raise ValueError(f"day {self.date}: negative consumption price")
        if np.any(self.p_con < 0):
            raise ValueError(f"day {self.date}: negative load")
        if np.any(self.p_pv > 0):
            raise ValueError(
                f"day {self.date}: positive PV power violates the "
                f"generation-is-nonpositive sign convention"
            )


@dataclass
class ProfileSet:
    """A collection of days plus per-day split tags.

    Tags are 'train', 'eval' or 'both'; 'both' covers single-day setups
    where the same day is trained on and scored.
    """

    days: list = field(default_factory=list)
    split: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.days) != len(self.split):
            raise ValueError(
                f"{len(self.days)} days but {len(self.split)} split tags"
            )
        bad = sorted({s for s in self.split} - {"train", "eval", "both"})
        if bad:
            raise ValueError(f"unknown split tags {bad}")

    def __len__(self) -> int:
        return len(self.days)

    @property
    def train_indices(self) -> list:
        return [i for i, s in enumerate(self.split) if s in ("train", "both")]

    @property
    def eval_indices(self) -> list:
        return [i for i, s in enumerate(self.split) if s in ("eval", "both")]


def default_split(n_days: int, eval_fraction: float = 0.2) -> list:
    """Leading days train, trailing days evaluate; one day serves as both."""
    if n_days < 1:
        raise ValueError(f"need at least one day, got {n_days}")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval fraction must lie in (0, 1), got {eval_fraction}")
    if n_days == 1:
        return ["both"]
    n_eval = min(n_days - 1, max(1, int(round(n_days * eval_fraction))))
    return ["train"] * (n_days - n_eval) + ["eval"] * n_eval


def shuffled_split(n_days: int, eval_fraction: float, seed: int) -> list:
    """Same sizes as :func:`default_split` but day assignment is shuffled."""
    tags = default_split(n_days, eval_fraction)
    order = np.random.default_rng(seed).permutation(n_days)
    out = [""] * n_days
    for tag, day in zip(tags, order):
        out[day] = tag
    return out


# --------------------------------------------------------------------------
# CSV i/o


def load_csv(path: str | Path, eval_fraction: float = 0.2) -> ProfileSet:
    """Parse a profile CSV and assign the default train/eval split.

    The header must be exactly ``date,hour,...`` as written by
    :func:`save_csv`; every date needs each hour 0..23 exactly once.
    Errors carry the offending row number (header is row 1).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileParseError(f"{path}: file is empty") from None
        if tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ProfileParseError(
                f"{path} row 1: header {header} does not match "
                f"expected columns {list(CSV_COLUMNS)}"
            )
        by_date: dict = {}
        order: list = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ProfileParseError(
                    f"{path} row {row_no}: expected {len(CSV_COLUMNS)} fields, "
                    f"got {len(row)}"
                )
            date = row[0].strip()
            try:
                hour = int(row[1])
                lam = float(row[2])
                p_con = float(row[3])
                p_pv = float(row[4])
            except ValueError as exc:
                raise ProfileParseError(f"{path} row {row_no}: {exc}") from None
            if not 0 <= hour < T_HOURS:
                raise ProfileParseError(
                    f"{path} row {row_no}: hour {hour} outside 0..{T_HOURS - 1}"
                )
            if p_pv > 0:
                raise ProfileParseError(
                    f"{path} row {row_no}: PV power {p_pv} is positive; "
                    f"generation must be nonpositive"
                )
            if date not in by_date:
                by_date[date] = {}
                order.append(date)
            if hour in by_date[date]:
                raise ProfileParseError(
                    f"{path} row {row_no}: duplicate hour {hour} for date {date}"
                )
            by_date[date][hour] = (lam, p_con, p_pv)
    days = []
    for date in order:
        rows = by_date[date]
        missing = sorted(set(range(T_HOURS)) - set(rows))
        if missing:
            raise ProfileParseError(
                f"{path}: date {date} is incomplete, missing hours {missing}"
            )
        lam = np.array([rows[h][0] for h in range(T_HOURS)])
        p_con = np.array([rows[h][1] for h in range(T_HOURS)])
        p_pv = np.array([rows[h][2] for h in range(T_HOURS)])
        try:
            days.append(ProfileDay(date, lam, p_con, p_pv))
        except ValueError as exc:
            raise ProfileParseError(f"{path}: {exc}") from None
    if not days:
        raise ProfileParseError(f"{path}: no data rows")
    return ProfileSet(days, default_split(len(days), eval_fraction))


def save_csv(profile_set: ProfileSet, path: str | Path) -> None:
    """Write days back out in the canonical column order, full precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for day in profile_set.days:
            for h in range(T_HOURS):
                writer.writerow(
                    [
                        day.date,
                        h,
                        repr(float(day.lambda_con[h])),
                        repr(float(day.p_con[h])),
                        repr(float(day.p_pv[h])),
                    ]
                )


# --------------------------------------------------------------------------
# synthetic days


@dataclass(frozen=True)
class SynthConfig:
    """Shape parameters of the synthetic day generator.

    Prices carry a morning shoulder and a pronounced evening peak over a
    cheap night base; load is the classic double hump; PV is a negated
    half-sine over daylight hours scaled by one cloudiness draw per day.
    """

    price_base: float = 0.08
    price_morning_amp: float = 0.08
    price_morning_hour: float = 8.0
    price_morning_width: float = 1.5
    price_evening_amp: float = 0.35
    price_evening_hour: float = 19.0
    price_evening_width: float = 2.5
    price_noise: float = 0.01
    price_floor: float = 0.01
    price_mean_band: tuple = (0.05, 0.50)
    load_base: float = 0.3
    load_morning_amp: float = 1.2
    load_morning_hour: float = 7.5
    load_morning_width: float = 1.5
    load_evening_amp: float = 1.8
    load_evening_hour: float = 19.5
    load_evening_width: float = 2.0
    load_noise: float = 0.05
    pv_peak: float = 1.5
    pv_sunrise: float = 7.0
    pv_sunset: float = 19.0
    cloudiness_min: float = 0.3
    cloudiness_max: float = 1.0
    eval_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.pv_peak < 0:
            raise ValueError("pv_peak is a magnitude and must be nonnegative")
        if not 0 <= self.pv_sunrise < self.pv_sunset <= T_HOURS:
            raise ValueError(
                f"daylight window [{self.pv_sunrise}, {self.pv_sunset}] is invalid"
            )
        if not 0 <= self.cloudiness_min <= self.cloudiness_max:
            raise ValueError("cloudiness bounds must satisfy 0 <= min <= max")


def _hump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((hours - center) / width) ** 2)


def synthesize(cfg: SynthConfig, n_days: int, seed: int) -> ProfileSet:
    """Deterministically generate ``n_days`` synthetic days for a seed."""
    if n_days < 1:
        raise ValueError(f"need at least one day, got {n_days}")
    rng = np.random.default_rng(seed)
    hours = np.arange(T_HOURS, dtype=np.float64)
    daylight = (hours > cfg.pv_sunrise) & (hours < cfg.pv_sunset)
    sun = np.zeros(T_HOURS)
    span = cfg.pv_sunset - cfg.pv_sunrise
    sun[daylight] = np.sin(math.pi * (hours[daylight] - cfg.pv_sunrise) / span)
    days = []
    for i in range(n_days):
        price = (
            cfg.price_base
            + cfg.price_morning_amp
            * _hump(hours, cfg.price_morning_hour, cfg.price_morning_width)
            + cfg.price_evening_amp
            * _hump(hours, cfg.price_evening_hour, cfg.price_evening_width)
            + rng.normal(0.0, cfg.price_noise, T_HOURS)
        )
        price = np.maximum(price, cfg.price_floor)
        load = (
            cfg.load_base
            + cfg.load_morning_amp
            * _hump(hours, cfg.load_morning_hour, cfg.load_morning_width)
            + cfg.load_evening_amp
            * _hump(hours, cfg.load_evening_hour, cfg.load_evening_width)
            + rng.normal(0.0, cfg.load_noise, T_HOURS)
        )
        load = np.maximum(load, 0.0)
        cloudiness = rng.uniform(cfg.cloudiness_min, cfg.cloudiness_max)
        pv = np.minimum(-cfg.pv_peak * cloudiness * sun, 0.0)
        days.append(ProfileDay(f"d{i:03d}", price, load, pv))
    return ProfileSet(days, default_split(n_days, cfg.eval_fraction))


# --------------------------------------------------------------------------
# observation scaling


@dataclass(frozen=True)
class NormStats:
    """Per-feature min-max parameters: scaled = (raw - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        if self.shift.shape != (N_FEATURES,) or self.scale.shape != (N_FEATURES,):
            raise ValueError(
                f"stats shapes {self.shift.shape}/{self.scale.shape} "
                f"do not match ({N_FEATURES},)"
            )
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")


def norm_fit(profile_set: ProfileSet) -> NormStats:
    """Min-max stats over the train split; state of charge stays identity.

    A constant feature gets shift 0 / scale 1 (identity) and a warning,
    since a degenerate min-max would collapse it.
    """
    idx = profile_set.train_indices
    if not idx:
        raise ValueError("profile set has no train days to fit scaling on")
    price = np.concatenate([profile_set.days[i].lambda_con for i in idx])
    demand = np.concatenate([profile_set.days[i].p_con for i in idx])
    pv = np.concatenate([profile_set.days[i].p_pv for i in idx])
    shift = np.zeros(N_FEATURES)
    scale = np.ones(N_FEATURES)
    for feature, values in ((0, price), (2, demand), (3, pv)):
        lo = float(values.min())
        hi = float(values.max())
        if hi - lo <= 0.0:
            warnings.warn(
                f"feature {FEATURE_NAMES[feature]!r} is constant at {lo}; "
                f"leaving it unscaled",
                stacklevel=2,
            )
            continue
        shift[feature] = lo
        scale[feature] = hi - lo
    return NormStats(shift, scale)


def norm_apply(stats: NormStats, obs: np.ndarray) -> np.ndarray:
    """Scale a raw observation (or batch of rows) into normalized units."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != N_FEATURES:
        raise ValueError(f"observation shape {obs.shape} does not end in {N_FEATURES}")
    return (obs - stats.shift) / stats.scale


def norm_invert(stats: NormStats, feature_index: int, value: float) -> float:
    """Map one normalized feature value back to raw units."""
    if not 0 <= feature_index < N_FEATURES:
        raise ValueError(f"feature index {feature_index} outside 0..{N_FEATURES - 1}")
    return float(stats.shift[feature_index] + stats.scale[feature_index] * value)
