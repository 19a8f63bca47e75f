"""Normalized cost, constraint violation and penalized fitness.

Everything here works on normalized quantities. The batch functions take
stacked trajectories so a whole GA population is scored in one pass; the
scalar functions wrap them for single schedules.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .network import ConfigError, NetworkModel, Schedule, initial_levels
from .simulator import Trajectory, simulate_batch


def bracket(g):
    """Positive part of a standard-form constraint ``g <= 0``."""
    return np.maximum(0.0, g)


def count_switches(status_row) -> int:
    """On/off transitions along a status row; any status above 0 counts as on."""
    on = np.asarray(status_row) > 0.0
    return int(np.count_nonzero(on[1:] != on[:-1]))


def objective(trajectory: Trajectory, model: NetworkModel) -> float:
    """Tariff-weighted mean normalized energy rate over the cycle."""
    if trajectory.levels.shape[0] != model.m + 1:
        raise ConfigError(f"trajectory has {trajectory.levels.shape[0]} states, expected {model.m + 1}")
    return float(objective_batch(trajectory.energy_rate[None], model)[0])


def objective_batch(energy_rate, model: NetworkModel) -> np.ndarray:
    """``energy_rate`` (B, m) in kW -> normalized cost (B,)."""
    return np.mean(model.normalized_tariff() * (np.asarray(energy_rate) / model.e_max), axis=-1)


def penalized_fitness(objective_value, violation_value, penalty_factor):
    return objective_value + penalty_factor * violation_value


@dataclass
class ConstraintSet:
    """Constraint data for every constrained state variable, in normalized units.

    ``lower``/``upper`` have shape (n_vars, m) with -inf/+inf where a bound is
    absent; ``periodicity`` and ``switch_limits`` use NaN for "unconstrained".
    ``ranges`` holds the physical (min, max) used to normalize each variable.
    """

    variables: list[str]
    ranges: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    periodicity: np.ndarray
    switch_ids: list[str]
    switch_limits: np.ndarray

    def __post_init__(self):
        n, m = self.lower.shape
        if self.upper.shape != (n, m) or self.periodicity.shape != (n,) or len(self.variables) != n:
            raise ConfigError("constraint arrays have inconsistent shapes")
        if np.any(self.lower > self.upper):
            raise ConfigError("constraint lower bound exceeds upper bound")
        if np.any(self.periodicity[~np.isnan(self.periodicity)] < 0):
            raise ConfigError("periodicity tolerances must be >= 0")
        if len(self.switch_ids) != self.switch_limits.shape[0]:
            raise ConfigError("switch limits do not match the status rows")

    @property
    def bounded(self) -> np.ndarray:
        """c1 weights: variables with any finite time bound."""
        return np.any(np.isfinite(self.lower) | np.isfinite(self.upper), axis=1)

    @classmethod
    def unconstrained(cls, model: NetworkModel) -> "ConstraintSet":
        n, m = len(model.tanks), model.m
        return cls(model.tank_ids, np.stack([model.level_min, model.level_max], axis=1),
                   np.full((n, m), -np.inf), np.full((n, m), np.inf), np.full(n, np.nan),
                   model.status_ids, np.full(len(model.status_ids), np.nan))

    @classmethod
    def from_model(cls, model: NetworkModel) -> "ConstraintSet":
        """Derive bounds from the tank and pump specs.

        The morning-storage requirement raises the lower bound inside its
        clock window; outside the window the emergency minimum applies.
        """
        cs = cls.unconstrained(model)
        for j, t in enumerate(model.tanks):
            if t.emergency_min is not None:
                cs.lower[j] = t.emergency_min
            if t.overtop_max is not None:
                cs.upper[j] = t.overtop_max
            if t.morning_min is not None:
                mm = t.morning_min
                for k in range(model.m):
                    hour = model.horizon.clock_hour(k)
                    if mm.start_hour <= hour < mm.end_hour:
                        cs.lower[j, k] = max(mm.fraction, t.emergency_min or 0.0)
                    elif t.emergency_min is None:
                        cs.lower[j, k] = 0.0
            if t.periodicity_tol is not None:
                cs.periodicity[j] = t.periodicity_tol / t.span
        for i, p in enumerate(model.pumps):
            if p.max_switches is not None:
                cs.switch_limits[i] = p.max_switches
        return cs

    @classmethod
    def from_dict(cls, model: NetworkModel, data: dict) -> "ConstraintSet":
        cs = cls.unconstrained(model)
        m = model.m
        unknown = set(data) - {"time_bounds", "periodicity", "switch_limits"}
        if unknown:
            raise ConfigError(f"constraints: unknown field(s) {sorted(unknown)}")
        for var, b in data.get("time_bounds", {}).items():
            j = cs._var(var)
            for key, arr in (("lower", cs.lower), ("upper", cs.upper)):
                vals = b.get(key)
                if vals is None:
                    continue
                vals = np.broadcast_to(np.asarray(vals, dtype=float), (m,)) if np.ndim(vals) == 0 \
                    else np.asarray(vals, dtype=float)
                if vals.shape != (m,):
                    raise ConfigError(f"constraints.time_bounds.{var}.{key}: expected {m} values")
                arr[j] = vals
        for var, tol in data.get("periodicity", {}).items():
            cs.periodicity[cs._var(var)] = float(tol)
        for pid, lim in data.get("switch_limits", {}).items():
            if pid not in cs.switch_ids:
                raise ConfigError(f"constraints.switch_limits: unknown control element {pid!r}")
            cs.switch_limits[cs.switch_ids.index(pid)] = float(lim)
        cs.__post_init__()
        return cs

    def to_dict(self) -> dict:
        def arr(a):
            return [float(x) for x in a]
        bounds = {}
        for j, var in enumerate(self.variables):
            entry = {}
            if np.any(np.isfinite(self.lower[j])):
                entry["lower"] = arr(np.where(np.isfinite(self.lower[j]), self.lower[j], 0.0))
            if np.any(np.isfinite(self.upper[j])):
                entry["upper"] = arr(np.where(np.isfinite(self.upper[j]), self.upper[j], 1.0))
            if entry:
                bounds[var] = entry
        return {
            "time_bounds": bounds,
            "periodicity": {v: float(t) for v, t in zip(self.variables, self.periodicity) if not np.isnan(t)},
            "switch_limits": {p: int(x) for p, x in zip(self.switch_ids, self.switch_limits) if not np.isnan(x)},
        }

    def tightened(self, margin: float) -> "ConstraintSet":
        """Copy with level bounds and periodicity tolerances pulled in by ``margin``.

        Used when optimizing against a surrogate so that its prediction error
        does not turn into a violation once the schedule is simulated.
        Switch limits are untouched since they do not depend on predictions.
        """
        if not margin >= 0:
            raise ConfigError("constraint margin must be >= 0")
        lower = self.lower + margin
        upper = self.upper - margin
        # never let a tightened pair cross; fall back to the midpoint
        with np.errstate(invalid="ignore"):
            mid = (self.lower + self.upper) / 2.0
        crossed = lower > upper
        lower = np.where(crossed, mid, lower)
        upper = np.where(crossed, mid, upper)
        periodicity = np.maximum(self.periodicity - margin, 0.0)
        return ConstraintSet(list(self.variables), self.ranges.copy(), lower, upper, periodicity,
                             list(self.switch_ids), self.switch_limits.copy())

    def _var(self, var: str) -> int:
        if var not in self.variables:
            raise ConfigError(f"constraints: unknown state variable {var!r}")
        return self.variables.index(var)


def load_constraints(model: NetworkModel, path) -> ConstraintSet:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return ConstraintSet.from_dict(model, data)


@dataclass
class FitnessReport:
    objective: float
    violation: float
    penalized: float
    per_constraint: dict[str, float] = field(default_factory=dict)
    switches: dict[str, int] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.violation == 0.0

    def to_dict(self) -> dict:
        return {"objective": self.objective, "violation": self.violation, "penalized": self.penalized,
                "per_constraint": dict(self.per_constraint), "switches": dict(self.switches)}


def violation_terms(levels_norm, statuses, constraints: ConstraintSet):
    """Itemized violation for a batch.

    ``levels_norm`` (B, m+1, n_vars), ``statuses`` (B, n_status, m). Returns
    ``(labels, items, switch_counts)`` with ``items`` of shape (B, n_items).
    """
    levels_norm = np.asarray(levels_norm, dtype=float)
    statuses = np.asarray(statuses)
    m = constraints.lower.shape[1]
    s = levels_norm[:, :m, :].transpose(0, 2, 1)  # states at t_0 .. t_{m-1}
    labels, cols = [], []
    bounded = constraints.bounded
    for j, var in enumerate(constraints.variables):
        if bounded[j]:
            over = bracket(s[:, j] - constraints.upper[j]) + bracket(constraints.lower[j] - s[:, j])
            labels.append(f"bounds:{var}")
            cols.append(over.sum(axis=1) / m)
    delta = np.abs(levels_norm[:, m, :] - levels_norm[:, 0, :])
    for j, var in enumerate(constraints.variables):
        if not np.isnan(constraints.periodicity[j]):
            labels.append(f"periodicity:{var}")
            cols.append(bracket(delta[:, j] - constraints.periodicity[j]))
    on = statuses > 0.0
    counts = np.count_nonzero(on[:, :, 1:] != on[:, :, :-1], axis=2)
    for i, pid in enumerate(constraints.switch_ids):
        if not np.isnan(constraints.switch_limits[i]):
            labels.append(f"switches:{pid}")
            cols.append(bracket(counts[:, i] - constraints.switch_limits[i]).astype(float))
    b = levels_norm.shape[0]
    items = np.stack(cols, axis=1) if cols else np.zeros((b, 0))
    return labels, items, counts


def violation(trajectory: Trajectory, schedule: Schedule, constraints: ConstraintSet):
    """Aggregated violation of one trajectory and its itemized breakdown."""
    lo, hi = constraints.ranges[:, 0], constraints.ranges[:, 1]
    norm = (trajectory.levels - lo) / (hi - lo)
    labels, items, _ = violation_terms(norm[None], schedule.statuses[None], constraints)
    per = {lab: float(v) for lab, v in zip(labels, items[0])}
    return float(sum(per.values())), per


def score_batch(model: NetworkModel, constraints: ConstraintSet, penalty_factor: float,
                levels_norm, energy_rate, statuses) -> list[FitnessReport]:
    """Build a :class:`FitnessReport` for every member of a batch."""
    f = objective_batch(energy_rate, model)
    labels, items, counts = violation_terms(levels_norm, statuses, constraints)
    pumps = [p.id for p in model.pumps]
    reports = []
    for b in range(f.shape[0]):
        per = dict(zip(labels, items[b].tolist()))
        g = float(sum(per.values()))
        obj = float(f[b])
        reports.append(FitnessReport(obj, g, penalized_fitness(obj, g, penalty_factor), per,
                                     {p: int(counts[b, i]) for i, p in enumerate(pumps)}))
    return reports


def evaluate(trajectory: Trajectory, model: NetworkModel, constraints: ConstraintSet,
             penalty_factor: float) -> FitnessReport:
    lo, hi = constraints.ranges[:, 0], constraints.ranges[:, 1]
    norm = (trajectory.levels - lo) / (hi - lo)
    return score_batch(model, constraints, penalty_factor, norm[None], trajectory.energy_rate[None],
                       trajectory.schedule.statuses[None])[0]


# ---------------------------------------------------------------------------
# fitness backends
# ---------------------------------------------------------------------------

def _stack(model: NetworkModel, schedules: Sequence[Schedule]):
    statuses = np.stack([s.statuses for s in schedules])
    settings = np.stack([s.settings for s in schedules])
    init = np.stack([initial_levels(model, s) for s in schedules])
    return statuses, settings, model.normalize_levels(init)


class SimulatorBackend:
    """Ground-truth fitness: every schedule is replayed by the simulator."""

    name = "simulator"

    def __init__(self, model: NetworkModel, step_minutes: Optional[float] = None):
        self.model = model
        self.step_minutes = step_minutes

    def predict(self, statuses, settings, init_norm):
        """Normalized levels (B, m+1, n_t) and energy rate (B, m) in kW."""
        model = self.model
        levels, power, _ = simulate_batch(model, statuses, settings, model.denormalize_levels(init_norm),
                                          self.step_minutes)
        return model.normalize_levels(levels), power.sum(axis=2)


class MetaModelBackend:
    """Fast fitness through chained sub-ANN predictions."""

    name = "metamodel"

    def __init__(self, model: NetworkModel, meta):
        meta.check_pairing(model)
        self.model = model
        self.meta = meta

    def predict(self, statuses, settings, init_norm):
        from .metamodel import predict_batch
        levels, energy = predict_batch(self.meta, self.model, statuses, settings, init_norm)
        return levels, energy * self.model.e_max


def fitness_function(model: NetworkModel, backend, constraints: ConstraintSet,
                     penalty_factor: float) -> Callable[[Sequence[Schedule]], list[FitnessReport]]:
    """Wrap a backend into ``schedules -> reports`` for the optimizer."""
    if not penalty_factor > 0:
        raise ConfigError("penalty factor must be > 0")

    def fitness(schedules: Sequence[Schedule]) -> list[FitnessReport]:
        if not schedules:
            return []
        statuses, settings, init = _stack(model, schedules)
        levels, energy = backend.predict(statuses, settings, init)
        return score_batch(model, constraints, penalty_factor, levels, energy, statuses)

    return fitness


def trajectory_from_backend(model: NetworkModel, backend, schedule: Schedule) -> Trajectory:
    statuses, settings, init = _stack(model, [schedule])
    levels, energy = backend.predict(statuses, settings, init)
    return Trajectory(model.denormalize_levels(levels[0]), energy[0], schedule, source=backend.name)

