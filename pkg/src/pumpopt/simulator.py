"""Simplified extended-period hydraulic simulator.

Tanks are lumped storages driven by pumps, valves and demand zones. Pump
flow falls off linearly with the level of the tank it discharges into
(``1 - head_coefficient * level / level_max``), which is what makes the
step response nonlinear enough to be worth learning. Levels clamp at the
physical bounds; clamping is flagged rather than treated as an error.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .network import (ENERGY_TARGET, ConfigError, NetworkModel, Schedule, check_schedule,
                      initial_levels)


@dataclass(frozen=True)
class HydraulicState:
    """Tank levels at one instant plus the energy drawn over the interval that ended there."""

    tank_levels: np.ndarray
    energy_rate: float
    per_pump_energy: np.ndarray
    clamped: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Hydraulic state over one cycle.

    ``levels`` has shape (m+1, n_tanks) in metres. ``energy_rate[k]`` is the
    aggregate pump power (kW) during interval k, so it has length m.
    ``per_pump_energy`` is ``None`` for meta-model trajectories, which only
    predict the aggregate.
    """

    levels: np.ndarray
    energy_rate: np.ndarray
    schedule: Schedule
    per_pump_energy: Optional[np.ndarray] = None
    clamped: Optional[np.ndarray] = None
    source: str = "simulator"

    @property
    def states(self) -> list[HydraulicState]:
        m, n_t = self.energy_rate.shape[0], self.levels.shape[1]
        n_p = 0 if self.per_pump_energy is None else self.per_pump_energy.shape[1]
        clamped = self.clamped if self.clamped is not None else np.zeros((m + 1, n_t), dtype=bool)
        out = [HydraulicState(self.levels[0], 0.0, np.zeros(n_p), clamped[0])]
        for k in range(m):
            pump = self.per_pump_energy[k] if self.per_pump_energy is not None else np.zeros(0)
            out.append(HydraulicState(self.levels[k + 1], float(self.energy_rate[k]), pump, clamped[k + 1]))
        return out


class _Plan:
    """Incidence matrices and per-element constants for vectorized stepping."""

    def __init__(self, model: NetworkModel):
        n_t = len(model.tanks)
        tix = {t.id: j for j, t in enumerate(model.tanks)}
        setting_row = {sid: i for i, sid in enumerate(model.setting_ids)}
        self.n_pumps = len(model.pumps)
        self.area = np.array([t.area for t in model.tanks], dtype=float)
        self.lo = model.level_min
        self.hi = model.level_max

        def onehot(keys):
            mat = np.zeros((len(keys), n_t))
            for i, key in enumerate(keys):
                if key is not None:
                    mat[i, tix[key]] = 1.0
            return mat

        self.pump_to = onehot([p.target_tank for p in model.pumps])
        self.pump_from = onehot([p.source_tank for p in model.pumps])
        self.valve_to = onehot([v.to_tank for v in model.valves])
        self.valve_from = onehot([v.from_tank for v in model.valves])
        self.zone_from = onehot([z.source_tank for z in model.demand_zones])
        self.rated_flow = np.array([p.rated_flow for p in model.pumps], dtype=float)
        self.rated_power = np.array([p.rated_power for p in model.pumps], dtype=float)
        self.alpha = np.array([p.head_coefficient for p in model.pumps], dtype=float)
        self.target_lmax = self.pump_to @ self.hi
        self.valve_flow = np.array([v.max_flow for v in model.valves], dtype=float)
        self.base_demand = np.array([z.base_demand for z in model.demand_zones], dtype=float)
        # (row in settings matrix, min speed) for each variable-speed pump
        self.pump_speed = [(i, setting_row[p.id], p.min_speed)
                           for i, p in enumerate(model.pumps) if p.variable_speed]
        self.valve_setting = [(i, setting_row[v.id])
                              for i, v in enumerate(model.valves) if v.has_setting]


@functools.lru_cache(maxsize=32)
def _plan(model: NetworkModel) -> _Plan:
    return _Plan(model)


def _advance(model: NetworkModel, levels, statuses, settings, demand_mult, substeps: int = 1):
    """Advance a batch of states by one control interval.

    Shapes: ``levels`` (B, n_t), ``statuses`` (B, n_status),
    ``settings`` (B, n_settings), ``demand_mult`` (B, n_zones) holding raw
    pattern multipliers. Returns (next levels, per-pump power, clamped).
    """
    plan = _plan(model)
    n_p = plan.n_pumps
    pump_status = statuses[:, :n_p]
    valve_status = statuses[:, n_p:]
    speed = np.ones_like(pump_status)
    for i, row, lo in plan.pump_speed:
        speed[:, i] = lo + settings[:, row] * (1.0 - lo)
    opening = valve_status.copy()
    for i, row in plan.valve_setting:
        opening[:, i] = opening[:, i] * settings[:, row]

    power = pump_status * plan.rated_power * speed ** 3
    demand = demand_mult * plan.base_demand
    out_demand = demand @ plan.zone_from
    q_valve = opening * plan.valve_flow
    valve_net = q_valve @ plan.valve_to - q_valve @ plan.valve_from

    h = model.dt / substeps
    clamped = np.zeros(levels.shape, dtype=bool)
    level = levels
    for _ in range(substeps):
        head = 1.0 - plan.alpha * (level @ plan.pump_to.T) / plan.target_lmax
        q_pump = pump_status * plan.rated_flow * speed * head
        net = q_pump @ plan.pump_to - q_pump @ plan.pump_from + valve_net - out_demand
        level = level + h * net / plan.area
        clamped |= (level < plan.lo) | (level > plan.hi)
        level = np.clip(level, plan.lo, plan.hi)
    return level, power, clamped


def _substeps(model: NetworkModel, step_minutes: Optional[float]) -> int:
    if step_minutes is None:
        return 1
    n = model.dt * 60.0 / step_minutes
    if step_minutes <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ConfigError(f"step of {step_minutes} min does not divide the {model.dt} h interval")
    return int(round(n))


def simulate_step(model: NetworkModel, levels, statuses, k: int, settings=None) -> HydraulicState:
    """Advance physical ``levels`` across interval ``k`` under one status column."""
    levels = np.asarray(levels, dtype=float)
    statuses = np.asarray(statuses, dtype=float)
    settings = np.zeros(len(model.setting_ids)) if settings is None else np.asarray(settings, dtype=float)
    if levels.shape != (len(model.tanks),):
        raise ConfigError(f"levels: expected {len(model.tanks)} values, got shape {levels.shape}")
    if statuses.shape != (len(model.status_ids),):
        raise ConfigError(f"statuses: expected {len(model.status_ids)} values, got shape {statuses.shape}")
    if settings.shape != (len(model.setting_ids),):
        raise ConfigError(f"settings: expected {len(model.setting_ids)} values, got shape {settings.shape}")
    if not 0 <= k < model.m:
        raise ConfigError(f"interval index {k} outside [0, {model.m - 1}]")
    mult = np.array([[z.pattern[k] for z in model.demand_zones]], dtype=float).reshape(1, -1)
    nxt, power, clamped = _advance(model, levels[None], statuses[None], settings[None], mult)
    return HydraulicState(nxt[0], float(power[0].sum()), power[0], clamped[0])


def simulate_batch(model: NetworkModel, statuses, settings, init_levels, step_minutes=None):
    """Vectorized EPS over a batch of schedules.

    ``statuses`` (B, n_status, m), ``settings`` (B, n_settings, m),
    ``init_levels`` (B, n_t) in metres. Returns levels (B, m+1, n_t),
    per-pump power (B, m, n_p) and clamp flags (B, m+1, n_t).
    """
    substeps = _substeps(model, step_minutes)
    b, m = init_levels.shape[0], model.m
    pattern = np.array([z.pattern for z in model.demand_zones], dtype=float).reshape(-1, m)
    levels = np.empty((b, m + 1, len(model.tanks)))
    power = np.empty((b, m, len(model.pumps)))
    clamped = np.zeros((b, m + 1, len(model.tanks)), dtype=bool)
    levels[:, 0] = init_levels
    for k in range(m):
        mult = np.broadcast_to(pattern[:, k], (b, pattern.shape[0]))
        levels[:, k + 1], power[:, k], clamped[:, k + 1] = _advance(
            model, levels[:, k], statuses[:, :, k], settings[:, :, k], mult, substeps)
    return levels, power, clamped


def simulate_eps(model: NetworkModel, schedule: Schedule, step_minutes=None) -> Trajectory:
    """Replay ``schedule`` over the whole horizon.

    ``step_minutes`` subdivides each control interval for integration; the
    statuses stay constant within the interval.
    """
    check_schedule(model, schedule)
    init = initial_levels(model, schedule)
    levels, power, clamped = simulate_batch(
        model, schedule.statuses[None], schedule.settings[None], init[None], step_minutes)
    return Trajectory(levels[0], power[0].sum(axis=1), schedule, power[0], clamped[0], "simulator")


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

def input_ids(model: NetworkModel) -> list[str]:
    """Candidate meta-model inputs at t_k, in declared order."""
    return ([f"{t}.level" for t in model.tank_ids]
            + [f"{s}.status" for s in model.status_ids]
            + [f"{s}.setting" for s in model.setting_ids]
            + [f"{z.id}.demand" for z in model.demand_zones])


def target_ids(model: NetworkModel) -> list[str]:
    return model.tank_ids + [ENERGY_TARGET]


def target_column(target: str) -> str:
    return "energy.rate" if target == ENERGY_TARGET else f"{target}.level_next"


def assemble_inputs(model: NetworkModel, levels_norm, statuses, settings, demand_norm) -> np.ndarray:
    """Stack normalized step inputs into the candidate input matrix."""
    return np.concatenate([levels_norm, statuses, settings, demand_norm], axis=-1)


def split_inputs(model: NetworkModel, x):
    n_t, n_s, n_set = len(model.tanks), len(model.status_ids), len(model.setting_ids)
    cuts = np.cumsum([n_t, n_s, n_set])
    return np.split(np.asarray(x, dtype=float), cuts, axis=-1)


def step_targets(model: NetworkModel, x) -> np.ndarray:
    """Ground-truth normalized targets for rows of the candidate input matrix.

    Columns follow :func:`target_ids`: next normalized level per tank, then
    normalized energy rate during the step.
    """
    levels_n, statuses, settings, demand_n = split_inputs(model, np.atleast_2d(x))
    levels = model.denormalize_levels(levels_n)
    nxt, power, _ = _advance(model, levels, statuses, settings, demand_n * model.demand_scale())
    energy = power.sum(axis=1, keepdims=True) / model.e_max
    return np.concatenate([model.normalize_levels(nxt), energy], axis=1)


@dataclass
class Dataset:
    """Per-step training rows shared by every sub-ANN target."""

    input_ids: list[str]
    inputs: np.ndarray
    targets: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def rows(self, target: str, columns: Optional[list[str]] = None):
        """Return (X, y) for ``target`` restricted to ``columns``."""
        if columns is None:
            return self.inputs, self.targets[target]
        idx = [self.input_ids.index(c) for c in columns]
        return self.inputs[:, idx], self.targets[target]


def generate_dataset(model: NetworkModel, n_samples: int, seed: int) -> Dataset:
    """Simulate ``n_samples`` random schedules and emit m rows per schedule.

    Initial levels are drawn for every tank, fixed or not.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    free = model.for_mode("schedule_and_storage")
    rng = np.random.default_rng(seed)
    scheds = [Schedule.random(free, rng) for _ in range(n_samples)]
    statuses = np.stack([s.statuses for s in scheds])
    settings = np.stack([s.settings for s in scheds])
    init = free.denormalize_levels(np.stack([s.initial_levels for s in scheds]))
    levels, power, _ = simulate_batch(free, statuses, settings, init)

    m = model.m
    lev_n = free.normalize_levels(levels)
    demand = np.broadcast_to(free.normalized_demand(), (n_samples, m, len(model.demand_zones)))
    x = assemble_inputs(free, lev_n[:, :m], statuses.transpose(0, 2, 1),
                        settings.transpose(0, 2, 1), demand)
    x = x.reshape(n_samples * m, -1)
    targets = {t: lev_n[:, 1:, j].reshape(-1) for j, t in enumerate(model.tank_ids)}
    targets[ENERGY_TARGET] = (power.sum(axis=2) / model.e_max).reshape(-1)
    return Dataset(input_ids(model), x, targets)


def write_dataset(dataset: Dataset, out_dir) -> list[Path]:
    """Write one CSV per target: inputs in declared order, then the target."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for target, y in dataset.targets.items():
        path = out_dir / f"{target}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(dataset.input_ids + [target_column(target)])
            for row, val in zip(dataset.inputs, y):
                writer.writerow([f"{v:.9g}" for v in row] + [f"{val:.9g}"])
        paths.append(path)
    return paths


def read_dataset(model: NetworkModel, data_dir) -> Dataset:
    data_dir = Path(data_dir)
    ids = input_ids(model)
    inputs = None
    targets = {}
    for target in target_ids(model):
        path = data_dir / f"{target}.csv"
        if not path.exists():
            raise ConfigError(f"missing dataset file for target {target!r}: {path}")
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ids + [target_column(target)]:
                raise ConfigError(f"{path}: header does not match the model's inputs")
            arr = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
        if inputs is None:
            inputs = arr[:, :-1]
        elif arr.shape[0] != inputs.shape[0]:
            raise ConfigError(f"{path}: row count differs from the other targets")
        targets[target] = arr[:, -1]
    return Dataset(ids, inputs, targets)
