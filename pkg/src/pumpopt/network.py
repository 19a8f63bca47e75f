"""Domain types for the water system and the decision variables.

Physical quantities use SI-ish units throughout: metres, square metres,
cubic metres per hour, kilowatts and hours. Everything the optimizer and the
meta-model touch is normalized to [0, 1] with :func:`normalize`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

ENERGY_TARGET = "energy"
MODES = ("schedule_only", "schedule_and_storage")


class ConfigError(ValueError):
    """A model, schedule or configuration file is inconsistent."""


def normalize(value, vmin, vmax, name: str = "value"):
    """Map ``value`` from ``[vmin, vmax]`` linearly onto ``[0, 1]``."""
    if not np.all(np.asarray(vmax) > np.asarray(vmin)):
        raise ConfigError(f"{name}: max ({vmax}) must exceed min ({vmin})")
    return (value - vmin) / (vmax - vmin)


def denormalize(value, vmin, vmax, name: str = "value"):
    if not np.all(np.asarray(vmax) > np.asarray(vmin)):
        raise ConfigError(f"{name}: max ({vmax}) must exceed min ({vmin})")
    return vmin + value * (vmax - vmin)


@dataclass(frozen=True)
class MorningMin:
    fraction: float
    start_hour: float
    end_hour: float


@dataclass(frozen=True)
class TankSpec:
    """A storage tank.

    ``emergency_min``/``overtop_max`` are fractions of the usable range
    ``[level_min, level_max]``; ``periodicity_tol`` is in metres. Leaving any
    of them unset removes the matching constraint for this tank.
    """

    id: str
    area: float
    level_min: float
    level_max: float
    emergency_min: Optional[float] = None
    overtop_max: Optional[float] = None
    morning_min: Optional[MorningMin] = None
    periodicity_tol: Optional[float] = None
    initial_level_fixed: Optional[float] = None

    @property
    def span(self) -> float:
        return self.level_max - self.level_min


@dataclass(frozen=True)
class PumpSpec:
    """A pump lifting water into ``target_tank``.

    ``source_tank`` of ``None`` means the pump draws from an unlimited
    reservoir. Variable-speed pumps get a row in the settings matrix; their
    relative speed runs from ``min_speed`` (setting 0) to 1 (setting 1).
    """

    id: str
    rated_power: float
    rated_flow: float
    target_tank: str
    head_coefficient: float = 0.0
    max_switches: Optional[int] = None
    binary_status: bool = True
    source_tank: Optional[str] = None
    variable_speed: bool = False
    min_speed: float = 0.5


@dataclass(frozen=True)
class ValveSpec:
    """A control valve moving water between tanks (``None`` = outside the system)."""

    id: str
    max_flow: float
    from_tank: Optional[str] = None
    to_tank: Optional[str] = None
    binary_status: bool = True
    has_setting: bool = False


@dataclass(frozen=True)
class DemandZoneSpec:
    id: str
    source_tank: str
    base_demand: float
    pattern: tuple[float, ...]


@dataclass(frozen=True)
class Horizon:
    t0: float = 0.0
    m: int = 24
    dt: float = 1.0

    def clock_hour(self, k: int) -> float:
        return (self.t0 + k * self.dt) % 24.0


@dataclass(frozen=True)
class NetworkModel:
    tanks: tuple[TankSpec, ...]
    pumps: tuple[PumpSpec, ...]
    demand_zones: tuple[DemandZoneSpec, ...]
    tariff_pattern: tuple[float, ...]
    horizon: Horizon
    e_max: float
    c_max: float
    valves: tuple[ValveSpec, ...] = ()

    # -- dimensions ---------------------------------------------------------
    @property
    def m(self) -> int:
        return self.horizon.m

    @property
    def dt(self) -> float:
        return self.horizon.dt

    @property
    def tank_ids(self) -> list[str]:
        return [t.id for t in self.tanks]

    @property
    def status_ids(self) -> list[str]:
        """Rows of the status matrix: pumps first, then valves."""
        return [p.id for p in self.pumps] + [v.id for v in self.valves]

    @property
    def setting_ids(self) -> list[str]:
        """Rows of the settings matrix: variable-speed pumps, then set valves."""
        return ([p.id for p in self.pumps if p.variable_speed]
                + [v.id for v in self.valves if v.has_setting])

    @property
    def binary_rows(self) -> np.ndarray:
        flags = [p.binary_status for p in self.pumps] + [v.binary_status for v in self.valves]
        return np.array(flags, dtype=bool)

    @property
    def free_tanks(self) -> list[int]:
        """Indices of tanks whose initial level is a decision variable."""
        return [j for j, t in enumerate(self.tanks) if t.initial_level_fixed is None]

    @property
    def chromosome_length(self) -> int:
        return (len(self.status_ids) + len(self.setting_ids)) * self.m + len(self.free_tanks)

    def tank_index(self, tank_id: str) -> int:
        return self.tank_ids.index(tank_id)

    # -- normalization helpers ---------------------------------------------
    @property
    def level_min(self) -> np.ndarray:
        return np.array([t.level_min for t in self.tanks], dtype=float)

    @property
    def level_max(self) -> np.ndarray:
        return np.array([t.level_max for t in self.tanks], dtype=float)

    def normalize_levels(self, levels):
        return normalize(np.asarray(levels, dtype=float), self.level_min, self.level_max, "tank level")

    def denormalize_levels(self, levels):
        return denormalize(np.asarray(levels, dtype=float), self.level_min, self.level_max, "tank level")

    def demand_scale(self) -> np.ndarray:
        """Per-zone multiplier scale so normalized demand inputs sit in [0, 1]."""
        scale = np.array([max(z.pattern) if z.pattern else 0.0 for z in self.demand_zones], dtype=float)
        return np.where(scale > 0, scale, 1.0)

    def normalized_demand(self) -> np.ndarray:
        """Normalized demand multipliers, shape (m, n_zones)."""
        if not self.demand_zones:
            return np.zeros((self.m, 0))
        pat = np.array([z.pattern for z in self.demand_zones], dtype=float).T
        return pat / self.demand_scale()

    def normalized_tariff(self) -> np.ndarray:
        return np.asarray(self.tariff_pattern, dtype=float) / self.c_max

    # -- variants -----------------------------------------------------------
    def for_mode(self, mode: str) -> "NetworkModel":
        """Return the model as seen by the optimizer in ``mode``.

        ``schedule_only`` pins every tank to its ``initial_level_fixed``;
        ``schedule_and_storage`` turns every initial level into a decision
        variable.
        """
        if mode == "schedule_only":
            missing = [t.id for t in self.tanks if t.initial_level_fixed is None]
            if missing:
                raise ConfigError(f"schedule_only mode needs initial_level_fixed for tanks {missing}")
            return self
        if mode == "schedule_and_storage":
            tanks = tuple(dataclasses.replace(t, initial_level_fixed=None) for t in self.tanks)
            return dataclasses.replace(self, tanks=tanks)
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")

    def fingerprint(self) -> str:
        """Hash of everything that shapes the hydraulic response.

        Initial levels and constraint settings are excluded so that one
        trained meta-model serves both optimization modes.
        """
        data = model_to_dict(self)
        for t in data["tanks"]:
            for key in ("initial_level_fixed", "emergency_min", "overtop_max",
                        "morning_min", "periodicity_tol"):
                t.pop(key, None)
        for p in data["pumps"]:
            p.pop("max_switches", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class Schedule:
    """One candidate decision set: statuses, settings and free initial levels.

    All entries are normalized. Arrays are made read-only on construction.
    """

    statuses: np.ndarray
    settings: np.ndarray
    initial_levels: np.ndarray

    def __post_init__(self):
        for name in ("statuses", "settings", "initial_levels"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_vector(cls, model: NetworkModel, genes) -> "Schedule":
        genes = np.asarray(genes, dtype=float)
        if genes.size != model.chromosome_length:
            raise ConfigError(f"chromosome has {genes.size} genes, model needs {model.chromosome_length}")
        ns, nset, m = len(model.status_ids), len(model.setting_ids), model.m
        a = genes[: ns * m].reshape(ns, m)
        s = genes[ns * m: (ns + nset) * m].reshape(nset, m)
        return cls(a, s, genes[(ns + nset) * m:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.statuses.ravel(), self.settings.ravel(), self.initial_levels])

    @classmethod
    def constant(cls, model: NetworkModel, status: float = 1.0, setting: float = 1.0,
                 initial_level: float = 0.5) -> "Schedule":
        m = model.m
        return cls(np.full((len(model.status_ids), m), status),
                   np.full((len(model.setting_ids), m), setting),
                   np.full(len(model.free_tanks), initial_level))

    @classmethod
    def random(cls, model: NetworkModel, rng: np.random.Generator) -> "Schedule":
        m = model.m
        binary = model.binary_rows
        statuses = rng.random((len(binary), m))
        statuses[binary] = np.floor(statuses[binary] * 2.0)
        settings = rng.random((len(model.setting_ids), m))
        return cls(statuses, settings, rng.random(len(model.free_tanks)))

    def __eq__(self, other):
        if not isinstance(other, Schedule):
            return NotImplemented
        return (np.array_equal(self.statuses, other.statuses)
                and np.array_equal(self.settings, other.settings)
                and np.array_equal(self.initial_levels, other.initial_levels))

    __hash__ = None


def initial_levels(model: NetworkModel, schedule: Schedule) -> np.ndarray:
    """Physical starting level of every tank (fixed or decided)."""
    levels = np.array([t.initial_level_fixed if t.initial_level_fixed is not None else np.nan
                       for t in model.tanks], dtype=float)
    free = model.free_tanks
    if free:
        levels[free] = denormalize(schedule.initial_levels, model.level_min[free],
                                   model.level_max[free], "tank level")
    return levels


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_model(model: NetworkModel) -> list[str]:
    """Return a description of every broken invariant; empty when valid."""
    problems: list[str] = []
    hz = model.horizon
    if hz.m < 1:
        problems.append(f"horizon.m: must be >= 1 (got {hz.m})")
    if not hz.dt > 0:
        problems.append(f"horizon.dt: must be > 0 (got {hz.dt})")
    if len(model.tariff_pattern) != hz.m:
        problems.append(f"tariff_pattern: length {len(model.tariff_pattern)} != m={hz.m}")
    if any(c < 0 for c in model.tariff_pattern):
        problems.append("tariff_pattern: values must be non-negative")
    if model.tariff_pattern and not np.isclose(model.c_max, max(model.tariff_pattern), rtol=1e-12, atol=0):
        problems.append(f"c_max: must equal max(tariff_pattern)={max(model.tariff_pattern)} (got {model.c_max})")
    if not model.c_max > 0:
        problems.append("c_max: must be > 0")
    full_power = sum(p.rated_power for p in model.pumps)
    if not model.e_max > 0:
        problems.append("e_max: must be > 0")
    elif model.e_max < full_power:
        problems.append(f"e_max: {model.e_max} below total rated pump power {full_power}")

    ids = [t.id for t in model.tanks] + [p.id for p in model.pumps] + \
          [v.id for v in model.valves] + [z.id for z in model.demand_zones]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        problems.append(f"ids: duplicated {dup}")
    if ENERGY_TARGET in ids:
        problems.append(f"ids: {ENERGY_TARGET!r} is reserved")

    tank_ids = set(model.tank_ids)
    for t in model.tanks:
        where = f"tanks[{t.id}]"
        if not t.area > 0:
            problems.append(f"{where}.area: must be > 0 (got {t.area})")
        if not t.level_min < t.level_max:
            problems.append(f"{where}: level_min ({t.level_min}) must be < level_max ({t.level_max})")
        lo = 0.0 if t.emergency_min is None else t.emergency_min
        hi = 1.0 if t.overtop_max is None else t.overtop_max
        if not (0.0 <= lo < hi <= 1.0):
            problems.append(f"{where}: need 0 <= emergency_min < overtop_max <= 1 (got {lo}, {hi})")
        if t.periodicity_tol is not None and t.periodicity_tol < 0:
            problems.append(f"{where}.periodicity_tol: must be >= 0")
        if t.morning_min is not None and not 0.0 <= t.morning_min.fraction <= 1.0:
            problems.append(f"{where}.morning_min.fraction: must lie in [0, 1]")
        # a start level can only be judged against a sane range
        if (t.initial_level_fixed is not None and t.level_min < t.level_max
                and not t.level_min <= t.initial_level_fixed <= t.level_max):
            problems.append(f"{where}.initial_level_fixed: outside [level_min, level_max]")
    for p in model.pumps:
        where = f"pumps[{p.id}]"
        if not p.rated_power > 0:
            problems.append(f"{where}.rated_power: must be > 0")
        if not p.rated_flow > 0:
            problems.append(f"{where}.rated_flow: must be > 0")
        if p.target_tank not in tank_ids:
            problems.append(f"{where}.target_tank: unknown tank {p.target_tank!r}")
        if p.source_tank is not None and p.source_tank not in tank_ids:
            problems.append(f"{where}.source_tank: unknown tank {p.source_tank!r}")
        if not 0.0 <= p.head_coefficient < 1.0:
            problems.append(f"{where}.head_coefficient: must lie in [0, 1)")
        if p.max_switches is not None and p.max_switches < 0:
            problems.append(f"{where}.max_switches: must be >= 0")
        if p.variable_speed and not 0.0 <= p.min_speed <= 1.0:
            problems.append(f"{where}.min_speed: must lie in [0, 1]")
    for v in model.valves:
        where = f"valves[{v.id}]"
        if not v.max_flow > 0:
            problems.append(f"{where}.max_flow: must be > 0")
        for end in (v.from_tank, v.to_tank):
            if end is not None and end not in tank_ids:
                problems.append(f"{where}: unknown tank {end!r}")
    for z in model.demand_zones:
        where = f"demand_zones[{z.id}]"
        if z.source_tank not in tank_ids:
            problems.append(f"{where}.source_tank: unknown tank {z.source_tank!r}")
        if len(z.pattern) != hz.m:
            problems.append(f"{where}.pattern: length {len(z.pattern)} != m={hz.m}")
        if any(x < 0 for x in z.pattern):
            problems.append(f"{where}.pattern: multipliers must be >= 0")
        if z.base_demand < 0:
            problems.append(f"{where}.base_demand: must be >= 0")
    return problems


def validate_schedule(model: NetworkModel, schedule: Schedule) -> list[str]:
    problems = []
    shapes = {
        "statuses": (len(model.status_ids), model.m),
        "settings": (len(model.setting_ids), model.m),
        "initial_levels": (len(model.free_tanks),),
    }
    for name, shape in shapes.items():
        arr = getattr(schedule, name)
        if arr.shape != shape:
            problems.append(f"schedule.{name}: shape {arr.shape} != {shape}")
        elif arr.size and not (np.all(arr >= 0.0) and np.all(arr <= 1.0)):
            problems.append(f"schedule.{name}: entries outside [0, 1]")
    if not problems:
        rows = schedule.statuses[model.binary_rows]
        if not np.all((rows == 0.0) | (rows == 1.0)):
            problems.append("schedule.statuses: binary-status rows must be exactly 0 or 1")
    return problems


def check_schedule(model: NetworkModel, schedule: Schedule) -> None:
    problems = validate_schedule(model, schedule)
    if problems:
        raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: NetworkModel) -> dict[str, Any]:
    def clean(obj):
        d = dataclasses.asdict(obj)
        return d
    data = {
        "tanks": [clean(t) for t in model.tanks],
        "pumps": [clean(p) for p in model.pumps],
        "valves": [clean(v) for v in model.valves],
        "demand_zones": [dict(clean(z), pattern=list(z.pattern)) for z in model.demand_zones],
        "tariff_pattern": list(model.tariff_pattern),
        "horizon": dataclasses.asdict(model.horizon),
        "e_max": model.e_max,
        "c_max": model.c_max,
    }
    return data


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    required = {f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING}
    missing = required - set(raw)
    if missing:
        raise ConfigError(f"{path}: missing field(s) {sorted(missing)}")
    return cls(**raw)


def model_from_dict(data: dict[str, Any]) -> NetworkModel:
    """Build a :class:`NetworkModel` from its JSON form.

    ``e_max`` defaults to the total rated pump power and ``c_max`` to the
    tariff maximum when omitted.
    """
    if not isinstance(data, dict):
        raise ConfigError("model: expected a JSON object")
    for key in ("tanks", "pumps", "tariff_pattern", "horizon"):
        if key not in data:
            raise ConfigError(f"model: missing field {key!r}")
    unknown = set(data) - {"tanks", "pumps", "valves", "demand_zones", "tariff_pattern",
                           "horizon", "e_max", "c_max", "name", "description"}
    if unknown:
        raise ConfigError(f"model: unknown field(s) {sorted(unknown)}")

    tanks = []
    for i, raw in enumerate(data["tanks"]):
        raw = dict(raw)
        if raw.get("morning_min") is not None:
            raw["morning_min"] = _build(MorningMin, raw["morning_min"], f"tanks[{i}].morning_min")
        tanks.append(_build(TankSpec, raw, f"tanks[{i}]"))
    pumps = [_build(PumpSpec, raw, f"pumps[{i}]") for i, raw in enumerate(data["pumps"])]
    valves = [_build(ValveSpec, raw, f"valves[{i}]") for i, raw in enumerate(data.get("valves", []))]
    zones = []
    for i, raw in enumerate(data.get("demand_zones", [])):
        raw = dict(raw)
        if "pattern" in raw:
            raw["pattern"] = tuple(float(x) for x in raw["pattern"])
        zones.append(_build(DemandZoneSpec, raw, f"demand_zones[{i}]"))
    horizon = _build(Horizon, data["horizon"], "horizon")
    tariff = tuple(float(x) for x in data["tariff_pattern"])
    e_max = data.get("e_max", sum(p.rated_power for p in pumps))
    c_max = data.get("c_max", max(tariff) if tariff else 1.0)
    return NetworkModel(tuple(tanks), tuple(pumps), tuple(zones), tariff, horizon,
                        float(e_max), float(c_max), tuple(valves))


def load_model(path) -> NetworkModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return model_from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package's ``data`` directory."""
    return Path(__file__).parent / "data" / name


def toy_model() -> NetworkModel:
    return load_model(bundled_path("toy_network.json"))
