"""Multi-sub-ANN meta-model of the hydraulic step response.

One small feed-forward network per predicted quantity: the next normalized
level of every tank plus the normalized aggregate energy rate. Each network
sees only the inputs that a perturbation screen found influential. Chaining
:func:`predict_step` over the horizon replaces the simulator inside the
optimizer.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import simulator
from .network import ENERGY_TARGET, ConfigError, NetworkModel, Schedule, check_schedule, initial_levels
from .simulator import Dataset, Trajectory

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Gradient descent diverged."""


class PairingError(ConfigError):
    """A meta-model was used with a network model it was not trained on."""


@dataclass
class SubAnn:
    """``n_in -> hidden (tanh) -> 1 (linear)`` regression network.

    With ``residual`` set, the first input is added to the output, so the
    hidden layer only has to learn the change over one step. The linear output
    is rescaled by ``out_scale`` and shifted by ``out_offset`` so that the
    weights work on a standardized target. Predictions are clamped to [0, 1]
    both in training and in use.
    """

    target: str
    input_ids: list[str]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    residual: bool = False
    out_offset: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        self.out_offset = float(self.out_offset)
        self.out_scale = float(self.out_scale)
        if not (np.isfinite(self.out_scale) and self.out_scale > 0):
            raise ConfigError(f"sub-ANN {self.target!r}: out_scale must be positive")
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = float(self.b2)
        h = self.b1.shape[0]
        if not self.input_ids or len(set(self.input_ids)) != len(self.input_ids):
            raise ConfigError(f"sub-ANN {self.target!r}: input ids must be nonempty and unique")
        if self.w1.shape != (h, len(self.input_ids)) or self.w2.shape != (h,):
            raise ConfigError(f"sub-ANN {self.target!r}: weight shapes {self.w1.shape}, {self.w2.shape} "
                              f"do not match {len(self.input_ids)} inputs and {h} hidden units")

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @classmethod
    def initial(cls, target: str, input_ids: list[str], hidden: int, rng: np.random.Generator,
                residual: bool = False, out_offset: float = 0.0, out_scale: float = 1.0) -> "SubAnn":
        n_in = len(input_ids)
        return cls(target, list(input_ids),
                   rng.uniform(-0.5, 0.5, (hidden, n_in)), rng.uniform(-0.5, 0.5, hidden),
                   rng.uniform(-0.5, 0.5, hidden), rng.uniform(-0.5, 0.5), residual,
                   out_offset, out_scale)

    def raw(self, x) -> np.ndarray:
        a = np.tanh(x @ self.w1.T + self.b1)
        out = self.out_offset + self.out_scale * (a @ self.w2 + self.b2)
        return out + x[..., 0] if self.residual else out

    def forward(self, x) -> np.ndarray:
        return np.clip(self.raw(x), 0.0, 1.0)

    def params(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_params(self, theta) -> "SubAnn":
        h, n = self.w1.shape
        theta = np.asarray(theta, dtype=float)
        w1 = theta[: h * n].reshape(h, n)
        b1 = theta[h * n: h * n + h]
        w2 = theta[h * n + h: h * n + 2 * h]
        return SubAnn(self.target, list(self.input_ids), w1, b1, w2, theta[-1], self.residual,
                      self.out_offset, self.out_scale)

    def copy(self) -> "SubAnn":
        return self.with_params(self.params())


def _mse_grad(w1, b1, w2, b2, residual, offset, scale, x, y):
    a = np.tanh(x @ w1.T + b1)
    out = offset + scale * (a @ w2 + b2)
    if residual:
        out = out + x[:, 0]
    # overshooting a bound costs nothing when the target sits on that bound
    err = np.where(((y >= 1.0) & (out > 1.0)) | ((y <= 0.0) & (out < 0.0)), 0.0, out - y) / scale
    d = 2.0 * err / err.shape[0]
    delta = np.outer(d, w2) * (1.0 - a ** 2)
    grad = np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0), a.T @ d, [d.sum()]])
    return float(np.mean(err ** 2)), grad


def _unpack(theta, h, n):
    return theta[: h * n].reshape(h, n), theta[h * n: h * n + h], theta[h * n + h: h * n + 2 * h], theta[-1]


def loss_and_grad(net: SubAnn, x, y):
    """Mean squared error, in units of ``out_scale``, and its gradient with
    respect to ``net.params()``.

    Because predictions are clamped to [0, 1], a row whose target lies on a
    bound is not penalized for a raw output beyond that bound.
    """
    return _mse_grad(net.w1, net.b1, net.w2, net.b2, net.residual, net.out_offset, net.out_scale,
                     np.asarray(x, dtype=float), np.asarray(y, dtype=float))


def rmse(net: SubAnn, x, y) -> float:
    return float(np.sqrt(np.mean((net.forward(x) - y) ** 2)))


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 8
    learning_rate: float = 0.05
    epochs: int = 300
    batch_size: int = 32
    validation_fraction: float = 0.2
    top_k: int = 4
    seed: int = 0


def train_subann(x, y, target: str, input_ids: list[str], config: TrainConfig = TrainConfig(),
                 residual: bool = False):
    """Fit one sub-ANN by mini-batch gradient descent.

    Returns ``(net, val_rmse)`` where ``net`` holds the weights with the lowest
    validation RMSE seen at any epoch boundary (the untrained weights count).
    The output offset and scale are the mean and spread of what the weights
    must produce on the training split.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n < 10:
        raise ConfigError(f"target {target!r}: need at least 10 rows, got {n}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val, train = order[:n_val], order[n_val:]
    xv, yv = x[val], y[val]
    resid = y[train] - (x[train, 0] if residual else 0.0)
    spread = float(np.std(resid))
    scale = spread if spread > 1e-12 else 1.0

    net = SubAnn.initial(target, input_ids, config.hidden, rng, residual, float(np.mean(resid)), scale)
    theta = net.params()
    h, n_in = net.w1.shape
    best, best_rmse = net, rmse(net, xv, yv)
    # clamped outputs hide a blow-up from the validation score, so watch the raw loss
    ceiling = 1e6 * max(loss_and_grad(net, x[train], y[train])[0], 1.0)
    lr, bs = config.learning_rate, config.batch_size
    for epoch in range(1, config.epochs + 1):
        perm = train[rng.permutation(train.size)]
        worst = 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, perm.size, bs):
                idx = perm[start:start + bs]
                loss, grad = _mse_grad(*_unpack(theta, h, n_in), residual, net.out_offset, net.out_scale,
                                       x[idx], y[idx])
                worst = max(worst, loss) if np.isfinite(loss) else np.inf
                theta -= lr * grad
        net = net.with_params(theta.copy())
        score = rmse(net, xv, yv)
        if not (np.isfinite(score) and worst <= ceiling and np.all(np.isfinite(theta))):
            raise TrainingError(f"target {target!r}: loss diverged at epoch {epoch} "
                                f"(learning rate {lr})")
        if score < best_rmse:
            best, best_rmse = net, score
    return best, best_rmse


# ---------------------------------------------------------------------------
# input selection
# ---------------------------------------------------------------------------

def _grid(column: np.ndarray, n_grid: int) -> np.ndarray:
    lo, hi = column.min(), column.max()
    values = np.unique(column)
    if values.size <= 2 and np.all((values == 0.0) | (values == 1.0)):
        return values
    if hi == lo:
        return np.array([lo])
    return np.linspace(lo, hi, n_grid)


def sensitivity_screen(model: NetworkModel, dataset: Dataset, top_k: int,
                       n_base: int = 256, n_grid: int = 5, seed: int = 0) -> dict[str, list[tuple[str, float]]]:
    """Rank candidate inputs per target by one-at-a-time perturbation.

    For each of up to ``n_base`` dataset rows, every candidate is swept over
    its empirical range (its two values for binary columns) while the rest of
    the row stays fixed; the score is the mean variance of the simulator's
    response across the sweep. Tank targets are scored on the level change
    over the step so that the trivial carry-over of the current level does
    not swamp the drivers.
    """
    if len(dataset) == 0:
        raise ConfigError("sensitivity screen needs a nonempty dataset")
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    base = dataset.inputs[rng.choice(n, size=min(n_base, n), replace=False)]
    targets = simulator.target_ids(model)
    n_t = len(model.tanks)
    scores = np.zeros((len(targets), len(dataset.input_ids)))
    for j, _ in enumerate(dataset.input_ids):
        grid = _grid(dataset.inputs[:, j], n_grid)
        rows = np.repeat(base, grid.size, axis=0)
        rows[:, j] = np.tile(grid, base.shape[0])
        out = simulator.step_targets(model, rows)
        out[:, :n_t] -= rows[:, :n_t]
        out = out.reshape(base.shape[0], grid.size, len(targets))
        scores[:, j] = out.var(axis=1).mean(axis=0)
    # round-off from the level subtraction is not a dependency
    scores[scores <= 1e-12 * scores.max(axis=1, keepdims=True)] = 0.0
    ranking = {}
    for t, target in enumerate(targets):
        order = sorted(range(len(dataset.input_ids)), key=lambda j: (-scores[t, j], j))
        ranking[target] = [(dataset.input_ids[j], float(scores[t, j])) for j in order[:top_k]]
    return ranking


def select_inputs(model: NetworkModel, ranking: list[tuple[str, float]], target: str, top_k: int) -> list[str]:
    """Pick a sub-ANN's inputs from a full ranking.

    A tank's own current level always feeds its own network; up to ``top_k``
    further inputs with a nonzero score follow in rank order.
    """
    own = f"{target}.level" if target != ENERGY_TARGET else None
    chosen = [own] if own else []
    for name, score in ranking:
        if len(chosen) - (1 if own else 0) >= top_k:
            break
        if score > 0 and name != own:
            chosen.append(name)
    if not chosen:
        chosen.append(ranking[0][0])
    return chosen


# ---------------------------------------------------------------------------
# the assembled meta-model
# ---------------------------------------------------------------------------

@dataclass
class MetaModel:
    sub_anns: dict[str, SubAnn]
    model_fingerprint: str
    candidate_ids: list[str]
    training_report: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self._columns = {t: [self.candidate_ids.index(i) for i in net.input_ids]
                         for t, net in self.sub_anns.items()}

    def check_pairing(self, model: NetworkModel) -> None:
        if model.fingerprint() != self.model_fingerprint:
            raise PairingError("meta-model was trained against a different network model "
                               f"(fingerprint {self.model_fingerprint[:12]} vs {model.fingerprint()[:12]})")

    @property
    def tank_targets(self) -> list[str]:
        return [t for t in self.sub_anns if t != ENERGY_TARGET]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "model_fingerprint": self.model_fingerprint,
            "activation": "tanh",
            "candidate_ids": self.candidate_ids,
            "training_report": self.training_report,
            "sub_anns": [
                {"target": n.target, "input_ids": n.input_ids, "hidden": n.hidden, "residual": n.residual,
                 "out_offset": n.out_offset, "out_scale": n.out_scale, "w1": n.w1.ravel().tolist(), "b1": n.b1.tolist(), "w2": n.w2.tolist(), "b2": n.b2}
                for n in self.sub_anns.values()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetaModel":
        if data.get("format") != FORMAT_VERSION:
            raise ConfigError(f"unsupported meta-model format {data.get('format')!r}")
        nets = {}
        for raw in data["sub_anns"]:
            h, n_in = int(raw["hidden"]), len(raw["input_ids"])
            w1 = np.asarray(raw["w1"], dtype=float)
            if w1.size != h * n_in:
                raise ConfigError(f"sub-ANN {raw['target']!r}: w1 has {w1.size} values, expected {h * n_in}")
            nets[raw["target"]] = SubAnn(raw["target"], list(raw["input_ids"]), w1.reshape(h, n_in),
                                         raw["b1"], raw["w2"], raw["b2"], bool(raw.get("residual", False)),
                                         raw.get("out_offset", 0.0), raw.get("out_scale", 1.0))
        unknown = {i for n in nets.values() for i in n.input_ids} - set(data["candidate_ids"])
        if unknown:
            raise ConfigError(f"meta-model references unknown inputs {sorted(unknown)}")
        return cls(nets, data["model_fingerprint"], list(data["candidate_ids"]),
                   {k: float(v) for k, v in data.get("training_report", {}).items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MetaModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: cannot load meta-model ({exc})") from exc


def build_metamodel(model: NetworkModel, dataset: Dataset, config: TrainConfig = TrainConfig(),
                    ranking: Optional[dict] = None) -> MetaModel:
    """Screen inputs and train one sub-ANN per target."""
    if ranking is None:
        ranking = sensitivity_screen(model, dataset, len(dataset.input_ids), seed=config.seed)
    nets, report = {}, {}
    for i, target in enumerate(simulator.target_ids(model)):
        cols = select_inputs(model, ranking[target], target, config.top_k)
        x, y = dataset.rows(target, cols)
        cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + i})
        nets[target], report[target] = train_subann(x, y, target, cols, cfg, residual=target != ENERGY_TARGET)
        log.info("trained %s on %s: validation RMSE %.5f", target, cols, report[target])
    return MetaModel(nets, model.fingerprint(), list(dataset.input_ids), report)


def predict_step(meta: MetaModel, x, model: Optional[NetworkModel] = None):
    """Evaluate every sub-ANN on a (batch of) normalized candidate input rows.

    Returns ``(levels, energy, clamped_inputs)``: next normalized tank levels
    (…, n_tanks), normalized energy rate (…), and a flag per row telling
    whether any input had to be clamped into [0, 1].
    """
    if model is not None:
        meta.check_pairing(model)
    x = np.asarray(x, dtype=float)
    flagged = np.any((x < 0.0) | (x > 1.0), axis=-1)
    x = np.clip(x, 0.0, 1.0)
    levels = np.stack([meta.sub_anns[t].forward(x[..., meta._columns[t]]) for t in meta.tank_targets], axis=-1)
    energy = meta.sub_anns[ENERGY_TARGET].forward(x[..., meta._columns[ENERGY_TARGET]])
    return np.clip(levels, 0.0, 1.0), np.clip(energy, 0.0, 1.0), flagged


def predict_batch(meta: MetaModel, model: NetworkModel, statuses, settings, init_norm):
    """Chain :func:`predict_step` over the horizon for a batch of schedules.

    Returns normalized levels (B, m+1, n_tanks) and energy (B, m).
    """
    b, m = init_norm.shape[0], model.m
    demand = model.normalized_demand()
    levels = np.empty((b, m + 1, len(model.tanks)))
    energy = np.empty((b, m))
    levels[:, 0] = init_norm
    for k in range(m):
        x = simulator.assemble_inputs(model, levels[:, k], statuses[:, :, k], settings[:, :, k],
                                      np.broadcast_to(demand[k], (b, demand.shape[1])))
        levels[:, k + 1], energy[:, k], _ = predict_step(meta, x)
    return levels, energy


def predict_eps(meta: MetaModel, model: NetworkModel, schedule: Schedule) -> Trajectory:
    """Meta-model counterpart of :func:`simulator.simulate_eps`."""
    meta.check_pairing(model)
    check_schedule(model, schedule)
    init = model.normalize_levels(initial_levels(model, schedule))
    levels, energy = predict_batch(meta, model, schedule.statuses[None], schedule.settings[None], init[None])
    return Trajectory(model.denormalize_levels(levels[0]), energy[0] * model.e_max, schedule,
                      source="metamodel")
