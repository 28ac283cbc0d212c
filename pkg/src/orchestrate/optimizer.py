"""Embedded suggestion engine.

Random search, grid search, and a small (mu + 1) evolutionary strategy over
a typed parameter space. All randomness is counter-based: the i-th
suggestion for a given seed is the same no matter in which order earlier
runs completed, which keeps parallel experiments reproducible.

Maximization is the fixed direction; negate your metric to minimize.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .errors import NoMoreSuggestions, UserError, ValidationError
from .ids import new_id
from .store import ExperimentRecord, Observation

STRATEGIES = ("random", "grid", "evolutionary")

DEFAULT_GRID_COUNT = 3
DEFAULT_GRID_CAP = 10_000
DEFAULT_MU = 5
DEFAULT_SIGMA_SCALE = 0.1
DEFAULT_CATEGORICAL_MUTATION_P = 0.2


@dataclass(frozen=True)
class ParameterDef:
    name: str
    kind: str  # "double" | "int" | "categorical"
    min: Optional[float] = None
    max: Optional[float] = None
    scale: str = "linear"  # doubles only: "linear" | "log"
    values: Optional[tuple] = None  # categorical only
    grid_count: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind in ("double", "int"):
            d["min"] = self.min
            d["max"] = self.max
        if self.kind == "double":
            d["scale"] = self.scale
        if self.kind == "categorical":
            d["values"] = list(self.values)
        if self.grid_count is not None:
            d["grid_count"] = self.grid_count
        return d

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.values
        if self.kind == "int":
            return isinstance(value, int) and self.min <= value <= self.max
        return isinstance(value, (int, float)) and self.min <= value <= self.max


@dataclass(frozen=True)
class ParameterSpace:
    params: tuple  # tuple[ParameterDef, ...], order significant

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def to_list(self) -> list[dict]:
        return [p.to_dict() for p in self.params]

    def check_assignment(self, assignment: dict) -> None:
        if set(assignment) != set(self.names()):
            raise UserError(
                f"assignment keys {sorted(assignment)} != space names {sorted(self.names())}"
            )
        for p in self.params:
            if not p.contains(assignment[p.name]):
                raise UserError(f"value {assignment[p.name]!r} out of bounds for {p.name}")


def validate_space(defs: list[dict]) -> ParameterSpace:
    """Normalize raw parameter definitions, raising field-level errors."""
    if not defs:
        raise ValidationError("parameters", "at least one parameter required")
    params: list[ParameterDef] = []
    seen: set[str] = set()
    for i, d in enumerate(defs):
        prefix = f"parameters[{i}]"
        if not isinstance(d, dict):
            raise ValidationError(prefix, "must be a mapping")
        name = d.get("name")
        if not name or not isinstance(name, str):
            raise ValidationError(f"{prefix}.name", "required non-empty string")
        if name in seen:
            raise ValidationError(f"{prefix}.name", f"duplicate parameter name {name!r}")
        seen.add(name)
        kind = d.get("kind", d.get("type"))
        if kind not in ("double", "int", "categorical"):
            raise ValidationError(f"{prefix}.kind", "must be double, int, or categorical")
        grid_count = d.get("grid_count")
        if grid_count is not None and (not isinstance(grid_count, int) or grid_count < 1):
            raise ValidationError(f"{prefix}.grid_count", "must be a positive integer")
        if kind == "categorical":
            values = d.get("values")
            if not values or not isinstance(values, (list, tuple)):
                raise ValidationError(f"{prefix}.values", "categorical needs >= 1 value")
            params.append(ParameterDef(name=name, kind=kind, values=tuple(values)))
            continue
        if "min" not in d or "max" not in d:
            raise ValidationError(f"{prefix}.min", "min and max required")
        lo, hi = d["min"], d["max"]
        if not isinstance(lo, (int, float)) or not isinstance(hi, (int, float)):
            raise ValidationError(f"{prefix}.min", "bounds must be numbers")
        if not lo < hi:
            raise ValidationError(f"{prefix}.min", "min must be < max")
        scale = d.get("scale", "linear")
        if kind == "int":
            if scale != "linear":
                raise ValidationError(f"{prefix}.scale", "int parameters are linear only")
            if int(lo) != lo or int(hi) != hi:
                raise ValidationError(f"{prefix}.min", "int bounds must be integers")
            lo, hi = int(lo), int(hi)
        else:
            if scale not in ("linear", "log"):
                raise ValidationError(f"{prefix}.scale", "must be linear or log")
            if scale == "log" and lo <= 0:
                raise ValidationError(f"{prefix}.min", "log scale requires min > 0")
            lo, hi = float(lo), float(hi)
        params.append(
            ParameterDef(name=name, kind=kind, min=lo, max=hi, scale=scale, grid_count=grid_count)
        )
    return ParameterSpace(params=tuple(params))


@dataclass(frozen=True)
class Suggestion:
    suggestion_id: str
    assignment: dict
    strategy: str
    sequence_index: int


# -- grid ---------------------------------------------------------------------


def _clamp(v: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, v))


def _grid_points(p: ParameterDef) -> list:
    if p.kind == "categorical":
        return list(p.values)
    count = p.grid_count or DEFAULT_GRID_COUNT
    if count == 1:
        raw = [p.min]
    elif p.kind == "double" and p.scale == "log":
        llo, lhi = math.log10(p.min), math.log10(p.max)
        # Clamp: the log10 round trip can land a few ulps outside the bounds.
        raw = [
            _clamp(10 ** (llo + (lhi - llo) * i / (count - 1)), p.min, p.max)
            for i in range(count)
        ]
    else:
        raw = [p.min + (p.max - p.min) * i / (count - 1) for i in range(count)]
    if p.kind == "int":
        points: list[int] = []
        for v in raw:
            iv = round(v)
            if iv not in points:
                points.append(iv)
        return points
    return raw


def grid_enumerate(space: ParameterSpace, cap: int = DEFAULT_GRID_CAP) -> list[dict]:
    """Full cartesian grid, last parameter varying fastest."""
    per_param = [_grid_points(p) for p in space]
    size = math.prod(len(pts) for pts in per_param)
    if size > cap:
        raise UserError(f"grid size {size} exceeds cap {cap}")
    names = space.names()
    return [dict(zip(names, combo)) for combo in itertools.product(*per_param)]


# -- strategy state -------------------------------------------------------------


@dataclass
class StrategyState:
    strategy: str
    seed: int
    space: ParameterSpace
    observation_budget: int
    mu: int = DEFAULT_MU
    sigma_scale: float = DEFAULT_SIGMA_SCALE
    categorical_mutation_p: float = DEFAULT_CATEGORICAL_MUTATION_P
    issued_count: int = 0
    closed_kills: int = 0
    open: dict = field(default_factory=dict)  # suggestion_id -> Suggestion
    # top-mu successful observations, sorted by value desc then arrival asc
    population: list = field(default_factory=list)  # list[(value, arrival_index, assignment)]
    _arrivals: int = 0
    _grid: Optional[list] = None

    def grid(self) -> list[dict]:
        if self._grid is None:
            self._grid = grid_enumerate(self.space)
        return self._grid


def make_strategy_state(record: ExperimentRecord, space: ParameterSpace) -> StrategyState:
    params = record.strategy_params or {}
    return StrategyState(
        strategy=record.strategy,
        seed=record.seed,
        space=space,
        observation_budget=record.observation_budget,
        mu=int(params.get("mu", DEFAULT_MU)),
        sigma_scale=float(params.get("sigma_scale", DEFAULT_SIGMA_SCALE)),
        categorical_mutation_p=float(
            params.get("categorical_mutation_p", DEFAULT_CATEGORICAL_MUTATION_P)
        ),
    )


def _rng(seed: int, index: int, tag: str = "") -> random.Random:
    # Seeding with a string is deterministic across processes (unlike hash()).
    return random.Random(f"{seed}:{index}:{tag}")


def _sample_param(p: ParameterDef, rng: random.Random):
    if p.kind == "categorical":
        return p.values[rng.randrange(len(p.values))]
    if p.kind == "int":
        return rng.randint(p.min, p.max)
    if p.scale == "log":
        return _clamp(10 ** rng.uniform(math.log10(p.min), math.log10(p.max)), p.min, p.max)
    return rng.uniform(p.min, p.max)


def _sample_assignment(space: ParameterSpace, rng: random.Random) -> dict:
    return {p.name: _sample_param(p, rng) for p in space}


def _mutate(space: ParameterSpace, parent: dict, sigma_scale: float, cat_p: float,
            rng: random.Random) -> dict:
    child = {}
    for p in space:
        v = parent[p.name]
        if p.kind == "categorical":
            if rng.random() < cat_p:
                v = p.values[rng.randrange(len(p.values))]
            child[p.name] = v
        elif p.kind == "int":
            sigma = sigma_scale * (p.max - p.min)
            nv = round(v + rng.gauss(0.0, sigma))
            child[p.name] = max(p.min, min(p.max, nv))
        elif p.scale == "log":
            llo, lhi = math.log10(p.min), math.log10(p.max)
            sigma = sigma_scale * (lhi - llo)
            nv = math.log10(v) + rng.gauss(0.0, sigma)
            child[p.name] = _clamp(10 ** _clamp(nv, llo, lhi), p.min, p.max)
        else:
            sigma = sigma_scale * (p.max - p.min)
            nv = v + rng.gauss(0.0, sigma)
            child[p.name] = max(p.min, min(p.max, nv))
    return child


def suggest(state: StrategyState) -> Suggestion:
    """Issue the next suggestion, mutating the strategy state in place."""
    if state.issued_count - state.closed_kills >= state.observation_budget:
        raise NoMoreSuggestions("observation budget exhausted")
    i = state.issued_count
    if state.strategy == "grid":
        grid = state.grid()
        if i >= len(grid):
            raise NoMoreSuggestions(f"grid of {len(grid)} assignments exhausted")
        assignment = dict(grid[i])
    elif state.strategy == "random":
        assignment = _sample_assignment(state.space, _rng(state.seed, i))
    elif state.strategy == "evolutionary":
        rng = _rng(state.seed, i, "evo")
        if len(state.population) < state.mu:
            assignment = _sample_assignment(state.space, _rng(state.seed, i))
        else:
            parent = state.population[rng.randrange(len(state.population))][2]
            assignment = _mutate(
                state.space, parent, state.sigma_scale, state.categorical_mutation_p, rng
            )
    else:
        raise UserError(f"unknown strategy: {state.strategy}")
    suggestion = Suggestion(
        suggestion_id=new_id("s-"),
        assignment=assignment,
        strategy=state.strategy,
        sequence_index=i,
    )
    state.issued_count += 1
    state.open[suggestion.suggestion_id] = suggestion
    return suggestion


def ingest_observation(state: StrategyState, obs: Observation) -> StrategyState:
    """Close the suggestion; fold successes into the evolutionary population."""
    if obs.suggestion_id not in state.open:
        raise UserError(f"unknown or already-closed suggestion: {obs.suggestion_id}")
    del state.open[obs.suggestion_id]
    if not obs.failed:
        state._arrivals += 1
        state.population.append((obs.value, state._arrivals, obs.assignment))
        state.population.sort(key=lambda t: (-t[0], t[1]))
        del state.population[state.mu:]
    return state


def close_killed(state: StrategyState, suggestion_id: str) -> None:
    """A run was killed without reporting; its budget slot is returned."""
    if suggestion_id in state.open:
        del state.open[suggestion_id]
        state.closed_kills += 1


def best_assignment(record: ExperimentRecord) -> Optional[tuple]:
    """Argmax over successful observations; ties broken by earliest arrival."""
    best = None
    for obs in record.observations:
        if obs.failed:
            continue
        if best is None or obs.value > best[1]:
            best = (obs.assignment, obs.value)
    return best
