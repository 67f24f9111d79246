"""Seeded Markov-chain data-generating processes.

Every model is a time-homogeneous Markov chain on micro states
``X_{j+1} = F(X_j; theta; xi)`` observed through a scalar measurement
``Y_j = G(X_j; theta)``.  A trajectory is a pure function of
``(model, params, config, seed)``.

Random numbers
--------------
Each trajectory owns one ``numpy.random.Generator`` backed by
Philox4x64-10 (a counter-based generator) keyed directly with the 64-bit
seed, i.e. key ``(seed, 0)`` and counter starting at zero.  Uniforms are
``(next_uint64 >> 11) * 2**-53``; normals use numpy's ziggurat.  No
``SeedSequence`` hashing is involved, so the stream is fixed by the seed.

Replicate seeds fan out with :func:`derive`, a SplitMix64 step::

    z = (master + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z =  z ^ (z >> 31)

The finalizer is a bijection of 64-bit words and the increment is odd, so
``derive(s, .)`` is injective over all indices below ``2**64``.

Stream position convention
--------------------------
``init_state`` consumes the stream first (skipped when ``x0`` is given),
then every transition consumes a fixed number of draws.  The burn-in runs
``burn_in`` transitions, after which ``horizon`` states are measured with
``horizon - 1`` transitions in between.  Hence increasing the burn-in by
``k`` shifts the recorded trajectory left by exactly ``k`` samples.
"""

from __future__ import annotations

import abc
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import AbmIdentError, BoundsError, ConfigError, NumericalError, ShapeError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL1 = 0xBF58476D1CE4E5B9
MIX_MUL2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MUL2) & MASK64
    return z ^ (z >> 31)


def derive(master_seed: int, index: int) -> int:
    """Child seed number ``index`` of ``master_seed`` (SplitMix64 step)."""
    if index < 0:
        raise ConfigError(f"derive index must be >= 0, got {index}")
    z = (int(master_seed) + (int(index) + 1) * GOLDEN_GAMMA) & MASK64
    return _mix64(z)


def derive_many(master_seeds, index: int) -> np.ndarray:
    """Vectorised :func:`derive` over an array of master seeds."""
    s = np.asarray(master_seeds, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = s + np.uint64(((index + 1) * GOLDEN_GAMMA) & MASK64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_MUL2)
    return z ^ (z >> np.uint64(31))


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64-10 generator keyed with the 64-bit ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def default_threads() -> int:
    env = os.environ.get("ABMIDENT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"ABMIDENT_THREADS must be an integer, got {env!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Map ``fn`` over ``items``; results come back in input order."""
    items = list(items)
    n = default_threads() if threads is None else max(1, int(threads))
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ParamVector:
    """Named, ordered structural parameters with closed box bounds."""

    names: tuple
    values: tuple
    bounds: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        values = tuple(float(v) for v in self.values)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not names:
            raise ConfigError("ParamVector needs at least one entry")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in {names}")
        if not (len(names) == len(values) == len(bounds)):
            raise ConfigError("names, values and bounds must have equal length")
        for n, (lo, hi) in zip(names, bounds):
            if not lo <= hi:
                raise ConfigError(f"empty bounds for {n!r}: [{lo}, {hi}]")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def from_dict(cls, values: Mapping[str, float], bounds: Mapping[str, tuple]) -> "ParamVector":
        names = tuple(values)
        return cls(names, tuple(values[n] for n in names), tuple(bounds[n] for n in names))

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown parameter {name!r}; expected one of {list(self.names)}") from None

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)

    def bounds_of(self, name: str) -> tuple:
        return self.bounds[self.index(name)]

    def with_values(self, updates: Mapping[str, float] | None = None, **kw) -> "ParamVector":
        new = dict(zip(self.names, self.values))
        for key, val in {**(updates or {}), **kw}.items():
            self.index(key)
            new[key] = float(val)
        return replace(self, values=tuple(new[n] for n in self.names))

    def check_bounds(self) -> None:
        for n, v, (lo, hi) in zip(self.names, self.values, self.bounds):
            if not (lo <= v <= hi) or not np.isfinite(v):
                raise BoundsError(n, v, (lo, hi))


@dataclass
class MicroState:
    """Per-agent state vector ``x_{i,j}`` at time index ``j``."""

    agent_states: np.ndarray
    time_index: int = 0

    def copy(self) -> "MicroState":
        return MicroState(np.array(self.agent_states, copy=True), self.time_index)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``noise_scale`` is eta: the exogenous noise is multiplied by
    ``1 - eta``, so ``eta = 1`` gives a deterministic process.  ``burn_in``
    defaults to 10% of the horizon.
    """

    n_agents: int = 10
    horizon: int = 1000
    burn_in: int | None = None
    replications: int = 1
    master_seed: int = 0
    noise_scale: float = 0.0

    def __post_init__(self):
        if int(self.n_agents) < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}")
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.burn_in is not None and int(self.burn_in) < 0:
            raise ConfigError(f"burn_in must be >= 0, got {self.burn_in}")
        if int(self.replications) < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if not 0.0 <= float(self.noise_scale) <= 1.0:
            raise ConfigError(f"noise_scale must lie in [0, 1], got {self.noise_scale}")
        if not 0 <= int(self.master_seed) <= MASK64:
            raise ConfigError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")

    @property
    def burn_in_steps(self) -> int:
        return self.horizon // 10 if self.burn_in is None else int(self.burn_in)

    @property
    def noise_multiplier(self) -> float:
        return 1.0 - float(self.noise_scale)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {
            "n_agents": int(self.n_agents),
            "horizon": int(self.horizon),
            "burn_in": self.burn_in_steps,
            "replications": int(self.replications),
            "master_seed": int(self.master_seed),
            "noise_scale": float(self.noise_scale),
        }


@dataclass
class Trajectory:
    observables: np.ndarray
    seed_used: int
    params: ParamVector
    burn_in_discarded: int
    initial_state: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.observables)


class ModelSpec(abc.ABC):
    """A Markov-chain DGP.

    Subclasses implement ``init_state``, ``transition`` and ``measure``.
    ``run`` is the stepwise reference loop; models with a compiled kernel
    override it and must reproduce the reference loop bit for bit.
    ``transition`` may only read the state it is given.
    """

    name = "model"
    # Histogram (True) or KDE (False) for simulated densities.
    discrete_observable = False

    @abc.abstractmethod
    def default_params(self) -> ParamVector:
        """Default parameter values together with their bounds."""

    def validate(self, params: ParamVector, config: SimConfig) -> None:
        """Model-specific checks beyond the box bounds."""

    @abc.abstractmethod
    def init_state(self, config: SimConfig, rng: np.random.Generator) -> MicroState: ...

    @abc.abstractmethod
    def transition(self, state: MicroState, params: ParamVector, rng: np.random.Generator,
                   config: SimConfig) -> MicroState: ...

    @abc.abstractmethod
    def measure(self, state: MicroState, params: ParamVector) -> float: ...

    def coerce_state(self, x0, config: SimConfig) -> MicroState:
        if isinstance(x0, MicroState):
            return x0.copy()
        return MicroState(np.array(x0, copy=True), 0)

    def lattice(self, config: SimConfig):
        """``(start, step, count)`` of the observable's support if discrete."""
        return None

    def enumerate_states(self, params: ParamVector, config: SimConfig):
        """Optional: ``(observable values per state, transition matrix)``."""
        from .errors import CapabilityError

        raise CapabilityError(f"model {self.name!r} does not enumerate its states")

    def run(self, state: MicroState, params: ParamVector, config: SimConfig,
            rng: np.random.Generator) -> np.ndarray:
        burn, horizon = config.burn_in_steps, config.horizon
        for _ in range(burn):
            state = self.transition(state, params, rng, config)
        out = np.empty(horizon)
        for j in range(horizon):
            out[j] = self.measure(state, params)
            if j < horizon - 1:
                state = self.transition(state, params, rng, config)
        return out


def simulate(model: ModelSpec, params: ParamVector, config: SimConfig, seed: int,
             x0=None) -> Trajectory:
    """One seeded trajectory of the observable, burn-in discarded."""
    params.check_bounds()
    model.validate(params, config)
    rng = make_rng(seed)
    state = model.init_state(config, rng) if x0 is None else model.coerce_state(x0, config)
    start = state.agent_states.copy()
    ys = model.run(state, params, config, rng)
    bad = np.flatnonzero(~np.isfinite(ys))
    if bad.size:
        raise NumericalError(f"non-finite measurement at time index {int(bad[0])}")
    return Trajectory(ys, int(seed), params, config.burn_in_steps, start)


def replicate(model: ModelSpec, params: ParamVector, config: SimConfig, *,
              threads: int | None = None, initial_states: Sequence | None = None,
              seed_base: int | None = None) -> list:
    """``config.replications`` trajectories; replicate ``r`` uses ``derive(master, r)``.

    ``initial_states`` is cycled over replicates (used to launch runs from
    dispersed starting points).  ``seed_base`` replaces the master seed.
    """
    master = config.master_seed if seed_base is None else seed_base
    starts = list(initial_states) if initial_states is not None else None

    def one(r):
        x0 = starts[r % len(starts)] if starts else None
        try:
            return simulate(model, params, config, derive(master, r), x0=x0)
        except AbmIdentError as exc:
            exc.replicate_index = r
            if exc.args:
                exc.args = (f"replicate {r}: {exc.args[0]}",) + exc.args[1:]
            raise

    return parallel_map(one, range(config.replications), threads)


def stack(trajectories: Iterable[Trajectory]) -> np.ndarray:
    """Observables of equal-length trajectories as an ``(S, T)`` array."""
    rows = [t.observables for t in trajectories]
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise ShapeError(f"trajectories have unequal lengths {sorted(lengths)}")
    return np.vstack(rows)
