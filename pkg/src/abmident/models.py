"""Reference models: the Kirman herding chain and identification toys.

Kirman dynamics (one meeting per tick): pick an agent ``i`` uniformly.
With probability ``epsilon`` it flips its state spontaneously; otherwise it
meets a uniformly chosen other agent ``j`` and adopts ``j``'s state with
probability ``1 - delta``.  The number ``k`` of agents in state 1 is then a
birth-death chain on ``{0..N}`` with::

    up(k)   = (N - k)/N * (eps + (1 - eps)(1 - delta) k/(N - 1))
    down(k) = k/N       * (eps + (1 - eps)(1 - delta) (N - k)/(N - 1))

and the observable is ``k/N``.  Each tick consumes four uniforms
``(u_agent, u_switch, u_partner, u_copy)``.

The toys share a latent Gaussian AR(1) ``z' = phi z + (1 - eta) xi`` with
``phi = 0.5`` (stationary variance ``4/3``) unless stated otherwise, and
consume one standard normal per tick:

=============  ==========================  ===========================================
variant        observable                  moment structure
=============  ==========================  ===========================================
AR1            ``y' = rho y + (1-eta) s xi``  ``E y = 0``, ``Var y = s^2/(1-rho^2)``
ProductOnly    ``t1*t2 + z``               law depends on ``t1*t2`` only
UnusedParam    ``t1 + t2*z``               ``theta3`` never enters
TwoMinima      ``theta**2 + z``            law invariant under ``theta -> -theta``
DispersionOnly ``mu + sigma*w``            ``w`` antithetic pairs: mean is ``mu`` for
                                           any ``sigma`` over whole pairs
=============  ==========================  ===========================================

DispersionOnly pairs are aligned on absolute tick parity (state 0 opens a
pair), so the sample mean is free of ``sigma`` only when ``burn_in`` and
``horizon`` are both even.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .dgp import MicroState, ModelSpec, ParamVector, SimConfig
from .errors import ConfigError, StationarityError

LATENT_PERSISTENCE = 0.5
CHUNK = 1 << 16


@njit(nogil=True, cache=True)
def _kirman_kernel(agents, k, eps, delta, u, out, step0, burn):
    n = agents.shape[0]
    copy_p = 1.0 - delta
    for t in range(u.shape[0]):
        i = int(u[t, 0] * n)
        if u[t, 1] < eps:
            k += 1 - 2 * agents[i]
            agents[i] = 1 - agents[i]
        else:
            j = int(u[t, 2] * (n - 1))
            if j >= i:
                j += 1
            if u[t, 3] < copy_p:
                k += agents[j] - agents[i]
                agents[i] = agents[j]
        g = step0 + t + 1
        if g >= burn:
            out[g - burn] = k / n
    return k


@njit(nogil=True, cache=True)
def _ar_kernel(z, phi, scale, xi, out, step0, burn):
    for t in range(xi.shape[0]):
        z = phi * z + scale * xi[t]
        g = step0 + t + 1
        if g >= burn:
            out[g - burn] = z
    return z


@njit(nogil=True, cache=True)
def _antithetic_kernel(w, phase, scale, xi, out, step0, burn):
    for t in range(xi.shape[0]):
        if phase == 0:
            w = -w
            phase = 1
        else:
            w = scale * xi[t]
            phase = 0
        g = step0 + t + 1
        if g >= burn:
            out[g - burn] = w
    return w, phase


def _chunks(n_steps):
    start = 0
    while start < n_steps:
        stop = min(n_steps, start + CHUNK)
        yield start, stop
        start = stop


def kirman_rates(n_agents: int, epsilon: float, delta: float):
    """Up and down probabilities of the count chain, indexed by ``k``."""
    n = int(n_agents)
    k = np.arange(n + 1, dtype=float)
    herd = (1.0 - epsilon) * (1.0 - delta)
    up = (n - k) / n * (epsilon + herd * k / (n - 1))
    down = k / n * (epsilon + herd * (n - k) / (n - 1))
    return up, down


class KirmanModel(ModelSpec):
    """Kirman's recruitment model on ``N`` two-state agents.

    ``init_count`` fixes the number of agents initially in state 1; by
    default each agent starts in state 1 with probability 1/2.
    """

    name = "kirman"
    discrete_observable = True

    def __init__(self, init_count: int | None = None):
        self.init_count = init_count

    def default_params(self) -> ParamVector:
        return ParamVector(("epsilon", "delta"), (0.1, 0.8), ((0.0, 1.0), (0.0, 1.0)))

    def validate(self, params, config):
        if config.n_agents < 2:
            raise ConfigError(f"kirman needs n_agents >= 2, got {config.n_agents}")
        if config.noise_scale != 0.0:
            raise ConfigError("kirman randomness is intrinsic; noise_scale must be 0")

    def state_with_count(self, k: int, config: SimConfig) -> MicroState:
        if not 0 <= k <= config.n_agents:
            raise ConfigError(f"initial count {k} outside [0, {config.n_agents}]")
        a = np.zeros(config.n_agents, dtype=np.int64)
        a[:k] = 1
        return MicroState(a, 0)

    def coerce_state(self, x0, config):
        if isinstance(x0, (int, np.integer)):
            return self.state_with_count(int(x0), config)
        st = super().coerce_state(x0, config)
        st.agent_states = st.agent_states.astype(np.int64)
        if st.agent_states.shape != (config.n_agents,):
            raise ConfigError(f"initial state must have {config.n_agents} agents")
        return st

    def init_state(self, config, rng):
        if self.init_count is not None:
            return self.state_with_count(self.init_count, config)
        return MicroState((rng.random(config.n_agents) < 0.5).astype(np.int64), 0)

    def transition(self, state, params, rng, config):
        u = rng.random(4)
        a = state.agent_states.copy()
        n = a.shape[0]
        i = int(u[0] * n)
        if u[1] < params["epsilon"]:
            a[i] = 1 - a[i]
        else:
            j = int(u[2] * (n - 1))
            if j >= i:
                j += 1
            if u[3] < 1.0 - params["delta"]:
                a[i] = a[j]
        return MicroState(a, state.time_index + 1)

    def measure(self, state, params):
        return int(state.agent_states.sum()) / state.agent_states.shape[0]

    def run(self, state, params, config, rng):
        burn, horizon = config.burn_in_steps, config.horizon
        agents = state.agent_states.astype(np.int64).copy()
        k = int(agents.sum())
        out = np.empty(horizon)
        if burn == 0:
            out[0] = k / agents.shape[0]
        eps, delta = params["epsilon"], params["delta"]
        for lo, hi in _chunks(burn + horizon - 1):
            u = rng.random((hi - lo, 4))
            k = _kirman_kernel(agents, k, eps, delta, u, out, lo, burn)
        return out

    def lattice(self, config):
        n = config.n_agents
        return 0.0, 1.0 / n, n + 1

    def enumerate_states(self, params, config):
        n = config.n_agents
        up, down = kirman_rates(n, params["epsilon"], params["delta"])
        P = np.diag(np.clip(1.0 - up - down, 0.0, 1.0))
        P[np.arange(n), np.arange(1, n + 1)] = up[:-1]
        P[np.arange(1, n + 1), np.arange(n)] = down[1:]
        return np.arange(n + 1) / n, P


class _LatentARModel(ModelSpec):
    """Observable ``offset + scale * z`` of a latent Gaussian AR(1) ``z``."""

    def __init__(self, persistence: float = LATENT_PERSISTENCE):
        self.persistence = float(persistence)

    def _ar(self, params):
        return self.persistence, 1.0

    def _affine(self, params):
        return 0.0, 1.0

    def init_state(self, config, rng):
        return MicroState(np.array([config.noise_multiplier * rng.standard_normal()]), 0)

    def coerce_state(self, x0, config):
        return MicroState(np.atleast_1d(np.asarray(x0, dtype=float)).copy(), 0)

    def transition(self, state, params, rng, config):
        phi, s = self._ar(params)
        xi = rng.standard_normal(1)[0]
        z = phi * state.agent_states[0] + (config.noise_multiplier * s) * xi
        return MicroState(np.array([z]), state.time_index + 1)

    def measure(self, state, params):
        a, b = self._affine(params)
        return a + b * state.agent_states[0]

    def run(self, state, params, config, rng):
        burn, horizon = config.burn_in_steps, config.horizon
        phi, s = self._ar(params)
        z = float(state.agent_states[0])
        zs = np.empty(horizon)
        if burn == 0:
            zs[0] = z
        for lo, hi in _chunks(burn + horizon - 1):
            z = _ar_kernel(z, phi, config.noise_multiplier * s, rng.standard_normal(hi - lo), zs, lo, burn)
        a, b = self._affine(params)
        return a + b * zs


class AR1Model(_LatentARModel):
    """Gaussian AR(1): ``y' = rho y + (1 - eta) sigma xi``; positive control."""

    name = "ar1"

    def default_params(self):
        return ParamVector(("rho", "sigma"), (0.5, 1.0), ((-1.0, 1.0), (0.0, 10.0)))

    def validate(self, params, config):
        if abs(params["rho"]) >= 1.0:
            raise StationarityError(f"AR(1) needs |rho| < 1, got rho={params['rho']}")

    def _ar(self, params):
        return params["rho"], params["sigma"]


class ProductOnlyModel(_LatentARModel):
    """``y = theta1*theta2 + z``: only the product is identified."""

    name = "product"

    def default_params(self):
        return ParamVector(("theta1", "theta2"), (2.0, 3.0), ((0.25, 8.0), (0.25, 8.0)))

    def _affine(self, params):
        return params["theta1"] * params["theta2"], 1.0


class UnusedParamModel(_LatentARModel):
    """``y = theta1 + theta2*z``; ``theta3`` is carried but never used."""

    name = "unused"

    def default_params(self):
        return ParamVector(("theta1", "theta2", "theta3"), (1.0, 1.0, 0.5),
                           ((-5.0, 5.0), (0.05, 5.0), (0.0, 1.0)))

    def _affine(self, params):
        return params["theta1"], params["theta2"]


class TwoMinimaModel(_LatentARModel):
    """``y = theta**2 + z``: ``theta`` and ``-theta`` are observationally equivalent."""

    name = "twominima"

    def default_params(self):
        return ParamVector(("theta",), (1.0,), ((-3.0, 3.0),))

    def _affine(self, params):
        t = params["theta"]
        return t * t, 1.0


class DispersionOnlyModel(ModelSpec):
    """``y = mu + sigma*w`` with antithetic Gaussian pairs ``w = (xi, -xi)``.

    ``sigma`` moves only the dispersion: over whole pairs the sample mean
    equals ``mu`` up to rounding, so a mean-only objective is flat in it.
    State is ``(w, phase)``; one normal is drawn every tick and ignored on
    the closing tick of a pair.
    """

    name = "dispersion"

    def default_params(self):
        return ParamVector(("mu", "sigma"), (1.0, 1.0), ((-5.0, 5.0), (0.05, 5.0)))

    def init_state(self, config, rng):
        return MicroState(np.array([config.noise_multiplier * rng.standard_normal(), 0.0]), 0)

    def coerce_state(self, x0, config):
        arr = np.atleast_1d(np.asarray(x0, dtype=float))
        if arr.size == 1:
            arr = np.array([arr[0], 0.0])
        return MicroState(arr.copy(), 0)

    def transition(self, state, params, rng, config):
        xi = rng.standard_normal(1)[0]
        w, phase = state.agent_states
        if phase == 0.0:
            new = np.array([-w, 1.0])
        else:
            new = np.array([config.noise_multiplier * xi, 0.0])
        return MicroState(new, state.time_index + 1)

    def measure(self, state, params):
        return params["mu"] + params["sigma"] * state.agent_states[0]

    def run(self, state, params, config, rng):
        burn, horizon = config.burn_in_steps, config.horizon
        w, phase = float(state.agent_states[0]), int(state.agent_states[1])
        ws = np.empty(horizon)
        if burn == 0:
            ws[0] = w
        for lo, hi in _chunks(burn + horizon - 1):
            w, phase = _antithetic_kernel(w, phase, config.noise_multiplier,
                                          rng.standard_normal(hi - lo), ws, lo, burn)
        return params["mu"] + params["sigma"] * ws


MODELS = {
    "kirman": KirmanModel,
    "ar1": AR1Model,
    "product": ProductOnlyModel,
    "unused": UnusedParamModel,
    "twominima": TwoMinimaModel,
    "dispersion": DispersionOnlyModel,
}


def get_model(name: str, **options) -> ModelSpec:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known models: {sorted(MODELS)}") from None
    try:
        return cls(**options)
    except TypeError as exc:
        raise ConfigError(f"bad options for model {name!r}: {exc}") from None
