"""Exact finite-chain machinery and a 1-D stationary Fokker-Planck solver.

For models that can enumerate their state space the one-step transition
matrix ``P(x, y) = Pr(X_{j+1} = y | X_j = x)`` gives the stationary law
``pi P = pi`` exactly, hence noise-free moments and objective surfaces.

The diffusion convention is ``dX = Omega(X) dt + sqrt(2 D(X)) dW``.  With
zero-flux boundaries its stationary density is

    p(x) ~ (1 / D(x)) * exp( int_a^x Omega(u) / D(u) du ).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.sparse.csgraph import connected_components

from .dgp import ModelSpec, ParamVector, SimConfig
from .errors import ConfigError, MultipleStationaryError, NumericalError, ShapeError
from .moments import MomentSpec, MomentVector
from .smd import GridSpec, ObjectiveSurface, WeightMatrix, _evaluate, _finish, fmt, objective

LINEAR_SOLVE = "LinearSolve"
POWER_ITERATION = "PowerIteration"
ROW_SUM_TOL = 1e-12
DAMPING = 0.99
POWER_THRESHOLD = 2000


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix over ordered ``states``.

    ``values`` holds the observable attached to each state when the matrix
    came from a model, otherwise it equals ``states``.
    """

    states: tuple
    probs: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.probs, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ShapeError(f"transition matrix must be square, got shape {P.shape}")
        if len(self.states) != P.shape[0]:
            raise ShapeError(f"{len(self.states)} state labels for a {P.shape[0]}-state matrix")
        if not np.all(np.isfinite(P)):
            raise NumericalError("transition matrix has non-finite entries")
        if P.min() < 0.0 or P.max() > 1.0:
            raise ConfigError("transition probabilities must lie in [0, 1]")
        dev = np.abs(P.sum(axis=1) - 1.0).max()
        if dev > ROW_SUM_TOL:
            raise ConfigError(f"rows must sum to 1 within {ROW_SUM_TOL}, worst deviation {dev:.3e}")
        object.__setattr__(self, "probs", P)
        vals = np.asarray(self.states, float) if self.values is None else np.asarray(self.values, float)
        if vals.shape != (P.shape[0],):
            raise ShapeError("one observable value per state is required")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "states", tuple(self.states))

    @classmethod
    def from_array(cls, probs) -> "TransitionMatrix":
        probs = np.asarray(probs, float)
        return cls(tuple(range(probs.shape[0])), probs)

    @property
    def size(self) -> int:
        return self.probs.shape[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["state"] + [str(s) for s in self.states])
            for s, row in zip(self.states, self.probs):
                w.writerow([str(s)] + [fmt(v) for v in row])


@dataclass
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    method: str
    states: tuple = ()
    values: np.ndarray | None = None
    iterations: int = 0

    def as_dict(self) -> dict:
        return {"pi": [float(v) for v in self.pi], "residual": self.residual, "method": self.method,
                "states": list(self.states), "iterations": self.iterations}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["state", "value", "pi"])
            for s, v, p in zip(self.states, self.values, self.pi):
                w.writerow([str(s), fmt(v), fmt(p)])


def transition_matrix(model: ModelSpec, params: ParamVector, config: SimConfig) -> TransitionMatrix:
    """Exact one-step law of an enumerable model (capability error otherwise)."""
    params.check_bounds()
    model.validate(params, config)
    values, P = model.enumerate_states(params, config)
    return TransitionMatrix(tuple(range(len(values))), P, values)


def n_step(P: TransitionMatrix, n: int) -> TransitionMatrix:
    """``P**n`` by repeated squaring."""
    n = int(n)
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    result = None
    base = P.probs
    while n:
        if n & 1:
            result = base if result is None else result @ base
        n >>= 1
        if n:
            base = base @ base
    # renormalise the rows against accumulated rounding
    result = np.clip(result, 0.0, 1.0)
    result /= result.sum(axis=1, keepdims=True)
    return TransitionMatrix(P.states, result, P.values)


def closed_classes(P: TransitionMatrix) -> list:
    """Closed communicating classes as sorted index arrays."""
    adj = P.probs > 0
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    leaves = np.zeros(n_comp, dtype=bool)
    leaves[:] = True
    rows, cols = np.nonzero(adj)
    leaving = labels[rows] != labels[cols]
    leaves[np.unique(labels[rows[leaving]])] = False
    return [np.flatnonzero(labels == c) for c in range(n_comp) if leaves[c]]


def _residual(pi, P) -> float:
    return float(np.abs(pi @ P - pi).sum())


def _linear_solve(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(A, b)


def _power(P: np.ndarray, tol: float, max_iter: int, pi0=None) -> tuple:
    n = P.shape[0]
    pi = np.full(n, 1.0 / n) if pi0 is None else np.asarray(pi0, float)
    for it in range(1, max_iter + 1):
        nxt = DAMPING * (pi @ P) + (1.0 - DAMPING) * pi
        nxt /= nxt.sum()
        pi = nxt
        if it % 16 == 0 and _residual(pi, P) <= tol:
            return pi, it
    return pi, max_iter


def _clean(pi) -> np.ndarray:
    pi = np.where(pi < 0, 0.0, pi)
    return pi / pi.sum()


def stationary_distribution(P: TransitionMatrix, tol: float = 1e-10, method: str | None = None,
                            max_iter: int = 1_000_000) -> StationaryDistribution:
    """Unique ``pi`` with ``pi P = pi``.

    Uniqueness is decided structurally: more than one closed communicating
    class raises :class:`MultipleStationaryError` carrying one stationary
    vector per class.  ``method`` defaults to the linear solve for chains
    up to 2000 states and damped power iteration
    (``pi <- 0.99 pi P + 0.01 pi``) above that.  A linear solve that misses
    ``tol`` is polished by power iteration.
    """
    classes = closed_classes(P)
    if len(classes) > 1:
        basis = []
        for cls in classes:
            sub = P.probs[np.ix_(cls, cls)]
            sub = sub / sub.sum(axis=1, keepdims=True)
            vec = np.zeros(P.size)
            vec[cls] = _clean(_linear_solve(sub)) if cls.size > 1 else 1.0
            basis.append(vec)
        raise MultipleStationaryError(np.array(basis))
    if method is None:
        method = LINEAR_SOLVE if P.size <= POWER_THRESHOLD else POWER_ITERATION
    if method == LINEAR_SOLVE:
        pi = _clean(_linear_solve(P.probs))
        iters = 0
        if _residual(pi, P.probs) > tol:
            pi, iters = _power(P.probs, tol, max_iter, pi)
            pi = _clean(pi)
    elif method == POWER_ITERATION:
        pi, iters = _power(P.probs, tol, max_iter)
        pi = _clean(pi)
    else:
        raise ConfigError(f"unknown stationary method {method!r}")
    res = _residual(pi, P.probs)
    if res > tol:
        raise NumericalError(f"stationary residual {res:.3e} exceeds tolerance {tol:.1e}")
    return StationaryDistribution(pi, res, method, P.states, P.values, iters)


def _measure_values(pi: StationaryDistribution, measure) -> np.ndarray:
    if measure is None:
        return np.asarray(pi.values, float)
    if callable(measure):
        return np.array([float(measure(s)) for s in pi.states])
    y = np.asarray(measure, float)
    if y.shape != pi.pi.shape:
        raise ShapeError(f"measure has {y.size} values for {pi.pi.size} states")
    return y


def analytic_moments(pi: StationaryDistribution, measure=None, M: int | MomentSpec = 2,
                     P: TransitionMatrix | None = None) -> MomentVector:
    """Exact stationary moments ``raw[m] = sum_s pi(s) y(s)**m``.

    ``measure`` is a callable on state labels, an array of per-state values
    or ``None`` for the values stored with ``pi``.  Passing a
    :class:`MomentSpec` also yields central moments and lag-``L``
    autocovariances ``sum_s pi(s) y(s) (P^L y)(s) - mean**2`` (these need
    ``P``).  ``sample_size`` is 0, marking an exact (infinite-sample) value.
    """
    spec = M if isinstance(M, MomentSpec) else MomentSpec(int(M))
    y = _measure_values(pi, measure)
    w = pi.pi
    mean = float(w @ y)
    head = np.empty(spec.M)
    if spec.central:
        head[0] = mean
        for m in range(2, spec.M + 1):
            head[m - 1] = float(w @ (y - mean) ** m)
    else:
        p = np.ones_like(y)
        for m in range(1, spec.M + 1):
            p = p * y
            head[m - 1] = float(w @ p)
    acov = np.empty(len(spec.lags))
    if spec.lags:
        if P is None:
            raise ConfigError("autocovariances need the transition matrix P")
        for i, L in enumerate(spec.lags):
            acov[i] = float(w @ (y * (n_step(P, L).probs @ y))) - mean * mean
    return MomentVector(head, spec.M, 0, acov, spec.lags)


def model_moments(model: ModelSpec, params: ParamVector, config: SimConfig,
                  spec: MomentSpec, tol: float = 1e-10) -> MomentVector:
    P = transition_matrix(model, params, config)
    return analytic_moments(stationary_distribution(P, tol), None, spec, P)


def analytic_objective(model: ModelSpec, grid: GridSpec, config: SimConfig, target: MomentVector,
                       W: WeightMatrix | None = None, spec: MomentSpec | None = None,
                       threads: int | None = None, tol: float = 1e-10) -> ObjectiveSurface:
    """Noise-free surface ``J(theta)`` from exact stationary moments.

    Nodes whose chain is reducible or otherwise fails are marked invalid;
    a model without enumeration raises before any node is evaluated.
    """
    spec = spec or MomentSpec(target.M, tuple(target.lags))
    if spec.size != len(target):
        raise ShapeError(f"target has {len(target)} entries but moment spec needs {spec.size}")
    W = W or WeightMatrix.identity(spec.size)
    model.enumerate_states(grid.params_at(tuple(0 for _ in grid.shape)), config)

    def node(i, theta):
        return objective(target, model_moments(model, theta, config, spec, tol), W)

    values, valid, errors = _evaluate(grid, node, threads)
    surf = ObjectiveSurface(grid, values, valid, spec, W, config.master_seed, False, config,
                            target.vector(), "analytic", errors)
    return _finish(surf)


def ergodic_limit(P: TransitionMatrix, pi: StationaryDistribution | None = None, tol: float = 1e-8,
                  max_doublings: int = 64) -> tuple:
    """Smallest power of two ``n`` with every row of ``P**n`` within ``tol`` (l1) of ``pi``.

    Returns ``(n, distance)``; raises :class:`NumericalError` if the rows
    have not converged after ``max_doublings`` squarings.
    """
    pi = pi or stationary_distribution(P)
    Q = P.probs
    n = 1
    for _ in range(max_doublings + 1):
        dist = float(np.abs(Q - pi.pi).sum(axis=1).max())
        if dist <= tol:
            return n, dist
        Q = Q @ Q
        n *= 2
    raise NumericalError(f"rows of P^n still {dist:.3e} from pi at n=2^{max_doublings}")


@dataclass(frozen=True)
class FPSpec:
    """1-D diffusion ``dX = drift(X) dt + sqrt(2 diffusion(X)) dW`` on ``domain``."""

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    domain: tuple
    grid_points: int = 2001
    d_min: float = 1e-12

    def __post_init__(self):
        a, b = (float(v) for v in self.domain)
        if not b > a:
            raise ConfigError(f"domain must satisfy a < b, got {self.domain}")
        if int(self.grid_points) < 3:
            raise ConfigError("grid_points must be >= 3")
        object.__setattr__(self, "domain", (a, b))


@dataclass
class FPDensity:
    x: np.ndarray
    p: np.ndarray
    spec_info: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(integrate.trapezoid(self.p, self.x))

    def mean(self) -> float:
        return float(integrate.trapezoid(self.x * self.p, self.x))

    def variance(self) -> float:
        m = self.mean()
        return float(integrate.trapezoid((self.x - m) ** 2 * self.p, self.x))

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.x, self.p, left=0.0, right=0.0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["x", "density"])
            for a, b in zip(self.x, self.p):
                w.writerow([fmt(a), fmt(b)])


def fp_stationary_density(spec: FPSpec) -> FPDensity:
    """Zero-flux stationary density on a uniform grid, trapezoid-normalised."""
    a, b = spec.domain
    x = np.linspace(a, b, int(spec.grid_points))
    D = np.broadcast_to(np.asarray(spec.diffusion(x), float), x.shape)
    if not np.all(np.isfinite(D)) or D.min() < spec.d_min:
        raise NumericalError(f"diffusion falls below d_min={spec.d_min:g} on the grid (singular diffusion)")
    drift = np.broadcast_to(np.asarray(spec.drift(x), float), x.shape)
    logp = integrate.cumulative_trapezoid(drift / D, x, initial=0.0) - np.log(D)
    p = np.exp(logp - logp.max())
    p /= integrate.trapezoid(p, x)
    return FPDensity(x, p, {"domain": [a, b], "grid_points": int(spec.grid_points),
                            "convention": "dX = drift dt + sqrt(2 D) dW"})


def kirman_fp_spec(n_agents: int, epsilon: float, delta: float, grid_points: int = 2001) -> FPSpec:
    """Mean-field drift and diffusion of the herding chain in ``x = k / N``.

    Both come from the exact birth/death rates with ``k = N x`` treated as
    continuous: per step ``E[dx] = (up - down) / N`` and
    ``Var[dx] ~ (up + down) / N**2``, so ``D = (up + down) / (2 N**2)``.
    """
    N = int(n_agents)
    if N < 2:
        raise ConfigError("n_agents must be >= 2")
    herd = (1.0 - epsilon) * (1.0 - delta)

    def rates(x):
        x = np.asarray(x, float)
        up = (1.0 - x) * (epsilon + herd * N * x / (N - 1))
        down = x * (epsilon + herd * N * (1.0 - x) / (N - 1))
        return up, down

    def drift(x):
        up, down = rates(x)
        return (up - down) / N

    def diffusion(x):
        up, down = rates(x)
        return (up + down) / (2.0 * N * N)

    return FPSpec(drift, diffusion, (0.0, 1.0), grid_points)


def fp_on_lattice(density: FPDensity, points: Sequence[float]) -> np.ndarray:
    """Density evaluated at ``points`` and normalised to a probability vector."""
    w = density(np.asarray(points, float))
    return w / w.sum()
