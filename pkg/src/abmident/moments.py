"""Simulated moments and the between/within-run ergodicity diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dgp import ModelSpec, ParamVector, SimConfig, Trajectory, replicate, stack
from .errors import ConfigError, NumericalError, ShapeError

ERGODIC = "Ergodic"
NON_ERGODIC = "NonErgodic"
INCONCLUSIVE = "Inconclusive"
MIN_ERGODICITY_REPLICATES = 8


@dataclass(frozen=True)
class MomentSpec:
    """Which statistics make up a moment vector.

    ``M`` non-centred moments ``mean(y**m)`` (or, with ``central=True``, the
    mean followed by central moments of order ``2..M``), then
    autocovariances at ``lags``.
    """

    M: int = 2
    lags: tuple = ()
    central: bool = False

    def __post_init__(self):
        if int(self.M) < 1:
            raise ConfigError(f"number of moments M must be >= 1, got {self.M}")
        lags = tuple(int(l) for l in self.lags)
        if any(l < 1 for l in lags):
            raise ConfigError(f"autocovariance lags must be >= 1, got {lags}")
        object.__setattr__(self, "lags", lags)

    @property
    def size(self) -> int:
        return self.M + len(self.lags)

    def labels(self) -> list:
        head = "c" if self.central else "m"
        return [f"{head}{m}" for m in range(1, self.M + 1)] + [f"acov{l}" for l in self.lags]

    def as_dict(self) -> dict:
        return {"M": self.M, "lags": list(self.lags), "central": self.central}


@dataclass
class MomentVector:
    raw: np.ndarray
    M: int
    sample_size: int
    autocov: np.ndarray = field(default_factory=lambda: np.empty(0))
    lags: tuple = ()

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.raw, float), np.asarray(self.autocov, float)])

    def __len__(self):
        return self.M + len(self.lags)


def _values(trajectory) -> np.ndarray:
    y = trajectory.observables if isinstance(trajectory, Trajectory) else np.asarray(trajectory, float)
    if y.ndim != 1 or y.size == 0:
        raise ShapeError("trajectory must be a non-empty 1-D series")
    return y


def _raw(y: np.ndarray, M: int) -> np.ndarray:
    out = np.empty(M)
    p = np.ones_like(y)
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(1, M + 1):
            p = p * y
            out[m - 1] = p.mean()
            if not np.isfinite(out[m - 1]):
                raise NumericalError(f"non-centred moment m={m} is not finite")
    return out


def _central(y: np.ndarray, M: int) -> np.ndarray:
    mean = y.mean()
    d = y - mean
    out = np.empty(M)
    out[0] = mean
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(2, M + 1):
            out[m - 1] = np.mean(d**m)
            if not np.isfinite(out[m - 1]):
                raise NumericalError(f"central moment m={m} is not finite")
    return out


def autocovariances(y, lags: Sequence[int]) -> np.ndarray:
    """``(1/(T-L)) sum_j (y_j - ybar)(y_{j+L} - ybar)`` for each lag ``L``."""
    y = _values(y)
    d = y - y.mean()
    out = np.empty(len(lags))
    for i, L in enumerate(lags):
        if L >= y.size:
            raise ShapeError(f"lag {L} needs a trajectory longer than {y.size}")
        out[i] = np.dot(d[:-L], d[L:]) / (y.size - L)
    return out


def raw_moments(trajectory, M: int) -> MomentVector:
    """First ``M`` non-centred moments ``raw[m] = mean(Y**m)``."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    y = _values(trajectory)
    return MomentVector(_raw(y, M), M, y.size)


def central_moments(trajectory, M: int) -> MomentVector:
    """Mean followed by central moments of order ``2..M``."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    y = _values(trajectory)
    return MomentVector(_central(y, M), M, y.size)


def standard_deviation(trajectory) -> float:
    return float(np.sqrt(central_moments(trajectory, 2).raw[1]))


def moments(trajectory, spec: MomentSpec) -> MomentVector:
    y = _values(trajectory)
    head = _central(y, spec.M) if spec.central else _raw(y, spec.M)
    return MomentVector(head, spec.M, y.size, autocovariances(y, spec.lags), spec.lags)


def moment_matrix(replications: Sequence, spec: MomentSpec) -> np.ndarray:
    """Per-replicate moment vectors as an ``(S, K)`` array."""
    if not replications:
        raise ConfigError("need at least one replication")
    stack(replications)
    return np.vstack([moments(t, spec).vector() for t in replications])


def pooled(replications: Sequence, spec: MomentSpec) -> MomentVector:
    """Arithmetic mean over replicates of the per-replicate moments."""
    mat = moment_matrix(replications, spec)
    vec = mat.mean(axis=0)
    T = len(replications[0])
    return MomentVector(vec[: spec.M], spec.M, T * len(replications), vec[spec.M:], spec.lags)


def pooled_moments(replications: Sequence, M: int) -> MomentVector:
    """``mu_m = (1/S) sum_s (1/T) sum_t y_t**m``."""
    return pooled(replications, MomentSpec(M))


def moment_standard_errors(replications: Sequence, spec: MomentSpec) -> np.ndarray:
    """Monte Carlo standard error of each pooled moment (between-replicate)."""
    mat = moment_matrix(replications, spec)
    if mat.shape[0] < 2:
        raise ConfigError("standard errors need at least two replications")
    return mat.std(axis=0, ddof=1) / math.sqrt(mat.shape[0])


def batch_means_se(x: np.ndarray) -> float:
    """Standard error of ``mean(x)`` from ``ceil(sqrt(T))`` non-overlapping batches.

    Trailing samples that do not fill the last batch are dropped.
    """
    T = x.size
    B = math.ceil(math.sqrt(T))
    size = T // B
    if B < 2 or size < 1:
        return 0.0
    means = x[: B * size].reshape(B, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(B))


@dataclass
class ErgodicityReport:
    per_moment_ratio: np.ndarray
    verdict: str
    threshold_used: float
    between_sd: np.ndarray = field(default_factory=lambda: np.empty(0))
    within_se: np.ndarray = field(default_factory=lambda: np.empty(0))
    replications: int = 0

    def as_dict(self) -> dict:
        def enc(a):
            return [float(v) if np.isfinite(v) else None for v in a]

        return {
            "verdict": self.verdict,
            "threshold": self.threshold_used,
            "per_moment_ratio": enc(self.per_moment_ratio),
            "between_sd": enc(self.between_sd),
            "within_se": enc(self.within_se),
            "replications": self.replications,
            "note": "null ratio means infinite (dispersion with zero within-run error)",
        }


def ergodicity_test(replications: Sequence, M: int = 2, threshold: float = 2.0) -> ErgodicityReport:
    """Compare between-run dispersion of time averages with within-run error.

    For moment ``m`` the ratio is the standard deviation over replicates of
    ``mean(Y**m)`` divided by the median batch-means standard error within
    replicates.  ``0/0`` counts as 0 and ``x/0`` with ``x > 0`` as infinity.
    Ergodic iff every ratio <= threshold; NonErgodic iff any ratio exceeds
    three times the threshold; Inconclusive otherwise.
    """
    S = len(replications)
    if S < MIN_ERGODICITY_REPLICATES:
        raise ConfigError(f"ergodicity test needs >= {MIN_ERGODICITY_REPLICATES} replications, got {S}")
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    Y = stack(replications)
    ratios = np.empty(M)
    between = np.empty(M)
    within = np.empty(M)
    powers = np.ones_like(Y)
    for m in range(M):
        powers = powers * Y
        between[m] = powers.mean(axis=1).std(ddof=1)
        within[m] = float(np.median([batch_means_se(row) for row in powers]))
        if within[m] > 0:
            ratios[m] = between[m] / within[m]
        else:
            ratios[m] = 0.0 if between[m] == 0 else math.inf
    if np.all(ratios <= threshold):
        verdict = ERGODIC
    elif np.any(ratios > 3 * threshold):
        verdict = NON_ERGODIC
    else:
        verdict = INCONCLUSIVE
    return ErgodicityReport(ratios, verdict, float(threshold), between, within, S)


def ergodicity_check(model: ModelSpec, params: ParamVector, config: SimConfig, starts: Sequence,
                     M: int = 2, threshold: float = 2.0, threads: int | None = None) -> ErgodicityReport:
    """Simulate replicates launched from ``starts`` (cycled) and run :func:`ergodicity_test`."""
    reps = replicate(model, params, config, threads=threads, initial_states=starts)
    return ergodicity_test(reps, M, threshold)
