"""Indirect inference with an AR(p) auxiliary model and an identification search.

The auxiliary statistic of a series is the OLS fit of
``Y_j = c + a_1 Y_{j-1} + ... + a_p Y_{j-p} + e_j``, stacked as
``(c, a_1..a_p, resid_var)``.  The binding function averages it over
replicates.  A structural parameter is declared not identified when some
grid node away from the reference reproduces the reference binding
function up to the Monte Carlo noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dgp import ModelSpec, ParamVector, SimConfig, Trajectory, replicate
from .errors import AbmIdentError, ConfigError, ShapeError
from .smd import SCHEMA_VERSION, GridSpec, WeightMatrix, _evaluate, config_hash, fmt

IDENTIFIED = "Identified"
NOT_IDENTIFIED = "NotIdentified"
DEFAULT_P = 2


@dataclass(frozen=True)
class AuxParams:
    intercept: float
    ar_coeffs: tuple
    resid_var: float
    p: int
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ar_coeffs", tuple(float(a) for a in self.ar_coeffs))
        if len(self.ar_coeffs) != self.p:
            raise ShapeError(f"{len(self.ar_coeffs)} AR coefficients for p={self.p}")
        if self.resid_var < 0:
            raise ConfigError("resid_var must be >= 0")

    def vector(self) -> np.ndarray:
        return np.array([self.intercept, *self.ar_coeffs, self.resid_var])

    @classmethod
    def from_vector(cls, v, degenerate: bool = False) -> "AuxParams":
        v = np.asarray(v, float)
        return cls(float(v[0]), tuple(v[1:-1]), float(v[-1]), v.size - 2, degenerate)

    def labels(self) -> list:
        return ["intercept"] + [f"ar{i}" for i in range(1, self.p + 1)] + ["resid_var"]

    def as_dict(self) -> dict:
        return {"intercept": self.intercept, "ar_coeffs": list(self.ar_coeffs),
                "resid_var": self.resid_var, "p": self.p, "degenerate": self.degenerate}


def _design(y: np.ndarray, p: int) -> tuple:
    T = y.size
    X = np.empty((T - p, p + 1))
    X[:, 0] = 1.0
    for i in range(1, p + 1):
        X[:, i] = y[p - i: T - i]
    return X, y[p:]


def fit_auxiliary(trajectory, p: int = DEFAULT_P) -> AuxParams:
    """OLS fit of the AR(p) auxiliary model with intercept.

    ``resid_var = RSS / (T - p - (p + 1))``.  A rank-deficient design (for
    example a constant series) gives a degenerate fit: AR coefficients 0,
    intercept the sample mean, ``resid_var`` the sample variance.
    """
    y = trajectory.observables if isinstance(trajectory, Trajectory) else np.asarray(trajectory, float)
    p = int(p)
    if p < 1:
        raise ConfigError(f"auxiliary order p must be >= 1, got {p}")
    T = y.size
    if T <= 10 * (p + 1):
        raise ConfigError(f"series of length {T} too short for AR({p}); need T > {10 * (p + 1)}")
    X, target = _design(y, p)
    coef, _, rank, _ = np.linalg.lstsq(X, target, rcond=None)
    if rank < p + 1:
        return AuxParams(float(y.mean()), (0.0,) * p, float(y.var()), p, True)
    resid = target - X @ coef
    rss = float(resid @ resid)
    return AuxParams(float(coef[0]), tuple(coef[1:]), rss / (T - p - (p + 1)), p)


def binding_function(model: ModelSpec, theta: ParamVector, config: SimConfig, p: int = DEFAULT_P, *,
                     seed_base: int | None = None, threads: int | None = None,
                     return_matrix: bool = False):
    """Component-wise mean of the auxiliary fits over ``config.replications``.

    The result is flagged degenerate if any replicate fit was.  With
    ``return_matrix`` also returns the ``(S, p + 2)`` per-replicate stack.
    """
    reps = replicate(model, theta, config, threads=threads, seed_base=seed_base)
    fits = []
    for r, t in enumerate(reps):
        try:
            fits.append(fit_auxiliary(t, p))
        except AbmIdentError as exc:
            exc.args = (f"replicate {r}: {exc.args[0]}",) + exc.args[1:]
            raise
    mat = np.vstack([f.vector() for f in fits])
    aux = AuxParams.from_vector(mat.mean(axis=0), any(f.degenerate for f in fits))
    return (aux, mat) if return_matrix else aux


def _select(vec: np.ndarray, components) -> np.ndarray:
    return vec if components is None else vec[list(components)]


def ii_distance(aux_real: AuxParams, aux_sim: AuxParams, W: WeightMatrix | None = None,
                components: Sequence[int] | None = None) -> float:
    """``d' W d`` on the stacked difference, restricted to ``components`` if given."""
    if aux_real.p != aux_sim.p:
        raise ShapeError(f"auxiliary orders differ: {aux_real.p} vs {aux_sim.p}")
    d = _select(aux_real.vector() - aux_sim.vector(), components)
    W = W or WeightMatrix.identity(d.size)
    if W.size != d.size:
        raise ShapeError(f"weight matrix is {W.size}x{W.size} but the distance has {d.size} components")
    return max(float(d @ W.matrix @ d), 0.0)


def jackknife_cov(mat: np.ndarray) -> np.ndarray:
    """Delete-one jackknife covariance of the replicate mean."""
    S = mat.shape[0]
    if S < 2:
        raise ConfigError("jackknife needs at least two replications")
    loo = (mat.sum(axis=0) - mat) / (S - 1)
    c = loo - loo.mean(axis=0)
    return (S - 1) / S * (c.T @ c)


def default_match_tol(mat: np.ndarray, W: WeightMatrix, components) -> float:
    """Three Monte Carlo standard errors' worth of ``ii_distance`` at the reference.

    For two independent binding estimates with covariance ``C`` the
    expected distance is ``2 tr(W C)``; ``C`` comes from the jackknife.
    """
    C = jackknife_cov(mat)
    if components is not None:
        C = C[np.ix_(list(components), list(components))]
    return 3.0 * 2.0 * float(np.trace(W.matrix @ C))


@dataclass
class IIReport:
    theta_ref: ParamVector
    matches: list
    verdict: str
    search_spec: dict
    b_ref: AuxParams | None = None
    match_tol: float = 0.0
    exclusion_radius: object = 0.0
    distances: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "verdict": self.verdict,
            "theta_ref": self.theta_ref.as_dict(),
            "b_ref": None if self.b_ref is None else self.b_ref.as_dict(),
            "match_tol": self.match_tol,
            "exclusion_radius": np.asarray(self.exclusion_radius, float).tolist(),
            "matches": [{"params": m["params"], "distance": m["distance"]} for m in self.matches],
            "search": self.search_spec,
            "config_hash": config_hash(self.search_spec),
            "warnings": list(self.warnings),
        }

    def write_matches_csv(self, path) -> None:
        names = list(self.search_spec["grid"]["axes"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(names + ["distance"])
            for m in self.matches:
                w.writerow([fmt(m["params"][n]) for n in names] + [fmt(m["distance"])])


def ii_ident_test(model: ModelSpec, theta_ref: ParamVector, grid: GridSpec, config: SimConfig,
                  p: int = DEFAULT_P, match_tol: float | None = None, exclusion_radius=None,
                  W: WeightMatrix | None = None, include_resid_var: bool = True,
                  threads: int | None = None) -> IIReport:
    """Scan ``grid`` under common random numbers for binding-function matches.

    A node matches when ``max_d |theta_d - ref_d| / radius_d > 1`` (outside
    the exclusion box) and its distance to the reference binding function
    is at most ``match_tol``.  Defaults: one grid cell as the radius and
    the jackknife noise level of :func:`default_match_tol`.
    """
    names = grid.names
    for n in names:
        lo, hi = grid.axes[n][0], grid.axes[n][-1]
        if not lo <= theta_ref[n] <= hi:
            raise ConfigError(f"theta_ref[{n!r}]={theta_ref[n]} lies outside the grid box [{lo}, {hi}]")
    components = None if include_resid_var else list(range(p + 1))
    b_ref, mat = binding_function(model, theta_ref, config, p, threads=threads, return_matrix=True)
    k = mat.shape[1] if components is None else len(components)
    W = W or WeightMatrix.identity(k)
    tol = default_match_tol(mat, W, components) if match_tol is None else float(match_tol)
    radius = grid.spacing() if exclusion_radius is None else \
        np.broadcast_to(np.asarray(exclusion_radius, float), (len(names),)).copy()
    if np.any(radius <= 0):
        raise ConfigError("exclusion radius must be positive in every dimension")

    def node(i, theta):
        return ii_distance(b_ref, binding_function(model, theta, config, p, threads=1), W, components)

    values, valid, errors = _evaluate(grid, node, threads)
    ref = np.array([theta_ref[n] for n in names])
    matches = []
    for idx in grid.indices():
        if not valid[idx]:
            continue
        pt = grid.point(idx)
        x = np.array([pt[n] for n in names])
        if np.max(np.abs(x - ref) / radius) > 1.0 and values[idx] <= tol:
            matches.append({"index": list(idx), "params": {n: float(pt[n]) for n in names},
                            "distance": float(values[idx])})
    warnings = [f"node {list(i)} failed: {e}" for i, e in sorted(errors.items())]
    best = tuple(int(i) for i in np.unravel_index(int(np.argmin(np.where(valid, values, np.inf))), values.shape))
    if any(n > 1 and (i == 0 or i == n - 1) for i, n in zip(best, values.shape)):
        warnings.append(f"smallest distance on grid boundary at node {list(best)}")
    if b_ref.degenerate:
        warnings.append("reference binding function is degenerate (constant series)")
    search = {"grid": grid.as_dict(), "config": config.as_dict(), "p": int(p),
              "include_resid_var": include_resid_var, "weight": W.as_dict(), "crn": True,
              "master_seed": int(config.master_seed)}
    verdict = NOT_IDENTIFIED if matches else IDENTIFIED
    return IIReport(theta_ref, matches, verdict, search, b_ref, tol, radius, values, warnings)
