"""Simulated minimum distance surfaces and identification classes.

The distance is ``J(theta) = (mu_R - mu_S(theta))' W (mu_R - mu_S(theta))``;
the estimator maximises ``Q = -J``, i.e. minimises ``J``.  Surfaces are
built on rectangular grids, by default with common random numbers (every
node reuses the child seeds ``derive(master_seed, r)``).

Class labels follow the four classic identification failures:

* ``ObservationalEquivalence`` - global minima split into more than one
  basin separated by a barrier (see :func:`basins`).
* ``UnderIdentified`` - the surface is flat along a parameter.
* ``PartiallyIdentified`` - a (near) null Hessian direction mixing two or
  more parameters, i.e. a ridge.
* ``WeaklyIdentified`` - a unique minimum whose curvature ratio
  ``lambda_min / lambda_max`` is tiny but non-zero.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Mapping, Sequence

import numpy as np

from .dgp import ModelSpec, ParamVector, SimConfig, derive, parallel_map, replicate
from .errors import AbmIdentError, ConfigError, ShapeError
from .moments import MomentSpec, MomentVector, moment_matrix, pooled

SCHEMA_VERSION = 1

IDENTIFIED = "Identified"
OBSERVATIONAL_EQUIVALENCE = "ObservationalEquivalence"
UNDER_IDENTIFIED = "UnderIdentified"
PARTIALLY_IDENTIFIED = "PartiallyIdentified"
WEAKLY_IDENTIFIED = "WeaklyIdentified"
FAILURE_CLASSES = (OBSERVATIONAL_EQUIVALENCE, UNDER_IDENTIFIED, PARTIALLY_IDENTIFIED, WEAKLY_IDENTIFIED)

IDENTITY = "Identity"
DIAGONAL_INVERSE_VARIANCE = "DiagonalInverseVariance"
FULL_INVERSE_COVARIANCE = "FullInverseCovariance"

# separates non-CRN node seed streams from the replicate indices
NODE_SEED_OFFSET = 1 << 32


@dataclass(frozen=True)
class WeightMatrix:
    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if W.shape[0] != W.shape[1]:
            raise ShapeError(f"weight matrix must be square, got {W.shape}")
        scale = max(float(np.abs(W).max()), 1.0)
        if not np.allclose(W, W.T, rtol=0, atol=1e-12 * scale):
            raise ConfigError("weight matrix is not symmetric (relative tolerance 1e-12)")
        W = 0.5 * (W + W.T)
        vals, vecs = np.linalg.eigh(W)
        if vals.min() < -1e-10 * scale:
            raise ConfigError(f"weight matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
        if vals.min() < 0:
            W = (vecs * np.clip(vals, 0, None)) @ vecs.T
        W.setflags(write=False)
        object.__setattr__(self, "matrix", W)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, size: int) -> "WeightMatrix":
        return cls(IDENTITY, np.eye(size))

    @classmethod
    def from_replications(cls, kind: str, replications: Sequence, spec: MomentSpec) -> "WeightMatrix":
        """Inverse (co)variance of the pooled moments, estimated across replicates."""
        if kind == IDENTITY:
            return cls.identity(spec.size)
        mat = moment_matrix(replications, spec)
        if mat.shape[0] < 2:
            raise ConfigError(f"{kind} weighting needs at least two replications")
        cov = np.atleast_2d(np.cov(mat, rowvar=False)) / mat.shape[0]
        if kind == DIAGONAL_INVERSE_VARIANCE:
            var = np.diag(cov)
            inv = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), 0.0)
            return cls(kind, np.diag(inv))
        if kind == FULL_INVERSE_COVARIANCE:
            inv = np.linalg.pinv(cov, hermitian=True)
            return cls(kind, 0.5 * (inv + inv.T))
        raise ConfigError(f"unknown weight kind {kind!r}")

    def scaled(self, c: float) -> "WeightMatrix":
        if c <= 0:
            raise ConfigError("weight scale must be positive")
        return WeightMatrix(self.kind, self.matrix * c)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "matrix": self.matrix.tolist()}


def objective(mu_target, mu_sim, W: WeightMatrix) -> float:
    """Quadratic distance ``d' W d`` with ``d = mu_target - mu_sim``."""
    a = mu_target.vector() if isinstance(mu_target, MomentVector) else np.asarray(mu_target, float)
    b = mu_sim.vector() if isinstance(mu_sim, MomentVector) else np.asarray(mu_sim, float)
    if a.shape != b.shape:
        raise ShapeError(f"moment vectors differ in length: {a.size} vs {b.size}")
    if W.size != a.size:
        raise ShapeError(f"weight matrix is {W.size}x{W.size} but moment vector has {a.size} entries")
    d = a - b
    return max(float(d @ W.matrix @ d), 0.0)


@dataclass
class GridSpec:
    """Rectangular lattice over some parameters; the rest stay at ``base``."""

    base: ParamVector
    axes: dict

    def __post_init__(self):
        axes = {}
        for name, pts in self.axes.items():
            self.base.index(name)
            arr = np.asarray(pts, dtype=float).ravel()
            if arr.size < 1:
                raise ConfigError(f"grid axis {name!r} is empty")
            if arr.size > 1 and np.any(np.diff(arr) <= 0):
                raise ConfigError(f"grid axis {name!r} must be strictly increasing")
            axes[name] = arr
        if not axes:
            raise ConfigError("grid needs at least one swept dimension")
        self.axes = axes

    @classmethod
    def linspace(cls, base: ParamVector, spec: Mapping[str, tuple]) -> "GridSpec":
        """``spec`` maps a name to ``(lo, hi, count)``."""
        return cls(base, {n: np.linspace(float(lo), float(hi), int(k)) for n, (lo, hi, k) in spec.items()})

    @property
    def names(self) -> list:
        return list(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes.values())

    def __len__(self):
        return int(np.prod(self.shape))

    def indices(self):
        return list(product(*(range(n) for n in self.shape)))

    def point(self, index) -> dict:
        return {n: float(self.axes[n][i]) for n, i in zip(self.axes, index)}

    def params_at(self, index) -> ParamVector:
        return self.base.with_values(self.point(index))

    def spacing(self, index=None) -> np.ndarray:
        out = []
        for n, a in self.axes.items():
            out.append(float(np.min(np.diff(a))) if a.size > 1 else 0.0)
        return np.array(out)

    def as_dict(self) -> dict:
        return {"axes": {n: a.tolist() for n, a in self.axes.items()}, "fixed": self.base.as_dict()}


@dataclass
class ObjectiveSurface:
    grid: GridSpec
    values: np.ndarray
    valid: np.ndarray
    moment_spec: MomentSpec
    W: WeightMatrix
    master_seed: int
    crn: bool
    config: SimConfig | None
    target: np.ndarray
    kind: str = "simulated"
    node_errors: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def names(self):
        return self.grid.names

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid]

    def value_range(self) -> float:
        v = self.valid_values()
        return float(v.max() - v.min()) if v.size else 0.0

    def argmin(self) -> tuple:
        masked = np.where(self.valid, self.values, np.inf)
        return tuple(int(i) for i in np.unravel_index(int(np.argmin(masked)), self.values.shape))

    def on_boundary(self, index) -> bool:
        return any(n > 1 and (i == 0 or i == n - 1) for i, n in zip(index, self.values.shape))

    def provenance(self) -> dict:
        cfg = self.config.as_dict() if self.config is not None else None
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "grid": self.grid.as_dict(),
            "moments": self.moment_spec.as_dict(),
            "moment_labels": self.moment_spec.labels(),
            "weight": self.W.as_dict(),
            "master_seed": int(self.master_seed),
            "crn": bool(self.crn),
            "config": cfg,
            "config_hash": config_hash(cfg),
            "target": [float(v) for v in self.target],
            "invalid_nodes": {",".join(map(str, k)): v for k, v in sorted(self.node_errors.items())},
            "warnings": list(self.warnings),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(self.names + ["J", "valid"])
            for idx in self.grid.indices():
                pt = self.grid.point(idx)
                val = self.values[idx]
                w.writerow([fmt(pt[n]) for n in self.names] + [fmt(val) if self.valid[idx] else "", int(self.valid[idx])])

    def write(self, csv_path, json_path) -> None:
        self.write_csv(csv_path)
        dump_json(self.provenance(), json_path)


def fmt(x: float) -> str:
    return repr(float(x))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def simulated_objective(model: ModelSpec, config: SimConfig, target: MomentVector, W: WeightMatrix,
                        spec: MomentSpec, *, seed_base: int | None = None) -> Callable[[ParamVector], float]:
    """``theta -> J`` with the replicate seeds fixed (common random numbers)."""
    base = config.master_seed if seed_base is None else seed_base

    def J(theta: ParamVector) -> float:
        reps = replicate(model, theta, config, threads=1, seed_base=base)
        return objective(target, pooled(reps, spec), W)

    return J


def _evaluate(grid: GridSpec, fn_for_node: Callable, threads) -> tuple:
    idx = grid.indices()

    def one(i):
        try:
            return fn_for_node(i, grid.params_at(i)), None
        except AbmIdentError as exc:
            return math.nan, f"{type(exc).__name__}: {exc}"

    results = parallel_map(one, idx, threads)
    values = np.full(grid.shape, np.nan)
    valid = np.zeros(grid.shape, dtype=bool)
    errors = {}
    for i, (v, err) in zip(idx, results):
        if err is None and np.isfinite(v):
            values[i] = v
            valid[i] = True
        else:
            errors[i] = err or "non-finite objective"
    return values, valid, errors


def _finish(surface: ObjectiveSurface) -> ObjectiveSurface:
    if surface.valid.any():
        best = surface.argmin()
        if surface.on_boundary(best):
            surface.warnings.append(f"minimum on grid boundary at node {list(best)}; it may lie outside the box")
    else:
        surface.warnings.append("no valid nodes")
    return surface


def sweep(model: ModelSpec, grid: GridSpec, config: SimConfig, target: MomentVector,
          W: WeightMatrix | None = None, crn: bool = True, spec: MomentSpec | None = None,
          threads: int | None = None) -> ObjectiveSurface:
    """Evaluate ``J`` at every grid node from pooled replicate moments.

    Without CRN node ``n`` (row-major flat index) uses seed base
    ``derive(master_seed, 2**32 + n)``.
    """
    spec = spec or MomentSpec(target.M, tuple(target.lags))
    if spec.size != len(target):
        raise ShapeError(f"target has {len(target)} entries but moment spec needs {spec.size}")
    W = W or WeightMatrix.identity(spec.size)
    flat = {i: n for n, i in enumerate(grid.indices())}

    def node(i, theta):
        base = config.master_seed if crn else derive(config.master_seed, NODE_SEED_OFFSET + flat[i])
        reps = replicate(model, theta, config, threads=1, seed_base=base)
        return objective(target, pooled(reps, spec), W)

    values, valid, errors = _evaluate(grid, node, threads)
    surf = ObjectiveSurface(grid, values, valid, spec, W, config.master_seed, crn, config,
                            target.vector(), "simulated", errors)
    return _finish(surf)


def refine(surface: ObjectiveSurface, shrink: float, model: ModelSpec, config: SimConfig,
           target: MomentVector, W: WeightMatrix | None = None, threads: int | None = None,
           evaluator: Callable | None = None) -> ObjectiveSurface:
    """Re-sweep a box shrunk by ``shrink`` around the incumbent minimum.

    Per dimension the new width is ``shrink`` times the old one, centred on
    the incumbent and shifted (not cut) to stay inside the parameter bounds;
    breakpoint counts are kept.  ``evaluator(grid)`` replaces the simulated
    sweep (used for analytic surfaces).
    """
    if not 0 < shrink < 1:
        raise ConfigError(f"shrink must lie in (0, 1), got {shrink}")
    best = surface.argmin()
    axes = {}
    for (name, ax), i in zip(surface.grid.axes.items(), best):
        lo_b, hi_b = surface.grid.base.bounds_of(name)
        width = (ax[-1] - ax[0]) * shrink
        c = float(ax[i])
        lo, hi = c - width / 2, c + width / 2
        if lo < lo_b:
            lo, hi = lo_b, min(hi_b, lo_b + width)
        if hi > hi_b:
            lo, hi = max(lo_b, hi_b - width), hi_b
        axes[name] = np.linspace(lo, hi, ax.size) if ax.size > 1 else np.array([c])
    grid = GridSpec(surface.grid.base, axes)
    W = W or surface.W
    if evaluator is not None:
        out = evaluator(grid)
    else:
        out = sweep(model, grid, config, target, W, surface.crn, surface.moment_spec, threads)
    if surface.on_boundary(best):
        out.warnings.insert(0, f"refined around boundary node {list(best)} of the previous surface; "
                               "the minimum may lie outside the swept box")
    return out


@dataclass
class MinimumNode:
    index: tuple
    params: dict
    value: float

    def as_dict(self) -> dict:
        return {"index": list(self.index), "params": self.params, "J": self.value}


def local_minima_mask(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid nodes whose value is <= every valid axis neighbour."""
    v = np.where(valid, values, np.inf)
    mask = valid.copy()
    for ax in range(v.ndim):
        n = v.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        a, b = v[tuple(lo)], v[tuple(hi)]
        mask[tuple(lo)] &= a <= b
        mask[tuple(hi)] &= b <= a
    return mask


def default_tol_equiv(surface: ObjectiveSurface) -> float:
    return 1e-2 * surface.value_range()


def find_minima(surface: ObjectiveSurface, tol_equiv: float | None = None) -> list:
    """Local minima within ``tol_equiv`` of the global minimum value.

    Sorted by value, ties broken by lexicographic node index.
    """
    if not surface.valid.any():
        return []
    tol = default_tol_equiv(surface) if tol_equiv is None else float(tol_equiv)
    vmin = float(surface.valid_values().min())
    mask = local_minima_mask(surface.values, surface.valid) & (surface.values <= vmin + tol)
    idx = sorted((tuple(int(i) for i in ix) for ix in np.argwhere(mask)),
                 key=lambda ix: (float(surface.values[ix]), ix))
    return [MinimumNode(ix, surface.grid.point(ix), float(surface.values[ix])) for ix in idx]


def fd_hessian(fn: Callable[[np.ndarray], float], x, step) -> np.ndarray:
    """Central-difference Hessian of ``fn`` at ``x``, symmetrised."""
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape).copy()
    D = x.size
    f0 = fn(x)
    H = np.zeros((D, D))
    E = np.diag(h)
    fp = [fn(x + E[i]) for i in range(D)]
    fm = [fn(x - E[i]) for i in range(D)]
    for i in range(D):
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / (h[i] * h[i])
        for j in range(i + 1, D):
            pp = fn(x + E[i] + E[j])
            pm = fn(x + E[i] - E[j])
            mp = fn(x - E[i] + E[j])
            mm = fn(x - E[i] - E[j])
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def hessian(model: ModelSpec | None, theta_star: ParamVector, config: SimConfig | None,
            target: MomentVector | None, W: WeightMatrix | None, step, names: Sequence[str] | None = None,
            spec: MomentSpec | None = None, objective_fn: Callable[[ParamVector], float] | None = None,
            threads: int | None = None) -> np.ndarray:
    """Finite-difference Hessian of ``J`` over ``names`` at ``theta_star``.

    Always evaluated under common random numbers.  ``objective_fn``
    substitutes the simulated objective (e.g. an analytic surface).
    """
    names = list(names or theta_star.names)
    h = np.broadcast_to(np.asarray(step, dtype=float), (len(names),)).copy()
    if np.any(h <= 0):
        raise ConfigError("Hessian steps must be positive")
    x0 = np.array([theta_star[n] for n in names])
    for n, x, s in zip(names, x0, h):
        lo, hi = theta_star.bounds_of(n)
        if x - s < lo or x + s > hi:
            raise ConfigError(f"Hessian step {s} around {n}={x} crosses bounds [{lo}, {hi}]")
    if objective_fn is None:
        spec = spec or MomentSpec(target.M, tuple(target.lags))
        W = W or WeightMatrix.identity(spec.size)
        objective_fn = simulated_objective(model, config, target, W, spec)

    def fn(x):
        return objective_fn(theta_star.with_values(dict(zip(names, x))))

    if threads is not None and threads > 1:
        cache = {}
        pts = _stencil(x0, h)
        vals = parallel_map(fn, pts, threads)
        cache.update({tuple(p): v for p, v in zip(pts, vals)})
        return fd_hessian(lambda x: cache[tuple(x)], x0, h)
    return fd_hessian(fn, x0, h)


def _stencil(x, h) -> list:
    D = x.size
    E = np.diag(h)
    pts = [x] + [x + E[i] for i in range(D)] + [x - E[i] for i in range(D)]
    for i in range(D):
        for j in range(i + 1, D):
            pts += [x + E[i] + E[j], x + E[i] - E[j], x - E[i] + E[j], x - E[i] - E[j]]
    return pts


@dataclass
class Thresholds:
    """Classification thresholds; ``None`` means the relative default.

    Defaults: ``tol_equiv = 1e-2 * range``, ``flat_tol = 1e-8 * range``,
    ``ridge_tol = 1e-6 * lambda_max``, ``weak_ratio = 1e-3``.  A near-null
    Hessian direction is a ridge when its second largest squared loading is
    at least ``ridge_loading``.
    """

    tol_equiv: float | None = None
    flat_tol: float | None = None
    ridge_rel: float = 1e-6
    weak_ratio: float = 1e-3
    ridge_loading: float = 0.1

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class IdentReport:
    names: list
    global_minima: list
    flat_dimensions: list
    hessian: np.ndarray | None
    eigenvalues: np.ndarray | None
    eigenvectors: np.ndarray | None
    classification: list
    evidence: dict
    warnings: list = field(default_factory=list)
    source: str = "smd"

    @property
    def identified(self) -> bool:
        return self.classification == [IDENTIFIED]

    def as_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "schema_version": SCHEMA_VERSION,
            "source": self.source,
            "names": list(self.names),
            "classification": list(self.classification),
            "global_minima": [m.as_dict() if isinstance(m, MinimumNode) else m for m in self.global_minima],
            "flat_dimensions": list(self.flat_dimensions),
            "hessian": arr(self.hessian),
            "eigenvalues": arr(self.eigenvalues),
            "eigenvectors": arr(self.eigenvectors),
            "evidence": _jsonable(self.evidence),
            "warnings": list(self.warnings),
        }

    def summary_lines(self) -> list:
        lines = ["classification: " + ", ".join(self.classification)]
        if self.flat_dimensions:
            lines.append(f"{UNDER_IDENTIFIED}: " + ", ".join(self.flat_dimensions))
        for r in self.evidence.get("ridges", []):
            lines.append(f"{PARTIALLY_IDENTIFIED}: ridge over " + ", ".join(r["params"]))
        return lines


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def analyse_hessian(H: np.ndarray, names: Sequence[str], thresholds: Thresholds) -> dict:
    """Ridge, flat-direction and weak-curvature findings from a Hessian."""
    vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
    out = {"eigenvalues": vals, "eigenvectors": vecs, "ridges": [], "null_single": [],
           "negative_single": [], "weak": None}
    lam_max = float(vals.max()) if vals.size else 0.0
    if lam_max <= 0:
        out["degenerate"] = True
        return out
    ridge_tol = thresholds.ridge_rel * lam_max
    out["ridge_tol"] = ridge_tol
    for lam, v in zip(vals, vecs.T):
        if lam > ridge_tol:
            continue
        sq = v**2
        order = np.argsort(sq)[::-1]
        if sq.size >= 2 and sq[order[1]] >= thresholds.ridge_loading:
            v = v * (1 if v[np.argmax(np.abs(v))] > 0 else -1)
            out["ridges"].append({
                "eigenvalue": float(lam),
                "direction": v.tolist(),
                "params": [names[i] for i in order if sq[i] >= thresholds.ridge_loading],
            })
        elif lam >= -ridge_tol:
            out["null_single"].append(names[int(order[0])])
        else:
            # negative curvature along one axis: the incumbent is off the minimum
            out["negative_single"].append(names[int(order[0])])
    positive = vals[vals > ridge_tol]
    if positive.size:
        ratio = float(positive.min() / lam_max)
        out["curvature_ratio"] = ratio
        if ratio < thresholds.weak_ratio:
            out["weak"] = ratio
    return out


def _neighbour_offsets(ndim: int) -> list:
    offs = []
    for d in product((-1, 0, 1), repeat=ndim):
        if any(d) and next(x for x in d if x) > 0:
            offs.append(d)
    return offs


def basins(surface: ObjectiveSurface, minima: Sequence[MinimumNode]) -> list:
    """Group global minima that are not separated by a barrier.

    Barriers come from flooding the grid graph (all 3**D - 1 neighbours):
    the level at which two minima first share a component is their minimax
    path height.  Minima ``a`` and ``b`` share a basin when that height
    exceeds ``max(J_a, J_b)`` by no more than the smaller one-cell rise
    (largest increase from a minimum to an axis neighbour).  Grid
    discretisation bumps along a ridge stay below the rise across it,
    while a genuine hill between two wells does not.
    """
    if len(minima) <= 1:
        return [list(minima)]
    shape = surface.values.shape
    vals = surface.values.ravel()
    ok = surface.valid.ravel()
    flat_idx = np.arange(vals.size).reshape(shape)
    edges = []
    for off in _neighbour_offsets(len(shape)):
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, shape))
        a, b = flat_idx[src].ravel(), flat_idx[dst].ravel()
        keep = ok[a] & ok[b]
        a, b = a[keep], b[keep]
        edges.append(np.stack([np.maximum(vals[a], vals[b]), a, b], axis=1))
    E = np.concatenate(edges) if edges else np.empty((0, 3))
    E = E[np.lexsort((E[:, 2], E[:, 1], E[:, 0]))]

    parent = list(range(vals.size))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    node_of = {int(np.ravel_multi_index(m.index, shape)): i for i, m in enumerate(minima)}
    members = {n: [i] for n, i in node_of.items()}
    k = len(minima)
    level = np.full((k, k), np.inf)
    for w, a, b in E:
        ra, rb = find(int(a)), find(int(b))
        if ra == rb:
            continue
        ma, mb = members.pop(ra, []), members.pop(rb, [])
        for i in ma:
            for j in mb:
                level[i, j] = level[j, i] = w
        parent[rb] = ra
        if ma or mb:
            members[ra] = ma + mb

    v = surface.values
    rise = []
    for m in minima:
        best = 0.0
        for d in range(len(shape)):
            for s in (-1, 1):
                nb = list(m.index)
                nb[d] += s
                if 0 <= nb[d] < shape[d] and surface.valid[tuple(nb)]:
                    best = max(best, float(v[tuple(nb)]) - m.value)
        rise.append(best)

    group = list(range(k))

    def gfind(x):
        while group[x] != x:
            x = group[x]
        return x

    for i in range(k):
        for j in range(i + 1, k):
            barrier = level[i, j] - max(minima[i].value, minima[j].value)
            if barrier <= min(rise[i], rise[j]):
                group[gfind(j)] = gfind(i)
    out = {}
    for i in range(k):
        out.setdefault(gfind(i), []).append(minima[i])
    return list(out.values())


def flat_dimensions(surface: ObjectiveSurface, incumbent, flat_tol: float):
    """Swept parameters whose 1-D slice through ``incumbent`` spans <= ``flat_tol``."""
    flat, ranges = [], {}
    for d, name in enumerate(surface.names):
        sl = list(incumbent)
        sl[d] = slice(None)
        vals = surface.values[tuple(sl)][surface.valid[tuple(sl)]]
        r = float(vals.max() - vals.min()) if vals.size else 0.0
        ranges[name] = r
        if surface.values.shape[d] > 1 and r <= flat_tol:
            flat.append(name)
    return flat, ranges


def classify(surface: ObjectiveSurface, minima: Sequence[MinimumNode], hessian_matrix: np.ndarray | None,
             thresholds: Thresholds | None = None, hessian_names: Sequence[str] | None = None) -> IdentReport:
    """Map a surface, its minima and the Hessian at the incumbent onto classes."""
    th = thresholds or Thresholds()
    names = surface.names
    rng = surface.value_range()
    tol = 1e-2 * rng if th.tol_equiv is None else th.tol_equiv
    flat_tol = 1e-8 * rng if th.flat_tol is None else th.flat_tol
    classes = []
    evidence: dict = {"value_range": rng, "tol_equiv": tol, "flat_tol": flat_tol}
    warnings = list(surface.warnings)
    if not minima:
        return IdentReport(names, [], [], None, None, None, ["Inconclusive"], evidence, warnings + ["no minima"])

    groups = basins(surface, minima)
    evidence["basins"] = [[m.as_dict() for m in g] for g in groups]
    evidence["n_global_minima"] = len(minima)
    if len(groups) > 1:
        classes.append(OBSERVATIONAL_EQUIVALENCE)

    flat, slice_ranges = flat_dimensions(surface, minima[0].index, flat_tol)
    evidence["slice_ranges"] = slice_ranges

    vals = vecs = None
    if hessian_matrix is not None:
        hnames = list(hessian_names or names)
        H = np.asarray(hessian_matrix, dtype=float)
        keep = [i for i, n in enumerate(hnames) if n not in flat]
        if keep:
            sub = H[np.ix_(keep, keep)]
            h = analyse_hessian(sub, [hnames[i] for i in keep], th)
            vals, vecs = h["eigenvalues"], h["eigenvectors"]
            evidence["hessian_names"] = [hnames[i] for i in keep]
            evidence["ridges"] = h["ridges"]
            evidence["curvature_ratio"] = h.get("curvature_ratio")
            if h["ridges"]:
                classes.append(PARTIALLY_IDENTIFIED)
            for n in h["null_single"]:
                if n not in flat:
                    flat.append(n)
            if h["weak"] is not None:
                classes.append(WEAKLY_IDENTIFIED)
            for n in h["negative_single"]:
                warnings.append(f"negative curvature along {n} at the incumbent; it is not a local minimum "
                                "of the continuous objective")
            if h.get("degenerate"):
                warnings.append("Hessian has no positive curvature at the incumbent")
    else:
        warnings.append("no Hessian supplied; ridge and weak-curvature checks skipped")
    if flat:
        classes.insert(1 if classes[:1] == [OBSERVATIONAL_EQUIVALENCE] else 0, UNDER_IDENTIFIED)
    if not classes:
        classes = [IDENTIFIED]
    return IdentReport(names, list(minima), flat, hessian_matrix, vals, vecs, classes, evidence, warnings)


def identify(model: ModelSpec, grid: GridSpec, config: SimConfig, target: MomentVector,
             W: WeightMatrix | None = None, spec: MomentSpec | None = None, crn: bool = True,
             thresholds: Thresholds | None = None, step=None, threads: int | None = None,
             surface: ObjectiveSurface | None = None, objective_fn: Callable | None = None):
    """Sweep, locate minima, take the Hessian at the incumbent and classify.

    Parameters already flat on the surface are left out of the Hessian.
    The step defaults to one grid cell per dimension, shortened to stay
    inside the parameter bounds.  Returns ``(surface, report)``.
    """
    th = thresholds or Thresholds()
    if surface is None:
        surface = sweep(model, grid, config, target, W, crn, spec, threads)
    minima = find_minima(surface, th.tol_equiv)
    H = None
    names = []
    if minima:
        flat_tol = 1e-8 * surface.value_range() if th.flat_tol is None else th.flat_tol
        flat, _ = flat_dimensions(surface, minima[0].index, flat_tol)
        all_names = surface.names
        spacing = surface.grid.spacing() if step is None else \
            np.broadcast_to(np.asarray(step, float), (len(all_names),)).copy()
        names = [n for n in all_names if n not in flat]
        h = np.array([spacing[all_names.index(n)] for n in names])
        theta = surface.grid.params_at(minima[0].index)
        for d, n in enumerate(names):
            lo, hi = theta.bounds_of(n)
            room = min(theta[n] - lo, hi - theta[n])
            if h[d] <= 0 or room <= 0:
                h = None
                break
            h[d] = min(h[d], room)
        if names and h is not None:
            H = hessian(model, theta, config, target, surface.W, h, names, surface.moment_spec,
                        objective_fn=objective_fn, threads=threads)
    report = classify(surface, minima, H, th, names or None)
    if minima and names and H is None:
        report.warnings.append("incumbent touches parameter bounds; Hessian skipped")
    return surface, report
