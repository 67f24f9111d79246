"""Simulated likelihood, random-walk Metropolis and posterior-shape diagnostics.

The likelihood treats the observed series as an unordered i.i.d. sample
from the simulated stationary marginal ``f(y | theta)``:
``log L = sum_j log f(y_j | theta)``.  On autocorrelated data this ignores
the dependence between points, which biases the curvature of ``log L``
(it over-counts information); this is intended.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, signal, stats

from .dgp import ModelSpec, ParamVector, SimConfig, Trajectory, derive, make_rng, replicate, stack
from .errors import ConfigError, NumericalError
from .smd import (IDENTIFIED, OBSERVATIONAL_EQUIVALENCE, PARTIALLY_IDENTIFIED, SCHEMA_VERSION,
                  UNDER_IDENTIFIED, WEAKLY_IDENTIFIED, IdentReport, fmt)

HISTOGRAM = "Histogram"
KDE = "KDE"
POINT_MASS = "PointMass"
FLOOR_EPS = 1e-12
MIN_DENSITY_SAMPLES = 500
KDE_GRID = 2048
KDE_CUT = 4.0
INCONCLUSIVE = "Inconclusive"


def silverman_bandwidth(x: np.ndarray) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n**(-1/5)`` (falls back to sd if IQR is 0)."""
    x = np.asarray(x, float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return float(0.9 * spread * x.size ** -0.2)


@dataclass
class DensityEstimate:
    """Evaluable density built from pooled simulated draws.

    * ``Histogram``: one bin per lattice point of a discrete observable,
      ``grid`` holds the bin centres and ``values`` the density
      ``count / (n * width)``.
    * ``KDE``: Gaussian kernel, linear binning on ``grid`` and FFT
      convolution; linear interpolation between grid points, 0 outside.
    * ``PointMass``: a degenerate (zero variance) sample.  The density is
      taken with respect to counting measure: 1 on the atom, 0 elsewhere.
    """

    kind: str
    support: tuple
    bandwidth: float
    grid: np.ndarray
    values: np.ndarray
    n_samples: int
    atom: float | None = None

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        if self.kind == POINT_MASS:
            tol = 1e-12 * max(1.0, abs(self.atom))
            return np.where(np.abs(y - self.atom) <= tol, 1.0, 0.0)
        if self.kind == HISTOGRAM:
            start, width = self.grid[0], self.bandwidth
            pos = (y - start) / width
            idx = np.rint(pos).astype(np.int64)
            ok = (idx >= 0) & (idx < self.grid.size) & (np.abs(pos - idx) <= 0.5)
            out = np.zeros(y.shape)
            out[ok] = self.values[idx[ok]]
            return out
        return np.interp(y, self.grid, self.values, left=0.0, right=0.0)

    def mass(self) -> float:
        if self.kind == POINT_MASS:
            return 1.0
        if self.kind == HISTOGRAM:
            return float(self.values.sum() * self.bandwidth)
        return float(integrate.trapezoid(self.values, self.grid))

    def mean(self) -> float:
        if self.kind == POINT_MASS:
            return float(self.atom)
        if self.kind == HISTOGRAM:
            return float((self.grid * self.values).sum() * self.bandwidth)
        return float(integrate.trapezoid(self.grid * self.values, self.grid))

    def variance(self) -> float:
        m = self.mean()
        if self.kind == POINT_MASS:
            return 0.0
        if self.kind == HISTOGRAM:
            return float(((self.grid - m) ** 2 * self.values).sum() * self.bandwidth)
        return float(integrate.trapezoid((self.grid - m) ** 2 * self.values, self.grid))


def histogram_density(samples: np.ndarray, lattice: tuple) -> DensityEstimate:
    start, step, count = lattice
    pos = (np.asarray(samples, float) - start) / step
    idx = np.rint(pos).astype(np.int64)
    if idx.min() < 0 or idx.max() >= count or np.abs(pos - idx).max() > 1e-6:
        raise NumericalError("simulated observable falls off its declared lattice")
    counts = np.bincount(idx, minlength=count).astype(float)
    grid = start + step * np.arange(count)
    return DensityEstimate(HISTOGRAM, (start - step / 2, grid[-1] + step / 2), float(step),
                           grid, counts / (samples.size * step), int(samples.size))


def kde_density(samples: np.ndarray, bandwidth: float | None = None, points: int = KDE_GRID) -> DensityEstimate:
    """Gaussian KDE evaluated on a grid by linear binning and FFT convolution."""
    x = np.asarray(samples, float)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    lo, hi = x.min() - KDE_CUT * h, x.max() + KDE_CUT * h
    grid = np.linspace(lo, hi, points)
    dx = grid[1] - grid[0]
    pos = (x - lo) / dx
    left = np.clip(np.floor(pos).astype(np.int64), 0, points - 2)
    frac = pos - left
    weights = np.bincount(left, 1.0 - frac, points) + np.bincount(left + 1, frac, points)
    half = int(math.ceil(KDE_CUT * h / dx))
    offsets = dx * np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (offsets / h) ** 2)
    dens = signal.fftconvolve(weights, kernel, mode="same")
    dens = np.clip(dens, 0.0, None)
    dens /= integrate.trapezoid(dens, grid)
    return DensityEstimate(KDE, (float(lo), float(hi)), h, grid, dens, int(x.size))


def density_from_samples(samples: np.ndarray, discrete: bool, lattice: tuple | None = None,
                         kde_points: int = KDE_GRID) -> DensityEstimate:
    samples = np.asarray(samples, float).ravel()
    if samples.size == 0:
        raise ConfigError("no samples for a density estimate")
    if np.ptp(samples) == 0.0:
        return DensityEstimate(POINT_MASS, (samples[0], samples[0]), 0.0, samples[:1].copy(),
                               np.ones(1), int(samples.size), float(samples[0]))
    if discrete:
        if lattice is None:
            raise ConfigError("discrete observable without a declared lattice")
        return histogram_density(samples, lattice)
    return kde_density(samples, points=kde_points)


def simulated_density(model: ModelSpec, theta: ParamVector, config: SimConfig, *,
                      seed_base: int | None = None, threads: int | None = None,
                      kde_points: int = KDE_GRID) -> DensityEstimate:
    """Density of the pooled post-burn-in observables of all replicates."""
    n = config.replications * config.horizon
    if n < MIN_DENSITY_SAMPLES:
        raise ConfigError(f"replications * horizon = {n} is below the floor of {MIN_DENSITY_SAMPLES}")
    reps = replicate(model, theta, config, threads=threads, seed_base=seed_base)
    return density_from_samples(stack(reps), model.discrete_observable, model.lattice(config), kde_points)


def log_likelihood(density: DensityEstimate, y_real, floor_eps: float = FLOOR_EPS,
                   with_floored: bool = False):
    """``sum_j log max(f(y_j), floor_eps)``; optionally also the floored count."""
    y = y_real.observables if isinstance(y_real, Trajectory) else np.asarray(y_real, float)
    f = density(y)
    floored = f < floor_eps
    ll = float(np.log(np.where(floored, floor_eps, f)).sum())
    return (ll, int(floored.sum())) if with_floored else ll


@dataclass(frozen=True)
class Prior:
    """``Uniform(a, b)`` or ``Normal(mean=a, sd=b)``."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in ("Uniform", "Normal"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if not self.b > (self.a if self.kind == "Uniform" else 0.0):
            raise ConfigError(f"invalid {self.kind} prior parameters ({self.a}, {self.b})")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Prior":
        kind = d.get("kind", "Uniform")
        if kind == "Uniform":
            return cls(kind, float(d["low"]), float(d["high"]))
        return cls(kind, float(d["mean"]), float(d["sd"]))

    def as_dict(self) -> dict:
        if self.kind == "Uniform":
            return {"kind": self.kind, "low": self.a, "high": self.b}
        return {"kind": self.kind, "mean": self.a, "sd": self.b}

    def logpdf(self, x: float) -> float:
        if self.kind == "Uniform":
            return -math.log(self.b - self.a) if self.a <= x <= self.b else -math.inf
        return float(stats.norm.logpdf(x, self.a, self.b))

    def ppf(self, q: float) -> float:
        if self.kind == "Uniform":
            return self.a + q * (self.b - self.a)
        return float(stats.norm.ppf(q, self.a, self.b))

    @property
    def sd(self) -> float:
        return (self.b - self.a) / math.sqrt(12.0) if self.kind == "Uniform" else self.b

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "Uniform":
            return np.where((x >= self.a) & (x <= self.b), 1.0 / (self.b - self.a), 0.0)
        return stats.norm.pdf(x, self.a, self.b)

    def support(self) -> tuple:
        return (self.a, self.b) if self.kind == "Uniform" else (self.a - 5 * self.b, self.a + 5 * self.b)


@dataclass
class MCMCConfig:
    """Random-walk Metropolis settings.

    ``draws`` is the total number of retained draws, split evenly over
    ``chains``; each chain first runs ``burn_in`` discarded steps.  Chains
    start at ``starts`` or, by default, at the prior quantiles
    ``(c + 1/2) / chains``.  Densities are simulated under ``sim`` with one
    fixed set of replicate seeds for every ``theta`` (common random numbers).
    """

    draws: int = 5000
    burn_in: int = 1000
    proposal_scale: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0
    sim: SimConfig = field(default_factory=lambda: SimConfig(horizon=2000, replications=5))
    chains: int = 1
    starts: Sequence[Mapping[str, float]] | None = None
    floor_eps: float = FLOOR_EPS
    kde_points: int = KDE_GRID

    def __post_init__(self):
        if self.draws < 1 or self.burn_in < 0 or self.chains < 1:
            raise ConfigError("draws and chains must be >= 1 and burn_in >= 0")
        if self.draws % self.chains:
            raise ConfigError(f"draws={self.draws} is not divisible by chains={self.chains}")

    def as_dict(self) -> dict:
        return {"draws": self.draws, "burn_in": self.burn_in, "proposal_scale": dict(self.proposal_scale),
                "seed": self.seed, "sim": self.sim.as_dict(), "chains": self.chains,
                "starts": None if self.starts is None else [dict(s) for s in self.starts],
                "floor_eps": self.floor_eps, "kde_points": self.kde_points,
                "bandwidth_rule": "silverman"}


@dataclass
class PosteriorChain:
    names: list
    samples: np.ndarray
    log_posterior: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    proposal_scale: dict
    prior_spec: dict
    base: ParamVector
    chain_index: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.samples.shape[0]

    def params(self, i: int) -> ParamVector:
        return self.base.with_values(dict(zip(self.names, self.samples[i])))

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    def provenance(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "names": list(self.names),
                "acceptance_rate": self.acceptance_rate, "proposal_scale": dict(self.proposal_scale),
                "prior": {n: p.as_dict() for n, p in self.prior_spec.items()},
                "fixed": self.base.as_dict(), **self.metadata}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["draw", "chain"] + self.names + ["log_posterior", "accepted"])
            for i in range(len(self)):
                w.writerow([i, int(self.chain_index[i])] + [fmt(v) for v in self.samples[i]]
                           + [fmt(self.log_posterior[i]), int(self.accepted[i])])


def _start_points(prior_spec: Mapping[str, Prior], names: list, mc: MCMCConfig) -> list:
    if mc.starts is not None:
        if len(mc.starts) < mc.chains:
            raise ConfigError(f"{len(mc.starts)} starts for {mc.chains} chains")
        return [np.array([float(s[n]) for n in names]) for s in mc.starts[: mc.chains]]
    return [np.array([prior_spec[n].ppf((c + 0.5) / mc.chains) for n in names]) for c in range(mc.chains)]


def posterior_sample(model: ModelSpec, prior_spec: Mapping[str, Prior], y_real, mcmc: MCMCConfig,
                     base: ParamVector | None = None, loglik: Callable[[ParamVector], float] | None = None,
                     threads: int | None = None) -> PosteriorChain:
    """Random-walk Metropolis on ``log L(theta) + log p(theta)``.

    Parameters without a prior stay at their ``base`` value.  ``loglik``
    replaces the simulated likelihood (used for stubs and tests).  Proposals
    outside the parameter bounds or the prior support are rejected without
    simulating.  Deterministic given ``mcmc.seed``.
    """
    base = base or model.default_params()
    names = [n for n in base.names if n in prior_spec]
    unknown = set(prior_spec) - set(base.names)
    if unknown:
        raise ConfigError(f"priors for unknown parameters {sorted(unknown)}")
    if not names:
        raise ConfigError("prior_spec names no parameter")
    scale = np.array([float(mcmc.proposal_scale.get(n, 0.1 * prior_spec[n].sd)) for n in names])
    if np.any(scale <= 0):
        raise ConfigError("proposal scales must be positive")
    lows = np.array([base.bounds_of(n)[0] for n in names])
    highs = np.array([base.bounds_of(n)[1] for n in names])
    crn_base = derive(mcmc.seed, 0)
    mass_err = [0.0]
    floored = [0]

    def log_prior(x) -> float:
        if np.any(x < lows) or np.any(x > highs):
            return -math.inf
        return float(sum(prior_spec[n].logpdf(v) for n, v in zip(names, x)))

    def log_like(x) -> float:
        theta = base.with_values(dict(zip(names, x)))
        if loglik is not None:
            return float(loglik(theta))
        dens = simulated_density(model, theta, mcmc.sim, seed_base=crn_base, threads=threads,
                                 kde_points=mcmc.kde_points)
        mass_err[0] = max(mass_err[0], abs(dens.mass() - 1.0))
        ll, nf = log_likelihood(dens, y_real, mcmc.floor_eps, with_floored=True)
        floored[0] = max(floored[0], nf)
        return ll

    per_chain = mcmc.draws // mcmc.chains
    starts = _start_points(prior_spec, names, mcmc)
    out_x, out_lp, out_acc, out_chain = [], [], [], []
    n_acc = 0
    for c, x in enumerate(starts):
        rng = make_rng(derive(mcmc.seed, 1 + c))
        lp_prior = log_prior(x)
        if not math.isfinite(lp_prior):
            raise ConfigError(f"chain {c} starts outside the prior support or bounds: {x.tolist()}")
        ll = log_like(x)
        for it in range(mcmc.burn_in + per_chain):
            prop = x + scale * rng.standard_normal(len(names))
            log_u = math.log(rng.random())
            acc = False
            pp = log_prior(prop)
            if math.isfinite(pp):
                lp_new = log_like(prop)
                if log_u < (lp_new - ll) + (pp - lp_prior):
                    x, ll, lp_prior, acc = prop, lp_new, pp, True
            if it >= mcmc.burn_in:
                out_x.append(x.copy())
                out_lp.append(ll + lp_prior)
                out_acc.append(acc)
                out_chain.append(c)
                n_acc += acc
    rate = n_acc / mcmc.draws
    warnings = []
    if rate < 0.05 or rate > 0.95:
        warnings.append(f"acceptance rate {rate:.3f} outside [0.05, 0.95]; retune proposal scales")
    meta = {"mcmc": mcmc.as_dict(), "crn_seed_base": int(crn_base), "warnings": warnings,
            "max_density_mass_error": mass_err[0], "max_floored_points": floored[0]}
    return PosteriorChain(names, np.array(out_x), np.array(out_lp), np.array(out_acc, dtype=bool), rate,
                          dict(zip(names, scale.tolist())), dict(prior_spec), base,
                          np.array(out_chain), meta)


def geyer_ess(x: np.ndarray) -> float:
    """Effective sample size from Geyer's initial positive sequence."""
    x = np.asarray(x, float)
    n = x.size
    if n < 4 or x.var() == 0:
        return float(n) if x.var() == 0 else 0.0
    d = x - x.mean()
    f = np.fft.rfft(d, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * x.var())
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / n)
    return float(n / tau)


def chain_ess(chain: PosteriorChain, name: str) -> float:
    col = chain.column(name)
    return float(sum(geyer_ess(col[chain.chain_index == c]) for c in np.unique(chain.chain_index)))


def mode_count(x: np.ndarray, prominence: float = 0.1, points: int = 512) -> int:
    """Peaks of a Silverman KDE with prominence >= ``prominence`` * max density."""
    x = np.asarray(x, float)
    if np.ptp(x) == 0:
        return 1
    d = kde_density(x, points=points)
    vals = np.concatenate([[0.0], d.values, [0.0]])
    peaks, _ = signal.find_peaks(vals, prominence=prominence * vals.max())
    return max(1, len(peaks))


def overlap(x: np.ndarray, prior: Prior, bins: int = 20) -> float:
    """Histogram overlap ``sum_i min(p_i, q_i)`` of posterior draws and prior mass."""
    lo, hi = prior.support()
    edges = np.linspace(lo, hi, bins + 1)
    post = np.histogram(np.clip(x, lo, hi), edges)[0] / x.size
    if prior.kind == "Uniform":
        q = np.diff(edges) / (hi - lo)
    else:
        q = np.diff(stats.norm.cdf(edges, prior.a, prior.b))
    return float(np.minimum(post, q).sum())


def _ridge_corr(a: np.ndarray, b: np.ndarray) -> tuple:
    use_log = a.min() > 0 and b.min() > 0
    u, v = (np.log(a), np.log(b)) if use_log else (a, b)
    if u.std() == 0 or v.std() == 0:
        return 0.0, use_log
    return float(np.corrcoef(u, v)[0, 1]), use_log


@dataclass
class PosteriorThresholds:
    """Posterior-shape thresholds (artifact conventions)."""

    overlap_tol: float = 0.8
    ridge_corr: float = 0.9
    weak_sd_ratio: float = 0.5
    mode_prominence: float = 0.1
    min_ess: float = 100.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def posterior_ident_check(chain: PosteriorChain, thresholds: PosteriorThresholds | None = None) -> IdentReport:
    """Read the identification classes off the shape of the posterior.

    * more than one mode in a marginal, or along the main axis of a pair
      -> ObservationalEquivalence;
    * |corr| of a pair (of logs when both are positive) above ``ridge_corr``
      -> PartiallyIdentified, and those parameters skip every other check
      (a slowly mixing ridge makes marginal mode counts meaningless);
    * prior/posterior overlap above ``overlap_tol`` -> UnderIdentified;
    * posterior sd / prior sd above ``weak_sd_ratio`` in a unimodal
      marginal -> WeaklyIdentified.

    Minimum ESS below ``min_ess`` marks the report Inconclusive in its
    evidence and warnings; the classes are still reported.
    """
    th = thresholds or PosteriorThresholds()
    names = chain.names
    X = chain.samples
    ev: dict = {"thresholds": th.as_dict(), "acceptance_rate": chain.acceptance_rate}
    warnings = list(chain.metadata.get("warnings", []))
    ess = {n: chain_ess(chain, n) for n in names}
    ev["ess"] = ess
    ev["inconclusive"] = min(ess.values()) < th.min_ess
    if ev["inconclusive"]:
        warnings.append(f"{INCONCLUSIVE}: minimum effective sample size {min(ess.values()):.1f} < {th.min_ess:g}")

    ridges, ridge_dims = [], set()
    corr = {}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            r, on_log = _ridge_corr(X[:, i], X[:, j])
            corr[f"{names[i]},{names[j]}"] = r
            if abs(r) > th.ridge_corr:
                ridges.append({"params": [names[i], names[j]], "correlation": r, "log_scale": on_log})
                ridge_dims.update((names[i], names[j]))
    ev["correlations"] = corr
    ev["ridges"] = ridges

    overlaps = {n: overlap(X[:, k], chain.prior_spec[n]) for k, n in enumerate(names)}
    sd_ratio = {n: float(X[:, k].std() / chain.prior_spec[n].sd) for k, n in enumerate(names)}
    ev["overlap"] = overlaps
    ev["sd_ratio"] = sd_ratio
    under = [n for n in names if n not in ridge_dims and overlaps[n] > th.overlap_tol]
    modes = {n: mode_count(X[:, k], th.mode_prominence) for k, n in enumerate(names)
             if n not in under and n not in ridge_dims}
    weak = [n for n in names if n not in ridge_dims and n not in under and modes[n] == 1
            and sd_ratio[n] > th.weak_sd_ratio]

    pair_modes = {}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = names[i], names[j]
            if a in under or b in under or a in ridge_dims or b in ridge_dims:
                continue
            Z = X[:, [i, j]]
            Z = (Z - Z.mean(axis=0)) / np.where(Z.std(axis=0) > 0, Z.std(axis=0), 1.0)
            axis = np.linalg.eigh(np.cov(Z.T))[1][:, -1]
            pair_modes[f"{a},{b}"] = mode_count(Z @ axis, th.mode_prominence)
    ev["modes"] = modes
    ev["pair_modes"] = pair_modes

    classes = []
    if any(m > 1 for m in modes.values()) or any(m > 1 for m in pair_modes.values()):
        classes.append(OBSERVATIONAL_EQUIVALENCE)
    if under:
        classes.append(UNDER_IDENTIFIED)
    if ridges:
        classes.append(PARTIALLY_IDENTIFIED)
    if weak:
        classes.append(WEAKLY_IDENTIFIED)
        ev["weak_dimensions"] = weak
    if not classes:
        classes = [IDENTIFIED]
    means = X.mean(axis=0)
    summary = [{"params": dict(zip(names, means.tolist())), "statistic": "posterior_mean"}]
    return IdentReport(list(names), summary, under, None, None, None, classes, ev, warnings, "posterior")
