"""Monte Carlo experiments for the decay theorems.

Every sample s of an experiment draws its window from ``seed.child(s)`` (or
a further child), so results depend only on (spec, seed, parameters).
Worker processes split sample indices into contiguous chunks and the
reduction always runs in sample order, so the worker count does not change
any reported number.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .contraction import contraction_estimate, contraction_estimate_many
from .ensembles import (
    EnsembleSpec,
    gaussian_local_tensor,
    sample_tau_and_c,
    sample_window,
    wielandt_length,
)
from .errors import CalibrationFailed, InvalidInput, MissingProfile, NoConvergence, RegimeMismatch
from .mcore import Positivity, Superoperator, compose_all, liouville_of_tensor, strict_positivity_check
from .rng import as_seed, make_rng
from .thermo import FAST_SEARCH, BoundaryCache, limit_functional

C_FLOOR = 1e-300
# Connected correlations are differences of O(1) numbers; below this they are round-off.
F_NOISE = 1e-12
# Boundary iteration depth for experiment windows.  TI windows share one
# transfer matrix and converge slowest, so they get the deepest flanks.
TI_DEPTH = 1000
EXP_DEPTH = 300


def default_depth(spec: EnsembleSpec) -> int:
    return TI_DEPTH if spec.kind == "TI" else EXP_DEPTH


REGIMES = ("TI", "IID", "RHO_POLY", "RHO_STRETCHED", "BETA_EXP", "WINDOW")
PAULI_Z = np.diag([1.0, -1.0])


def default_workers() -> int:
    return max(1, int(os.environ.get("SGMPS_WORKERS", "1")))


def spec_hash(spec: EnsembleSpec) -> str:
    doc = json.dumps(spec.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def _chunks(n, workers):
    workers = max(1, min(workers, n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def worker_map(fn, n, workers, *args):
    """Evaluate fn(lo, hi, *args) over contiguous sample ranges and concatenate in order."""
    parts = _chunks(n, workers)
    if len(parts) == 1:
        outs = [fn(parts[0][0], parts[0][1], *args)]
    else:
        with ProcessPoolExecutor(len(parts)) as ex:
            outs = list(ex.map(fn, *zip(*[(a, b, *args) for a, b in parts])))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- fits


@dataclass(frozen=True)
class Fit:
    rate: float
    prefactor: float
    r_squared: float


def _linfit(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return float(slope), float(icept), float(r2)


def exp_fit(n, y) -> Fit:
    """y ~ C exp(-rate n); fitted on log y."""
    slope, icept, r2 = _linfit(n, np.log(np.maximum(y, C_FLOOR)))
    return Fit(-slope, math.exp(icept), r2)


def poly_fit(n, y) -> Fit:
    """y ~ C n^(-rate); fitted on log-log axes."""
    slope, icept, r2 = _linfit(np.log(n), np.log(np.maximum(y, C_FLOOR)))
    return Fit(-slope, math.exp(icept), r2)


# ---------------------------------------------------------------- c(Phi^(n)) series


def _prefix_maps(window, n_list):
    out = {}
    K = None
    for k in range(max(n_list)):
        L = window.transfer(window.first_site + k).liouville
        K = L if K is None else L @ K
        K = K / np.linalg.norm(K)
        if k + 1 in n_list:
            out[k + 1] = Superoperator(K)
    return out


def _c_prefix_chunk(lo, hi, spec, n_list, seed, search):
    n_list = list(n_list)
    maps, seeds = {n: [] for n in n_list}, {n: [] for n in n_list}
    for s in range(lo, hi):
        sd = seed.child(s)
        w = sample_window(spec, 0, max(n_list), sd)
        for n, S in _prefix_maps(w, set(n_list)).items():
            maps[n].append(S)
            seeds[n].append(sd.child(n))
    out = np.empty((hi - lo, len(n_list)))
    for j, n in enumerate(n_list):
        est = contraction_estimate_many(maps[n], seeds[n], **search)
        out[:, j] = [e.lower for e in est]
    return out


def sample_c_prefix(spec, n_list, samples, seed, search=None, workers=1) -> np.ndarray:
    """Matrix of c(Phi^(n)) estimates, one row per sample and one column per n."""
    if min(n_list) < 1:
        raise InvalidInput("all n must be at least 1")
    search = dict(search or FAST_SEARCH)
    return worker_map(_c_prefix_chunk, samples, workers, spec, tuple(n_list), as_seed(seed), search)


@dataclass(frozen=True)
class CSeries:
    n: tuple
    mean: tuple
    se: tuple
    std: tuple
    samples: int
    exp: Fit
    poly: Fit
    delta_ci: tuple  # bootstrap 95% interval for the exponential rate

    def to_json(self):
        return asdict(self)


def c_expectation_series(spec, n_list, samples: int = 1000, seed=0, search=None, workers=1,
                         bootstrap: int = 1000, raw=None) -> CSeries:
    """Monte Carlo E[c(Phi^(n))] with standard errors and exponential / power-law fits."""
    n_list = sorted(int(n) for n in n_list)
    C = sample_c_prefix(spec, n_list, samples, seed, search, workers) if raw is None else np.asarray(raw)
    mean = C.mean(axis=0)
    std = C.std(axis=0, ddof=1) if samples > 1 else np.zeros(len(n_list))
    se = std / math.sqrt(samples)
    rng = make_rng(as_seed(seed).child(10**6))
    rates = np.empty(bootstrap)
    for b in range(bootstrap):
        idx = rng.integers(0, samples, samples)
        rates[b] = exp_fit(n_list, C[idx].mean(axis=0)).rate
    ci = (float(np.quantile(rates, 0.025)), float(np.quantile(rates, 0.975)))
    return CSeries(tuple(n_list), tuple(map(float, mean)), tuple(map(float, se)), tuple(map(float, std)),
                   samples, exp_fit(n_list, mean), poly_fit(n_list, mean), ci)


@dataclass(frozen=True)
class XiEstimate:
    xi_hat: float
    ci: tuple
    per_n: tuple  # (n, mean ln c / n)
    floored: int  # samples whose c fell below the floor at n_max
    minus_infinity: bool  # every sample floored: the rate is -inf


def estimate_xi(spec, n_max: int, samples: int = 1000, seed=0, search=None, workers=1) -> XiEstimate:
    """Lyapunov-type rate xi = lim ln c(Phi^(n))/n, averaged over samples at n = n_max."""
    if n_max < 4:
        raise InvalidInput("n_max must be at least 4")
    n_list = list(range(2, n_max + 1, 2))
    if n_list[-1] != n_max:
        n_list.append(n_max)
    C = sample_c_prefix(spec, n_list, samples, seed, search, workers)
    logs = np.log(np.maximum(C, C_FLOOR)) / np.asarray(n_list)[None, :]
    last = logs[:, -1]
    floored = int(np.sum(C[:, -1] < C_FLOOR))
    se = last.std(ddof=1) / math.sqrt(samples) if samples > 1 else 0.0
    xi = float(last.mean())
    per_n = tuple((int(n), float(v)) for n, v in zip(n_list, logs.mean(axis=0)))
    return XiEstimate(xi, (xi - 1.96 * se, xi + 1.96 * se), per_n, floored, floored == samples)


# ---------------------------------------------------------------- recursive bound


def declared_rho(spec: EnsembleSpec, q: int) -> float:
    if spec.rho_profile is not None:
        return spec.rho(q)
    if spec.kind in ("IID", "FinitePool"):
        return 0.0
    if spec.kind == "TI":
        return 1.0
    raise MissingProfile(f"{spec.kind} spec needs a declared rho profile")


@dataclass(frozen=True)
class RecursiveBound:
    i: int
    q: int
    r: int
    rho_q: float
    lhs: float
    rhs: float
    se: float
    margin: float  # rhs + 3 se - lhs

    @property
    def holds(self) -> bool:
        return self.margin >= 0


def _recursive_chunk(lo, hi, spec, i, q, r, seed, search):
    L = i + q + r
    maps = {"i": [], "r": [], "all": []}
    seeds = {k: [] for k in maps}
    for s in range(lo, hi):
        sd = seed.child(s)
        w = sample_window(spec, 0, L, sd)
        maps["i"].append(compose_all([w.transfer(k) for k in range(i)]))
        maps["r"].append(compose_all([w.transfer(k) for k in range(i + q, L)]))
        maps["all"].append(compose_all([w.transfer(k) for k in range(L)]))
        for j, k in enumerate(maps):
            seeds[k].append(sd.child(j))
    cols = [[e.lower for e in contraction_estimate_many(maps[k], seeds[k], **search)] for k in ("i", "r", "all")]
    return np.array(cols).T


def recursive_bound_check(spec, i: int, q: int, r: int, samples: int = 1000, seed=0, search=None, workers=1) -> RecursiveBound:
    """E c(Phi^(i+q+r)) <= E c^(i) E c^(r) + rho_q sqrt(E c^(i) E c^(r)), up to 3 standard errors."""
    if min(i, q, r) < 1:
        raise InvalidInput("i, q, r must be positive")
    rho = declared_rho(spec, q)
    search = dict(search or FAST_SEARCH)
    X = worker_map(_recursive_chunk, samples, workers, spec, i, q, r, as_seed(seed), search)
    a, b, c = X.mean(axis=0)
    sa, sb, sc = X.std(axis=0, ddof=1) / math.sqrt(samples)
    ab = a * b
    # delta-method standard error of the right-hand side, combined with the left
    g = math.sqrt(ab) if ab > 0 else 0.0
    da = b + (rho * b / (2 * g) if g > 0 else 0.0)
    db = a + (rho * a / (2 * g) if g > 0 else 0.0)
    se = math.sqrt(sc**2 + (da * sa) ** 2 + (db * sb) ** 2)
    rhs = ab + rho * g
    return RecursiveBound(i, q, r, rho, float(c), float(rhs), float(se), float(rhs + 3 * se - c))


# ---------------------------------------------------------------- decay tables


@dataclass(frozen=True)
class DecayConstants:
    """Constants of a high-probability bound f <= K |O_m| |O_n| shape(s) with floor(s).

    ``rate`` is lambda (exponential shapes), k (polynomial) or kappa
    (stretched); ``exponent`` is the stretched exponent alpha.  The floor
    parameter ``floor`` is eps (TI), beta (IID), k (RHO_POLY), kappa
    (RHO_STRETCHED, with ``exponent``) or p (BETA_EXP).
    """

    K: float
    rate: float
    floor: float | None  # None for BETA_EXP: p is fitted from the table itself
    exponent: float = 1.0
    method: str = "declared"


def shape_value(regime, c: DecayConstants, s):
    s = np.asarray(s, float)
    if regime in ("TI", "IID", "BETA_EXP", "WINDOW"):
        return np.exp(-c.rate * s)
    if regime == "RHO_POLY":
        return s ** (-c.rate)
    if regime == "RHO_STRETCHED":
        return np.exp(-c.rate * s**c.exponent)
    raise InvalidInput(f"unknown regime {regime!r}")


def beta_shape(s):
    s = np.asarray(s, float)
    return s / (np.log(s) * np.log(np.log(s)))


def floor_value(regime, c: DecayConstants, s):
    s = np.asarray(s, float)
    if regime in ("TI", "WINDOW"):
        return np.full_like(s, 1 - c.floor)
    if regime == "IID":
        return 1 - np.exp(-c.floor * s)
    if regime == "RHO_POLY":
        return 1 - s ** (-c.floor)
    if regime == "RHO_STRETCHED":
        return 1 - np.exp(-c.floor * s**c.exponent)
    if regime == "BETA_EXP":
        return 1 - np.exp(-c.floor * beta_shape(s))
    raise InvalidInput(f"unknown regime {regime!r}")


def check_regime(spec: EnsembleSpec, regime: str):
    if regime not in REGIMES:
        raise InvalidInput(f"unknown regime {regime!r}")
    allowed = {
        "TI": ("TI",),
        "WINDOW": ("TI", "IID", "FinitePool", "MarkovModulated"),
        "IID": ("IID", "FinitePool"),
        "RHO_POLY": ("IID", "FinitePool", "MarkovModulated"),
        "RHO_STRETCHED": ("IID", "FinitePool", "MarkovModulated"),
        "BETA_EXP": ("MarkovModulated",),
    }[regime]
    if spec.kind not in allowed:
        raise RegimeMismatch(f"regime {regime} does not apply to a {spec.kind} ensemble")


@dataclass(frozen=True)
class DecaySeries:
    separations: tuple
    samples: tuple
    mean_c: tuple
    std_c: tuple
    mean_f: tuple
    empirical_prob: tuple
    bound_value: tuple
    floor_value: tuple
    threshold_spec: str

    CSV_COLUMNS = ("separation", "mean_c", "std_c", "mean_f", "empirical_prob", "bound_value", "floor_value")

    def __post_init__(self):
        seps = list(self.separations)
        if not seps or min(seps) < 2 or any(b <= a for a, b in zip(seps, seps[1:])):
            raise InvalidInput("separations must be strictly increasing and at least 2")
        if min(self.samples) < 1:
            raise InvalidInput("every separation needs at least one sample")

    def to_json(self):
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for row in zip(self.separations, self.mean_c, self.std_c, self.mean_f, self.empirical_prob,
                       self.bound_value, self.floor_value):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


@dataclass(frozen=True)
class ExperimentReport:
    spec_hash: str
    seed: dict
    regime: str
    series: DecaySeries
    fitted: dict
    theorem_check: dict
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "spec_hash": self.spec_hash,
            "seed": self.seed,
            "regime": self.regime,
            "series": self.series.to_json() if self.series is not None else None,
            "fitted": self.fitted,
            "theorem_check": self.theorem_check,
            "extra": self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(_jsonable(self.to_json()), sort_keys=True, indent=2) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _twopoint_chunk(lo, hi, spec, sep, Om, On, seed, depth, tol):
    """Per-sample (f, window seed index) plus the inner maps for batched c estimation."""
    f = np.empty(hi - lo)
    inner = []
    for j, s in enumerate(range(lo, hi)):
        sd = seed.child(s)
        w = sample_window(spec, -depth - 1, sep + 2 * depth + 3, sd)
        cache = BoundaryCache(w, depth, tol)
        try:
            both = limit_functional(cache, [(0, Om), (sep, On)])
            a = limit_functional(cache, [(0, Om)])
            b = limit_functional(cache, [(sep, On)])
            f[j] = abs(both - a * b)
        except NoConvergence:
            f[j] = np.nan  # counted as uncovered, excluded from bound checks
        inner.append(compose_all([w.transfer(k) for k in range(1, sep)]))
    seeds = [seed.child(s).child(1) for s in range(lo, hi)]
    return f, inner, seeds


def _twopoint_c_chunk(lo, hi, spec, sep, Om, On, seed, depth, tol, search):
    f, inner, seeds = _twopoint_chunk(lo, hi, spec, sep, Om, On, seed, depth, tol)
    est = contraction_estimate_many(inner, seeds, **search)
    c = np.array([e.lower for e in est])
    D = spec.bond_dim
    bound = 8 * D * np.linalg.norm(Om, 2) * np.linalg.norm(On, 2) * c
    retries = np.zeros(hi - lo)
    for j in np.flatnonzero(np.nan_to_num(f) > bound + 1e-8):
        sr = dict(search)
        for _ in range(2):
            sr["restarts"] *= 4
            c[j] = contraction_estimate(inner[j], seed=seeds[j], **sr).lower
            retries[j] += 1
            bound[j] = 8 * D * np.linalg.norm(Om, 2) * np.linalg.norm(On, 2) * c[j]
            if f[j] <= bound[j] + 1e-8:
                break
    return np.stack([f, c, bound, retries], axis=1)


def sample_two_point(spec, sep, observables, samples, seed, depth=None, tol=1e-12, search=None, workers=1):
    """Array with columns (f, c_inner, 8 D |O||O| c_inner, retries), one row per sample."""
    Om, On = (np.asarray(o, dtype=complex) for o in observables)
    search = dict(search or FAST_SEARCH)
    depth = depth or default_depth(spec)
    return worker_map(_twopoint_c_chunk, samples, workers, spec, int(sep), Om, On, as_seed(seed), depth, tol, search)


def _profile_chunk(lo, hi, spec, seps, Om, On, seed, depth, tol):
    out = np.empty((hi - lo, len(seps)))
    for j, s in enumerate(range(lo, hi)):
        w = sample_window(spec, -depth - 1, max(seps) + 2 * depth + 3, seed.child(s))
        cache = BoundaryCache(w, depth, tol)
        try:
            a = limit_functional(cache, [(0, Om)])
            for k, sep in enumerate(seps):
                both = limit_functional(cache, [(0, Om), (sep, On)])
                out[j, k] = abs(both - a * limit_functional(cache, [(sep, On)]))
        except NoConvergence:
            out[j] = np.nan
    return out


def pilot_profiles(spec, separations, observables, samples, seed, depth=None, tol=1e-12, workers=1) -> np.ndarray:
    """f(0, s) for every s in ``separations`` on the same window; one row per window."""
    Om, On = (np.asarray(o, dtype=complex) for o in observables)
    depth = depth or default_depth(spec)
    seps = tuple(sorted(int(s) for s in separations))
    return worker_map(_profile_chunk, samples, workers, spec, seps, Om, On, as_seed(seed), depth, tol)


def _sep_seed(seed, s):
    return as_seed(seed).child(7919, int(s))


def sweep_two_point(spec, separations, observables, samples, seed, **kw) -> dict:
    """{separation: sample array} using an independent seed stream per separation."""
    return {int(s): sample_two_point(spec, s, observables, samples, _sep_seed(seed, s), **kw) for s in separations}


def _binom_se(p, n):
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def highprob_decay_table(spec, regime, observables, separations, samples: int, constants: DecayConstants, seed=0,
                         depth: int | None = None, tol: float = 1e-12, search=None, workers: int = 1, data=None) -> ExperimentReport:
    """Empirical Pr{f <= K |O_m||O_n| shape(s)} against the regime's probability floor."""
    check_regime(spec, regime)
    if samples < 100:
        raise InvalidInput("samples must be at least 100")
    seps = sorted(int(s) for s in separations)
    if seps[0] < 2:
        raise InvalidInput("separations must be at least 2")
    if data is None:
        data = sweep_two_point(spec, seps, observables, samples, seed, depth=depth, tol=tol, search=search, workers=workers)
    nrm = float(np.prod([np.linalg.norm(np.asarray(o), 2) for o in observables]))
    thr = constants.K * nrm * shape_value(regime, constants, seps)
    probs, mean_c, std_c, mean_f, violations, unconverged = [], [], [], [], 0, 0
    for s, t in zip(seps, thr):
        X = data[s]
        p = float(np.mean(X[:, 0] <= t))  # NaN (unconverged) compares False
        probs.append(p)
        mean_c.append(float(X[:, 1].mean()))
        std_c.append(float(X[:, 1].std(ddof=1)))
        mean_f.append(float(np.nanmean(X[:, 0])))
        violations += int(np.sum(X[:, 0] > X[:, 2] + 1e-8))
        unconverged += int(np.sum(np.isnan(X[:, 0])))
    fail = 1 - np.asarray(probs)
    fitted = failure_fit(seps, fail, samples, regime)
    if constants.floor is None:
        if regime != "BETA_EXP":
            raise InvalidInput(f"regime {regime} needs a declared floor parameter")
        constants = replace(constants, floor=max(fitted["p_hat"], 0.0))
    floors = floor_value(regime, constants, seps)
    margins = [p - (fl - 2 * _binom_se(p, len(data[s]))) for s, p, fl in zip(seps, probs, floors)]
    series = DecaySeries(tuple(seps), tuple(len(data[s]) for s in seps), tuple(mean_c), tuple(std_c), tuple(mean_f),
                         tuple(probs), tuple(map(float, thr)), tuple(map(float, floors)),
                         f"{regime}: K={constants.K!r}, rate={constants.rate!r}, exponent={constants.exponent!r}, "
                         f"floor={constants.floor!r}")
    if regime == "BETA_EXP":
        passed = fitted["p_hat"] > 0 and violations == 0  # shape check only
    else:
        passed = min(margins) >= 0 and violations == 0
    check = {
        "passed": bool(passed),
        "coverage_margins": [float(m) for m in margins],
        "bound_violations": violations,
        "unconverged_samples": unconverged,
    }
    return ExperimentReport(spec_hash(spec), as_seed(seed).to_json(), regime, series, fitted, check,
                            {"constants": asdict(constants)})


def failure_fit(seps, fail, samples, regime) -> dict:
    """Fit of the failure fraction; exponential in s, or in s/(ln s lnln s) for BETA_EXP.

    Zero fractions are replaced by 0.5/samples so the logarithm stays finite.
    """
    seps = np.asarray(seps, float)
    y = np.log(np.maximum(np.asarray(fail, float), 0.5 / samples))
    x = beta_shape(seps) if regime == "BETA_EXP" else seps
    if len(seps) < 2:
        return {"rate": float("nan"), "prefactor": float("nan"), "r_squared": float("nan")}
    slope, icept, r2 = _linfit(x, y)
    out = {"rate": -slope, "prefactor": math.exp(icept), "r_squared": r2}
    if regime == "BETA_EXP":
        # p-hat from a fit through the origin: ln(fail) = -p s/(ln s lnln s)
        out["p_hat"] = float(-np.sum(x * y) / np.sum(x * x))
    return out


# ---------------------------------------------------------------- calibration


def _shape_axis(regime, s, exponent):
    """The variable x in which the regime's bound shape is exp(-rate x)."""
    s = np.asarray(s, float)
    if regime == "RHO_POLY":
        return np.log(s)
    if regime == "RHO_STRETCHED":
        return s**exponent
    return s


def calibrate_envelope(seps, f, nrm, eps, regime="TI", rate_q=None, k_q=None, exponent=1.0) -> DecayConstants:
    """Calibrate (K, rate) for f <= K |O|^2 shape(s) from pilot data.

    ``f`` has one row per pilot window and one column per separation.  The
    rate is the ``rate_q`` quantile (default eps/2) of per-window envelope
    decay rates (the running maximum from the right of f, fitted on a log
    scale against the shape variable: s, ln s or s^alpha); K is the ``k_q``
    quantile (default 1 - eps/2) of max_s f / (|O|^2 shape(s)).  Unconverged
    (NaN) pilot rows are dropped.  The floor parameter is eps for TI, the
    rate itself for RHO_POLY / RHO_STRETCHED and None (fitted later) for
    BETA_EXP.
    """
    rate_q = eps / 2 if rate_q is None else rate_q
    k_q = 1 - eps / 2 if k_q is None else k_q
    f = np.asarray(f, float)
    f = f[~np.isnan(f).any(axis=1)]
    if len(f) == 0:
        raise CalibrationFailed("no converged pilot windows")
    x = _shape_axis(regime, seps, exponent)
    f = f / nrm
    env = np.maximum.accumulate(f[:, ::-1], axis=1)[:, ::-1]
    logs = np.log(np.maximum(env, C_FLOOR))
    xc = x - x.mean()
    rates = -(logs - logs.mean(axis=1, keepdims=True)) @ xc / np.sum(xc * xc)
    # f below round-off level carries no rate information: such windows have
    # already decayed completely and count as arbitrarily fast.
    rates[env[:, -1] < F_NOISE] = np.inf
    lam = float(max(np.quantile(rates, rate_q), 1e-6))
    g = (f * np.exp(lam * x)[None, :]).max(axis=1)
    K = float(np.quantile(g, k_q))
    floor = {"TI": eps, "WINDOW": eps, "RHO_POLY": lam, "RHO_STRETCHED": lam}.get(regime)
    return DecayConstants(K, lam, floor, exponent=exponent, method="pilot_envelope")


def calibrate_iid(delta_hat: float, s_min: int, f_pilot, nrm) -> DecayConstants:
    """Constants for Pr{f <= K |O|^2 e^{-beta s}} >= 1 - e^{-beta s} in the IID regime.

    beta = delta_hat / 2 ties the shape to the decay rate of E[c].  K is the
    quantile of f e^{beta s_min} / |O|^2 over pilot windows at separation
    s_min, taken at level (1 + floor(s_min)) / 2 so the smallest separation
    clears its floor with room to spare.
    """
    if not delta_hat > 0:
        raise CalibrationFailed(f"E[c] decay rate {delta_hat!r} is not positive")
    beta = delta_hat / 2
    f = np.asarray(f_pilot, float)
    f = f[~np.isnan(f)]
    if len(f) == 0:
        raise CalibrationFailed("no converged pilot windows")
    level = (1 + (1 - math.exp(-beta * s_min))) / 2
    K = float(np.quantile(f * math.exp(beta * s_min) / nrm, level))
    return DecayConstants(max(K, C_FLOOR), beta, beta, method="c_rate")


def regime_ordering(mean_iid, mean_markov, mean_ti, se_iid, se_markov, se_ti) -> np.ndarray:
    """Per-n margins of E c(IID) <= E c(Markov) <= E c(TI) with 3 combined standard errors.

    Returns an array of shape (len(n), 2); every entry must be nonnegative.
    """
    a, b, c = (np.asarray(v, float) for v in (mean_iid, mean_markov, mean_ti))
    sa, sb, sc = (np.asarray(v, float) for v in (se_iid, se_markov, se_ti))
    lo = b - a + 3 * np.hypot(sa, sb)
    hi = c - b + 3 * np.hypot(sb, sc)
    return np.stack([lo, hi], axis=1)


@dataclass(frozen=True)
class WindowCalibration:
    b: int
    u: int
    lam1: float
    K: float
    f_b: float
    zeta: float


def calibrate_window(spec, L: int, eps: float, samples: int, seed, b_cap: int = 64, u_cap: int = 2**16,
                     search=None) -> WindowCalibration:
    """Choose (b, u) with f(b)/b <= 1/(2 l (L-2)) and zeta_b(u) <= b/(2 l (L-2)), l = ceil(1/eps)."""
    ell = math.ceil(1 / eps)
    tau, c = sample_tau_and_c(spec, b_cap, samples, seed, search)
    inv = np.where(np.isnan(c), np.inf, 1.0 / np.maximum(1 - np.nan_to_num(c, nan=1.0), 1e-300))
    for b in range(1, b_cap + 1):
        fb = float(np.mean(tau > b))
        # f(b) = 1 means no sample has entered positivity: nothing to calibrate on,
        # even when b is large enough that f(b)/b meets the target
        if fb >= 1 or fb / b > 1 / (2 * ell * (L - 2)):
            continue
        target = b / (2 * ell * (L - 2))
        entered = tau <= b
        # zeta_b(u) = Pr{tau <= b, c > 1 - 1/u} = Pr{tau <= b, 1/(1-c) > u}
        vals = np.sort(inv[entered])
        for u in _candidate_us(vals, u_cap):
            z = float(np.sum(vals > u)) / samples
            if z <= target:
                lam1 = (1 - 1 / u) ** (1 / b)
                return WindowCalibration(b, int(u), lam1, 8 * spec.bond_dim * lam1 ** (-(b + 1)), fb, z)
    if np.all(tau > b_cap):
        raise CalibrationFailed(f"f(b) = 1 for all b <= {b_cap}: no sample became strictly positive")
    raise CalibrationFailed(f"no (b, u) with b <= {b_cap}, u <= {u_cap}")


def _candidate_us(vals, u_cap):
    cands = {2, u_cap}
    for v in vals:
        if math.isfinite(v) and v < u_cap:
            cands.add(max(2, int(math.floor(v)) + 1))
    return sorted(u for u in cands if u <= u_cap)


def window_bound_experiment(spec, L: int, eps: float, observables, samples: int = 1000, seed=0,
                            calib_samples: int | None = None, depth: int | None = None, tol: float = 1e-12,
                            search=None, workers: int = 1) -> ExperimentReport:
    """Finite-window bound f <= K |O||O| lambda1^|n-m| for 2 <= |n-m| < L at frequency 1 - eps."""
    if L <= 2:
        raise InvalidInput("L must exceed 2")
    seed = as_seed(seed)
    cal = calibrate_window(spec, L, eps, calib_samples or samples, seed.child(1), search=search)
    consts = DecayConstants(cal.K, -math.log(cal.lam1), eps, method="tail_and_zeta")
    rep = highprob_decay_table(spec, "WINDOW", observables, range(2, L), samples, consts, seed.child(2),
                               depth=depth, tol=tol, search=search, workers=workers)
    extra = dict(rep.extra)
    extra["calibration"] = asdict(cal)
    return ExperimentReport(rep.spec_hash, seed.to_json(), "WINDOW", rep.series, rep.fitted, rep.theorem_check, extra)


# ---------------------------------------------------------------- Wielandt


def wielandt_experiment(d: int, D: int, samples: int = 500, seed=0, tol: float = 1e-9) -> float:
    """Fraction of Gaussian TI maps whose L* = 2 ceil(log_d D) fold power is certified strictly positive."""
    if d < 2 or D < 2:
        raise InvalidInput("d and D must be at least 2")
    Ls = wielandt_length(d, D)
    seed = as_seed(seed)
    ok = 0
    for s in range(samples):
        t = gaussian_local_tensor(d, D, 1 / math.sqrt(D), make_rng(seed.child(s)))
        S = compose_all([liouville_of_tensor(t)] * Ls)
        ok += strict_positivity_check(S, mode="choi_sufficient", tol=tol) is Positivity.CERTIFIED_POSITIVE
    return ok / samples
