"""Stationary local-tensor processes, the entry time tau and its statistics,
and exact beta-mixing for Markov-modulated ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .contraction import contraction_estimate
from .errors import InvalidInput
from .mcore import (
    RANK_TOL,
    LocalTensor,
    Positivity,
    Superoperator,
    compose_all,
    liouville_of_tensor,
    strict_positivity_check,
)
from .rng import RngSeed, as_seed, make_rng

KINDS = ("TI", "IID", "FinitePool", "MarkovModulated")


# ---------------------------------------------------------------- marginals


@dataclass(frozen=True)
class Gaussian:
    """Complex Ginibre entries with independent N(0, sigma^2) real and imaginary parts."""

    sigma: float | None = None  # None means 1/sqrt(D)

    def draw(self, d, D, rng):
        s = self.sigma if self.sigma is not None else 1.0 / math.sqrt(D)
        return gaussian_local_tensor(d, D, s, rng)

    def draw_many(self, d, D, n, rng):
        s = self.sigma if self.sigma is not None else 1.0 / math.sqrt(D)
        z = rng.standard_normal((n, 2, d, D, D)) * s
        return [LocalTensor(k[0] + 1j * k[1]) for k in z]

    def to_json(self):
        out = {"law": "gaussian"}
        if self.sigma is not None:
            out["sigma"] = self.sigma
        return out


@dataclass(frozen=True)
class Explicit:
    tensor: LocalTensor

    def draw(self, d, D, rng):
        return self.tensor

    def to_json(self):
        k = self.tensor.kraus
        return {"law": "explicit", "re": k.real.tolist(), "im": k.imag.tolist()}


@dataclass(frozen=True)
class Pool:
    """Categorical law over a fixed list of tensors."""

    tensors: tuple
    probs: tuple

    def __post_init__(self):
        p = np.asarray(self.probs, float)
        if len(p) != len(self.tensors) or len(p) == 0:
            raise InvalidInput("pool needs one probability per tensor")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise InvalidInput(f"pool probabilities must be nonnegative and sum to 1, got sum {p.sum():.15g}")

    def draw(self, d, D, rng):
        return self.tensors[int(rng.choice(len(self.tensors), p=np.asarray(self.probs)))]

    def to_json(self):
        return {
            "law": "pool",
            "probs": list(self.probs),
            "tensors": [Explicit(t).to_json() for t in self.tensors],
        }


def marginal_from_json(doc):
    law = doc.get("law")
    if law == "gaussian":
        return Gaussian(doc.get("sigma"))
    if law == "explicit":
        re = np.asarray(doc["re"], float)
        im = np.asarray(doc["im"], float) if "im" in doc else np.zeros_like(re)
        return Explicit(LocalTensor(re + 1j * im))
    if law == "pool":
        return Pool(tuple(marginal_from_json(t).tensor for t in doc["tensors"]), tuple(doc["probs"]))
    raise InvalidInput(f"unknown marginal law {law!r}")


def _marginal_dims(m):
    if isinstance(m, Explicit):
        return {m.tensor.kraus.shape[:2]}
    if isinstance(m, Pool):
        return {t.kraus.shape[:2] for t in m.tensors}
    return set()


# ---------------------------------------------------------------- spec


def stationary_distribution(P) -> np.ndarray:
    P = np.asarray(P, float)
    w, V = np.linalg.eig(P.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    return v / v.sum()


def check_primitive(P) -> None:
    """Raise unless some power P^k with k <= m^2 is entrywise positive."""
    P = np.asarray(P, float)
    m = len(P)
    Q = np.eye(m)
    pattern = (P > 0).astype(float)
    for _ in range(max(1, m * m)):
        Q = np.minimum(Q @ pattern, 1.0)
        if np.all(Q > 0):
            return
    raise InvalidInput("transition matrix is reducible or periodic")


@dataclass(frozen=True)
class EnsembleSpec:
    """Declarative description of a stationary tensor process.

    ``marginal`` is used by TI and IID and is also accepted (as a Pool) for
    FinitePool.  MarkovModulated uses ``transition``, ``stationary`` and one
    marginal per hidden state in ``branches``.  ``rho_profile`` optionally
    declares an upper bound on the maximal correlation rho_q for q = 1, 2, ...
    (the last entry is repeated beyond its length).
    """

    kind: str
    phys_dim: int
    bond_dim: int
    marginal: object = None
    transition: tuple | None = None
    stationary: tuple | None = None
    branches: tuple = ()
    rho_profile: tuple | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown ensemble kind {self.kind!r}")
        if self.phys_dim < 2 or self.bond_dim < 2:
            raise InvalidInput("phys_dim and bond_dim must be at least 2")
        dims = (self.phys_dim, self.bond_dim)
        if self.kind in ("TI", "IID", "FinitePool"):
            if self.marginal is None:
                raise InvalidInput(f"{self.kind} spec needs a marginal")
            if self.kind == "FinitePool" and not isinstance(self.marginal, Pool):
                raise InvalidInput("FinitePool spec needs a pool marginal")
            margs = [self.marginal]
        else:
            if self.transition is None:
                raise InvalidInput("MarkovModulated spec needs a transition matrix")
            P = np.asarray(self.transition, float)
            m = len(P)
            if P.shape != (m, m) or m < 1:
                raise InvalidInput("transition matrix must be square")
            if np.any(P < 0):
                raise InvalidInput("transition matrix has negative entries")
            for i, row in enumerate(P):
                if abs(row.sum() - 1) > 1e-12:
                    raise InvalidInput(f"transition row {i} sums to {row.sum():.15g}, not 1")
            check_primitive(P)
            pi = stationary_distribution(P) if self.stationary is None else np.asarray(self.stationary, float)
            if pi.shape != (m,) or abs(pi.sum() - 1) > 1e-12 or np.any(pi < 0):
                raise InvalidInput("stationary vector must be a probability vector")
            if np.abs(pi @ P - pi).max() > 1e-10:
                raise InvalidInput("stationary vector is not invariant under the transition matrix")
            if len(self.branches) != m:
                raise InvalidInput(f"need {m} branch marginals, got {len(self.branches)}")
            object.__setattr__(self, "transition", tuple(map(tuple, P.tolist())))
            object.__setattr__(self, "stationary", tuple(pi.tolist()))
            object.__setattr__(self, "branches", tuple(self.branches))
            margs = list(self.branches)
        for mg in margs:
            for shape in _marginal_dims(mg):
                if shape[0] != dims[0] or shape[1] != dims[1]:
                    raise InvalidInput(f"tensor shape {shape} inconsistent with (d, D) = {dims}")
        if self.rho_profile is not None:
            r = tuple(float(x) for x in self.rho_profile)
            if not r or any(not 0 <= x <= 1 for x in r):
                raise InvalidInput("rho_profile entries must lie in [0, 1]")
            object.__setattr__(self, "rho_profile", r)

    def rho(self, q: int) -> float | None:
        if self.rho_profile is None:
            return None
        return self.rho_profile[min(q, len(self.rho_profile)) - 1]

    def to_json(self) -> dict:
        out = {"kind": self.kind, "phys_dim": self.phys_dim, "bond_dim": self.bond_dim}
        if self.name:
            out["name"] = self.name
        if self.marginal is not None:
            out["marginal"] = self.marginal.to_json()
        if self.kind == "MarkovModulated":
            out["transition"] = [list(r) for r in self.transition]
            out["stationary"] = list(self.stationary)
            out["branches"] = [b.to_json() for b in self.branches]
        if self.rho_profile is not None:
            out["rho_profile"] = list(self.rho_profile)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "EnsembleSpec":
        kw = dict(kind=doc["kind"], phys_dim=int(doc["phys_dim"]), bond_dim=int(doc["bond_dim"]))
        if "marginal" in doc:
            kw["marginal"] = marginal_from_json(doc["marginal"])
        if "transition" in doc:
            kw["transition"] = tuple(map(tuple, doc["transition"]))
            kw["stationary"] = tuple(doc["stationary"]) if "stationary" in doc else None
            kw["branches"] = tuple(marginal_from_json(b) for b in doc.get("branches", ()))
        if "rho_profile" in doc:
            kw["rho_profile"] = tuple(doc["rho_profile"])
        kw["name"] = doc.get("name", "")
        return cls(**kw)


# Convenience constructors


def gaussian_spec(kind: str, d: int = 2, D: int = 2, sigma: float | None = None, **kw) -> EnsembleSpec:
    return EnsembleSpec(kind, d, D, marginal=Gaussian(sigma), **kw)


def explicit_ti_spec(tensor: LocalTensor) -> EnsembleSpec:
    return EnsembleSpec("TI", tensor.phys_dim, tensor.bond_dim, marginal=Explicit(tensor))


def depolarizing_tensor(D: int) -> LocalTensor:
    """Kraus tuple E_ij / sqrt(D) whose transfer map is X -> tr(X) I/D."""
    k = np.zeros((D * D, D, D))
    for i in range(D):
        for j in range(D):
            k[i * D + j, i, j] = 1 / math.sqrt(D)
    return LocalTensor(k)


def unitary_tensor(U, d: int = 2) -> LocalTensor:
    """d copies of U/sqrt(d): a TI tensor whose transfer map is conjugation by U."""
    U = np.asarray(U)
    return LocalTensor(np.stack([U / math.sqrt(d)] * d))


def gaussian_pool(m: int, d: int = 2, D: int = 2, seed=0) -> tuple:
    """m fixed tensors drawn from the default Gaussian law."""
    rng = make_rng(seed)
    return tuple(gaussian_local_tensor(d, D, 1 / math.sqrt(D), rng) for _ in range(m))


def pool_spec(kind: str, pool, **kw) -> EnsembleSpec:
    """TI or IID (FinitePool) spec whose one-site marginal is uniform on ``pool``."""
    pool = tuple(pool)
    t = pool[0]
    marg = Pool(pool, (1 / len(pool),) * len(pool))
    return EnsembleSpec("TI" if kind == "TI" else "FinitePool", t.phys_dim, t.bond_dim, marginal=marg, **kw)


def sticky_markov_spec(stay: float, pool, **kw) -> EnsembleSpec:
    """Markov-modulated spec on ``pool``: the hidden state keeps its tensor with
    probability ``stay`` and otherwise jumps uniformly to another one.

    The one-site marginal is uniform on the pool, matching :func:`pool_spec`.
    """
    pool = tuple(pool)
    m = len(pool)
    if m < 2:
        raise InvalidInput("need at least two pool tensors")
    off = (1 - stay) / (m - 1)
    P = tuple(tuple(stay if i == j else off for j in range(m)) for i in range(m))
    t = pool[0]
    return EnsembleSpec("MarkovModulated", t.phys_dim, t.bond_dim, transition=P, stationary=(1 / m,) * m,
                        branches=tuple(Explicit(x) for x in pool), **kw)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class ChainWindow:
    first_site: int
    tensors: tuple
    seed: RngSeed
    hidden_path: tuple | None = None
    _maps: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.tensors:
            raise InvalidInput("empty window")
        shapes = {t.kraus.shape for t in self.tensors}
        if len(shapes) != 1:
            raise InvalidInput(f"window mixes tensor shapes {sorted(shapes)}")
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @property
    def last_site(self) -> int:
        return self.first_site + len(self.tensors) - 1

    @property
    def bond_dim(self) -> int:
        return self.tensors[0].bond_dim

    @property
    def phys_dim(self) -> int:
        return self.tensors[0].phys_dim

    def tensor(self, site: int) -> LocalTensor:
        i = site - self.first_site
        if not 0 <= i < len(self.tensors):
            raise InvalidInput(f"site {site} outside window [{self.first_site}, {self.last_site}]")
        return self.tensors[i]

    def transfer(self, site: int):
        """Cached Liouville matrix of the transfer map at ``site``."""
        t = self.tensor(site)
        S = self._maps.get(id(t))  # keyed by tensor, so TI windows build one matrix
        if S is None:
            S = liouville_of_tensor(t)
            self._maps[id(t)] = S
        return S

    def covers(self, lo: int, hi: int) -> bool:
        return self.first_site <= lo and hi <= self.last_site


def gaussian_local_tensor(d: int, D: int, sigma: float, rng) -> LocalTensor:
    if not sigma > 0:
        raise InvalidInput("sigma must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    z = rng.standard_normal((2, d, D, D)) * sigma
    return LocalTensor(z[0] + 1j * z[1])


def sample_hidden_path(P, pi, length, rng) -> np.ndarray:
    P = np.asarray(P)
    cum = np.cumsum(P, axis=1)
    u = rng.random(length)
    x = np.empty(length, dtype=int)
    x[0] = min(int(np.searchsorted(np.cumsum(pi), u[0], side="right")), len(pi) - 1)
    for n in range(1, length):
        x[n] = min(int(np.searchsorted(cum[x[n - 1]], u[n], side="right")), len(pi) - 1)
    return x


def _draw_many(marginal, d, D, n, rng):
    if n == 0:
        return []
    if isinstance(marginal, Gaussian):
        return marginal.draw_many(d, D, n, rng)
    if isinstance(marginal, Explicit):
        return [marginal.tensor] * n
    idx = rng.choice(len(marginal.tensors), size=n, p=np.asarray(marginal.probs))
    return [marginal.tensors[i] for i in idx]


def sample_window(spec: EnsembleSpec, first_site: int, length: int, seed) -> ChainWindow:
    """Draw sites first_site, ..., first_site + length - 1 of the process.

    The draw does not depend on ``first_site``, which makes stationarity in
    law hold by construction for every kind.
    """
    if length < 1:
        raise InvalidInput("length must be at least 1")
    seed = as_seed(seed)
    rng = make_rng(seed)
    d, D = spec.phys_dim, spec.bond_dim
    path = None
    if spec.kind == "TI":
        t = spec.marginal.draw(d, D, rng)
        tensors = (t,) * length
    elif spec.kind in ("IID", "FinitePool"):
        tensors = tuple(_draw_many(spec.marginal, d, D, length, rng))
    else:
        x = sample_hidden_path(spec.transition, spec.stationary, length, rng)
        per_state = [_draw_many(b, d, D, int(np.sum(x == i)), rng) for i, b in enumerate(spec.branches)]
        pos = [0] * len(per_state)
        out = []
        for i in x:
            out.append(per_state[i][pos[i]])
            pos[i] += 1
        tensors = tuple(out)
        path = tuple(int(i) for i in x)
    for t in tensors:
        if t.kraus.shape != (d, D, D):
            raise InvalidInput(f"sampled tensor shape {t.kraus.shape} does not match spec")
    return ChainWindow(first_site, tensors, seed, path)


# ---------------------------------------------------------------- entry time


class ExceedsCap(int):
    """Returned by :func:`entry_time_tau` when no prefix up to ``cap`` is positive.

    Compares greater than the cap (its integer value is cap + 1)."""

    def __repr__(self):
        return f"ExceedsCap({int(self) - 1})"


def default_tau_cap(d: int, D: int) -> int:
    return 8 * max(1, math.ceil(math.log(D) / math.log(d) - 1e-12))


def wielandt_length(d: int, D: int) -> int:
    return 2 * max(1, math.ceil(math.log(D) / math.log(d) - 1e-12))


def entry_time_tau(window: ChainWindow, cap: int | None = None, tol: float = RANK_TOL) -> int:
    """Smallest n <= cap with phi_{n-1} o ... o phi_0 certified strictly positive.

    Sites are counted from the window's first site.  Certification uses the
    Choi-rank criterion only, so the answer is an upper bound on the true
    entry time that is exact for generic data.
    """
    if cap is None:
        cap = default_tau_cap(window.phys_dim, window.bond_dim)
    if len(window.tensors) < cap:
        raise InvalidInput(f"window length {len(window.tensors)} shorter than cap {cap}")
    K = None
    for n in range(1, cap + 1):
        L = window.transfer(window.first_site + n - 1).liouville
        K = L if K is None else L @ K
        K = K / np.linalg.norm(K)
        if strict_positivity_check(Superoperator(K), mode="choi_sufficient", tol=tol) is Positivity.CERTIFIED_POSITIVE:
            return n
    return ExceedsCap(cap + 1)


@dataclass(frozen=True)
class MCEstimate:
    value: float
    se: float
    samples: int


def _binomial(hits, n):
    p = hits / n
    return MCEstimate(float(p), float(math.sqrt(max(p * (1 - p), 0.0) / n)), n)


def tail_estimate_f(spec: EnsembleSpec, b: int, samples: int = 1000, seed=0, cap: int | None = None) -> MCEstimate:
    """Monte Carlo estimate of f(b) = Pr{tau > b}."""
    if samples < 1:
        raise InvalidInput("samples must be at least 1")
    seed = as_seed(seed)
    taus = sample_taus(spec, samples, seed, max(b, 1) if cap is None else max(cap, b))
    return _binomial(int(np.sum(taus > b)), samples)


def sample_taus(spec: EnsembleSpec, samples: int, seed, cap: int) -> np.ndarray:
    seed = as_seed(seed)
    out = np.empty(samples, dtype=int)
    for s in range(samples):
        w = sample_window(spec, 0, cap, seed.child(s))
        out[s] = int(entry_time_tau(w, cap))
    return out


def zeta_estimate(spec: EnsembleSpec, b: int, u: int, samples: int = 1000, seed=0, search=None) -> MCEstimate:
    """Monte Carlo estimate of zeta_b(u) = sum_{t<=b} Pr{tau = t, c(Phi^(t)) > 1 - 1/u}."""
    return zeta_estimates(spec, b, [u], samples, seed, search)[0]


def zeta_estimates(spec: EnsembleSpec, b: int, us, samples: int = 1000, seed=0, search=None) -> list:
    """:func:`zeta_estimate` for several u from one set of samples."""
    us = list(us)
    if min(us) < 2:
        raise InvalidInput("u must be at least 2")
    tau, c = sample_tau_and_c(spec, b, samples, seed, search)
    return [_binomial(int(np.sum((tau <= b) & (c > 1 - 1 / u))), samples) for u in us]


def sample_tau_and_c(spec: EnsembleSpec, b: int, samples: int, seed, search=None):
    """Per-sample (tau, c(Phi^(tau))) with tau capped at b; c is NaN when tau > b."""
    search = dict(search or {"restarts": 16, "iters": 60})
    seed = as_seed(seed)
    tau = np.empty(samples, dtype=int)
    c = np.full(samples, np.nan)
    for s in range(samples):
        sd = seed.child(s)
        w = sample_window(spec, 0, b, sd)
        t = int(entry_time_tau(w, b))
        tau[s] = t
        if t <= b:
            S = compose_all([w.transfer(k) for k in range(t)])
            c[s] = contraction_estimate(S, seed=sd.child(1), **search).lower
    return tau, c


# ---------------------------------------------------------------- beta mixing


def markov_beta_exact(P, pi, n: int) -> float:
    """beta(sigma(X_0), sigma(X_n)) = sum_i pi_i * TV(P^n(i, .), pi)."""
    if n < 1:
        raise InvalidInput("n must be at least 1")
    P = np.asarray(P, float)
    pi = np.asarray(pi, float)
    if np.any(P < 0) or np.abs(P.sum(axis=1) - 1).max() > 1e-12:
        raise InvalidInput("P must be row-stochastic")
    if abs(pi.sum() - 1) > 1e-12 or np.abs(pi @ P - pi).max() > 1e-10:
        raise InvalidInput("pi must be a stationary probability vector")
    check_primitive(P)
    Pn = np.linalg.matrix_power(P, n)
    return float(np.sum(pi * 0.5 * np.abs(Pn - pi[None, :]).sum(axis=1)))

