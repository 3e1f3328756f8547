"""Finite-volume and thermodynamic-limit expectations, boundary states,
connected two-point functions, the rank-one defect, and gauge fixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contraction import contraction_estimate
from .ensembles import ChainWindow
from .errors import DegenerateChain, InvalidInput, KernelMeetsStates, NoConvergence, SingularGauge
from .mcore import (
    RANK_TOL,
    LocalTensor,
    as_hermitian,
    compose_all,
    observable_liouville,
)
from .rng import make_rng

DEFAULT_DEPTH = 400
DEFAULT_TOL = 1e-12

# Light search profile for Monte Carlo loops; escalated on bound violations.
FAST_SEARCH = {"restarts": 16, "iters": 60}


def _vec(X):
    return np.asarray(X, dtype=complex).reshape(-1, order="F")


def _mat(v, D):
    return v.reshape(D, D, order="F")


def _trace_norm(X):
    return float(np.abs(np.linalg.eigvalsh(0.5 * (X + X.conj().T))).sum())


def _obs_map(window, site, O):
    if O is None:
        return window.transfer(site)
    return observable_liouville(window.tensor(site), as_hermitian(O))


# ---------------------------------------------------------------- finite N


def finite_expectation(window: ChainWindow, obs, N: int) -> float:
    """Tr[phi_N o ... o O_sites o ... o phi_{-N}] / Tr[phi_N o ... o phi_{-N}].

    ``obs`` is a list of (site, observable).  Both products are divided by
    the running Frobenius norm of the denominator, which cancels in the ratio.
    """
    if N < 0 or not window.covers(-N, N):
        raise InvalidInput(f"window does not cover [-{N}, {N}]")
    obs = dict(_check_obs(obs, -N, N))
    D = window.bond_dim
    num = np.eye(D * D, dtype=complex)
    den = np.eye(D * D, dtype=complex)
    for k in range(-N, N + 1):
        L = window.transfer(k).liouville
        num = _obs_map(window, k, obs[k]).liouville @ num if k in obs else L @ num
        den = L @ den
        s = np.linalg.norm(den)
        if not s > 0:
            raise DegenerateChain("transfer product vanished")
        num, den = num / s, den / s
    t_den = np.trace(den)
    if abs(t_den) < 1e-300:
        raise DegenerateChain("denominator supertrace is zero")
    return float((np.trace(num) / t_den).real)


def _check_obs(obs, lo, hi):
    out = []
    seen = set()
    for site, O in obs:
        site = int(site)
        if not lo <= site <= hi:
            raise InvalidInput(f"observable site {site} outside [{lo}, {hi}]")
        if site in seen:
            raise InvalidInput(f"two observables on site {site}; multiply them first")
        seen.add(site)
        out.append((site, as_hermitian(np.asarray(O))))
    return out


# ---------------------------------------------------------------- boundaries


@dataclass(frozen=True)
class BoundaryStates:
    site: int
    Z: np.ndarray  # forward limit, includes phi_site
    Zp: np.ndarray  # adjoint limit, includes phi_site
    depth_used: int
    residual: float
    eta: tuple  # smallest eigenvalues of (Z, Zp)


def _normalize_state(X):
    X = 0.5 * (X + X.conj().T)
    t = np.trace(X).real
    if not t > 0:
        raise KernelMeetsStates("projective iterate vanished")
    return X / t


def _limit(window, site, step, adjoint, max_depth, tol):
    """Iterate (phi_site o ... o phi_{site - j}) applied to I/D for j = 0, 1, ...

    With ``adjoint`` the product is (phi_{site + j} o ... o phi_site)^dagger.
    Returns (state, depth, residual).
    """
    D = window.bond_dim
    v0 = _vec(np.eye(D) / D)
    K = None
    prev = None
    res = np.inf
    for j in range(max_depth + 1):
        k = site + step * j
        L = window.transfer(k).liouville
        if adjoint:
            L = L.conj().T
        K = L if K is None else K @ L
        K = K / np.linalg.norm(K)
        X = _normalize_state(_mat(K @ v0, D))
        if prev is not None:
            last, res = res, _trace_norm(X - prev)
            # geometric tail: stop once the remaining distance to the limit,
            # res * q / (1 - q) with q the observed contraction ratio, is below tol
            q = res / last if np.isfinite(last) and last > 0 else 1.0
            if res == 0 or (res < tol and q < 1 and res * q / (1 - q) < tol):
                return X, j, res
        prev = X
    return prev, max_depth, res


def boundary_states(window: ChainWindow, site: int, max_depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL) -> BoundaryStates:
    """Z_site and Z'_site by projective-limit iteration from I/D.

    The window must reach ``max_depth`` sites beyond ``site`` on each side;
    iteration stops earlier once successive iterates agree to ``tol`` in
    trace norm.
    """
    if not window.covers(site - max_depth, site + max_depth):
        raise InvalidInput(f"window does not reach depth {max_depth} around site {site}")
    Z, dz, rz = _limit(window, site, -1, False, max_depth, tol)
    Zp, dp, rp = _limit(window, site, +1, True, max_depth, tol)
    res = max(rz, rp)
    if res > 100 * tol:
        raise NoConvergence(f"boundary iteration at site {site} stalled at residual {res:.3g}")
    eta = (float(np.linalg.eigvalsh(Z)[0]), float(np.linalg.eigvalsh(Zp)[0]))
    return BoundaryStates(site, Z, Zp, max(dz, dp), float(res), eta)


class BoundaryCache:
    """Memoized boundary states for one window, shared by every evaluation on it."""

    def __init__(self, window: ChainWindow, max_depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL):
        self.window = window
        self.max_depth = max_depth
        self.tol = tol
        self._z = {}
        self._zp = {}

    def _fwd(self, site):
        if site not in self._z:
            if not self.window.covers(site - self.max_depth, site):
                raise InvalidInput(f"window does not reach depth {self.max_depth} left of site {site}")
            X, _, r = _limit(self.window, site, -1, False, self.max_depth, self.tol)
            if r > 100 * self.tol:
                raise NoConvergence(f"forward iteration at site {site} stalled at residual {r:.3g}")
            self._z[site] = X
        return self._z[site]

    def _bwd(self, site):
        if site not in self._zp:
            if not self.window.covers(site, site + self.max_depth):
                raise InvalidInput(f"window does not reach depth {self.max_depth} right of site {site}")
            X, _, r = _limit(self.window, site, +1, True, self.max_depth, self.tol)
            if r > 100 * self.tol:
                raise NoConvergence(f"adjoint iteration at site {site} stalled at residual {r:.3g}")
            self._zp[site] = X
        return self._zp[site]

    def Z(self, site):
        return self._fwd(site)

    def Zp(self, site):
        return self._bwd(site)


def cocycle_residuals(cache: BoundaryCache, site: int) -> tuple:
    """(||phi_k . Z_{k-1} - Z_k||_1, ||phi_k^dagger . Z'_{k+1} - Z'_k||_1)."""
    L = cache.window.transfer(site).liouville
    D = cache.window.bond_dim
    a = _normalize_state(_mat(L @ _vec(cache.Z(site - 1)), D))
    b = _normalize_state(_mat(L.conj().T @ _vec(cache.Zp(site + 1)), D))
    return _trace_norm(a - cache.Z(site)), _trace_norm(b - cache.Zp(site))


# ---------------------------------------------------------------- limit functional


def limit_functional(cache: BoundaryCache, obs):
    """T(O) for observables at sites m..n: a ratio of pairings with Z'_{n+1} and Z_{m-1}."""
    w = cache.window
    sites = [s for s, _ in obs]
    m, n = min(sites), max(sites)
    obs = dict(obs)
    D = w.bond_dim
    num = _vec(cache.Z(m - 1))
    den = num.copy()
    for k in range(m, n + 1):
        L = w.transfer(k).liouville
        num = (_obs_map(w, k, obs[k]).liouville if k in obs else L) @ num
        den = L @ den
        s = np.linalg.norm(den)
        num, den = num / s, den / s
    zp = _vec(cache.Zp(n + 1))
    d = np.vdot(zp, den)
    if abs(d) < 1e-300:
        raise DegenerateChain("boundary pairing vanished")
    return complex(np.vdot(zp, num) / d)


def thermo_expectation(window: ChainWindow, obs, depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL, cache=None) -> float:
    """Thermodynamic-limit expectation of one or two single-site observables.

    For a single site k this is tr(Z'_{k+1} O_k(Z_{k-1})) / tr(Z'_{k+1} phi_k(Z_{k-1})).
    """
    obs = _check_obs(obs, -(10**12), 10**12)
    if not 1 <= len(obs) <= 2:
        raise InvalidInput("thermo_expectation takes one or two observables")
    cache = cache or BoundaryCache(window, depth, tol)
    return limit_functional(cache, obs).real


@dataclass(frozen=True)
class TwoPointResult:
    m: int
    n: int
    f_value: float
    c_inner: float
    bound_8Dc: float
    obs_norms: tuple
    restarts_used: int

    @property
    def holds(self) -> bool:
        return self.f_value <= self.bound_8Dc + 1e-8


def _opnorm(O):
    return float(np.linalg.norm(O, 2))


def two_point_function(window: ChainWindow, first, second, depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL,
                       cache=None, search=None, seed=0, escalations: int = 2) -> TwoPointResult:
    """Connected correlation |T(O_m O_n) - T(O_m) T(O_n)| with its 8 D c bound.

    ``c_inner`` is a lower-bound estimate of c(phi_{n-1} o ... o phi_{m+1}).
    If the bound fails, the search is repeated with four times the restarts,
    up to ``escalations`` times, since only the estimate can be at fault.
    """
    (m, Om), (n, On) = first, second
    if n - m < 2:
        raise InvalidInput("two-point function needs n - m >= 2")
    Om, On = as_hermitian(np.asarray(Om)), as_hermitian(np.asarray(On))
    cache = cache or BoundaryCache(window, depth, tol)
    both = limit_functional(cache, [(m, Om), (n, On)])
    a = limit_functional(cache, [(m, Om)])
    b = limit_functional(cache, [(n, On)])
    f = abs(both - a * b)
    norms = (_opnorm(Om), _opnorm(On))
    search = dict(search or FAST_SEARCH)
    inner = compose_all([window.transfer(k) for k in range(m + 1, n)])
    D = window.bond_dim
    for _ in range(escalations + 1):
        c = contraction_estimate(inner, seed=seed, **search).lower
        bound = 8 * D * norms[0] * norms[1] * c
        if f <= bound + 1e-8:
            break
        search["restarts"] *= 4
    return TwoPointResult(m, n, float(f), float(c), float(bound), norms, search["restarts"])


# ---------------------------------------------------------------- rank-one defect


def informationally_complete_probes(D: int) -> np.ndarray:
    """Pure states |i>, (|i>+|j>)/sqrt2, (|i>+i|j>)/sqrt2, each times 1, -1, i, -i."""
    vecs = []
    E = np.eye(D)
    for i in range(D):
        vecs.append(E[i])
        for j in range(i + 1, D):
            vecs.append((E[i] + E[j]) / np.sqrt(2))
            vecs.append((E[i] + 1j * E[j]) / np.sqrt(2))
    V = np.array(vecs, dtype=complex)
    rho = V[:, :, None] * V[:, None, :].conj()
    return np.concatenate([ph * rho for ph in (1, -1, 1j, -1j)])


def random_trace_one_inputs(rng, n: int, D: int) -> np.ndarray:
    X = rng.standard_normal((n, D, D)) + 1j * rng.standard_normal((n, D, D))
    s = np.linalg.svd(X, compute_uv=False).sum(axis=1)
    return X / s[:, None, None]


def rank_one_defect(window: ChainWindow, m: int, n: int, depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL,
                    cache=None, search=None, seed=0, random_probes: int = 200, escalations: int = 2):
    """(defect, bound) with defect a probe lower bound on ||Phi/tr Phi^dagger(I) - Xi||_{1->1}.

    Xi(X) = tr(Z'_m X) Z_n and bound = 8 c(Phi_[m,n]).
    """
    if n < m:
        raise InvalidInput("need m <= n")
    cache = cache or BoundaryCache(window, depth, tol)
    D = window.bond_dim
    Phi = compose_all([window.transfer(k) for k in range(m, n + 1)])
    K = Phi.liouville
    vI = _vec(np.eye(D))
    K = K / np.vdot(vI, K @ vI).real  # tr(Phi^dagger(I)) = tr(Phi(I))
    Xi = np.outer(_vec(cache.Z(n)), _vec(cache.Zp(m)).conj())
    E = K - Xi
    probes = np.concatenate([informationally_complete_probes(D),
                             random_trace_one_inputs(make_rng(seed), random_probes, D)])
    flat = probes.transpose(0, 2, 1).reshape(len(probes), D * D)
    out = (flat @ E.T).reshape(len(probes), D, D).transpose(0, 2, 1)
    defect = float(np.linalg.svd(out, compute_uv=False).sum(axis=1).max())
    search = dict(search or FAST_SEARCH)
    for _ in range(escalations + 1):
        c = contraction_estimate(Phi, seed=seed, **search).lower
        if defect <= 8 * c + 1e-8:
            break
        search["restarts"] *= 4
    return defect, 8 * c


# ---------------------------------------------------------------- gauge fixing


def _psd_sqrt_pair(Z, rank_tol):
    w, V = np.linalg.eigh(0.5 * (Z + Z.conj().T))
    if w[0] < rank_tol:
        raise SingularGauge(f"boundary state has smallest eigenvalue {w[0]:.3g}")
    r = np.sqrt(w)
    return (V * r) @ V.conj().T, (V / r) @ V.conj().T


@dataclass(frozen=True)
class GaugedChain:
    original: ChainWindow
    gauged: ChainWindow  # same sites as the gauged range
    normalizers: tuple  # tr(phi_n^dagger(Z'_{n+1})) per site
    tp_residuals: tuple  # ||phi~_n^dagger(I) - I||_inf per site
    z_tilde: dict  # predicted Z~_k for k in the gauged range (minus the last site)

    @property
    def gauged_tensors(self):
        return self.gauged.tensors


def gauge_fix(window: ChainWindow, lo: int, hi: int, cache=None, depth: int = DEFAULT_DEPTH, tol: float = DEFAULT_TOL,
              rank_tol: float = RANK_TOL) -> GaugedChain:
    """Gauge-transform sites lo..hi so every transfer map becomes trace preserving.

    B_i = (Z'_{n+1})^{1/2} A_i (Z'_n)^{-1/2} / sqrt(tr phi_n^dagger(Z'_{n+1})).
    """
    if hi < lo:
        raise InvalidInput("empty gauge range")
    cache = cache or BoundaryCache(window, depth, tol)
    roots = {k: _psd_sqrt_pair(cache.Zp(k), rank_tol) for k in range(lo, hi + 2)}
    D = window.bond_dim
    tensors, norms, res = [], [], []
    z_tilde = {}
    for k in range(lo, hi + 1):
        A = window.tensor(k).kraus
        Zn = cache.Zp(k + 1)
        nrm = float(np.einsum("pji,jk,pki->", A.conj(), Zn, A).real)  # tr sum A^dag Z' A
        s_next, _ = roots[k + 1]
        _, is_here = roots[k]
        B = np.einsum("ij,pjk,kl->pil", s_next, A, is_here) / np.sqrt(nrm)
        tensors.append(LocalTensor(B))
        norms.append(nrm)
        res.append(float(np.abs(np.einsum("pji,pjk->ik", B.conj(), B) - np.eye(D)).max()))
        Zk = cache.Z(k)
        zt = s_next @ Zk @ s_next
        z_tilde[k] = zt / np.trace(cache.Zp(k + 1) @ Zk).real
    gauged = ChainWindow(lo, tuple(tensors), window.seed)
    return GaugedChain(window, gauged, tuple(norms), tuple(res), z_tilde)

