"""Projective metric on density matrices and the contraction coefficient c(phi)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, KernelMeetsStates
from .mcore import (
    RANK_TOL,
    Superoperator,
    apply_superop,
    as_hermitian,
    as_matrix,
    haar_vectors,
)
from .rng import RngSeed, make_rng


class _ZeroType:
    """Marker returned by :func:`projective_apply` when phi(X) = 0."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "ZERO"

    def __bool__(self):
        return False


ZERO = _ZeroType()

# Zero detection threshold for tr(phi(X)) relative to ||K(phi)||.
_KERNEL_TOL = 1e-13


def _psd_check(A, name):
    A = as_hermitian(A, tol=1e-10)
    w = np.linalg.eigvalsh(A)
    if w[0] < -1e-10 * max(abs(w[-1]), 1.0):
        raise InvalidInput(f"{name} is not positive semidefinite")
    return A, w


def m_coeff(A, B, rank_tol: float = RANK_TOL) -> float:
    """sup{lam >= 0 : lam*B <= A} for PSD A and nonzero PSD B.

    Computed on the support of A: if B leaks into ker A the answer is 0,
    otherwise it is 1/lambda_max(A^{-1/2} B A^{-1/2}) restricted to supp A.
    """
    A, wa = _psd_check(A, "A")
    B, wb = _psd_check(B, "B")
    if wb[-1] <= 0:
        raise InvalidInput("B must be nonzero")
    if wa[-1] <= 0:
        return 0.0
    w, V = np.linalg.eigh(A)
    keep = w > rank_tol * w[-1]
    Vs, Vk = V[:, keep], V[:, ~keep]
    if Vk.shape[1]:
        leak = np.linalg.eigvalsh(Vk.conj().T @ B @ Vk)[-1]
        if leak > rank_tol * wb[-1]:
            return 0.0
    isq = Vs / np.sqrt(w[keep])
    C = isq.conj().T @ B @ isq
    top = np.linalg.eigvalsh(0.5 * (C + C.conj().T))[-1]
    if top <= 0:
        return np.inf
    return float(1.0 / top)


def metric_d(rho, delta, rank_tol: float = RANK_TOL) -> float:
    """d(rho, delta) = (1 - m m') / (1 + m m') with m = m(rho, delta), m' = m(delta, rho)."""
    rho = as_matrix(rho)
    delta = as_matrix(delta)
    if rho.shape != delta.shape:
        raise InvalidInput("states have different dimensions")
    for name, s in (("rho", rho), ("delta", delta)):
        if abs(np.trace(s) - 1) > 1e-8:
            raise InvalidInput(f"{name} must have unit trace")
    if np.array_equal(rho, delta):
        return 0.0
    mm = m_coeff(rho, delta, rank_tol) * m_coeff(delta, rho, rank_tol)
    return float(min(1.0, max(0.0, (1 - mm) / (1 + mm))))


def projective_apply(S: Superoperator, X):
    """S(X)/||S(X)||_1 for PSD X, or :data:`ZERO` when S(X) vanishes."""
    X, _ = _psd_check(X, "X")
    Y = apply_superop(S, X)
    t = np.trace(Y).real
    if t <= _KERNEL_TOL * np.linalg.norm(S.liouville) * np.trace(X).real:
        return ZERO
    Y = Y / t
    return 0.5 * (Y + Y.conj().T)


def _metric_d2(A, B):
    """Closed form for 2 x 2 unit-trace PSD stacks.

    The generalized eigenvalues mu of B v = mu A v satisfy
    det(A) mu^2 - tr(adj(A) B) mu + det(B) = 0, so
    d = (mu_max - mu_min)/(mu_max + mu_min) = sqrt(1 - 4 det A det B / tr(adj(A) B)^2).
    """
    a00, a11, a01 = A[:, 0, 0].real, A[:, 1, 1].real, A[:, 0, 1]
    b00, b11, b10 = B[:, 0, 0].real, B[:, 1, 1].real, B[:, 1, 0]
    detA = np.maximum(a00 * a11 - np.abs(a01) ** 2, 0.0)
    detB = np.maximum(b00 * b11 - np.abs(b10) ** 2, 0.0)
    s = a11 * b00 + a00 * b11 - 2 * (a01 * b10).real
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 1e-300, 4 * detA * detB / (s * s), 1.0)
    return np.sqrt(np.clip(1 - q, 0.0, 1.0))


def _batch_metric(A, B, rank_tol=RANK_TOL):
    """Vectorized d for stacks of unit-trace PSD matrices of shape (n, D, D)."""
    if A.shape[-1] == 2:
        return _metric_d2(A, B)
    wa, Va = np.linalg.eigh(A)
    wb = np.linalg.eigvalsh(B)
    sing_a = wa[:, 0] <= rank_tol * wa[:, -1]
    sing_b = wb[:, 0] <= rank_tol * wb[:, -1]
    out = np.empty(len(A))
    full = ~(sing_a | sing_b)
    if full.any():
        isq = Va[full] / np.sqrt(wa[full])[:, None, :]
        C = isq.conj().transpose(0, 2, 1) @ B[full] @ isq
        mu = np.linalg.eigvalsh(0.5 * (C + C.conj().transpose(0, 2, 1)))
        out[full] = (mu[:, -1] - mu[:, 0]) / (mu[:, -1] + mu[:, 0])
    one = sing_a ^ sing_b
    out[one] = 1.0
    for i in np.flatnonzero(sing_a & sing_b):
        out[i] = metric_d(A[i], B[i], rank_tol)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ContractionEstimate:
    lower: float
    method: str
    restarts: int
    achieved_pair: tuple  # two pure input states attaining ``lower``


def _images(Kt, vecs):
    """Trace-normalized images of |v><v| under maps given as transposed Liouville stacks.

    Kt has shape (n, D^2, D^2); vecs has shape (n, k, D); output (n, k, D, D).
    """
    n, k, D = vecs.shape
    rho = vecs[..., :, None] * vecs[..., None, :].conj()
    flat = rho.transpose(0, 1, 3, 2).reshape(n, k, D * D)
    img = np.matmul(flat, Kt).reshape(n, k, D, D).transpose(0, 1, 3, 2)
    tr = np.trace(img, axis1=2, axis2=3).real
    return img / tr[..., None, None], tr


def _params_to_vecs(x, D):
    v = x[..., :D] + 1j * x[..., D:]
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def is_replacement_channel(S: Superoperator, tol: float = 1e-13) -> bool:
    s = np.linalg.svd(S.liouville, compute_uv=False)
    return bool(s[0] > 0 and (len(s) == 1 or s[1] <= tol * s[0]))


def check_kernel(S: Superoperator, tol: float = _KERNEL_TOL):
    """Raise KernelMeetsStates if S maps some density matrix to a traceless image.

    tr S(rho) = tr(S^dag(I) rho), so a state is annihilated exactly when the
    Hermitian part of S^dag(I) has a (numerically) nonpositive eigenvalue.
    """
    D = S.bond_dim
    vI = np.eye(D).reshape(-1, order="F")
    M = (S.liouville.conj().T @ vI).reshape(D, D, order="F")
    w = np.linalg.eigvalsh(0.5 * (M + M.conj().T))
    if w[0] <= tol * max(abs(w).max(), np.linalg.norm(S.liouville)):
        raise KernelMeetsStates("transfer map annihilates a density matrix")


def contraction_estimate(
    S: Superoperator,
    restarts: int = 64,
    iters: int = 200,
    seed: RngSeed | int = 0,
    step0: float = 0.5,
    min_step: float = 1e-7,
) -> ContractionEstimate:
    """Lower bound on c(S) by maximizing d(S.|u><u|, S.|v><v|) over pure pairs.

    Batched compass search: every restart moves along its best +/- coordinate
    perturbation of the real parameters of (u, v), halving its step when no
    move improves.  Deterministic given ``seed``.
    """
    return contraction_estimate_many([S], [seed], restarts, iters, step0, min_step)[0]


def contraction_estimate_many(maps, seeds, restarts: int = 64, iters: int = 200, step0: float = 0.5,
                              min_step: float = 1e-7, chunk: int = 4096) -> list:
    """:func:`contraction_estimate` for many maps of equal bond dimension at once.

    Each map's result depends only on that map and its own seed, not on the
    rest of the batch.
    """
    maps = list(maps)
    if len(maps) != len(seeds):
        raise InvalidInput("need one seed per map")
    if not maps:
        return []
    D = maps[0].bond_dim
    if any(S.bond_dim != D for S in maps):
        raise InvalidInput("all maps must share the bond dimension")
    B, R, P = len(maps), restarts, 2 * D
    Kt = np.stack([S.liouville.T for S in maps])
    scale = np.linalg.norm(Kt, axis=(1, 2))
    x = np.empty((B, R, 2 * P))
    for b, sd in enumerate(seeds):
        rng = make_rng(sd)
        probe = haar_vectors(rng, 8, D)
        _, tr = _images(Kt[b : b + 1], probe[None])
        if np.any(tr <= _KERNEL_TOL * scale[b]):
            raise KernelMeetsStates("transfer map annihilates a pure state")
        x[b] = rng.standard_normal((R, 2 * P))
    for S in maps:
        check_kernel(S)
    replacement = np.array([is_replacement_channel(S) for S in maps])

    def evaluate(bi, params):
        # params: (n, k, 2P) for maps bi (n,)
        out = np.empty(params.shape[:2])
        per = max(1, chunk // params.shape[1])
        for s in range(0, len(bi), per):
            sl = slice(s, s + per)
            K = Kt[bi[sl]]
            u = _params_to_vecs(params[sl, :, :P], D)
            v = _params_to_vecs(params[sl, :, P:], D)
            iu, tu = _images(K, u)
            iv, tv = _images(K, v)
            lim = _KERNEL_TOL * scale[bi[sl]][:, None]
            if np.any(tu <= lim) or np.any(tv <= lim):
                raise KernelMeetsStates("transfer map annihilates a pure state")
            k = params.shape[1]
            iu = 0.5 * (iu + iu.conj().swapaxes(-1, -2))
            iv = 0.5 * (iv + iv.conj().swapaxes(-1, -2))
            out[sl] = _batch_metric(iu.reshape(-1, D, D), iv.reshape(-1, D, D)).reshape(-1, k)
        return out

    val = np.zeros((B, R))
    live = np.flatnonzero(~replacement)
    if live.size:
        val[live] = evaluate(live, x[live])
    step = np.full((B, R), step0)
    eye = np.eye(2 * P)
    dirs = np.concatenate([eye, -eye])
    done = replacement | (val.max(axis=1) >= 1 - 1e-12)
    for _ in range(iters):
        active = (step >= min_step) & ~done[:, None]
        bi, ri = np.nonzero(active)
        if bi.size == 0:
            break
        cand = x[bi, ri][:, None, :] + step[bi, ri][:, None, None] * dirs[None]
        cv = evaluate(bi, cand)
        j = np.argmax(cv, axis=1)
        best = cv[np.arange(len(j)), j]
        up = best > val[bi, ri] + 1e-15
        x[bi[up], ri[up]] = cand[up, j[up]]
        val[bi[up], ri[up]] = best[up]
        step[bi[~up], ri[~up]] *= 0.5
        done |= val.max(axis=1) >= 1 - 1e-12

    out = []
    for b in range(B):
        if replacement[b]:
            e = np.zeros((D, D), complex)
            e[0, 0] = 1
            out.append(ContractionEstimate(0.0, "pure_pair_search", R, (e, e.copy())))
            continue
        k = int(np.argmax(val[b]))
        u = _params_to_vecs(x[b, k, :P], D)
        v = _params_to_vecs(x[b, k, P:], D)
        wit = (np.outer(u, u.conj()), np.outer(v, v.conj()))
        out.append(ContractionEstimate(float(val[b, k]), "pure_pair_search", R, wit))
    return out


_PAULI = np.array(
    [[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex
)


def bloch_grid(grid: int) -> np.ndarray:
    """Pure-state Bloch vectors on a grid x grid (theta, phi) lattice, plus the origin."""
    th = np.linspace(0.0, np.pi, grid)
    ph = np.linspace(0.0, 2 * np.pi, grid, endpoint=False)
    T, F = np.meshgrid(th, ph, indexing="ij")
    n = np.stack([np.sin(T) * np.cos(F), np.sin(T) * np.sin(F), np.cos(T)], axis=-1).reshape(-1, 3)
    return np.vstack([n, np.zeros(3)])


def contraction_oracle_d2(S: Superoperator, grid: int = 32, chunk: int = 512) -> float:
    """Brute-force c(S) for D = 2 over a Bloch-sphere grid of pure states and I/2.

    Uses the qubit closed form d = sqrt(1 - (1-|a|^2)(1-|b|^2) / (1-a.b)^2)
    for trace-one states with Bloch vectors a, b.
    """
    if S.bond_dim != 2:
        raise InvalidInput("oracle is defined for bond dimension 2 only")
    if grid < 8:
        raise InvalidInput("grid must be at least 8")
    n = bloch_grid(grid)
    rho = 0.5 * (np.eye(2)[None] + np.einsum("ka,aij->kij", n, _PAULI))
    flat = rho.transpose(0, 2, 1).reshape(len(n), 4)
    img = (flat @ S.liouville.T).reshape(len(n), 2, 2).transpose(0, 2, 1)
    tr = np.trace(img, axis1=1, axis2=2).real
    if np.any(tr <= _KERNEL_TOL * np.linalg.norm(S.liouville)):
        raise KernelMeetsStates("transfer map annihilates a grid state")
    a = np.einsum("kij,aji->ka", img, _PAULI).real / tr[:, None]
    a2 = np.minimum(np.sum(a * a, axis=1), 1.0)
    best = 0.0
    for s in range(0, len(a), chunk):
        dot = a[s : s + chunk] @ a.T
        num = (1 - a2[s : s + chunk, None]) * (1 - a2[None, :])
        den = (1 - dot) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(den > 1e-30, num / den, 1.0)
        d = np.sqrt(np.clip(1 - q, 0.0, 1.0))
        best = max(best, float(d.max()))
    return best
