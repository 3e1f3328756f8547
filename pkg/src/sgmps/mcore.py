"""Dense matrix and superoperator algebra.

Vectorization is column stacking, ``vec(X)[i + D*j] = X[i, j]``, so that
``vec(A @ X @ B.T) == kron(B, A) @ vec(X)``.  With this convention the
transfer map ``X -> sum_p A_p X A_p^dagger`` has Liouville matrix
``sum_p kron(conj(A_p), A_p)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, InvalidInput

RANK_TOL = 1e-9
HERMITIAN_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


def as_matrix(M) -> np.ndarray:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise InvalidInput(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput("matrix has non-finite entries")
    return M


def as_hermitian(H, tol: float = HERMITIAN_TOL) -> np.ndarray:
    H = as_matrix(H)
    scale = np.abs(H).max()
    if np.abs(H - H.conj().T).max() > tol * max(scale, 1e-300):
        raise InvalidInput("matrix is not Hermitian within tolerance")
    return H


def as_density_state(rho, tol: float = 1e-10) -> np.ndarray:
    """Validate a density matrix (Hermitian, PSD, unit trace) and return it."""
    rho = as_hermitian(rho, tol=1e-10)
    if abs(np.trace(rho) - 1) > tol:
        raise InvalidInput(f"density matrix trace {np.trace(rho).real:.3g} != 1")
    if np.linalg.eigvalsh(rho)[0] < -tol:
        raise InvalidInput("density matrix is not positive semidefinite")
    return rho


def is_full_rank_state(rho, rank_tol: float = RANK_TOL) -> bool:
    return bool(np.linalg.eigvalsh(rho)[0] > rank_tol)


@dataclass(frozen=True)
class LocalTensor:
    """Site tensor as ``d`` Kraus matrices, stored with shape ``(d, D, D)``."""

    kraus: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kraus)
        if k.ndim != 3 or k.shape[1] != k.shape[2]:
            raise InvalidInput(f"kraus array must have shape (d, D, D), got {k.shape}")
        if k.shape[0] < 1 or k.shape[1] < 1:
            raise InvalidInput("empty local tensor")
        if not np.all(np.isfinite(k)):
            raise InvalidInput("local tensor has non-finite entries")
        object.__setattr__(self, "kraus", _frozen(k))

    @property
    def phys_dim(self) -> int:
        return self.kraus.shape[0]

    @property
    def bond_dim(self) -> int:
        return self.kraus.shape[1]

    def __eq__(self, other):
        return isinstance(other, LocalTensor) and np.array_equal(self.kraus, other.kraus)

    def __hash__(self):
        return hash(self.kraus.tobytes())


@dataclass(frozen=True)
class Superoperator:
    """Linear map on D x D matrices held as its D^2 x D^2 Liouville matrix."""

    liouville: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.liouville)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise InvalidInput(f"Liouville matrix must be square, got {L.shape}")
        D = math.isqrt(L.shape[0])
        if D * D != L.shape[0] or D < 1:
            raise InvalidInput(f"Liouville size {L.shape[0]} is not a perfect square")
        object.__setattr__(self, "liouville", _frozen(L))

    @property
    def bond_dim(self) -> int:
        return math.isqrt(self.liouville.shape[0])

    def __call__(self, X) -> np.ndarray:
        return apply_superop(self, X)

    def scaled(self, alpha) -> "Superoperator":
        return Superoperator(alpha * self.liouville)

    def __eq__(self, other):
        return isinstance(other, Superoperator) and np.array_equal(self.liouville, other.liouville)

    def __hash__(self):
        return hash(self.liouville.tobytes())


def schatten_norm(M, p=2) -> float:
    M = as_matrix(M)
    if not (p == np.inf or p >= 1):
        raise InvalidInput(f"Schatten index must be >= 1, got {p}")
    s = np.linalg.svd(M, compute_uv=False)
    if p == np.inf:
        return float(s.max())
    return float(np.sum(s**p) ** (1.0 / p))


def hs_inner(A, B) -> complex:
    """Hilbert-Schmidt pairing tr(A^dagger B)."""
    A, B = np.asarray(A), np.asarray(B)
    if A.shape != B.shape:
        raise DimMismatch(f"shapes {A.shape} and {B.shape} differ")
    return complex(np.vdot(A, B))


def vectorize(X) -> np.ndarray:
    X = as_matrix(X)
    return np.asarray(X, dtype=complex).reshape(-1, order="F")


def devectorize(v) -> np.ndarray:
    v = np.asarray(v)
    D = math.isqrt(v.size)
    if v.ndim != 1 or D * D != v.size:
        raise InvalidInput(f"vector length {v.size} is not a perfect square")
    return v.reshape(D, D, order="F")


def apply_superop(S: Superoperator, X) -> np.ndarray:
    X = np.asarray(X)
    D = S.bond_dim
    if X.shape != (D, D):
        raise DimMismatch(f"superoperator acts on {D}x{D}, got {X.shape}")
    return (S.liouville @ X.reshape(-1, order="F")).reshape(D, D, order="F")


def liouville_of_tensor(t: LocalTensor) -> Superoperator:
    A = t.kraus
    D = t.bond_dim
    K = np.einsum("pjl,pik->jilk", A.conj(), A).reshape(D * D, D * D)
    return Superoperator(K)


def observable_liouville(t: LocalTensor, O) -> Superoperator:
    """Liouville matrix of ``X -> sum_pq O[p,q] A_p X A_q^dagger``."""
    O = np.asarray(O)
    if O.shape != (t.phys_dim, t.phys_dim):
        raise DimMismatch(f"observable shape {O.shape} does not match phys_dim {t.phys_dim}")
    A = t.kraus
    D = t.bond_dim
    K = np.einsum("pq,qjl,pik->jilk", O, A.conj(), A).reshape(D * D, D * D)
    return Superoperator(K)


def superop_trace(S: Superoperator) -> complex:
    return complex(np.trace(S.liouville))


def superop_adjoint(S: Superoperator) -> Superoperator:
    return Superoperator(S.liouville.conj().T)


def superop_compose(outer: Superoperator, inner: Superoperator) -> Superoperator:
    if outer.bond_dim != inner.bond_dim:
        raise DimMismatch(f"bond dims {outer.bond_dim} and {inner.bond_dim} differ")
    return Superoperator(outer.liouville @ inner.liouville)


def compose_all(maps) -> Superoperator:
    """``maps[-1] o ... o maps[0]``, Frobenius-renormalized at every step.

    The result is a positive multiple of the true composition, which is all
    that projective quantities (strict positivity, contraction) depend on.
    """
    maps = list(maps)
    if not maps:
        raise InvalidInput("nothing to compose")
    K = maps[0].liouville
    K = K / np.linalg.norm(K)
    for S in maps[1:]:
        K = S.liouville @ K
        K = K / np.linalg.norm(K)
    return Superoperator(K)


def identity_superop(D: int) -> Superoperator:
    return Superoperator(np.eye(D * D, dtype=complex))


def depolarizing_superop(D: int) -> Superoperator:
    """The replacement channel X -> tr(X) I/D."""
    vI = np.eye(D).reshape(-1, order="F")
    return Superoperator(np.outer(vI, vI) / D)


def unitary_superop(U) -> Superoperator:
    return liouville_of_tensor(LocalTensor(np.asarray(U)[None]))


def min_eigenvalue(H) -> float:
    H = as_hermitian(H)
    return float(np.linalg.eigvalsh(H)[0])


def choi_matrix(S: Superoperator) -> np.ndarray:
    """Choi matrix ``sum_r vec(K_r) vec(K_r)^dagger`` for a CP map with Kraus ops K_r.

    Obtained by reshuffling the Liouville matrix, so Kraus data is not needed.
    """
    D = S.bond_dim
    L4 = S.liouville.reshape(D, D, D, D, order="F")  # [i, j, k, l]: row i+Dj, col k+Dl
    return L4.transpose(0, 2, 1, 3).reshape(D * D, D * D, order="F")


class Positivity(str, enum.Enum):
    CERTIFIED_POSITIVE = "certified_positive"
    CERTIFIED_NOT = "certified_not"
    UNDETERMINED = "undetermined"


def haar_vectors(rng: np.random.Generator, n: int, D: int) -> np.ndarray:
    v = rng.standard_normal((n, D)) + 1j * rng.standard_normal((n, D))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def pure_images(S: Superoperator, vecs) -> np.ndarray:
    """S(|v><v|) for each row v of ``vecs``; returns shape (n, D, D)."""
    vecs = np.asarray(vecs)
    D = S.bond_dim
    rho = vecs[:, :, None] * vecs[:, None, :].conj()
    flat = rho.transpose(0, 2, 1).reshape(len(vecs), D * D)  # column stacking
    out = flat @ S.liouville.T
    return out.reshape(len(vecs), D, D).transpose(0, 2, 1)


def strict_positivity_check(
    S: Superoperator,
    mode: str = "combined",
    tol: float = RANK_TOL,
    sweep_samples: int = 256,
    rng: np.random.Generator | None = None,
) -> Positivity:
    """Three-valued strict-positivity verdict for a completely positive map.

    ``choi_sufficient`` certifies positivity when the Choi matrix has full
    rank (relative threshold ``tol``); it cannot refute.  ``pure_sweep``
    evaluates the smallest eigenvalue of S(|v><v|) on Haar-random vectors and
    can only refute.  ``combined`` runs the Choi test first, then the sweep.
    """
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    if mode not in ("choi_sufficient", "pure_sweep", "combined"):
        raise InvalidInput(f"unknown mode {mode!r}")
    if mode in ("choi_sufficient", "combined"):
        w = np.linalg.eigvalsh(choi_matrix(S))
        if w[-1] > 0 and w[0] > tol * w[-1]:
            return Positivity.CERTIFIED_POSITIVE
        if mode == "choi_sufficient":
            return Positivity.UNDETERMINED
    if rng is None:
        rng = np.random.default_rng(0)
    imgs = pure_images(S, haar_vectors(rng, sweep_samples, S.bond_dim))
    imgs = 0.5 * (imgs + imgs.conj().transpose(0, 2, 1))
    w = np.linalg.eigvalsh(imgs)
    if np.any(w[:, 0] <= tol * np.maximum(w[:, -1], 0.0)):
        return Positivity.CERTIFIED_NOT
    return Positivity.UNDETERMINED
