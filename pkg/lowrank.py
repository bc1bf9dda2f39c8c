"""lowrank.py – matrix-free kernels for N×r factors.

* ``HouseholderStack``: r reflectors encoding the unitary Q = P_1…P_r whose
  leading columns span the factor; products with the complement V̂ go through
  the reflectors, so no N×N or N×(N−r) array is ever formed.
* ``LowRankSum``: a formal sum of factor products applied as a matvec.
* ``lanczos_topk``: thick-restart Lanczos with full reorthogonalization for
  the r algebraically largest eigenpairs of a Hermitian matvec oracle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import settings
from errors import DimensionMismatchError, LanczosConvergenceError, RankDeficiencyError

logger = logging.getLogger("lrei.lowrank")

PIVOT_TOL = 1e-13

Matvec = Callable[[np.ndarray], np.ndarray]


def normalize_phase(V: np.ndarray) -> np.ndarray:
    """Scale each column so its largest-magnitude entry is real positive."""
    V = np.array(V, dtype=np.complex128, copy=True)
    if V.size == 0:
        return V
    cols = np.arange(V.shape[1])
    pivots = V[np.argmax(np.abs(V), axis=0), cols]
    mags = np.abs(pivots)
    phases = np.where(mags > 0, pivots / np.where(mags > 0, mags, 1), 1)
    V /= phases
    return V


# ─── HOUSEHOLDER ───────────────────────────────────────────
@dataclass(frozen=True)
class HouseholderStack:
    vectors: np.ndarray     # N×r, column k zero above row k
    betas: np.ndarray       # r, β_k = 2/(u_k*u_k) or 0 for P_k = I
    phases: np.ndarray      # r, unit-modulus phases of R's diagonal

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]

    def _sweep(self, X: np.ndarray, ks) -> np.ndarray:
        X = np.asarray(X)
        out = np.array(X.reshape(X.shape[0], -1), dtype=np.complex128, copy=True)
        for k in ks:
            if self.betas[k] != 0:
                u = self.vectors[k:, k]
                out[k:] -= self.betas[k] * np.outer(u, u.conj() @ out[k:])
        return out.reshape(X.shape)

    def reflect(self, k: int, X: np.ndarray) -> np.ndarray:
        """P_k X (new array)."""
        return self._sweep(X, [k])

    def apply_q(self, X: np.ndarray) -> np.ndarray:
        """Q X = P_1(P_2(…P_r X))."""
        return self._sweep(X, reversed(range(self.rank)))

    def apply_qh(self, X: np.ndarray) -> np.ndarray:
        """Q* X = P_r(…P_1 X)."""
        return self._sweep(X, range(self.rank))

    def leading_columns(self) -> np.ndarray:
        """First r columns of Q with R's diagonal phase folded in (equals the factor)."""
        E = np.zeros((self.dim, self.rank), dtype=np.complex128)
        E[np.arange(self.rank), np.arange(self.rank)] = self.phases
        return self.apply_q(E)


def householder_from_factor(V: np.ndarray) -> HouseholderStack:
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[1] > V.shape[0]:
        raise DimensionMismatchError(f"expected an N×r factor with r ≤ N, got shape {V.shape}")
    N, r = V.shape
    A = np.array(V, dtype=np.complex128, copy=True)
    vectors = np.zeros((N, r), dtype=np.complex128)
    betas = np.zeros(r)
    phases = np.ones(r, dtype=np.complex128)

    for k in range(r):
        x = A[k:, k]
        norm = np.linalg.norm(x)
        if norm < PIVOT_TOL:
            raise RankDeficiencyError(k + 1, norm)
        x0 = x[0]
        sign = x0 / abs(x0) if x0 != 0 else 1.0
        if not np.any(x[1:]):
            # already reduced: P_k = I
            phases[k] = sign
            continue
        alpha = -sign * norm
        u = x.copy()
        u[0] -= alpha
        beta = 2.0 / np.vdot(u, u).real
        A[k:, k:] -= beta * np.outer(u, u.conj() @ A[k:, k:])
        vectors[k:, k] = u
        betas[k] = beta
        phases[k] = -sign
    return HouseholderStack(vectors, betas, phases)


def apply_complement_right(A: np.ndarray, stack: HouseholderStack) -> np.ndarray:
    """A·V̂ for an m×N matrix A: r rank-1 updates A ← A − β(Au)u*, then drop r columns."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] != stack.dim:
        raise DimensionMismatchError(f"expected {stack.dim} columns, got shape {A.shape}")
    out = np.array(A, dtype=np.complex128, copy=True)
    for k in range(stack.rank):
        if stack.betas[k] == 0:
            continue
        u = stack.vectors[k:, k]
        w = out[:, k:] @ u
        out[:, k:] -= stack.betas[k] * np.outer(w, u.conj())
    return out[:, stack.rank:]


def apply_complement_left(A: np.ndarray, stack: HouseholderStack) -> np.ndarray:
    """V̂·A for an (N−r)×m matrix A, as Q·[0; A]."""
    A = np.asarray(A)
    vector = A.ndim == 1
    if vector:
        A = A[:, None]
    N, r = stack.dim, stack.rank
    if A.ndim != 2 or A.shape[0] != N - r:
        raise DimensionMismatchError(f"expected {N - r} rows, got shape {A.shape}")
    out = np.zeros((N, A.shape[1]), dtype=np.complex128)
    out[r:] = A
    for k in reversed(range(r)):
        if stack.betas[k] == 0:
            continue
        u = stack.vectors[k:, k]
        w = u.conj() @ out[k:]
        out[k:] -= stack.betas[k] * np.outer(u, w)
    return out[:, 0] if vector else out


# ─── LOW-RANK SUMS ─────────────────────────────────────────
Core = Union[np.ndarray, complex, float, None]


@dataclass(frozen=True)
class LowRankTerm:
    """left · core · right*, core an r×q matrix, a scalar or None (identity)."""
    left: np.ndarray
    right: np.ndarray
    core: Core = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = self.right.conj().T @ x
        if self.core is not None:
            y = self.core @ y if np.ndim(self.core) == 2 else self.core * y
        return self.left @ y

    def apply_adjoint(self, x: np.ndarray) -> np.ndarray:
        y = self.left.conj().T @ x
        if self.core is not None:
            y = self.core.conj().T @ y if np.ndim(self.core) == 2 else np.conj(self.core) * y
        return self.right @ y

    def to_dense(self) -> np.ndarray:
        core = self.core
        if core is None:
            core = np.eye(self.left.shape[1])
        elif np.ndim(core) == 0:
            core = core * np.eye(self.left.shape[1])
        return self.left @ core @ self.right.conj().T


@dataclass(frozen=True)
class LowRankSum:
    dim: int
    terms: Tuple[LowRankTerm, ...] = ()
    hermitian_pairs: bool = False

    def __post_init__(self):
        for t in self.terms:
            if t.left.shape[0] != self.dim or t.right.shape[0] != self.dim:
                raise DimensionMismatchError(
                    f"term factors {t.left.shape}/{t.right.shape} do not match dim {self.dim}")

    def __len__(self) -> int:
        return len(self.terms)

    def with_terms(self, *terms: LowRankTerm) -> "LowRankSum":
        return LowRankSum(self.dim, self.terms + tuple(terms), self.hermitian_pairs)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape, dtype=np.complex128)
        for t in self.terms:
            out += t.apply(x)
            if self.hermitian_pairs:
                out += t.apply_adjoint(x)
        return out

    def block_count(self) -> int:
        """Distinct N-row factor arrays referenced by the sum."""
        return len({id(a) for t in self.terms for a in (t.left, t.right)})

    def to_dense(self) -> np.ndarray:
        settings.check_dense(self.dim)
        M = np.zeros((self.dim, self.dim), dtype=np.complex128)
        for t in self.terms:
            D = t.to_dense()
            M += D + D.conj().T if self.hermitian_pairs else D
        return M


def lowrank_matvec(lrs: LowRankSum, x: np.ndarray) -> np.ndarray:
    if x.shape[0] != lrs.dim:
        raise DimensionMismatchError(f"sum has dim {lrs.dim}, vector has {x.shape[0]}")
    return lrs.matvec(x)


# ─── LANCZOS ───────────────────────────────────────────────
@dataclass(frozen=True)
class LanczosOptions:
    tol: float = 1e-10
    krylov_dim: Optional[int] = None
    max_restarts: Optional[int] = None
    seed: int = settings.LANCZOS_SEED
    v0: Optional[np.ndarray] = field(default=None, compare=False)
    breakdown_tol: float = 1e-12


class RitzPairs(NamedTuple):
    vectors: np.ndarray
    values: np.ndarray
    residuals: np.ndarray
    restarts: int
    matvecs: int


def default_krylov_dim(n: int, r: int) -> int:
    return min(max(2 * r + 1, r + 8), n)


def _orthogonalize(v: np.ndarray, basis: np.ndarray) -> np.ndarray:
    # classical Gram-Schmidt, applied twice
    for _ in range(2):
        if basis.shape[1]:
            v = v - basis @ (basis.conj().T @ v)
    return v


def _random_direction(rng: np.random.Generator, basis: np.ndarray) -> np.ndarray:
    n = basis.shape[0]
    for _ in range(10):
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        w = _orthogonalize(v, basis)
        nw = np.linalg.norm(w)
        if nw > 1e-8 * np.linalg.norm(v):
            return w / nw
    raise LanczosConvergenceError("could not extend the Krylov basis with a random direction")


def lanczos_topk(matvec: Matvec, n: int, r: int,
                 opts: Optional[LanczosOptions] = None) -> RitzPairs:
    opts = opts or LanczosOptions()
    if not 1 <= r < n:
        raise ValueError(f"need 1 ≤ r < N, got r={r}, N={n}")
    m = opts.krylov_dim or default_krylov_dim(n, r)
    m = min(max(m, r + 1), n)
    keep = min(r + (m - r) // 2, m - 1)
    max_restarts = opts.max_restarts if opts.max_restarts is not None else 50 * r
    rng = np.random.default_rng(opts.seed)

    U = np.zeros((n, m), dtype=np.complex128)
    AU = np.zeros((n, m), dtype=np.complex128)
    k = 0
    anorm = 0.0
    matvecs = 0

    if opts.v0 is not None and np.linalg.norm(opts.v0) > 0:
        v = np.asarray(opts.v0, dtype=np.complex128).ravel()
        if v.shape[0] != n:
            raise DimensionMismatchError(f"start vector has length {v.shape[0]}, expected {n}")
    else:
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v = v / np.linalg.norm(v)

    best = np.full(r, np.inf)
    for restart in range(max_restarts + 1):
        while k < m:
            w = _orthogonalize(v, U[:, :k])
            beta = np.linalg.norm(w)
            if k == 0 and beta > 0:
                w = w / beta
            elif beta <= opts.breakdown_tol * max(anorm, np.finfo(float).tiny):
                # invariant subspace reached; continue in a fresh direction
                logger.debug("Lanczos breakdown at k=%d (beta=%.2e)", k, beta)
                w = _random_direction(rng, U[:, :k])
            else:
                w = w / beta
            U[:, k] = w
            AU[:, k] = matvec(w)
            matvecs += 1
            anorm = max(anorm, np.linalg.norm(AU[:, k]))
            v = AU[:, k]
            k += 1

        T = U[:, :k].conj().T @ AU[:, :k]
        T = (T + T.conj().T) / 2
        theta, Y = np.linalg.eigh(T)
        order = np.argsort(-theta, kind="stable")
        theta, Y = theta[order], Y[:, order]

        X = U[:, :k] @ Y[:, :r]
        res = np.linalg.norm(AU[:, :k] @ Y[:, :r] - X * theta[:r], axis=0)
        best = np.minimum(best, res)
        if np.all(res <= opts.tol * abs(theta[0])) or k == n:
            logger.debug("Lanczos converged: r=%d m=%d restarts=%d matvecs=%d max_res=%.2e",
                         r, m, restart, matvecs, res.max())
            return RitzPairs(normalize_phase(X), theta[:r].copy(), res, restart, matvecs)

        # thick restart: keep leading Ritz vectors, continue along the residual direction
        f = AU[:, k - 1] - U[:, :k] @ T[:, k - 1]
        Uk = U[:, :k] @ Y[:, :keep]
        AUk = AU[:, :k] @ Y[:, :keep]
        U[:, :keep] = Uk
        AU[:, :keep] = AUk
        U[:, keep:] = 0
        AU[:, keep:] = 0
        k = keep
        v = f

    raise LanczosConvergenceError(
        f"Lanczos did not converge after {max_restarts} restarts (r={r}, m={m})",
        residuals=best.tolist())
