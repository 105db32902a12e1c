"""Dense float64 linear algebra used throughout the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The full
SVD is a one-sided (Hestenes) Jacobi iteration with a round-robin pair
ordering, so each rotation sweep is vectorized over disjoint column pairs.
The low-rank SVD is a Gaussian range finder with power iterations.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, DimensionError, NumericalError, RankError

EPS = np.finfo(np.float64).eps


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a finite, C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``M ~= U @ diag(S) @ V.T`` with descending ``S``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def k(self):
        return self.S.shape[0]

    def reconstruct(self):
        return (self.U * self.S) @ self.V.T


def _round_robin(n):
    """Rounds of disjoint (p, q) pairs covering every pair of ``range(n)`` once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs, dtype=np.intp).T
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(U, count):
    """Append ``count`` orthonormal columns orthogonal to the columns of ``U``."""
    m = U.shape[0]
    Q = U
    for _ in range(count):
        # project every coordinate axis off span(Q) and keep the longest remainder
        R = np.eye(m) - Q @ Q.T
        R -= Q @ (Q.T @ R)
        j = int(np.argmax(np.einsum("ij,ij->j", R, R)))
        e = R[:, j] / np.linalg.norm(R[:, j])
        Q = np.column_stack([Q, e])
    return Q


def normalize_signs(U, V):
    """Flip column pairs so the largest-magnitude entry of each U column is >= 0."""
    U = U.copy()
    V = V.copy()
    if U.shape[1] == 0:
        return U, V
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    V[:, flip] *= -1.0
    return U, V


def _jacobi_tall(M, tol, max_sweeps):
    m, n = M.shape
    W = M.copy()
    V = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = W[:, p], W[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            with np.errstate(over="ignore"):  # zeta = inf gives t = 0, the right limit
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = W[:, p], W[:, q]
            W[:, p] = c * ap - s * aq
            W[:, q] = s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    cutoff = max(m, n) * EPS * (sigma[0] if n else 0.0)
    good = int(np.count_nonzero(sigma > cutoff)) if n else 0
    U = W[:, :good] / sigma[:good]
    U = _complete_basis(U, n - good)
    return U, sigma, V


def svd_full(M, tol=None, max_sweeps=80):
    """Thin SVD of ``M`` (k = min(rows, cols)) by one-sided Jacobi.

    Singular values are returned in descending order; ties keep the order
    the iteration produced. Columns of U are sign-normalized so that the
    largest-magnitude entry of each is non-negative.
    """
    M = as_matrix(M)
    m, n = M.shape
    if m == 0 or n == 0:
        raise DimensionError(f"cannot factor an empty {m}x{n} matrix")
    if tol is None:
        tol = max(m, n) * EPS
    # power-of-two rescale (exact) keeps squared column norms clear of under/overflow
    peak = np.max(np.abs(M))
    shift = int(np.frexp(peak)[1]) if peak > 0 else 0
    M = np.ldexp(M, -shift)
    if m >= n:
        U, S, V = _jacobi_tall(M, tol, max_sweeps)
    else:
        V, S, U = _jacobi_tall(M.T, tol, max_sweeps)
    S = np.ldexp(S, shift)
    U, V = normalize_signs(U, V)
    return SvdFactors(U, S, V)


def _orth(Y):
    # Householder QR: orthonormal even for rank-deficient sketches.
    return np.linalg.qr(Y, mode="reduced")[0]


def svd_lowrank(M, r, oversample=8, power_iters=4, seed=0):
    """Rank-``r`` randomized SVD (Gaussian range finder + power iterations).

    The sketch is re-orthonormalized after every multiplication by ``M`` or
    ``M.T``. Deterministic for a fixed ``seed``.
    """
    M = as_matrix(M)
    m, d = M.shape
    if not 1 <= r <= min(m, d):
        raise RankError(f"rank {r} outside [1, {min(m, d)}] for a {m}x{d} matrix")
    if oversample < 0 or power_iters < 0:
        raise ValueError("oversample and power_iters must be non-negative")
    k = min(r + oversample, m, d)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((d, k))
    Q = _orth(M @ omega)
    for _ in range(power_iters):
        Z = _orth(M.T @ Q)
        Q = _orth(M @ Z)
    small = svd_full(Q.T @ M)
    U = Q @ small.U[:, :r]
    U, V = normalize_signs(U, small.V[:, :r])
    return SvdFactors(U, small.S[:r].copy(), V)


def qr_orthonormal(X, tol=1e-12):
    """Orthonormal basis Q (m x r) for the column span of ``X``.

    Classical Gram-Schmidt with one re-orthogonalization pass; diag(R) > 0,
    so an already orthonormal input is returned unchanged up to roundoff.
    Raises DegeneracyError naming the first column that is (numerically)
    in the span of its predecessors.
    """
    X = as_matrix(X, "X")
    m, r = X.shape
    if r > m:
        raise DimensionError(f"cannot orthonormalize {r} columns in dimension {m}")
    scale = max(float(np.max(np.linalg.norm(X, axis=0))) if r else 0.0, np.finfo(float).tiny)
    Q = np.zeros((m, r))
    for j in range(r):
        v = X[:, j].copy()
        for _ in range(2):
            v -= Q[:, :j] @ (Q[:, :j].T @ v)
        nrm = np.linalg.norm(v)
        if nrm <= tol * scale:
            raise DegeneracyError(f"column {j} is linearly dependent on columns 0..{j - 1}")
        Q[:, j] = v / nrm
    return Q


def frobenius_norm(M):
    M = as_matrix(M)
    flat = M.ravel()
    return float(np.sqrt(flat @ flat))


def truncate_rank(f, r):
    """Best rank-``r`` reconstruction ``U_r diag(S_r) V_r^T`` from factors ``f``."""
    if not 0 <= r <= f.k:
        raise RankError(f"rank {r} outside [0, {f.k}]")
    return (f.U[:, :r] * f.S[:r]) @ f.V[:, :r].T


def orthonormality_residual(Q):
    """max |Q^T Q - I| over the Gram matrix of the columns of ``Q``."""
    Q = np.asarray(Q, dtype=np.float64)
    return float(np.max(np.abs(Q.T @ Q - np.eye(Q.shape[1])))) if Q.size else 0.0
