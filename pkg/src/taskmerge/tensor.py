"""Small deterministic dense linear-algebra kernel.

Tensors are plain ``numpy.ndarray`` objects.  Half-precision inputs are
upcast to float32 on entry; float64 inputs stay float64.  Every routine
here refuses non-finite values instead of propagating them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

_SEED_MASK = (1 << 64) - 1
_JACOBI_MAX_SWEEPS = 80


def compute_dtype(*arrays) -> np.dtype:
    """float64 if any input is float64, float32 otherwise."""
    for a in arrays:
        if np.asarray(a).dtype == np.float64:
            return np.dtype(np.float64)
    return np.dtype(np.float32)


def as_compute(a, dtype=None) -> np.ndarray:
    a = np.asarray(a)
    if dtype is None:
        dtype = compute_dtype(a)
    return a.astype(dtype, copy=False)


def check_finite(a, what="tensor"):
    a = np.asarray(a)
    if a.size and not np.all(np.isfinite(a)):
        bad = int(np.count_nonzero(~np.isfinite(a)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    dtype = compute_dtype(a, b)
    out = a.astype(dtype, copy=False) @ b.astype(dtype, copy=False)
    return check_finite(out, "matmul result")


def frobenius_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``M = U @ diag(S) @ V.T`` with ``S`` non-increasing."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.S)

    def truncate(self, k: int) -> "SvdFactors":
        k = max(0, min(int(k), len(self.S)))
        return SvdFactors(self.U[:, :k], self.S[:k], self.V[:, :k])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _round_robin(n: int):
    """Yield rounds of disjoint column pairs covering every pair once."""
    players = list(range(n + (n % 2)))
    size = len(players)
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            yield np.array(p), np.array(q)
        players = [players[0]] + [players[-1]] + players[1:-1]


def _complete_basis(Q: np.ndarray, missing: list[int]) -> None:
    """Fill columns ``missing`` of ``Q`` with unit vectors orthogonal to the rest."""
    m = Q.shape[0]
    have = [j for j in range(Q.shape[1]) if j not in set(missing)]
    for j in missing:
        basis = Q[:, have]
        candidates = np.eye(m)
        for _ in range(2):
            candidates = candidates - basis @ (basis.T @ candidates)
        norms = np.linalg.norm(candidates, axis=0)
        best = int(np.argmax(norms))
        Q[:, j] = candidates[:, best] / norms[best]
        have.append(j)


def _jacobi_tall(a: np.ndarray):
    """One-sided (Hestenes) Jacobi on a tall float64 matrix, m >= n."""
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    tol = max(m, 1) * np.finfo(np.float64).eps
    rounds = list(_round_robin(n))
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    u = np.zeros((m, n))
    cutoff = (sigma[0] if n else 0.0) * n * np.finfo(np.float64).eps
    missing = []
    for j in range(n):
        if sigma[j] > cutoff and sigma[j] > 0:
            u[:, j] = w[:, j] / sigma[j]
        else:
            missing.append(j)
    if missing:
        _complete_basis(u, missing)
    return u, sigma, v


def svd(m) -> SvdFactors:
    """Thin SVD by one-sided Jacobi on the smaller side.

    Signs are fixed so that the largest-magnitude entry of every left
    singular vector is non-negative.  Factors are returned in the compute
    dtype of the input.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a 2-D tensor, got shape {m.shape}")
    check_finite(m, "svd input")
    dtype = compute_dtype(m)
    rows, cols = m.shape
    r = min(rows, cols)
    if r == 0:
        return SvdFactors(np.zeros((rows, 0), dtype), np.zeros(0, dtype), np.zeros((cols, 0), dtype))

    a = m.astype(np.float64)
    if rows >= cols:
        u, s, v = _jacobi_tall(a)
    else:
        v, s, u = _jacobi_tall(a.T)

    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(r)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdFactors(u.astype(dtype), s.astype(dtype), v.astype(dtype))


@dataclass(frozen=True)
class RankPolicy:
    """Truncation-rank rule: ``energy`` keeps a fraction of sum(s**2), ``fixed`` keeps k."""

    kind: str = "energy"
    value: float = 0.95

    def __post_init__(self):
        if self.kind == "energy":
            if not (0.0 < float(self.value) <= 1.0):
                raise ConfigError(f"energy threshold must lie in (0, 1], got {self.value}")
        elif self.kind == "fixed":
            if int(self.value) != self.value or self.value < 0:
                raise ConfigError(f"fixed rank must be a non-negative integer, got {self.value}")
        else:
            raise ConfigError(f"unknown rank policy kind {self.kind!r}")

    @classmethod
    def energy(cls, eps: float) -> "RankPolicy":
        return cls("energy", float(eps))

    @classmethod
    def fixed(cls, k: int) -> "RankPolicy":
        return cls("fixed", int(k))

    @classmethod
    def parse(cls, text) -> "RankPolicy":
        """Parse ``"energy:0.95"`` or ``"fixed:8"``."""
        if isinstance(text, RankPolicy):
            return text
        kind, sep, value = str(text).partition(":")
        if not sep:
            raise ConfigError(f"rank policy must look like 'energy:0.95' or 'fixed:8', got {text!r}")
        kind = kind.strip()
        try:
            return cls.fixed(int(value)) if kind == "fixed" else cls(kind, float(value))
        except ValueError as exc:
            raise ConfigError(f"bad rank policy value in {text!r}") from exc

    def __str__(self):
        return f"{self.kind}:{self.value}"


def rank_select(s, policy: RankPolicy) -> int:
    s = np.asarray(s, dtype=np.float64)
    if policy.kind == "energy" and not (0.0 < policy.value <= 1.0):
        raise ConfigError(f"energy threshold must lie in (0, 1], got {policy.value}")
    if s.size == 0 or not np.any(s > 0):
        return 0
    if policy.kind == "fixed":
        return min(int(policy.value), len(s))
    s = s / s.max()  # guard against under/overflow when squaring
    energy = np.cumsum(s * s)
    return int(np.searchsorted(energy, policy.value * energy[-1], side="left")) + 1


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical on every platform for the same seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & _SEED_MASK)))


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for one parallel unit, derived from ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed) & _SEED_MASK, spawn_key=tuple(int(k) & _SEED_MASK for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
