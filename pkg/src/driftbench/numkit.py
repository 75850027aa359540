"""Deterministic numeric primitives.

Vectors and matrices are plain ``numpy.ndarray`` objects with dtype
``float64`` (``Vec64`` is 1-D, ``Mat64`` is 2-D, C-contiguous).  Public
operations either return all-finite values or raise ``NumericError``.

The module also provides a counter-based PRNG (``Rng``) whose streams are
bit-identical across platforms, and a self-contained (mu/mu_w, lambda)
CMA-ES minimizer with rank-one and rank-mu covariance updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

Vec64 = np.ndarray
Mat64 = np.ndarray

SIMPLEX_TOL = 1e-9


def as_vec64(values, name: str = "vector") -> Vec64:
    """Coerce to a contiguous float64 1-D array, rejecting non-finite input."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")
    return v


def as_mat64(values, name: str = "matrix") -> Mat64:
    """Coerce to a contiguous float64 2-D array, rejecting non-finite input."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


def softmax(logits: Vec64) -> Vec64:
    """Stable softmax of a logit vector via max-subtraction."""
    z = as_vec64(logits, "logits")
    if z.size == 0:
        raise ValueError("logits must be non-empty")
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits: Mat64) -> Mat64:
    """Row-wise stable softmax of a logit matrix."""
    z = as_mat64(logits, "logits")
    if z.shape[1] == 0:
        raise ValueError("logits must have at least one column")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def check_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL, name: str = "p") -> np.ndarray:
    """Validate that rows (or the single vector) lie on the probability simplex.

    Entries below ``-tol`` or row sums off 1 by more than ``tol`` raise
    ``NumericError``.  Tiny negative round-off is clipped to zero.
    """
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    if np.any(arr < -tol):
        raise NumericError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise NumericError(f"{name} rows do not sum to 1 within {tol}")
    return np.clip(arr, 0.0, None)


def entropy(p: Vec64) -> float:
    """Shannon entropy of a probability vector in nats, with 0*log(0) == 0."""
    q = check_simplex(as_vec64(p, "p"))
    nz = q[q > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_rows(p: Mat64) -> Vec64:
    """Row-wise entropy in nats of a matrix of probability rows."""
    q = check_simplex(as_mat64(p, "p"))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    return -terms.sum(axis=1)


# ---------------------------------------------------------------------------
# Counter-based PRNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer (Steele, Lea & Flood constants)."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


class Rng:
    """Counter-based SplitMix64 generator.

    Output i is ``mix64(seed + GAMMA * (i + 1))`` where ``mix64`` is the
    SplitMix64 finalizer; the instance only stores the seed and how many
    64-bit words have been drawn, so identical seeds give identical streams
    on every platform.  Single-owner mutable: concurrent users need their
    own instances (use :meth:`spawn`).
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def spawn(self, salt: int) -> "Rng":
        """Derive an independent child stream keyed by ``salt``."""
        key = _mix64(np.array([np.uint64(salt & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64))[0]
        child_seed = _mix64(np.array([self.seed ^ key], dtype=np.uint64))[0]
        return Rng(int(child_seed))

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(self.seed + _GAMMA * idx)

    def uniform(self, n: int) -> Vec64:
        """``n`` doubles uniform on the open interval (0, 1)."""
        bits = self.u64(n) >> np.uint64(11)  # top 53 bits
        return (bits.astype(np.float64) + 0.5) * (2.0 ** -53)

    def normal(self, n: int) -> Vec64:
        """``n`` standard normal deviates via Box-Muller (cosine branch).

        Each deviate consumes exactly two uniforms, so the counter advances
        by ``2 * n`` regardless of call batching.
        """
        u = self.uniform(2 * n)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        return r * np.cos(2.0 * math.pi * u[1::2])

    def normal_mat(self, rows: int, cols: int) -> Mat64:
        return self.normal(rows * cols).reshape(rows, cols)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` integers uniform on [0, bound) (modulo method; bias < 2**-64 * bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.u64(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), deterministic per stream."""
        perm = np.arange(n, dtype=np.int64)
        if n <= 1:
            return perm
        draws = self.u64(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


# ---------------------------------------------------------------------------
# CMA-ES
# ---------------------------------------------------------------------------


@dataclass
class CmaesConfig:
    """Static configuration of one CMA-ES run.

    ``popsize`` defaults to ``4 + floor(3 * ln(dim))``; ``max_evals`` bounds
    the number of fitness evaluations and must admit at least one generation.
    """

    dim: int
    sigma0: float = 0.5
    popsize: int | None = None
    max_evals: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")
        if self.popsize is None:
            self.popsize = 4 + int(3 * math.log(self.dim))
        if self.popsize < 2:
            raise ValueError("popsize must be >= 2")


class CmaesState:
    """Ask/tell CMA-ES sampler with rank-one and rank-mu covariance updates.

    Implements the standard (mu/mu_w, lambda) strategy with positive
    log-rank recombination weights, cumulative step-size adaptation, and an
    elitist record of the best candidate ever evaluated.  No restarts.
    """

    def __init__(self, cfg: CmaesConfig, x0: Vec64):
        x0 = as_vec64(x0, "x0")
        if x0.size != cfg.dim:
            raise ValueError(f"x0 has dimension {x0.size}, expected {cfg.dim}")
        self.cfg = cfg
        n, lam = cfg.dim, cfg.popsize
        self.rng = Rng(cfg.seed)

        self.mu = lam // 2
        w = np.log(lam / 2 + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = float(self.weights.sum() ** 2 / np.sum(self.weights**2))

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.mean = x0.copy()
        self.sigma = float(cfg.sigma0)
        self.cov = np.eye(n)
        self.path_sigma = np.zeros(n)
        self.path_cov = np.zeros(n)
        self.generation = 0
        self.evals = 0

        self.best_x = x0.copy()
        self.best_fitness = math.inf
        self.history: list[float] = []

        self._pending_z: Mat64 | None = None

    def ask(self) -> Mat64:
        """Sample one generation of candidates, one per row."""
        n, lam = self.cfg.dim, self.cfg.popsize
        # eigendecomposition each generation; dimensions here are small
        cov = (self.cov + self.cov.T) / 2.0
        eigvals, eigvecs = np.linalg.eigh(cov)
        eigvals = np.clip(eigvals, 1e-20, None)
        self._bd = eigvecs * np.sqrt(eigvals)  # B @ diag(D)
        self._inv_sqrt = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
        z = self.rng.normal_mat(lam, n)
        self._pending_z = z
        return self.mean + self.sigma * z @ self._bd.T

    def tell(self, candidates: Mat64, fitnesses: Sequence[float]) -> None:
        """Update distribution parameters from an evaluated generation.

        Non-finite fitness values are treated as +inf (the candidate is
        effectively discarded from selection).  If no candidate in the
        generation is finite, ``NumericError`` is raised and the state is
        left unchanged.
        """
        xs = as_mat64(candidates, "candidates")
        fits = np.asarray(fitnesses, dtype=np.float64)
        if xs.shape != (self.cfg.popsize, self.cfg.dim) or fits.shape != (self.cfg.popsize,):
            raise ValueError("candidates/fitnesses shape mismatch with popsize")
        fits = np.where(np.isfinite(fits), fits, np.inf)
        if not np.any(np.isfinite(fits)):
            raise NumericError("all candidates in the generation are non-finite")

        n = self.cfg.dim
        self.evals += self.cfg.popsize
        self.generation += 1
        order = np.argsort(fits, kind="stable")
        if fits[order[0]] < self.best_fitness:
            self.best_fitness = float(fits[order[0]])
            self.best_x = xs[order[0]].copy()
        self.history.append(self.best_fitness)

        old_mean = self.mean
        sel = xs[order[: self.mu]]
        self.mean = self.weights @ sel

        y = (self.mean - old_mean) / self.sigma
        z = self._inv_sqrt @ y
        self.path_sigma = (1 - self.cs) * self.path_sigma + math.sqrt(
            self.cs * (2 - self.cs) * self.mueff
        ) * z
        ps_norm = float(np.linalg.norm(self.path_sigma))
        denom = math.sqrt(1 - (1 - self.cs) ** (2 * self.generation))
        hsig = 1.0 if ps_norm / denom / self.chi_n < 1.4 + 2 / (n + 1) else 0.0
        self.path_cov = (1 - self.cc) * self.path_cov + hsig * math.sqrt(
            self.cc * (2 - self.cc) * self.mueff
        ) * y

        ys = (sel - old_mean) / self.sigma
        rank_mu = (self.weights[:, None] * ys).T @ ys
        c1a = self.c1 * (1 - (1 - hsig**2) * self.cc * (2 - self.cc))
        self.cov = (
            (1 - c1a - self.cmu) * self.cov
            + self.c1 * np.outer(self.path_cov, self.path_cov)
            + self.cmu * rank_mu
        )
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (ps_norm / self.chi_n - 1)))
        self._pending_z = None


@dataclass
class CmaesResult:
    best_x: Vec64
    best_fitness: float
    history: list[float] = field(default_factory=list)
    evals: int = 0


def cmaes_minimize(fitness: Callable[[Vec64], float], x0: Vec64, cfg: CmaesConfig) -> CmaesResult:
    """Minimize ``fitness`` starting from ``x0`` within ``cfg.max_evals`` evaluations.

    The returned ``best_x`` is the elitist argmin over every candidate
    evaluated, and ``history`` (best-so-far per generation) is monotone
    non-increasing.  Candidates whose fitness comes back NaN are penalized
    with +inf; a generation with no finite fitness raises ``NumericError``.
    """
    if cfg.max_evals < cfg.popsize:
        raise ValueError("max_evals must allow at least one generation")
    state = CmaesState(cfg, x0)
    while state.evals + cfg.popsize <= cfg.max_evals:
        xs = state.ask()
        fits = [float(fitness(xs[k])) for k in range(cfg.popsize)]
        state.tell(xs, fits)
    return CmaesResult(
        best_x=state.best_x.copy(),
        best_fitness=state.best_fitness,
        history=list(state.history),
        evals=state.evals,
    )
