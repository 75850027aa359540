"""Backpropagation-free adapters.

Three forward-only mechanisms over a frozen head:

* support-set prototype recalibration: confident samples are banked per
  pseudo-class and classification uses softmax over dot products with the
  per-class support means;
* Laplacian-adjusted output correction: batch predictions are refined by a
  multiplicative fixed-point iteration that balances KL fidelity to the
  source probabilities against agreement along a cosine-kNN graph;
* forward-only prompt search: an additive feature-space prompt is tuned by
  CMA-ES to reduce prediction entropy plus the gap between prompted batch
  statistics and the source feature statistics.

None of these mutates the head parameters; the prompt lives in the
adapter's own state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import headmodel as hm
from .errors import NumericError
from .numkit import (
    CmaesConfig,
    CmaesState,
    Mat64,
    Vec64,
    check_simplex,
    entropy_rows,
    softmax_rows,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Support-set prototype recalibration
# ---------------------------------------------------------------------------


@dataclass
class SupportEntry:
    embedding: Vec64
    score: float  # prediction entropy; lower = more confident
    order: int  # insertion index, breaks score ties deterministically


class SupportSet:
    """Per-class banks of confident embeddings, capped at ``max_per_class``.

    Entries are kept sorted by (entropy, insertion order); adding beyond the
    cap evicts the highest-entropy entries.  Initialization from the
    classifier weight rows guarantees every class is non-empty, which makes
    the prototype classifier fall back to the zero-bias linear source
    classifier before any update.
    """

    def __init__(self, n_classes: int, dim: int, max_per_class: int = 20):
        if max_per_class < 1:
            raise ValueError("max_per_class must be >= 1")
        self.n_classes = n_classes
        self.dim = dim
        self.max_per_class = max_per_class
        self._entries: list[list[SupportEntry]] = [[] for _ in range(n_classes)]
        self._counter = 0

    @staticmethod
    def from_classifier(params: hm.HeadParams, max_per_class: int = 20) -> "SupportSet":
        """Warm-start with one entry per class: the class's weight row,
        scored by the entropy of classifying it with the source head."""
        support = SupportSet(params.n_classes, params.d, max_per_class)
        logits = params.weight @ params.weight.T + params.bias
        probs = softmax_rows(logits)
        scores = entropy_rows(probs)
        for c in range(params.n_classes):
            support.add(c, params.weight[c], float(scores[c]))
        return support

    def add(self, label: int, embedding: Vec64, score: float) -> None:
        entries = self._entries[label]
        entries.append(SupportEntry(np.asarray(embedding, dtype=np.float64).copy(),
                                    score, self._counter))
        self._counter += 1
        entries.sort(key=lambda e: (e.score, e.order))
        del entries[self.max_per_class:]

    def class_size(self, label: int) -> int:
        return len(self._entries[label])

    def class_scores(self, label: int) -> list[float]:
        return [e.score for e in self._entries[label]]

    def prototypes(self) -> Mat64:
        """Per-class mean of the banked embeddings (C x d)."""
        mu = np.zeros((self.n_classes, self.dim))
        for c, entries in enumerate(self._entries):
            if not entries:
                raise ValueError(f"class {c} has no support entries")
            mu[c] = np.mean([e.embedding for e in entries], axis=0)
        return mu


def t3a_update_support(support: SupportSet, embeddings: Mat64, probs: Mat64) -> SupportSet:
    """Bank each sample under its argmax class, scored by prediction entropy."""
    probs = check_simplex(probs, name="probs")
    scores = entropy_rows(probs)
    labels = probs.argmax(axis=1)
    for j in range(embeddings.shape[0]):
        support.add(int(labels[j]), embeddings[j], float(scores[j]))
    return support


def t3a_classify(support: SupportSet, embeddings: Mat64) -> tuple[np.ndarray, Mat64]:
    """Softmax over dot products with the class prototypes.

    Ties in the argmax resolve to the lowest class index.
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if z.shape[1] != support.dim:
        raise ValueError(f"embedding dimension {z.shape[1]} != support dimension {support.dim}")
    logits = z @ support.prototypes().T
    probs = softmax_rows(logits)
    return probs.argmax(axis=1), probs


# ---------------------------------------------------------------------------
# Laplacian-adjusted output correction
# ---------------------------------------------------------------------------


@dataclass
class LameConfig:
    neighbors: int = 5
    fidelity: float = 1.0  # exponent on the source probabilities
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.neighbors < 0:
            raise ValueError("neighbors must be >= 0")
        if self.fidelity <= 0:
            raise ValueError("fidelity must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclass
class LameResult:
    probs: Mat64
    converged: bool
    iterations: int
    objective: list[float] = field(default_factory=list)


def knn_cosine_affinity(embeddings: Mat64, k: int) -> Mat64:
    """Symmetric binary kNN affinity under cosine similarity, zero diagonal.

    Entry (i, j) is 1 when each is among the other's k nearest, 0.5 when only
    one direction holds (symmetrization by averaging).
    """
    z = np.asarray(embeddings, dtype=np.float64)
    b = z.shape[0]
    w = np.zeros((b, b))
    k = min(k, b - 1)
    if k <= 0:
        return w
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    unit = z / np.where(norms > 0.0, norms, 1.0)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    for i in range(b):
        nn = np.argsort(-sim[i], kind="stable")[:k]
        w[i, nn] = 1.0
    return (w + w.T) / 2.0


def lame_objective(adjusted: Mat64, source_probs: Mat64, affinity: Mat64,
                   fidelity: float) -> float:
    """KL-style fidelity plus negative Laplacian agreement.

    J(Y) = sum_j <y_j, log y_j - fidelity * log p_j> - 1/2 sum_ij w_ij <y_i, y_j>
    with 0 log 0 = 0; entries where the source probability is zero stay zero
    along the iteration so their fidelity contribution is zero as well.
    """
    y = adjusted
    with np.errstate(divide="ignore", invalid="ignore"):
        log_y = np.where(y > 0.0, np.log(np.where(y > 0.0, y, 1.0)), 0.0)
        log_p = np.where(source_probs > 0.0,
                         np.log(np.where(source_probs > 0.0, source_probs, 1.0)), 0.0)
    ent_term = float(np.sum(y * log_y))
    fid_term = -fidelity * float(np.sum(y * log_p))
    consistency = -0.5 * float(np.sum(affinity * (y @ y.T)))
    return ent_term + fid_term + consistency


def lame_adjust(probs: Mat64, embeddings: Mat64, cfg: LameConfig | None = None) -> LameResult:
    """Refine batch probabilities by the multiplicative fixed-point iteration.

    y_jc is proportional to p_jc^fidelity * exp(sum_i w_ji y_ic), normalized
    per row; iterates from y = p until the max-abs change drops below
    ``cfg.tol`` or ``cfg.max_iter`` is hit (then ``converged`` is False).
    The concave-convex construction makes the objective non-increasing.
    """
    cfg = cfg or LameConfig()
    p = check_simplex(np.atleast_2d(np.asarray(probs, dtype=np.float64)), name="probs")
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if z.shape[0] != p.shape[0]:
        raise ValueError("probs and embeddings row counts differ")

    w = knn_cosine_affinity(z, cfg.neighbors)
    with np.errstate(divide="ignore"):
        base = cfg.fidelity * np.log(p)  # -inf where p == 0: those entries stay 0

    y = p.copy()
    objective = [lame_objective(y, p, w, cfg.fidelity)]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        exponent = base + w @ y
        exponent -= exponent.max(axis=1, keepdims=True)
        y_new = np.exp(exponent)
        y_new /= y_new.sum(axis=1, keepdims=True)
        delta = float(np.max(np.abs(y_new - y)))
        y = y_new
        objective.append(lame_objective(y, p, w, cfg.fidelity))
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        log.warning("output correction did not converge in %d iterations", cfg.max_iter)
    return LameResult(probs=y, converged=converged, iterations=iterations,
                      objective=objective)


# ---------------------------------------------------------------------------
# Forward-only prompt search
# ---------------------------------------------------------------------------


@dataclass
class FoaConfig:
    generations_per_batch: int = 5
    sigma0: float = 0.5
    popsize: Optional[int] = None  # None = CMA-ES default for the dimension
    seed: int = 0

    def __post_init__(self):
        if self.generations_per_batch < 0:
            raise ValueError("generations_per_batch must be >= 0")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")


@dataclass
class FoaState:
    """Prompt vector plus the persistent CMA-ES search distribution."""

    prompt: Vec64
    cmaes: CmaesState
    best_fitness: float = math.inf
    history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @staticmethod
    def fresh(dim: int, cfg: FoaConfig) -> "FoaState":
        budget_guard = 10**9  # the per-batch generation count bounds evaluations
        cmaes_cfg = CmaesConfig(dim=dim, sigma0=cfg.sigma0, popsize=cfg.popsize,
                                max_evals=budget_guard, seed=cfg.seed)
        return FoaState(prompt=np.zeros(dim), cmaes=CmaesState(cmaes_cfg, np.zeros(dim)))


@dataclass
class FoaPrediction:
    labels: np.ndarray
    probs: Mat64
    fitness: float


def foa_fitness(prompt: Vec64, params: hm.HeadParams, stats: hm.SourceStats,
                batch: hm.FeatureBatch) -> float:
    """Mean prediction entropy under the prompt plus the feature-statistics gap.

    The gap is the L2 distance between the prompted batch feature mean and
    the source feature mean, plus the distance between the per-dimension
    standard deviations (which the additive prompt leaves unchanged).
    """
    trial = params.copy()
    trial.prompt = np.asarray(prompt, dtype=np.float64)
    _, probs, cache = hm.forward(trial, stats, batch, hm.SOURCE_STATS)
    mean_gap = float(np.linalg.norm(cache.shifted.mean(axis=0) - stats.feat_mean))
    std_gap = float(np.linalg.norm(cache.shifted.std(axis=0) - stats.feat_std))
    return float(entropy_rows(probs).mean()) + mean_gap + std_gap


def foa_adapt_batch(state: FoaState, params: hm.HeadParams, stats: hm.SourceStats,
                    batch: hm.FeatureBatch, cfg: FoaConfig) -> FoaPrediction:
    """Run the configured CMA-ES generations on this batch and adopt the best prompt.

    The incumbent prompt competes with every candidate evaluated on this
    batch, so the adopted fitness never exceeds the incumbent's on the same
    batch.  A generation whose candidates are all non-finite leaves both the
    prompt and the search distribution unchanged (with a warning).  The
    search distribution persists across batches.
    """
    best_prompt = state.prompt.copy()
    best_fit = foa_fitness(best_prompt, params, stats, batch)
    if not math.isfinite(best_fit):
        raise NumericError("incumbent prompt fitness is non-finite")

    for _ in range(cfg.generations_per_batch):
        candidates = state.cmaes.ask()
        fits = np.array([foa_fitness(candidates[k], params, stats, batch)
                         for k in range(candidates.shape[0])])
        fits = np.where(np.isfinite(fits), fits, np.inf)
        try:
            state.cmaes.tell(candidates, fits)
        except NumericError:
            state.warnings.append("all-candidate non-finite generation skipped")
            log.warning("prompt search generation discarded: no finite fitness")
            continue
        gen_best = int(np.argmin(fits))
        if fits[gen_best] < best_fit:
            best_fit = float(fits[gen_best])
            best_prompt = candidates[gen_best].copy()

    state.prompt = best_prompt
    state.best_fitness = min(state.best_fitness, best_fit)
    state.history.append(state.best_fitness)

    adopted = params.copy()
    adopted.prompt = state.prompt.copy()
    _, probs, _ = hm.forward(adopted, stats, batch, hm.SOURCE_STATS)
    return FoaPrediction(labels=probs.argmax(axis=1), probs=probs, fitness=best_fit)
