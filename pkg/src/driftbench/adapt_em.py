"""Entropy-minimization adapters.

Tent-style adaptation performs optimizer steps on the mean prediction
entropy of each incoming batch under batch-statistics normalization.  The
EATA-style variant drops high-entropy samples and up-weights confident ones
before the step; the sharpness-aware variant takes the gradient at a point
perturbed along the normalized ascent direction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import headmodel as hm
from .numkit import Mat64, Vec64, check_simplex, entropy_rows

log = logging.getLogger(__name__)


def default_entropy_threshold(n_classes: int) -> float:
    """Confidence filter threshold: 0.4 * ln(C) nats."""
    return 0.4 * math.log(n_classes)


@dataclass
class EmConfig:
    lr: float = 1e-5
    steps_per_batch: int = 1
    filter_threshold: Optional[float] = None  # nats; None = 0.4 ln C at use time
    filter_weighting: bool = False
    sharpness_rho: Optional[float] = None
    params_to_update: frozenset[str] = hm.DEFAULT_ADAPT_PARAMS
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.steps_per_batch < 0:
            raise ValueError("steps_per_batch must be >= 0")
        if self.sharpness_rho is not None and self.sharpness_rho <= 0:
            raise ValueError("sharpness_rho must be > 0 when present")

    def threshold_for(self, n_classes: int) -> float:
        e0 = self.filter_threshold
        if e0 is None:
            return default_entropy_threshold(n_classes)
        if not 0.0 < e0 <= math.log(n_classes) + 1e-12:
            raise ValueError("filter_threshold must lie in (0, ln C]")
        return e0


@dataclass
class EmState:
    """Per-episode mutable state: working parameters plus optimizer moments."""

    params: hm.HeadParams
    opt: hm.OptState
    cfg: EmConfig
    batches_seen: int = 0
    incidents: list[str] = field(default_factory=list)

    @staticmethod
    def fresh(source_params: hm.HeadParams, cfg: EmConfig) -> "EmState":
        params = source_params.copy()
        opt = hm.OptState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        return EmState(params=params, opt=opt, cfg=cfg)


@dataclass
class EmPrediction:
    labels: np.ndarray
    probs: Mat64
    loss: Optional[float] = None


def eata_filter(probs: Mat64, threshold: float) -> Vec64:
    """Per-sample weights w_j = exp(E0 - H(p_j)) for H < E0, else 0.

    Strictly monotone non-increasing in the row entropy; rows at or above
    the threshold are excluded entirely.
    """
    check_simplex(probs, name="probs")
    h = entropy_rows(probs)
    return np.where(h < threshold, np.exp(threshold - h), 0.0)


def _loss_weights(state: EmState, probs: Mat64) -> Optional[Vec64]:
    if not state.cfg.filter_weighting:
        return None
    return eata_filter(probs, state.cfg.threshold_for(state.params.n_classes))


def tent_adapt_batch(state: EmState, stats: hm.SourceStats, batch: hm.FeatureBatch) -> EmPrediction:
    """Tent-style update: minimize mean batch entropy, then predict.

    Runs ``steps_per_batch`` optimizer steps (batch statistics are
    recomputed at every forward), then returns predictions from the updated
    parameters.  A non-finite loss or gradient skips the step, keeps the
    pre-step parameters, and records the incident.
    """
    cfg = state.cfg
    loss_seen: Optional[float] = None
    for _ in range(cfg.steps_per_batch):
        _, probs, _ = hm.forward(state.params, stats, batch, hm.BATCH_STATS)
        weights = _loss_weights(state, probs)
        loss, grads = hm.grad_entropy(
            state.params, stats, batch, hm.BATCH_STATS,
            weights=weights, wrt=cfg.params_to_update,
        )
        if loss_seen is None:
            loss_seen = loss
        if not math.isfinite(loss) or not grads.all_finite():
            state.incidents.append(f"batch {state.batches_seen}: non-finite entropy step skipped")
            log.warning("non-finite entropy loss; step skipped")
            break
        if weights is not None and float(weights.sum()) <= 0.0:
            break  # every sample filtered out: no update
        state.params = hm.optimizer_step(state.params, grads, state.opt)
    _, probs, _ = hm.forward(state.params, stats, batch, hm.BATCH_STATS)
    state.batches_seen += 1
    return EmPrediction(labels=probs.argmax(axis=1), probs=probs, loss=loss_seen)


def sam_adapt_batch(state: EmState, stats: hm.SourceStats, batch: hm.FeatureBatch,
                    rho: Optional[float] = None) -> EmPrediction:
    """Sharpness-aware entropy step on the confidence-filtered batch.

    Ascends the adaptable parameters by ``rho`` along the normalized
    gradient, evaluates the gradient there, then descends from the original
    point with it.  Zero gradient norm falls back to the plain step; if the
    filter removes every sample the parameters stay untouched.
    """
    cfg = state.cfg
    if rho is None:
        rho = cfg.sharpness_rho
    if rho is None or rho <= 0:
        raise ValueError("sam_adapt_batch requires a positive rho")

    loss_seen: Optional[float] = None
    for _ in range(cfg.steps_per_batch):
        _, probs, _ = hm.forward(state.params, stats, batch, hm.BATCH_STATS)
        weights = eata_filter(probs, cfg.threshold_for(state.params.n_classes))
        loss, grads = hm.grad_entropy(
            state.params, stats, batch, hm.BATCH_STATS,
            weights=weights, wrt=cfg.params_to_update,
        )
        if loss_seen is None:
            loss_seen = loss
        if not math.isfinite(loss) or not grads.all_finite():
            state.incidents.append(f"batch {state.batches_seen}: non-finite SAM step skipped")
            log.warning("non-finite SAM loss; step skipped")
            break
        if float(weights.sum()) <= 0.0:
            break  # every sample filtered out: no update
        norm = grads.global_norm()
        if norm > 0.0:
            perturbed = state.params.copy()
            scale = rho / norm
            for name, g in grads.tensors().items():
                if g is not None:
                    setattr(perturbed, name, getattr(perturbed, name) + scale * g)
            _, grads = hm.grad_entropy(
                perturbed, stats, batch, hm.BATCH_STATS,
                weights=weights, wrt=cfg.params_to_update,
            )
            if not grads.all_finite():
                state.incidents.append(
                    f"batch {state.batches_seen}: non-finite perturbed gradient skipped")
                break
        state.params = hm.optimizer_step(state.params, grads, state.opt)
    _, probs, _ = hm.forward(state.params, stats, batch, hm.BATCH_STATS)
    state.batches_seen += 1
    return EmPrediction(labels=probs.argmax(axis=1), probs=probs, loss=loss_seen)
