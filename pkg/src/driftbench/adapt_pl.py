"""Pseudo-labeling adapters: EMA-anchor teacher plus consistency updates.

A main model is updated by cross-entropy toward pseudo-labels produced by a
slow-moving anchor (teacher) model; the anchor tracks the main model as an
exponential moving average.  An optional stochastic restore resets a random
fraction of the main parameters to their source values after each batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import headmodel as hm
from .numkit import Mat64, Rng

log = logging.getLogger(__name__)

ANCHOR = "anchor"
MAIN = "main"


@dataclass
class PlConfig:
    lr: float = 1e-5
    momentum: float = 0.999  # EMA anchor momentum
    hard_labels: bool = True
    restore_rate: Optional[float] = None
    predictions_from: str = ANCHOR
    params_to_update: frozenset[str] = hm.DEFAULT_ADAPT_PARAMS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.restore_rate is not None and not 0.0 <= self.restore_rate <= 1.0:
            raise ValueError("restore_rate must lie in [0, 1]")
        if self.predictions_from not in (ANCHOR, MAIN):
            raise ValueError("predictions_from must be 'anchor' or 'main'")


@dataclass
class PlState:
    main_params: hm.HeadParams
    anchor_params: hm.HeadParams
    source_params: hm.HeadParams  # frozen reference for stochastic restore
    opt: hm.OptState
    cfg: PlConfig
    rng: Rng
    batches_seen: int = 0
    incidents: list[str] = field(default_factory=list)

    @staticmethod
    def fresh(source_params: hm.HeadParams, cfg: PlConfig) -> "PlState":
        return PlState(
            main_params=source_params.copy(),
            anchor_params=source_params.copy(),
            source_params=source_params.copy(),
            opt=hm.OptState.for_params(source_params, lr=cfg.lr),
            cfg=cfg,
            rng=Rng(cfg.seed),
        )


@dataclass
class PlPrediction:
    labels: np.ndarray
    probs: Mat64
    loss: Optional[float] = None


def ema_update(anchor: hm.HeadParams, main: hm.HeadParams, momentum: float) -> hm.HeadParams:
    """Elementwise anchor <- momentum * anchor + (1 - momentum) * main."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    out = anchor.copy()
    for name in hm.PARAM_NAMES:
        a, m = getattr(anchor, name), getattr(main, name)
        if a.shape != m.shape:
            raise ValueError(f"shape mismatch for {name}")
        setattr(out, name, momentum * a + (1.0 - momentum) * m)
    return out


def stochastic_restore(params: hm.HeadParams, source_params: hm.HeadParams,
                       rate: float, rng: Rng) -> hm.HeadParams:
    """Independently reset each scalar to its source value with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    out = params.copy()
    if rate == 0.0:
        return out
    for name in hm.PARAM_NAMES:
        cur = getattr(out, name)
        src = getattr(source_params, name)
        mask = rng.uniform(cur.size).reshape(cur.shape) < rate
        setattr(out, name, np.where(mask, src, cur))
    return out


def pl_adapt_batch(state: PlState, stats: hm.SourceStats, batch: hm.FeatureBatch) -> PlPrediction:
    """One pseudo-labeling round on a batch.

    Anchor forward produces the pseudo-label distribution; the main model
    takes one cross-entropy step toward it (hard one-hot targets by default,
    soft per config); the anchor then tracks the main model by EMA, and an
    optional stochastic restore pulls main parameters back to source.
    Returns the teacher (anchor) predictions made when the batch arrived, or
    the main model's pre-update predictions per config.
    """
    cfg = state.cfg
    _, anchor_probs, _ = hm.forward(state.anchor_params, stats, batch, hm.SOURCE_STATS)
    if cfg.hard_labels:
        targets = np.zeros_like(anchor_probs)
        targets[np.arange(batch.size), anchor_probs.argmax(axis=1)] = 1.0
    else:
        targets = anchor_probs

    _, main_probs, _ = hm.forward(state.main_params, stats, batch, hm.SOURCE_STATS)
    loss, grads = hm.grad_crossentropy(
        state.main_params, stats, batch, targets,
        norm_mode=hm.SOURCE_STATS, wrt=cfg.params_to_update,
    )
    if math.isfinite(loss) and grads.all_finite():
        state.main_params = hm.optimizer_step(state.main_params, grads, state.opt)
    else:
        state.incidents.append(f"batch {state.batches_seen}: non-finite PL step skipped")
        log.warning("non-finite pseudo-label loss; step skipped")

    state.anchor_params = ema_update(state.anchor_params, state.main_params, cfg.momentum)
    if cfg.restore_rate is not None and cfg.restore_rate > 0.0:
        state.main_params = stochastic_restore(
            state.main_params, state.source_params, cfg.restore_rate, state.rng)
    state.batches_seen += 1

    if cfg.predictions_from == ANCHOR:
        probs = anchor_probs
    else:
        probs = main_probs
    return PlPrediction(labels=probs.argmax(axis=1), probs=probs, loss=loss)
