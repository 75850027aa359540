"""Adaptable classifier head: forward pass, manual gradients, source training.

The head applies, per embedding row ``z``:

    z' = z + prompt
    zhat = (z' - m) / sqrt(v + EPS) * norm_scale + norm_shift
    logits = zhat @ weight.T + bias

where ``(m, v)`` come either from frozen source statistics ("source-stats"
mode) or from the current batch ("batch-stats" mode, population variance).
Gradients for all five parameter tensors are derived by hand and verified
against finite differences in the test suite; the optimizer is AdamW with
decoupled weight decay on the classifier weight/bias only.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataFormatError, NumericError
from .numkit import Mat64, Rng, Vec64, as_mat64, check_simplex, softmax_rows

log = logging.getLogger(__name__)

NORM_EPS = 1e-5
ADAM_EPS = 1e-8

PARAM_NAMES = ("norm_scale", "norm_shift", "weight", "bias", "prompt")

SOURCE_STATS = "source-stats"
BATCH_STATS = "batch-stats"


@dataclass
class HeadParams:
    """All adaptable parameters of the head (dimension d, classes C)."""

    norm_scale: Vec64
    norm_shift: Vec64
    weight: Mat64  # C x d
    bias: Vec64
    prompt: Vec64

    @property
    def d(self) -> int:
        return self.norm_scale.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.norm_scale.copy(),
            self.norm_shift.copy(),
            self.weight.copy(),
            self.bias.copy(),
            self.prompt.copy(),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def validate(self) -> None:
        d, c = self.d, self.n_classes
        shapes = {
            "norm_scale": (d,),
            "norm_shift": (d,),
            "weight": (c, d),
            "bias": (c,),
            "prompt": (d,),
        }
        for name, expected in shapes.items():
            t = getattr(self, name)
            if t.shape != expected:
                raise ValueError(f"{name} has shape {t.shape}, expected {expected}")
            if not np.all(np.isfinite(t)):
                raise NumericError(f"{name} contains non-finite values")

    @staticmethod
    def init(d: int, n_classes: int, rng: Rng, weight_scale: float = 0.001) -> "HeadParams":
        """Identity normalization affine, small random classifier, zero prompt.

        The init scale stays well below the total displacement the default
        low-lr training schedule can produce, so the learned direction is
        gradient-dominated rather than init-dominated.
        """
        return HeadParams(
            norm_scale=np.ones(d),
            norm_shift=np.zeros(d),
            weight=rng.normal_mat(n_classes, d) * weight_scale,
            bias=np.zeros(n_classes),
            prompt=np.zeros(d),
        )


def params_distance(a: HeadParams, b: HeadParams, ord: float = np.inf) -> float:
    """Norm of the stacked difference between two parameter sets."""
    diffs = [getattr(a, n).ravel() - getattr(b, n).ravel() for n in PARAM_NAMES]
    return float(np.linalg.norm(np.concatenate(diffs), ord=ord))


@dataclass
class SourceStats:
    """Source-domain feature statistics.

    ``feat_mean``/``feat_std`` are per-dimension statistics of the raw
    embeddings (the reference that forward-only prompt search aligns to);
    ``norm_running_mean``/``norm_running_var`` feed the normalization stage
    in source-stats mode.
    """

    feat_mean: Vec64
    feat_std: Vec64
    norm_running_mean: Vec64
    norm_running_var: Vec64
    count: int

    def copy(self) -> "SourceStats":
        return SourceStats(
            self.feat_mean.copy(),
            self.feat_std.copy(),
            self.norm_running_mean.copy(),
            self.norm_running_var.copy(),
            self.count,
        )


@dataclass
class FeatureBatch:
    """A batch of embedding rows with optional withheld labels/group ids."""

    embeddings: Mat64  # B x d
    labels: Optional[np.ndarray] = None
    group_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.embeddings = as_mat64(self.embeddings, "embeddings")
        if self.embeddings.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.embeddings.shape[0],):
                raise ValueError("labels length must match batch size")
        if self.group_ids is not None:
            self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
            if self.group_ids.shape != (self.embeddings.shape[0],):
                raise ValueError("group_ids length must match batch size")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def without_labels(self) -> "FeatureBatch":
        return FeatureBatch(self.embeddings.copy())


@dataclass
class ForwardCache:
    """Intermediates retained by forward() for the manual backward pass."""

    shifted: Mat64  # z + prompt
    mean: Vec64
    var: Vec64
    inv_std: Vec64
    normalized: Mat64  # pre-affine (z' - m) / sqrt(v + eps)
    features: Mat64  # post-affine zhat
    logits: Mat64
    probs: Mat64
    norm_mode: str


def forward(
    params: HeadParams,
    stats: SourceStats,
    batch: FeatureBatch,
    norm_mode: str = SOURCE_STATS,
) -> tuple[Mat64, Mat64, ForwardCache]:
    """Run the head on a batch; returns (logits, probs, cache).

    ``norm_mode`` selects the normalization statistics: frozen source running
    statistics, or the current batch's mean and population variance.
    """
    if norm_mode not in (SOURCE_STATS, BATCH_STATS):
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    if batch.d != params.d:
        raise ValueError(f"batch dimension {batch.d} != params dimension {params.d}")

    shifted = batch.embeddings + params.prompt
    if norm_mode == SOURCE_STATS:
        mean = stats.norm_running_mean
        var = stats.norm_running_var
    else:
        mean = shifted.mean(axis=0)
        var = shifted.var(axis=0)  # population variance, ddof=0
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    normalized = (shifted - mean) * inv_std
    features = normalized * params.norm_scale + params.norm_shift
    logits = features @ params.weight.T + params.bias
    probs = softmax_rows(logits)
    cache = ForwardCache(shifted, mean, var, inv_std, normalized, features, logits, probs, norm_mode)
    return logits, probs, cache


@dataclass
class HeadGrads:
    """Gradients for a subset of the parameter tensors; None = not requested."""

    norm_scale: Optional[Vec64] = None
    norm_shift: Optional[Vec64] = None
    weight: Optional[Mat64] = None
    bias: Optional[Vec64] = None
    prompt: Optional[Vec64] = None

    def tensors(self) -> dict[str, Optional[np.ndarray]]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(t)) for t in self.tensors().values() if t is not None
        )

    def global_norm(self) -> float:
        parts = [t.ravel() for t in self.tensors().values() if t is not None]
        if not parts:
            return 0.0
        return float(np.linalg.norm(np.concatenate(parts)))

    def scaled(self, factor: float) -> "HeadGrads":
        return HeadGrads(
            **{
                name: (None if t is None else t * factor)
                for name, t in self.tensors().items()
            }
        )


ALL_PARAMS = frozenset(PARAM_NAMES)
DEFAULT_ADAPT_PARAMS = frozenset({"norm_scale", "norm_shift"})


def _backward_from_dlogits(
    params: HeadParams,
    cache: ForwardCache,
    dlogits: Mat64,
    wrt: frozenset[str],
) -> HeadGrads:
    """Propagate per-row logit gradients to the requested parameter tensors.

    In batch-stats mode the normalization statistics depend on the batch, so
    the prompt gradient uses the full batch-norm backward (population
    variance); in source-stats mode the statistics are constants.
    """
    grads = HeadGrads()
    if "bias" in wrt:
        grads.bias = dlogits.sum(axis=0)
    if "weight" in wrt:
        grads.weight = dlogits.T @ cache.features
    need_features = wrt & {"norm_scale", "norm_shift", "prompt"}
    if need_features:
        dfeatures = dlogits @ params.weight  # B x d
        if "norm_scale" in wrt:
            grads.norm_scale = (dfeatures * cache.normalized).sum(axis=0)
        if "norm_shift" in wrt:
            grads.norm_shift = dfeatures.sum(axis=0)
        if "prompt" in wrt:
            dnormalized = dfeatures * params.norm_scale
            if cache.norm_mode == BATCH_STATS:
                mean_d = dnormalized.mean(axis=0)
                mean_dx = (dnormalized * cache.normalized).mean(axis=0)
                dshifted = cache.inv_std * (
                    dnormalized - mean_d - cache.normalized * mean_dx
                )
            else:
                dshifted = dnormalized * cache.inv_std
            grads.prompt = dshifted.sum(axis=0)
    return grads


def grad_entropy(
    params: HeadParams,
    stats: SourceStats,
    batch: FeatureBatch,
    norm_mode: str = BATCH_STATS,
    weights: Optional[Vec64] = None,
    wrt: Iterable[str] = DEFAULT_ADAPT_PARAMS,
) -> tuple[float, HeadGrads]:
    """Loss value and gradient of the (weighted) mean prediction entropy.

    The per-row logit gradient is ``dH/dlogit_k = -p_k (log p_k + H(p))``.
    ``weights`` (treated as constants) rescale rows; with all-zero weights
    the loss and every gradient are exactly zero.
    """
    wrt = frozenset(wrt)
    _check_wrt(wrt)
    _, probs, cache = forward(params, stats, batch, norm_mode)
    safe = np.where(probs > 0.0, probs, 1.0)
    logp = np.log(safe)
    row_entropy = -(probs * logp).sum(axis=1)

    if weights is None:
        w = np.full(batch.size, 1.0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (batch.size,):
            raise ValueError("weights length must match batch size")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        return 0.0, HeadGrads(**{name: _zeros_like(params, name) for name in wrt})
    coeff = w / total
    loss = float(coeff @ row_entropy)
    dlogits = -probs * (logp + row_entropy[:, None]) * coeff[:, None]
    return loss, _backward_from_dlogits(params, cache, dlogits, wrt)


def grad_crossentropy(
    params: HeadParams,
    stats: SourceStats,
    batch: FeatureBatch,
    targets: Mat64,
    weights: Optional[Vec64] = None,
    norm_mode: str = SOURCE_STATS,
    wrt: Iterable[str] = DEFAULT_ADAPT_PARAMS,
) -> tuple[float, HeadGrads]:
    """Loss value and gradient of the weighted cross-entropy to soft targets.

    Loss = (1/sum w) * sum_j w_j * (-sum_c target_jc log prob_jc); the
    per-row logit gradient before weighting is ``probs - targets``.
    """
    wrt = frozenset(wrt)
    _check_wrt(wrt)
    targets = check_simplex(as_mat64(targets, "targets"), name="targets")
    if targets.shape[0] != batch.size:
        raise ValueError("targets row count must match batch size")
    _, probs, cache = forward(params, stats, batch, norm_mode)
    if targets.shape != probs.shape:
        raise ValueError("targets column count must match class count")

    if weights is None:
        w = np.full(batch.size, 1.0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (batch.size,):
            raise ValueError("weights length must match batch size")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0.0:
        return 0.0, HeadGrads(**{name: _zeros_like(params, name) for name in wrt})
    coeff = w / total
    safe = np.where(probs > 0.0, probs, np.finfo(np.float64).tiny)
    row_loss = -(targets * np.log(safe)).sum(axis=1)
    loss = float(coeff @ row_loss)
    dlogits = (probs - targets) * coeff[:, None]
    return loss, _backward_from_dlogits(params, cache, dlogits, wrt)


def _check_wrt(wrt: frozenset[str]) -> None:
    unknown = wrt - ALL_PARAMS
    if unknown:
        raise ValueError(f"unknown parameter tensors: {sorted(unknown)}")


def _zeros_like(params: HeadParams, name: str) -> np.ndarray:
    return np.zeros_like(getattr(params, name))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

DECAYED_PARAMS = frozenset({"weight", "bias"})


@dataclass
class OptState:
    """AdamW accumulator state: one pair of moments per parameter tensor."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: HeadParams, lr: float, weight_decay: float = 0.0) -> "OptState":
        st = OptState(lr=lr, weight_decay=weight_decay)
        for name, t in params.tensors().items():
            st.m[name] = np.zeros_like(t)
            st.v[name] = np.zeros_like(t)
        return st

    def copy(self) -> "OptState":
        return OptState(
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            step_count=self.step_count,
            m={k: t.copy() for k, t in self.m.items()},
            v={k: t.copy() for k, t in self.v.items()},
        )


def optimizer_step(params: HeadParams, grads: HeadGrads, opt: OptState) -> HeadParams:
    """One AdamW step on the tensors for which ``grads`` carries a gradient.

    Decoupled weight decay shrinks the classifier weight and bias only
    (never the normalization affine or the prompt).  Non-finite gradients
    reject the whole step with ``NumericError``; ``params`` and ``opt`` are
    left untouched in that case.
    """
    if not grads.all_finite():
        raise NumericError("non-finite gradient; step rejected")
    active = {name: g for name, g in grads.tensors().items() if g is not None}
    for name, g in active.items():
        if g.shape != getattr(params, name).shape:
            raise ValueError(f"gradient shape mismatch for {name}")

    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    out = params.copy()
    for name, g in active.items():
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        new = getattr(out, name)
        if opt.weight_decay > 0.0 and name in DECAYED_PARAMS:
            new = new * (1.0 - opt.lr * opt.weight_decay)
        new = new - opt.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        setattr(out, name, new)
    return out


# ---------------------------------------------------------------------------
# Source statistics and training
# ---------------------------------------------------------------------------


def compute_source_stats(embeddings: Mat64) -> SourceStats:
    """Per-dimension mean and population standard deviation of the rows.

    The same statistics seed the normalization stage: running mean = feature
    mean, running variance = feature variance (prompt is zero at train time).
    """
    z = as_mat64(embeddings, "embeddings")
    if z.shape[0] < 2:
        raise ValueError("need at least 2 rows to compute source statistics")
    mean = z.mean(axis=0)
    var = z.var(axis=0)  # population (ddof=0)
    return SourceStats(
        feat_mean=mean,
        feat_std=np.sqrt(var),
        norm_running_mean=mean.copy(),
        norm_running_var=var.copy(),
        count=z.shape[0],
    )


@dataclass
class TrainConfig:
    """Source-training recipe: linear warmup then linear decay to zero."""

    epochs: int = 50
    lr: float = 3e-5
    warmup_fraction: float = 0.10
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    weight_scale: float = 0.001
    params_to_train: frozenset[str] = frozenset({"norm_scale", "norm_shift", "weight", "bias"})


def _lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup over the first fraction of steps, then linear decay to 0."""
    warmup_steps = max(1, int(round(total_steps * warmup_fraction)))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return base_lr
    frac = (step - warmup_steps) / remaining
    return base_lr * max(0.0, 1.0 - frac)


def train_source(
    train: FeatureBatch,
    n_classes: int,
    cfg: TrainConfig | None = None,
) -> tuple[HeadParams, SourceStats]:
    """Train the head on labeled source data; returns (params, stats).

    Statistics are computed over the full training set first, then the head
    is optimized with AdamW under source-stats normalization and the
    warmup/decay schedule.  Deterministic per (data, cfg.seed).
    """
    cfg = cfg or TrainConfig()
    if train.labels is None:
        raise ValueError("train_source requires labeled data")
    labels = train.labels
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("labels out of range")
    if np.unique(labels).size < 2:
        raise ValueError("training data must contain at least two classes")

    stats = compute_source_stats(train.embeddings)
    rng = Rng(cfg.seed)
    params = HeadParams.init(train.d, n_classes, rng.spawn(1), cfg.weight_scale)
    opt = OptState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    n = train.size
    one_hot = np.zeros((n, n_classes))
    one_hot[np.arange(n), labels] = 1.0
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    shuffle_rng = rng.spawn(2)
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            mini = FeatureBatch(train.embeddings[idx])
            opt.lr = _lr_schedule(step, total_steps, cfg.lr, cfg.warmup_fraction)
            loss, grads = grad_crossentropy(
                params, stats, mini, one_hot[idx], norm_mode=SOURCE_STATS,
                wrt=cfg.params_to_train,
            )
            params = optimizer_step(params, grads, opt)
            epoch_loss += loss * idx.size
            step += 1
        log.info("train epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, epoch_loss / n)
    return params, stats


def predict(params: HeadParams, stats: SourceStats, batch: FeatureBatch,
            norm_mode: str = SOURCE_STATS) -> np.ndarray:
    """Argmax labels under the given normalization mode."""
    _, probs, _ = forward(params, stats, batch, norm_mode)
    return probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TTAH"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: HeadParams, stats: SourceStats,
                    config: Optional[dict] = None) -> None:
    """Write the little-endian binary checkpoint plus a JSON sidecar.

    Layout: magic "TTAH", version u32, d u32, C u32, then the parameter
    tensors in declared order (norm_scale, norm_shift, weight row-major,
    bias, prompt) as f64, then the source statistics (feat_mean, feat_std,
    norm_running_mean, norm_running_var, count u64).
    """
    params.validate()
    d, c = params.d, params.n_classes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, d, c))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
        for arr in (stats.feat_mean, stats.feat_std, stats.norm_running_mean,
                    stats.norm_running_var):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", stats.count))
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"d": d, "n_classes": c, "config": config or {}}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[HeadParams, SourceStats, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic")
    version, d, c = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    off = 16

    def take(count: int) -> np.ndarray:
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise DataFormatError(f"truncated checkpoint at offset {off}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += nbytes
        return arr

    params = HeadParams(
        norm_scale=take(d),
        norm_shift=take(d),
        weight=take(c * d).reshape(c, d),
        bias=take(c),
        prompt=take(d),
    )
    stats = SourceStats(
        feat_mean=take(d),
        feat_std=take(d),
        norm_running_mean=take(d),
        norm_running_var=take(d),
        count=0,
    )
    if off + 8 > len(raw):
        raise DataFormatError(f"truncated checkpoint at offset {off}")
    (stats.count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    params.validate()
    config: dict = {}
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            config = json.load(fh).get("config", {})
    except FileNotFoundError:
        pass
    return params, stats, config
