"""Diversity softmax, diversity loss and consistency self-distillation.

All probabilities are computed in the log domain as
``softmax(v / T + lam * log(counts))``, which equals the count-weighted form
``counts**lam * exp(v / T) / sum(...)`` without overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from mdcs import netcore

_LAMBDA_TABLE = {
    1: (1.0,),
    2: (-0.5, 2.5),
    3: (-0.5, 1.0, 2.5),
    4: (-0.5, 0.0, 1.0, 2.5),
    5: (-0.5, 0.0, 1.0, 2.0, 2.5),
    6: (-1.0, -0.5, 0.0, 2.0, 2.5, 3.0),
    7: (-1.0, -0.5, 0.0, 1.0, 2.0, 2.5, 3.0),
}


@dataclass(frozen=True)
class DistributionWeight:
    """Per-expert logit offset ``w = lam * log(counts)``."""

    lam: float
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1 or counts.min() < 1:
            raise ValueError("counts must be a vector with every entry >= 1")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "w", self.lam * np.log(counts))

    @property
    def num_classes(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.6
    detach_teacher: bool = True
    supervise_both_views: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")


def default_lambdas(num_experts: int) -> list:
    """Head/balanced/tail spread of ``lam`` for ``num_experts`` experts."""
    if num_experts < 1:
        raise ValueError("need at least one expert")
    if num_experts in _LAMBDA_TABLE:
        return list(_LAMBDA_TABLE[num_experts])
    return [float(v) for v in np.linspace(-1.0, 3.0, num_experts)]


def _adjusted(v, dw: DistributionWeight, T: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != dw.num_classes:
        raise ValueError(f"logits have {v.shape[-1]} classes, weights have {dw.num_classes}")
    if not np.all(np.isfinite(v)):
        raise netcore.NumericError("non-finite logits")
    return v / T + dw.w


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def diversity_softmax(v, dw: DistributionWeight, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError("temperature must be positive")
    return np.exp(log_softmax(_adjusted(v, dw, T)))


def _as_labels(y, n: int, C: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2 or (n == 1 and y.ndim == 1 and y.size == C > 1):
        one_hot = y.reshape(n, C)
        if not np.all((one_hot == 0) | (one_hot == 1)) or not np.all(one_hot.sum(axis=1) == 1):
            raise ValueError("y must be one-hot")
        return one_hot.argmax(axis=1)
    return y.astype(np.int64).reshape(n)


def diversity_loss(v, y, dw: DistributionWeight):
    """Mean cross-entropy of ``softmax(v + w)`` and its gradient w.r.t. ``v``.

    ``v`` is a logit vector or an ``(n, C)`` batch; ``y`` holds class ids or
    one-hot rows. The gradient has the shape of ``v`` and equals
    ``(p - y) / n`` for a batch of ``n``.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    batch = v[None, :] if single else v
    n, C = batch.shape
    labels = _as_labels(y, n, C)
    logp = log_softmax(_adjusted(batch, dw, 1.0))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def confident_set(weak_probs, labels) -> np.ndarray:
    """Indices whose weak-view argmax (lowest index on ties) hits the label."""
    weak_probs = np.asarray(weak_probs)
    labels = np.asarray(labels, dtype=np.int64)
    return np.flatnonzero(np.argmax(weak_probs, axis=1) == labels)


class CsResult(NamedTuple):
    loss: float
    grad_strong: np.ndarray
    grad_weak: np.ndarray
    confident: np.ndarray


def cs_loss(weak_logits, strong_logits, labels, dw: DistributionWeight, cfg: DistillConfig) -> CsResult:
    """KL(teacher || student) averaged over the confident instance set.

    Teacher and student are temperature-scaled diversity softmaxes of the
    weak and strong views. Membership uses the unscaled (``T = 1``) weak-view
    probabilities, so it does not depend on the temperature. With
    ``cfg.detach_teacher`` the weak-view gradient is identically zero.
    """
    weak = np.asarray(weak_logits, dtype=np.float64)
    strong = np.asarray(strong_logits, dtype=np.float64)
    if weak.shape != strong.shape:
        raise ValueError("weak and strong logits differ in shape")
    T = cfg.temperature
    keep = confident_set(diversity_softmax(weak, dw, 1.0), labels)
    grad_strong = np.zeros_like(strong)
    grad_weak = np.zeros_like(weak)
    if keep.size == 0:
        return CsResult(0.0, grad_strong, grad_weak, keep)
    log_t = log_softmax(_adjusted(weak[keep], dw, T))
    log_s = log_softmax(_adjusted(strong[keep], dw, T))
    p_t, p_s = np.exp(log_t), np.exp(log_s)
    kl = (p_t * (log_t - log_s)).sum(axis=1)
    k = keep.size
    grad_strong[keep] = (p_s - p_t) / (T * k)
    if not cfg.detach_teacher:
        grad_weak[keep] = p_t * ((log_t - log_s) - kl[:, None]) / (T * k)
    return CsResult(float(max(kl.mean(), 0.0)), grad_strong, grad_weak, keep)


@dataclass
class LossBreakdown:
    value: float
    dlogits: list
    diversity: list
    consistency: list
    confident_fraction: list
    cache: object = None


def total_loss_from_logits(weak_logits, strong_logits, labels, dws, cfg: DistillConfig) -> LossBreakdown:
    """Sum over experts of DL + alpha * CS, with per-view logit gradients.

    ``dlogits[mu]`` stacks the weak-view gradient on top of the strong-view
    gradient, matching a forward pass over ``[weak; strong]``.
    """
    if not (len(weak_logits) == len(strong_logits) == len(dws)):
        raise ValueError("need one weak/strong logit matrix and one weight per expert")
    labels = np.asarray(labels, dtype=np.int64)
    total, dlogits, dl_parts, cs_parts, fractions = 0.0, [], [], [], []
    for weak, strong, dw in zip(weak_logits, strong_logits, dws):
        if cfg.supervise_both_views:
            dl_w, g_w = diversity_loss(weak, labels, dw)
            dl_s, g_s = diversity_loss(strong, labels, dw)
            dl = 0.5 * (dl_w + dl_s)
            g_weak, g_strong = 0.5 * g_w, 0.5 * g_s
        else:
            dl, g_strong = diversity_loss(strong, labels, dw)
            g_weak = np.zeros_like(g_strong)
        cs = 0.0
        if cfg.alpha > 0:
            res = cs_loss(weak, strong, labels, dw, cfg)
            cs = res.loss
            g_strong = g_strong + cfg.alpha * res.grad_strong
            g_weak = g_weak + cfg.alpha * res.grad_weak
            fraction = res.confident.size / labels.size
        else:
            fraction = confident_set(diversity_softmax(weak, dw, 1.0), labels).size / labels.size
        total += dl + cfg.alpha * cs
        dlogits.append(np.vstack([g_weak, g_strong]))
        dl_parts.append(dl)
        cs_parts.append(cs)
        fractions.append(fraction)
    return LossBreakdown(total, dlogits, dl_parts, cs_parts, fractions)


def total_loss(model: netcore.MultiExpertModel, weak_x, strong_x, labels, dws, cfg: DistillConfig) -> LossBreakdown:
    """Forward both views through the shared model and evaluate the objective.

    The returned breakdown carries the forward cache; pass it with
    ``breakdown.dlogits`` to :func:`mdcs.netcore.backward`.
    """
    if len(dws) != model.num_experts:
        raise ValueError(f"model has {model.num_experts} experts but {len(dws)} weights given")
    n = np.asarray(weak_x).shape[0]
    logits, cache = netcore.forward(model, np.vstack([weak_x, strong_x]))
    out = total_loss_from_logits(
        [z[:n] for z in logits], [z[n:] for z in logits], labels, dws, cfg
    )
    out.cache = cache
    return out
