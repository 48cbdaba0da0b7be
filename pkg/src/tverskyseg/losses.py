"""Tversky and cross-entropy losses and their adaptive fusion.

Probability fields follow the network layout: ``p`` has shape
``(N, 2, *spatial)`` with channel 0 the foreground (pancreas) probability and
channel 1 the background probability.  Labels ``g`` are binary foreground
masks of shape ``(N, *spatial)``.  Every sum runs over all voxels of all
samples, so a batch is scored as one pooled volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMOOTH = 1e-6
BCE_EPS = 1e-7


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = SMOOTH

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be nonnegative, got {self.alpha}, {self.beta}")
        if not self.smooth > 0:
            raise ValueError(f"smooth must be positive, got {self.smooth}")


PRESETS = {
    "fp-heavy": TverskyParams(0.7, 0.3),
    "balanced": TverskyParams(0.5, 0.5),
}


@dataclass(frozen=True)
class AdaptiveWeights:
    w_tversky: float
    w_bce: float
    epoch: int = 0

    @classmethod
    def initial(cls) -> "AdaptiveWeights":
        return cls(0.5, 0.5, 0)

    @classmethod
    def from_tversky(cls, w_tversky: float, epoch: int = 0) -> "AdaptiveWeights":
        if not 0.0 <= w_tversky <= 1.0:
            raise ValueError(f"w_tversky must lie in [0, 1], got {w_tversky}")
        return cls(w_tversky, 1.0 - w_tversky, epoch)


@dataclass(frozen=True)
class LossReport:
    l_tversky: float
    l_bce: float
    l_total: float
    weights: AdaptiveWeights


def _split(p, g):
    p = np.asarray(p)
    g = np.asarray(g)
    if p.ndim < 2 or p.shape[1] != 2:
        raise ValueError(f"expected a two-channel probability field (N, 2, ...), got {p.shape}")
    if p.shape[:1] + p.shape[2:] != g.shape:
        raise ValueError(
            f"voxel count mismatch: probabilities {p.shape} vs labels {g.shape}"
        )
    g0 = g.astype(p.dtype)
    return p[:, 0], p[:, 1], g0, 1 - g0


def _tversky_terms(p, g, params):
    p0, p1, g0, g1 = _split(p, g)
    tp = float(np.sum(p0 * g0, dtype=np.float64))
    fp = float(np.sum(p0 * g1, dtype=np.float64))
    fn = float(np.sum(p1 * g0, dtype=np.float64))
    num = tp + params.smooth
    den = tp + params.alpha * fp + params.beta * fn + params.smooth
    return num, den, (g0, g1)


def tversky_index(p, g, params: TverskyParams = TverskyParams()) -> float:
    num, den, _ = _tversky_terms(p, g, params)
    return num / den


def tversky_loss(p, g, params: TverskyParams = TverskyParams()) -> float:
    return 1.0 - tversky_index(p, g, params)


def tversky_grad(p, g, params: TverskyParams = TverskyParams()) -> np.ndarray:
    """Gradient of the Tversky *index* w.r.t. (p0, p1), same shape as ``p``.

    Channels are treated as independent variables.  Quotient rule on
    num/den gives

        dT/dp0_i = (g0_i * den - (g0_i + alpha * g1_i) * num) / den**2
        dT/dp1_i = -beta * g0_i * num / den**2

    The loss gradient is the negation.
    """
    num, den, (g0, g1) = _tversky_terms(p, g, params)
    p = np.asarray(p)
    grad = np.empty_like(p)
    d2 = den * den
    grad[:, 0] = (g0 * den - (g0 + params.alpha * g1) * num) / d2
    grad[:, 1] = -params.beta * g0 * num / d2
    return grad


def bce_loss(p_fg, t, eps: float = BCE_EPS) -> float:
    p = np.clip(np.asarray(p_fg, dtype=np.float64), eps, 1 - eps)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs targets {t.shape}")
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def bce_grad(p_fg, t, eps: float = BCE_EPS) -> np.ndarray:
    """d(bce_loss)/d(p_fg); zero where the clamp is active."""
    p_fg = np.asarray(p_fg)
    t = np.asarray(t, dtype=p_fg.dtype)
    p = np.clip(p_fg, eps, 1 - eps)
    g = (-(t / p) + (1 - t) / (1 - p)) / p_fg.size
    g[(p_fg < eps) | (p_fg > 1 - eps)] = 0
    return g


def ce_loss(p, t, num_classes: int | None = None, eps: float = BCE_EPS) -> float:
    """Categorical cross-entropy; class axis is 1, voxels are everything else."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    m = p.shape[1] if p.ndim >= 2 else 0
    if num_classes is not None and num_classes != m:
        raise ValueError(f"num_classes={num_classes} but probabilities carry {m} classes")
    if m < 2:
        raise ValueError(f"cross-entropy needs at least 2 classes, got {m}")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: probabilities {p.shape} vs targets {t.shape}")
    n_vox = p.size // m
    logp = np.log(np.clip(p, eps, 1 - eps))
    return float(-np.sum(t * logp) / n_vox)


def adaptive_weights(prev: LossReport | None) -> AdaptiveWeights:
    """Weights for the next epoch from the previous epoch's component losses."""
    if prev is None:
        return AdaptiveWeights.initial()
    epoch = prev.weights.epoch + 1
    s = prev.l_tversky + prev.l_bce
    if prev.l_tversky < 0 or prev.l_bce < 0:
        raise ValueError(f"component losses must be nonnegative, got {prev.l_tversky}, {prev.l_bce}")
    if s == 0:
        return AdaptiveWeights(0.5, 0.5, epoch)
    return AdaptiveWeights.from_tversky(prev.l_tversky / s, epoch)


def total_loss(p, g, weights: AdaptiveWeights, params: TverskyParams = TverskyParams()) -> LossReport:
    lt = tversky_loss(p, g, params)
    lb = bce_loss(np.asarray(p)[:, 0], g)
    total = weights.w_tversky * lt + weights.w_bce * lb
    for name, v in (("tversky", lt), ("bce", lb)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss {v}")
    return LossReport(lt, lb, total, weights)


def total_loss_grad(p, g, weights: AdaptiveWeights, params: TverskyParams = TverskyParams()) -> np.ndarray:
    """Gradient of ``total_loss(...).l_total`` w.r.t. ``p``."""
    p = np.asarray(p)
    grad = -weights.w_tversky * tversky_grad(p, g, params)
    if weights.w_bce:
        grad[:, 0] += weights.w_bce * bce_grad(p[:, 0], g)
    return grad.astype(p.dtype, copy=False)
