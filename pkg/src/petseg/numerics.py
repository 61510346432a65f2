"""Reference implementations of the training losses and learning-rate schedule.

Each loss returns ``(value, gradient)`` where the gradient is taken with
respect to the predicted probabilities, voxel by voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from petseg.errors import BadConfig, OutOfRangePrediction, ShapeMismatch
from petseg.volume import Volume3D, mask_array

FOCAL_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 1.0
    focal_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    smooth_eps: float = 1e-5
    focal_reduction: str = "mean"

    def validate(self):
        if self.dice_weight < 0 or self.focal_weight < 0:
            raise BadConfig("loss weights must be non-negative")
        if self.dice_weight == 0 and self.focal_weight == 0:
            raise BadConfig("at least one loss weight must be positive")
        if self.focal_gamma < 0:
            raise BadConfig("focal_gamma must be non-negative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise BadConfig("focal_alpha must lie in (0, 1)")
        if not self.smooth_eps > 0:
            raise BadConfig("smooth_eps must be positive")
        if self.focal_reduction not in ("mean", "sum"):
            raise BadConfig("focal_reduction must be 'mean' or 'sum'")


def _inputs(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = pred.data if isinstance(pred, Volume3D) else np.asarray(pred, dtype=np.float64)
    t = mask_array(target).astype(np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != target shape {t.shape}")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise OutOfRangePrediction("predicted probabilities must lie in [0, 1]")
    return p, t


def dice_loss(pred, target, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Soft Dice loss ``1 - (2 Σpt + ε) / (Σp + Σt + ε)`` and its gradient."""
    cfg = cfg or LossConfig()
    p, t = _inputs(pred, target)
    eps = cfg.smooth_eps
    num = 2.0 * np.sum(p * t) + eps
    den = np.sum(p) + np.sum(t) + eps
    loss = 1.0 - num / den
    # quotient rule: d(num/den)/dp = (2 t den - num) / den^2
    grad = (num - 2.0 * t * den) / den**2
    return float(loss), grad


def focal_loss(pred, target, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Binary focal loss ``-α_t (1 - p_t)^γ log p_t``.

    ``p_t`` is the probability given to the true class after clamping the
    prediction to ``[1e-7, 1 - 1e-7]``; the gradient is zero where the clamp
    is active.
    """
    cfg = cfg or LossConfig()
    p, t = _inputs(pred, target)
    pc = np.clip(p, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    pos = t == 1.0
    pt = np.where(pos, pc, 1.0 - pc)
    alpha_t = np.where(pos, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    g = cfg.focal_gamma
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    terms = -alpha_t * one_m**g * log_pt
    # d term / d p_t
    if g == 0:
        dterm = -alpha_t / pt
    else:
        dterm = -alpha_t * (one_m**g / pt - g * one_m ** (g - 1.0) * log_pt)
    grad = np.where(pos, dterm, -dterm)
    grad = np.where((p > FOCAL_CLAMP) & (p < 1.0 - FOCAL_CLAMP), grad, 0.0)
    if cfg.focal_reduction == "mean":
        return float(terms.mean()), grad / terms.size
    return float(terms.sum()), grad


def dice_focal_loss(pred, target, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    cfg = cfg or LossConfig()
    cfg.validate()
    loss = 0.0
    grad = np.zeros(np.shape(pred.data if isinstance(pred, Volume3D) else pred))
    if cfg.dice_weight:
        v, g = dice_loss(pred, target, cfg)
        loss += cfg.dice_weight * v
        grad = grad + cfg.dice_weight * g
    if cfg.focal_weight:
        v, g = focal_loss(pred, target, cfg)
        loss += cfg.focal_weight * v
        grad = grad + cfg.focal_weight * g
    return loss, grad


def central_difference(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return out


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error ``||a - n|| / max(||a||, ||n||)``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


# learning-rate schedule


@dataclass(frozen=True)
class ScheduleConfig:
    eta_max: float
    T_0: int
    eta_min: float = 0.0
    T_mult: int = 1

    def validate(self):
        if not self.eta_max > self.eta_min >= 0:
            raise BadConfig("need eta_max > eta_min >= 0")
        if self.T_0 < 1:
            raise BadConfig("T_0 must be at least 1")
        if self.T_mult < 1:
            raise BadConfig("T_mult must be at least 1")


def cycle_position(step: int, cfg: ScheduleConfig) -> tuple[int, int, int]:
    """``(cycle index, steps into the cycle, cycle length)`` for ``step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.T_mult == 1:
        return step // cfg.T_0, step % cfg.T_0, cfg.T_0
    cycle, length, rest = 0, cfg.T_0, step
    while rest >= length:
        rest -= length
        length *= cfg.T_mult
        cycle += 1
    return cycle, rest, length


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Cosine annealing with warm restarts: back to ``eta_max`` at each cycle start."""
    cfg.validate()
    _, t_cur, t_i = cycle_position(int(step), cfg)
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))
