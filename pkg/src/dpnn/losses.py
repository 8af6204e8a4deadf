"""Pretraining and fine-tuning objectives.

The projection loss is half the mean squared error minus the mean SSIM
over non-overlapping square windows. SSIM statistics use the biased
(divide-by-n) estimator within each window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, as_tensor

MSE_SSIM = "mse+ssim"
MSE_ONLY = "mse-only"
LOSS_VARIANTS = (MSE_SSIM, MSE_ONLY)


@dataclass(frozen=True)
class SsimConfig:
    window: int = 6
    c1: float = 1e-4
    c2: float = 9e-4

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("ssim.window must be >= 2")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ConfigError("ssim.c1 and ssim.c2 must be positive")


@dataclass(frozen=True)
class WindowStats:
    mu_p: float
    mu_g: float
    var_p: float
    var_g: float
    cov_pg: float

    @classmethod
    def from_windows(cls, wp, wg) -> "WindowStats":
        wp = np.asarray(wp, dtype=np.float64)
        wg = np.asarray(wg, dtype=np.float64)
        if wp.shape != wg.shape:
            raise ShapeError("windows must have equal size")
        mp, mg = wp.mean(), wg.mean()
        return cls(
            mu_p=mp,
            mu_g=mg,
            var_p=max(((wp - mp) ** 2).mean(), 0.0),
            var_g=max(((wg - mg) ** 2).mean(), 0.0),
            cov_pg=((wp - mp) * (wg - mg)).mean(),
        )


def ssim_window(stats: WindowStats, cfg: SsimConfig = SsimConfig()) -> float:
    s = stats
    num = (2 * s.mu_p * s.mu_g + cfg.c1) * (2 * s.cov_pg + cfg.c2)
    den = (s.mu_p**2 + s.mu_g**2 + cfg.c1) * (s.var_p + s.var_g + cfg.c2)
    return num / den


def _check_pair(p: Tensor, g: Tensor) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ in shape")


def mse_half(p: Tensor, g) -> Tensor:
    g = as_tensor(g)
    _check_pair(p, g)
    d = p - g
    return (d * d).sum() * (0.5 / p.size)


def _blocks(x: Tensor, win: int, nh: int, nw: int) -> Tensor:
    lead = x.shape[:-2]
    x = x[..., : nh * win, : nw * win]
    return x.reshape(*lead, nh, win, nw, win)


def mean_ssim(p: Tensor, g, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Average SSIM over all window x window tiles of the trailing two axes.

    Leading axes (batch, channel) are treated as independent maps; partial
    tiles at the bottom/right edges are dropped.
    """
    g = as_tensor(g)
    _check_pair(p, g)
    if p.ndim < 2:
        raise ShapeError("mean_ssim needs at least 2-d maps")
    h, w = p.shape[-2:]
    win = cfg.window
    if h < win or w < win:
        raise ShapeError(f"map {h}x{w} is smaller than one {win}x{win} window")
    nh, nw = h // win, w // win
    bp, bg = _blocks(p, win, nh, nw), _blocks(g, win, nh, nw)
    axes = (-3, -1)
    mu_p = bp.mean(axis=axes, keepdims=True)
    mu_g = bg.mean(axis=axes, keepdims=True)
    dp, dg = bp - mu_p, bg - mu_g
    var_p = (dp * dp).mean(axis=axes)
    var_g = (dg * dg).mean(axis=axes)
    cov = (dp * dg).mean(axis=axes)
    mu_p, mu_g = mu_p.mean(axis=axes), mu_g.mean(axis=axes)
    num = (2 * mu_p * mu_g + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_p * mu_p + mu_g * mu_g + cfg.c1) * (var_p + var_g + cfg.c2)
    return (num / den).mean()


def pretrain_loss(p: Tensor, g, cfg: SsimConfig = SsimConfig(), variant: str = MSE_SSIM) -> Tensor:
    if variant == MSE_ONLY:
        return mse_half(p, g)
    if variant != MSE_SSIM:
        raise ConfigError(f"unknown loss variant {variant!r}")
    return mse_half(p, g) - mean_ssim(p, g, cfg)


def cross_entropy(probs: Tensor, labels, n_classes: int = 3, floor: float = 1e-12) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ShapeError(f"probs {probs.shape} do not match {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    picked = probs[np.arange(labels.size), labels]
    return -(picked.clamp_min(floor).log().mean())
