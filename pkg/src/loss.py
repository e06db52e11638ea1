#!/usr/bin/env python3
"""
Dice score and Dice losses

Evaluation forms work on binary numpy masks; the training form works on soft
torch predictions and is differentiable through autograd.

The modified Dice score rewards an empty prediction on an empty slice with X
instead of 1, so the reward for correctly segmenting nothing can be tuned down
when most slices of a small training set contain no prostate.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .errors import ConfigError

FAMILIES = ("conventional", "modified")
X_SWEEP = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class LossConfig:
    """
    Loss family and its constants

    Attributes:
        family: 'conventional' or 'modified'
        x: Reward for empty prediction on empty ground truth (modified family)
        epsilon: Smoothing constant of the conventional form
        binarize_threshold: Threshold deciding whether a soft prediction counts as empty
        false_positive_term: Opt-in penalty on non-empty predictions for empty ground truth
    """
    family: str = "modified"
    x: float = 0.0
    epsilon: float = 1e-6
    binarize_threshold: float = 0.5
    false_positive_term: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"loss family must be one of {FAMILIES}, got {self.family!r}")
        if not 0.0 <= self.x <= 1.0:
            raise ConfigError(f"x must be in [0, 1], got {self.x}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError(f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}")


def is_sweep_value(x: float) -> bool:
    """True if x lies on the 0.0, 0.1, ... 1.0 grid"""
    return any(abs(x - v) < 1e-9 for v in X_SWEEP)


def _binary_pair(P, G) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(P)
    g = np.asarray(G)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    for name, arr in (("P", p), ("G", g)):
        if arr.dtype != bool and arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be a binary mask")
    return p.astype(bool), g.astype(bool)


def binary_dsc(P, G, epsilon: float = 1e-6) -> float:
    """
    Conventional Dice score with smoothing

    Uses 2(|P∩G| + ε) / (|P| + |G| + 2ε) so two empty masks score exactly 1;
    the value is clamped to [0, 1].
    """
    p, g = _binary_pair(P, G)
    intersection = np.count_nonzero(p & g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    value = 2.0 * (intersection + epsilon) / (total + 2.0 * epsilon)
    return float(min(1.0, max(0.0, value)))


def dice_loss(P, G, epsilon: float = 1e-6) -> float:
    return -binary_dsc(P, G, epsilon)


def modified_dsc(P, G, x: float) -> float:
    """
    Modified Dice score

    X when both masks are empty, otherwise 2|P∩G| / (|P| + |G|) without smoothing.
    """
    p, g = _binary_pair(P, G)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return float(x)
    return float(2.0 * np.count_nonzero(p & g) / total)


def modified_dice_loss(P, G, x: float) -> float:
    return -modified_dsc(P, G, x)


def _flatten_batch(tensor: torch.Tensor) -> torch.Tensor:
    """(H, W), (N, H, W) or (N, 1, H, W) → (N, H*W)"""
    if tensor.ndim == 2:
        return tensor.reshape(1, -1)
    return tensor.reshape(tensor.shape[0], -1)


def per_slice_training_loss(p_soft: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """
    Differentiable Dice loss for each slice of a batch

    Args:
        p_soft: Soft predictions in [0, 1]
        target: Binary ground truth of the same shape
        config: Loss family and constants

    Returns:
        Tensor of shape (N,) with one loss per slice
    """
    if p_soft.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(p_soft.shape)} != target shape {tuple(target.shape)}")
    with torch.no_grad():
        if torch.isnan(p_soft).any() or (p_soft < 0).any() or (p_soft > 1).any():
            raise ValueError("soft predictions must lie in [0, 1]")
        if ((target != 0) & (target != 1)).any():
            raise ValueError("target must be a binary mask")

    p = _flatten_batch(p_soft)
    g = _flatten_batch(target).to(p.dtype)
    sum_p = p.sum(dim=1)
    sum_g = g.sum(dim=1)
    intersection = (p * g).sum(dim=1)

    if config.family == "conventional":
        eps = config.epsilon
        return -2.0 * (intersection + eps) / (sum_p + sum_g + 2.0 * eps)

    with torch.no_grad():
        g_empty = sum_g == 0
        p_empty = (p > config.binarize_threshold).sum(dim=1) == 0

    denominator = sum_p + sum_g
    safe_denominator = torch.where(denominator > 0, denominator, torch.ones_like(denominator))
    overlap = 2.0 * intersection / safe_denominator
    if config.false_positive_term:
        empty_target_score = 2.0 * config.epsilon / (sum_p + config.epsilon)
    else:
        empty_target_score = torch.zeros_like(overlap).detach()
    reward = torch.full_like(overlap, config.x).detach()

    score = torch.where(g_empty & p_empty, reward, torch.where(g_empty, empty_target_score, overlap))
    return -score


def soft_dice_training_loss(p_soft: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """
    Training loss: arithmetic mean of the per-slice losses

    Call .backward() on the result for the gradient.
    """
    return per_slice_training_loss(p_soft, target, config).mean()
