"""Weighted cross-entropy over masked / unmasked frames and per-codebook streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError
from .masking import MaskSpec
from .model import Posteriors
from .rvq import CodebookWeights, TokenTargets

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.9
    gamma: CodebookWeights | None = None

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must be in [0, 1], got {self.delta}")

    def gamma_for(self, n_books: int) -> np.ndarray:
        if self.gamma is None:
            return np.full(n_books, 1.0 / n_books)
        if self.gamma.gamma.shape[0] != n_books:
            raise ShapeError(f"{self.gamma.gamma.shape[0]} codebook weights for {n_books} codebooks")
        return self.gamma.gamma


def frame_weights(masked: torch.Tensor, delta: float) -> torch.Tensor:
    """Per-frame weights ``delta/|M|`` on masked frames and ``(1-delta)/(T-|M|)`` elsewhere.

    ``masked`` is a boolean ``B x T`` tensor. When every frame is masked the
    unmasked term has no frames and its weight is taken as zero.
    """
    m = masked.to(torch.float64)
    n_masked = m.sum(dim=1, keepdim=True)
    if bool((n_masked == 0).any()):
        raise ConfigError("weighted cross-entropy needs at least one masked frame")
    n_visible = masked.shape[1] - n_masked
    alpha = delta / n_masked
    beta = torch.where(n_visible > 0, (1.0 - delta) / n_visible.clamp(min=1), torch.zeros_like(n_visible))
    return m * alpha + (1.0 - m) * beta


def weighted_ce_from_log_probs(
    log_probs: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor, delta: float, gamma
) -> torch.Tensor:
    """Batch-mean loss from ``B x Q x T x K`` log-posteriors and ``B x Q x T`` targets."""
    if log_probs.ndim != 4 or targets.shape != log_probs.shape[:3] or masked.shape != (log_probs.shape[0], log_probs.shape[2]):
        raise ShapeError(
            f"inconsistent shapes: log_probs {tuple(log_probs.shape)}, targets {tuple(targets.shape)}, mask {tuple(masked.shape)}"
        )
    return _weighted_mean(-log_probs.gather(-1, targets[..., None]).squeeze(-1), masked, delta, gamma)


def _weighted_mean(ce: torch.Tensor, masked: torch.Tensor, delta: float, gamma) -> torch.Tensor:
    w = frame_weights(masked, delta).to(ce.dtype)
    g = torch.as_tensor(np.asarray(gamma), dtype=ce.dtype)
    return torch.einsum("q,bqt,bt->b", g, ce, w).mean()


def weighted_ce(targets: TokenTargets, posteriors, mask: MaskSpec, cfg: LossConfig, eps: float = LOG_CLAMP):
    """Loss for one sequence from ``Q x T x K`` posteriors.

    ``posteriors`` may be a :class:`Posteriors`, an array, or a tensor (the
    result is then a differentiable tensor). The log is taken of ``p + eps``;
    ``eps=0`` gives the exact log. Non-positive target probabilities are rejected.
    """
    probs = posteriors.probs if isinstance(posteriors, Posteriors) else posteriors
    as_tensor = isinstance(probs, torch.Tensor)
    p = probs if as_tensor else torch.as_tensor(np.asarray(probs, dtype=np.float64))
    y = torch.as_tensor(targets.indices if isinstance(targets, TokenTargets) else np.asarray(targets))
    if p.ndim != 3 or tuple(y.shape) != tuple(p.shape[:2]) or p.shape[1] != mask.n_frames:
        raise ShapeError(f"posteriors {tuple(p.shape)} do not match targets {tuple(y.shape)} / mask length {mask.n_frames}")
    if mask.n_masked == 0:
        raise ConfigError("weighted cross-entropy needs at least one masked frame")
    picked = p.gather(-1, y[..., None]).squeeze(-1)
    if bool((picked <= 0).any()):
        raise NumericError("posterior at a target index is not positive")
    ce = -(torch.log(picked + eps) if eps else torch.log(picked))
    flags = torch.from_numpy(mask.flags())[None]
    loss = _weighted_mean(ce[None], flags, cfg.delta, cfg.gamma_for(p.shape[0]))
    return loss if as_tensor else float(loss)


def masked_accuracy(targets: TokenTargets, posteriors, mask: MaskSpec) -> np.ndarray:
    """Per-codebook fraction of masked frames whose argmax matches the target."""
    probs = posteriors.probs if isinstance(posteriors, Posteriors) else np.asarray(posteriors)
    y = targets.indices if isinstance(targets, TokenTargets) else np.asarray(targets)
    if probs.shape[:2] != y.shape:
        raise ShapeError(f"posteriors {probs.shape} do not match targets {y.shape}")
    if mask.n_masked == 0:
        return np.zeros(y.shape[0])
    hit = np.argmax(probs[:, mask.masked], axis=-1) == y[:, mask.masked]
    return hit.mean(axis=1)


def batch_masked_accuracy(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor) -> np.ndarray:
    """Per-codebook accuracy pooled over all masked frames of a batch."""
    hit = (logits.argmax(dim=-1) == targets) & masked[:, None, :]
    return (hit.sum(dim=(0, 2)).double() / masked.sum().clamp(min=1)).numpy()
