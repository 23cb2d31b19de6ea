"""Masked class-feature pooling and the contrastive rectification objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch

POOL_EPS = 1e-6
COS_EPS = 1e-6


@dataclass
class MaskedClassFeatures:
    Z_g: torch.Tensor
    valid: torch.Tensor


def masked_pool(Z: torch.Tensor, mask: torch.Tensor, hard: bool = False,
                eps: float = POOL_EPS) -> MaskedClassFeatures:
    """Mask-weighted average of patch features per class: ``Z_g[c] = sum_i m_ic z_i / (sum_i m_ic + eps)``."""
    if Z.shape[-2] != mask.shape[-2]:
        raise ValueError(f"feature rows {Z.shape[-2]} != mask rows {mask.shape[-2]}")
    mass = mask.sum(dim=-2)
    Z_g = (mask.transpose(-1, -2) @ Z) / (mass.unsqueeze(-1) + eps)
    valid = mass > (0.5 if hard else eps)
    return MaskedClassFeatures(Z_g, valid)


def cosine_similarities(Z_g: torch.Tensor, W_q: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    if isinstance(Z_g, MaskedClassFeatures):
        Z_g = Z_g.Z_g
    dots = Z_g @ W_q.transpose(-1, -2)
    norms = Z_g.norm(dim=-1, keepdim=True) * W_q.norm(dim=-1).unsqueeze(-2)
    return dots / (norms + eps)


def contrastive_loss(S: torch.Tensor, hypothesis: Iterable[int], tau: float) -> torch.Tensor:
    """Mean over hypothesis classes ``k`` of ``-log softmax(S[k] / tau)[k]``.

    The softmax runs over all classes; only rows in the hypothesis are anchors.
    """
    classes = sorted(getattr(hypothesis, "classes", hypothesis))
    if not classes:
        raise ValueError("contrastive loss needs a non-empty hypothesis")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    idx = torch.as_tensor(classes, dtype=torch.long)
    logp = torch.log_softmax(S[idx] / tau, dim=-1)
    return -logp[torch.arange(len(classes)), idx].mean()
