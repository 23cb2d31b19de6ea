"""Class-preference and space-preference bias extraction."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import FrozenEncoder
from .core import ClassVocabulary, ShapeError

#: CLIP's text context holds 77 tokens: start, end and two name slots are reserved
TOKEN_BUDGET = 77
RESERVED_TOKENS = 4


class ReferencePrompt(nn.Module):
    """Learnable context ``[v_1 .. v_L]`` shared by every class."""

    def __init__(self, length: int, word_dim: int, init_std: float = 0.02,
                 rng: Optional[np.random.Generator] = None, dtype=torch.float32):
        super().__init__()
        if length > TOKEN_BUDGET - RESERVED_TOKENS:
            raise ValueError(
                f"prompt length {length} exceeds the token budget "
                f"({TOKEN_BUDGET} - {RESERVED_TOKENS} = {TOKEN_BUDGET - RESERVED_TOKENS})"
            )
        if length < 1:
            raise ValueError("prompt length must be >= 1")
        if rng is None:
            init = torch.zeros(length, word_dim, dtype=dtype)
        else:
            init = torch.as_tensor(rng.normal(0.0, init_std, (length, word_dim)), dtype=dtype)
        self.shared_context = nn.Parameter(init)

    @property
    def length(self) -> int:
        return self.shared_context.shape[0]


def encode_reference(prompt: ReferencePrompt, vocab: ClassVocabulary,
                     enc: FrozenEncoder) -> torch.Tensor:
    """Reference text features ``W_r`` (``C x D``); depends on nothing image-related."""
    if prompt.length > enc.max_context_length:
        raise ValueError(
            f"prompt length {prompt.length} exceeds encoder limit {enc.max_context_length}"
        )
    return enc.encode_prompt(prompt.shared_context, vocab.names)


class PositionalProjection(nn.Module):
    """One 1x1 convolution applied to the frozen positional embedding.

    A 1x1 convolution on a patch grid is a per-patch affine map, so it is stored as
    a linear layer acting on the flattened ``n x pe_dim`` embedding.
    """

    def __init__(self, pe_dim: int, out_dim: int, init_std: float = 0.01,
                 rng: Optional[np.random.Generator] = None, dtype=torch.float32):
        super().__init__()
        self.linear = nn.Linear(pe_dim, out_dim, dtype=dtype)
        with torch.no_grad():
            if rng is None:
                self.linear.weight.zero_()
            else:
                self.linear.weight.copy_(
                    torch.as_tensor(rng.normal(0.0, init_std, (out_dim, pe_dim)), dtype=dtype)
                )
            self.linear.bias.zero_()

    @classmethod
    def identity(cls, dim: int, dtype=torch.float32) -> "PositionalProjection":
        proj = cls(dim, dim, dtype=dtype)
        with torch.no_grad():
            proj.linear.weight.copy_(torch.eye(dim, dtype=dtype))
        return proj

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return self.linear(p)


def encode_positional(p: torch.Tensor, proj: PositionalProjection,
                      n: Optional[int] = None) -> torch.Tensor:
    """Positional feature ``W_p`` (``n x D``), one independent projection per patch."""
    if n is not None and p.shape[0] != n:
        raise ShapeError(f"positional embedding has {p.shape[0]} rows, expected n={n}")
    if p.shape[-1] != proj.linear.in_features:
        raise ShapeError(
            f"positional embedding dim {p.shape[-1]} != projection input {proj.linear.in_features}"
        )
    return proj(p)


def bias_logits(W_p: torch.Tensor, W_r: torch.Tensor) -> torch.Tensor:
    """Bias logit map ``M_b = W_p W_r^T``."""
    if W_p.shape[-1] != W_r.shape[-1]:
        raise ShapeError(f"positional dim {W_p.shape[-1]} != reference dim {W_r.shape[-1]}")
    return W_p @ W_r.transpose(-1, -2)


def pool_expand_class(W_r: torch.Tensor) -> torch.Tensor:
    """Replace every class row by the class mean; removes class-specific bias."""
    return W_r.mean(dim=-2, keepdim=True).expand_as(W_r)


def pool_expand_space(W_p: torch.Tensor) -> torch.Tensor:
    """Replace every patch row by the patch mean; removes position-specific bias."""
    return W_p.mean(dim=-2, keepdim=True).expand_as(W_p)
