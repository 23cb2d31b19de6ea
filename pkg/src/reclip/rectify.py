"""Rectified logits, the 5x5 mask decoder, Gumbel-Softmax masks and inference."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import PatchGrid, ShapeError


def rectify_logits(M_q: torch.Tensor, M_b: torch.Tensor, mode: str = "subtract") -> torch.Tensor:
    if M_q.shape != M_b.shape:
        raise ShapeError(f"query logits {tuple(M_q.shape)} != bias logits {tuple(M_b.shape)}")
    if mode == "subtract":
        return M_q - M_b
    if mode == "add":
        return M_q + M_b
    raise ValueError(f"unknown combine mode {mode!r}")


class _ContiguousGrad(torch.autograd.Function):
    """Identity whose backward hands a contiguous gradient upstream.

    Some CPU batch-norm backward kernels misplace gradient entries when the
    incoming gradient is strided differently from the input, which is what the
    ``n x C`` transpose in :func:`decode` produces.
    """

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.contiguous()


class MaskDecoder(nn.Module):
    """5x5 convolution over ``[M, Z]`` followed by batch normalisation.

    ``bypass_norm`` skips the normalisation layer; it exists for engineered
    identity decoders and is never set by training.
    """

    kernel_size = 5

    def __init__(self, num_classes: int, feat_dim: int, momentum: float = 0.1,
                 init_std: float = 0.01, rng: Optional[np.random.Generator] = None,
                 dtype=torch.float32, bypass_norm: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        k = self.kernel_size
        self.conv = nn.Conv2d(num_classes + feat_dim, num_classes, k, padding=k // 2, dtype=dtype)
        self.norm = nn.BatchNorm2d(num_classes, momentum=momentum, dtype=dtype)
        self.bypass_norm = bypass_norm
        with torch.no_grad():
            w = torch.zeros_like(self.conv.weight)
            if rng is not None:
                w += torch.as_tensor(rng.normal(0.0, init_std, tuple(w.shape)), dtype=dtype)
            # start as a pass-through of the rectified logits
            w[range(num_classes), range(num_classes), k // 2, k // 2] += 1.0
            self.conv.weight.copy_(w)
            self.conv.bias.zero_()

    @classmethod
    def identity(cls, num_classes: int, feat_dim: int, dtype=torch.float32) -> "MaskDecoder":
        return cls(num_classes, feat_dim, dtype=dtype, bypass_norm=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        return y if self.bypass_norm else _ContiguousGrad.apply(self.norm(y))


def decode(M: torch.Tensor, Z: torch.Tensor, grid: PatchGrid, dec: MaskDecoder) -> torch.Tensor:
    """``M_o = F_dec([M, Z])``; accepts ``n x C`` / ``n x D`` or batched ``B x n x ...``."""
    single = M.ndim == 2
    if single:
        M, Z = M.unsqueeze(0), Z.unsqueeze(0)
    if M.shape[1] != grid.n or Z.shape[1] != grid.n:
        raise ShapeError(
            f"decoder inputs have {M.shape[1]} / {Z.shape[1]} patches, grid has {grid.n}"
        )
    B, n, C = M.shape
    x = torch.cat([M, Z], dim=2).transpose(1, 2).reshape(B, C + Z.shape[2], grid.h_p, grid.w_p)
    y = dec(x).reshape(B, C, n).transpose(1, 2)
    return y[0] if single else y


def sample_gumbel(shape, rng: np.random.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(rng.gumbel(0.0, 1.0, size=tuple(shape)), dtype=dtype)


def gumbel_mask(M_o: torch.Tensor, tau: float, hard: bool = True,
                rng: Optional[np.random.Generator] = None,
                noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Gumbel-Softmax over the class axis.

    ``hard=True`` emits one-hot rows in the forward pass and passes gradients
    through the soft sample (straight-through).  Pass ``noise`` to fix the Gumbel
    draw; otherwise it is sampled from ``rng``.
    """
    if not tau > 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_mask needs either rng or noise")
        noise = sample_gumbel(M_o.shape, rng, M_o.dtype)
    y = torch.softmax((M_o + noise) / tau, dim=-1)
    if not hard:
        return y
    index = y.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
    return y_hard - y.detach() + y


def upsample_labels(logits: torch.Tensor, grid: PatchGrid, size: tuple,
                    mode: str = "nearest") -> np.ndarray:
    """Patch logits ``n x C`` to an ``H x W`` label map (ties -> lowest class index)."""
    C = logits.shape[-1]
    maps = logits.detach().transpose(0, 1).reshape(1, C, grid.h_p, grid.w_p)
    if mode == "nearest":
        labels = maps.argmax(dim=1, keepdim=True).to(torch.float32)
        up = F.interpolate(labels, size=size, mode="nearest")
        return up[0, 0].to(torch.int64).numpy()
    if mode == "bilinear-logits":
        up = F.interpolate(maps, size=size, mode="bilinear", align_corners=False)
        return up[0].argmax(dim=0).numpy()
    raise ValueError(f"unknown upsample mode {mode!r}")
