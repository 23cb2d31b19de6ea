"""The trainable rectification model and single-image inference."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (
    DEFAULT_TEMPLATES,
    FrozenEncoder,
    QueryTextFeatures,
    build_query_features,
    query_logits,
)
from .bias import (
    PositionalProjection,
    ReferencePrompt,
    bias_logits,
    encode_positional,
    encode_reference,
    pool_expand_class,
    pool_expand_space,
)
from .core import ClassVocabulary, ImageRecord, PatchGrid, RngStreams, RunConfig
from .rectify import MaskDecoder, decode, rectify_logits, upsample_labels

ABLATIONS = ("none", "class", "space")


class RectificationModel(nn.Module):
    """Learnable state (reference context, PE projection, decoder) around a frozen encoder.

    The encoder and the fixed query features are held by reference and are not
    registered as submodules, so they never appear in ``parameters()``.
    """

    def __init__(self, vocab: ClassVocabulary, encoder: FrozenEncoder,
                 config: Optional[RunConfig] = None,
                 templates: Sequence[str] = DEFAULT_TEMPLATES,
                 rngs: Optional[RngStreams] = None, dtype=torch.float32):
        super().__init__()
        self.vocab = vocab
        self.encoder = encoder
        self.config = config or RunConfig()
        cfg = self.config
        rngs = rngs if rngs is not None else RngStreams(cfg.seed)
        self.query = build_query_features(vocab, templates, encoder)
        self.reference = ReferencePrompt(
            cfg.prompt_length, encoder.word_dim, cfg.context_init_std, rngs["prompt-init"], dtype)
        self.projection = PositionalProjection(
            encoder.pe_dim, encoder.dim, cfg.projection_init_std, rngs["projection-init"], dtype)
        self.decoder = MaskDecoder(
            vocab.C, encoder.dim, cfg.norm_momentum, rng=rngs["decoder-init"], dtype=dtype)
        self.query_prompt = (
            ReferencePrompt(cfg.prompt_length, encoder.word_dim, cfg.context_init_std,
                            rngs["query-init"], dtype)
            if cfg.query_learnable else None
        )

    @classmethod
    def baseline(cls, vocab, encoder, config=None, templates=DEFAULT_TEMPLATES,
                 dtype=torch.float32) -> "RectificationModel":
        """Zero bias and an identity decoder: inference reduces to ``argmax(M_q)``."""
        model = cls(vocab, encoder, (config or RunConfig()).replace(query_learnable=False),
                    templates, dtype=dtype)
        with torch.no_grad():
            model.projection.linear.weight.zero_()
            model.projection.linear.bias.zero_()
        model.decoder = MaskDecoder.identity(vocab.C, encoder.dim, dtype=dtype)
        return model.eval()

    def decay_groups(self):
        """Parameter groups; normalisation parameters are excluded from weight decay."""
        norm = list(self.decoder.norm.parameters())
        norm_ids = {id(p) for p in norm}
        rest = [p for p in self.parameters() if id(p) not in norm_ids]
        return [
            {"params": rest, "weight_decay": self.config.weight_decay},
            {"params": norm, "weight_decay": 0.0},
        ]

    def query_features(self) -> torch.Tensor:
        if self.query_prompt is None:
            return self.query.W_q
        W = self.encoder.encode_prompt(self.query_prompt.shared_context, self.vocab.names)
        return W / W.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def reference_features(self) -> torch.Tensor:
        return encode_reference(self.reference, self.vocab, self.encoder)

    def positional_features(self, grid: PatchGrid) -> torch.Tensor:
        p = self.encoder.positional_embedding(grid).to(self.projection.linear.weight.dtype)
        return encode_positional(p, self.projection, grid.n)

    def bias_map(self, grid: PatchGrid, ablate: str = "none",
                 W_r: Optional[torch.Tensor] = None) -> torch.Tensor:
        if ablate not in ABLATIONS:
            raise ValueError(f"ablate must be one of {ABLATIONS}")
        W_p = self.positional_features(grid)
        W_r = self.reference_features() if W_r is None else W_r
        if ablate == "class":
            W_p = pool_expand_space(W_p)
        elif ablate == "space":
            W_r = pool_expand_class(W_r)
        return bias_logits(W_p, W_r)

    def forward(self, Z: torch.Tensor, grid: PatchGrid, ablate: str = "none",
                W_r: Optional[torch.Tensor] = None) -> dict:
        """Logit maps for ``n x D`` or ``B x n x D`` patch features."""
        W_q = self.query_features().to(Z.dtype)
        M_q = query_logits(Z, W_q)
        M_b = self.bias_map(grid, ablate, W_r).to(Z.dtype)
        if M_q.ndim == 3:
            M_b = M_b.unsqueeze(0).expand_as(M_q)
        M = rectify_logits(M_q, M_b, self.config.bias_combine)
        M_o = decode(M, Z, grid, self.decoder)
        return {"W_q": W_q, "M_q": M_q, "M_b": M_b, "M": M, "M_o": M_o}


def infer(image: ImageRecord, model: RectificationModel, ablate: str = "none",
          upsample: Optional[str] = None, W_r: Optional[torch.Tensor] = None) -> np.ndarray:
    """Pixel label map from ``argmax(M_o)``; deterministic, no Gumbel noise."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fm = model.encoder.encode_image_patches(image)
            out = model(fm.Z.to(model.projection.linear.weight.dtype), fm.grid, ablate, W_r)
    finally:
        model.train(was_training)
    mode = upsample or model.config.upsample
    return upsample_labels(out["M_o"], fm.grid, image.shape, mode)


def baseline_infer(image: ImageRecord, encoder: FrozenEncoder, W_q: QueryTextFeatures,
                   upsample: str = "nearest") -> np.ndarray:
    """Direct segmentation: ``argmax(Z W_q^T)`` upsampled to pixels."""
    with torch.no_grad():
        fm = encoder.encode_image_patches(image)
        M_q = query_logits(fm, W_q.W_q.to(fm.Z.dtype))
    return upsample_labels(M_q, fm.grid, image.shape, upsample)
