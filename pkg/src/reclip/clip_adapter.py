"""Frozen encoder backed by a Hugging Face ``CLIPModel`` checkpoint.

Dense patch features use the value path of the last vision block (value and
output projections applied per token, query/key attention dropped), followed by
the final layer norm and the visual projection.  Requires ``transformers``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FrozenEncoder, PatchFeatureMap
from .core import ImageRecord, PatchGrid, array_fingerprint

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class HFTokenizer:
    """Adapter exposing ``encode`` (no special tokens) and the start/end ids."""

    def __init__(self, tok):
        self.tok = tok
        self.bos_id = tok.bos_token_id
        self.eos_id = tok.eos_token_id
        self.pad_id = tok.pad_token_id if tok.pad_token_id is not None else tok.eos_token_id

    def encode(self, text: str) -> list:
        return list(self.tok(text, add_special_tokens=False)["input_ids"])


def _attention(layer, x: torch.Tensor, causal: bool) -> torch.Tensor:
    attn = layer.self_attn
    B, T, W = x.shape
    heads = attn.num_heads
    q = attn.q_proj(x).view(B, T, heads, -1).transpose(1, 2)
    k = attn.k_proj(x).view(B, T, heads, -1).transpose(1, 2)
    v = attn.v_proj(x).view(B, T, heads, -1).transpose(1, 2)
    out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
    return attn.out_proj(out.transpose(1, 2).reshape(B, T, W))


def _block(layer, x: torch.Tensor, causal: bool) -> torch.Tensor:
    x = x + _attention(layer, layer.layer_norm1(x), causal)
    return x + layer.mlp(layer.layer_norm2(x))


class ClipEncoder(FrozenEncoder):
    max_context_length = 73

    def __init__(self, model, tokenizer, global_input_size: Optional[int] = 224,
                 source: Optional[str] = None):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.source = source
        self.global_input_size = global_input_size
        vcfg, tcfg = model.config.vision_config, model.config.text_config
        self.patch_size = vcfg.patch_size
        self.dim = model.config.projection_dim
        self.word_dim = tcfg.hidden_size
        self.pe_dim = vcfg.hidden_size
        self.text_positions = tcfg.max_position_embeddings
        self.max_context_length = min(73, self.text_positions - 4)

    @classmethod
    def from_pretrained(cls, path: str, global_input_size: Optional[int] = 224) -> "ClipEncoder":
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(path)
        return cls(model, HFTokenizer(CLIPTokenizer.from_pretrained(path)), global_input_size, path)

    def describe(self) -> dict:
        if self.source is None:
            raise ValueError("only encoders loaded from a checkpoint path can be described")
        return {"kind": "clip", "checkpoint": self.source,
                "global_input_size": self.global_input_size}

    @classmethod
    def from_description(cls, desc: dict) -> "ClipEncoder":
        return cls.from_pretrained(desc["checkpoint"], desc.get("global_input_size", 224))

    # -- vision ----------------------------------------------------------

    def _pixels(self, image: ImageRecord, size: Optional[int] = None) -> torch.Tensor:
        x = torch.as_tensor(image.pixels, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
        if size is not None:
            x = F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False)
        mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
        return (x - mean) / std

    def _patch_pe(self, grid: PatchGrid) -> torch.Tensor:
        emb = self.model.vision_model.embeddings
        pe = emb.position_embedding.weight[1:]
        side = int(math.isqrt(pe.shape[0]))
        pe = pe.reshape(1, side, side, -1).permute(0, 3, 1, 2)
        if (grid.h_p, grid.w_p) != (side, side):
            pe = F.interpolate(pe, size=(grid.h_p, grid.w_p), mode="bicubic", align_corners=False)
        return pe.permute(0, 2, 3, 1).reshape(grid.n, -1)

    def _tokens(self, x: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        emb = self.model.vision_model.embeddings
        patches = emb.patch_embedding(x).flatten(2).transpose(1, 2)
        cls_tok = emb.class_embedding.view(1, 1, -1) + emb.position_embedding.weight[:1]
        return torch.cat([cls_tok, patches + self._patch_pe(grid).unsqueeze(0)], dim=1)

    @torch.no_grad()
    def encode_image_patches(self, image: ImageRecord) -> PatchFeatureMap:
        grid = self.grid_for(*image.shape)
        H, W = grid.h_p * self.patch_size, grid.w_p * self.patch_size
        x = self._pixels(image)[:, :, :H, :W]
        vm = self.model.vision_model
        h = vm.pre_layrnorm(self._tokens(x, grid))
        layers = vm.encoder.layers
        for layer in layers[:-1]:
            h = _block(layer, h, causal=False)
        last = layers[-1]
        v = last.self_attn.out_proj(last.self_attn.v_proj(last.layer_norm1(h)))
        feats = self.model.visual_projection(vm.post_layernorm(v[:, 1:]))
        return PatchFeatureMap(feats[0], grid)

    @torch.no_grad()
    def encode_image_global(self, image: ImageRecord) -> torch.Tensor:
        size = self.global_input_size
        x = self._pixels(image, size)
        grid = PatchGrid(x.shape[2] // self.patch_size, x.shape[3] // self.patch_size)
        vm = self.model.vision_model
        h = vm.pre_layrnorm(self._tokens(x[:, :, : grid.h_p * self.patch_size,
                                           : grid.w_p * self.patch_size], grid))
        for layer in vm.encoder.layers:
            h = _block(layer, h, causal=False)
        return self.model.visual_projection(vm.post_layernorm(h[:, 0]))[0]

    # -- text ------------------------------------------------------------

    def _text_forward(self, embeds: torch.Tensor, eos_index: Sequence[int]) -> torch.Tensor:
        tm = self.model.text_model
        T = embeds.shape[1]
        h = embeds + tm.embeddings.position_embedding.weight[:T].unsqueeze(0)
        for layer in tm.encoder.layers:
            h = _block(layer, h, causal=True)
        h = tm.final_layer_norm(h)
        pooled = h[torch.arange(h.shape[0]), torch.as_tensor(eos_index)]
        return self.model.text_projection(pooled)

    def _ids(self, text: str) -> list:
        ids = [self.tokenizer.bos_id] + self.tokenizer.encode(text) + [self.tokenizer.eos_id]
        if len(ids) > self.text_positions:
            raise ValueError(f"text {text!r} exceeds {self.text_positions} tokens")
        return ids

    @torch.no_grad()
    def encode_text(self, text: str) -> torch.Tensor:
        ids = self._ids(text)
        tok = self.model.text_model.embeddings.token_embedding
        embeds = tok(torch.as_tensor([ids]))
        return self._text_forward(embeds, [len(ids) - 1])[0]

    def encode_prompt(self, context: torch.Tensor, names: Sequence[str]) -> torch.Tensor:
        L = context.shape[0]
        if L > self.max_context_length:
            raise ValueError(f"prompt context length {L} exceeds {self.max_context_length}")
        tok = self.model.text_model.embeddings.token_embedding
        out_dtype = context.dtype
        context = context.to(tok.weight.dtype)
        rows, eos = [], []
        T = self.text_positions
        for name in names:
            name_ids = self.tokenizer.encode(name)
            n = 1 + L + len(name_ids) + 1
            if n > T:
                raise ValueError(f"prompt for {name!r} needs {n} tokens, limit is {T}")
            pad = [self.tokenizer.pad_id] * (T - n)
            head = tok(torch.as_tensor([self.tokenizer.bos_id]))
            tail = tok(torch.as_tensor(name_ids + [self.tokenizer.eos_id] + pad))
            rows.append(torch.cat([head, context, tail]))
            eos.append(n - 1)
        return self._text_forward(torch.stack(rows), eos).to(out_dtype)

    def positional_embedding(self, grid: PatchGrid) -> torch.Tensor:
        with torch.no_grad():
            return self._patch_pe(grid).clone()

    def state_fingerprint(self) -> str:
        sd = self.model.state_dict()
        return array_fingerprint(*(sd[k].float().numpy() for k in sorted(sd)),
                                 np.array([self.global_input_size or 0]))
