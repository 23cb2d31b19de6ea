"""Frozen vision-language encoder interface, query features and the toy encoder."""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .core import (
    ClassVocabulary,
    ImageRecord,
    PatchGrid,
    ShapeError,
    array_fingerprint,
    substream,
)

CLS_TOKEN = "[CLS]"

DEFAULT_TEMPLATES = (
    "a photo of a [CLS]",
    "a good photo of a [CLS]",
    "a large photo of a [CLS]",
    "a bad photo of a [CLS]",
)


@dataclass
class PatchFeatureMap:
    Z: torch.Tensor
    grid: PatchGrid

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Z.shape[0] != self.grid.n:
            raise ShapeError(
                f"Z must be n x D with n={self.grid.n}, got {tuple(self.Z.shape)}"
            )

    @property
    def D(self) -> int:
        return self.Z.shape[1]


@dataclass
class QueryTextFeatures:
    W_q: torch.Tensor
    templates: tuple = ()
    vocab_fingerprint: str = ""

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.W_q)


class FrozenEncoder(abc.ABC):
    """Contract every image/text encoder pair satisfies.

    Implementations never change their own parameters; all learnable state
    lives outside the encoder and is passed in (e.g. a prompt context).
    """

    patch_size: int
    dim: int
    word_dim: int
    pe_dim: int
    max_context_length: int = 73
    #: side length crops are resized to before global encoding; None keeps native size
    global_input_size: Optional[int] = None

    @abc.abstractmethod
    def encode_image_patches(self, image: ImageRecord) -> PatchFeatureMap:
        ...

    @abc.abstractmethod
    def encode_image_global(self, image: ImageRecord) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def encode_text(self, text: str) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def encode_prompt(self, context: torch.Tensor, names: Sequence[str]) -> torch.Tensor:
        """Encode ``[v_1 .. v_L][name]`` for every name; differentiable in ``context``."""

    @abc.abstractmethod
    def positional_embedding(self, grid: PatchGrid) -> torch.Tensor:
        """Frozen per-patch positional embedding (class-token slot excluded), ``n x pe_dim``."""

    @abc.abstractmethod
    def state_fingerprint(self) -> str:
        ...

    def grid_for(self, height: int, width: int) -> PatchGrid:
        if height < self.patch_size or width < self.patch_size:
            raise ShapeError(
                f"image {height}x{width} smaller than patch size {self.patch_size}"
            )
        return PatchGrid(height // self.patch_size, width // self.patch_size)


def _normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def build_query_features(
    vocab: ClassVocabulary,
    templates: Sequence[str],
    enc: FrozenEncoder,
    min_norm: float = 1e-8,
) -> QueryTextFeatures:
    """Template-ensembled, unit-norm text features, one row per class."""
    templates = tuple(templates)
    if not templates:
        raise ValueError("at least one template is required")
    for t in templates:
        if t.count(CLS_TOKEN) != 1:
            raise ValueError(f"template {t!r} must contain exactly one {CLS_TOKEN} placeholder")
    rows = []
    with torch.no_grad():
        for name in vocab.names:
            embs = torch.stack([enc.encode_text(t.replace(CLS_TOKEN, name)) for t in templates])
            mean = embs.mean(dim=0)
            norm = mean.norm()
            if norm < min_norm:
                raise ValueError(
                    f"template ensemble for class {name!r} is degenerate (norm {float(norm):.2e})"
                )
            rows.append(mean / norm)
    return QueryTextFeatures(torch.stack(rows), templates, vocab.fingerprint)


def query_logits(Z, W_q) -> torch.Tensor:
    """Query logit map ``M_q = Z W_q^T`` (a 1x1 conv head with text weights)."""
    if isinstance(Z, PatchFeatureMap):
        Z = Z.Z
    if isinstance(W_q, QueryTextFeatures):
        W_q = W_q.W_q
    if Z.shape[-1] != W_q.shape[-1]:
        raise ShapeError(f"feature dim {Z.shape[-1]} != text dim {W_q.shape[-1]}")
    return Z @ W_q.transpose(-1, -2)


# --------------------------------------------------------------------------
# toy encoder


def _orthonormal(rows: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:rows].copy()


DEFAULT_PALETTE = (
    (0.10, 0.10, 0.10),
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.20),
    (0.20, 0.30, 0.90),
    (0.90, 0.85, 0.20),
    (0.80, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.60, 0.25),
)


@dataclass
class ToyEncoderSpec:
    """Parameters of the synthetic stand-in encoder.

    Patch features are ``s_i * (p_c + sum_j A[c, j] p_j) + sum_j b_j p_j + g u + noise``
    where ``c`` is the dominant class of patch ``i``, ``p`` the class prototypes, ``A``
    the ``class_confusion`` matrix, ``b`` the ``class_prior`` (a position-independent
    preference that dominates where the decay ``s_i`` is small), ``u`` a fixed unit
    direction outside the prototype span shared by every patch (``common_scale`` g,
    lowers all cosine similarities without touching the logits).  Noise is split into a
    component inside the prototype span (``noise_scale``, causes label flips) and one
    orthogonal to it (``nuisance_scale``).
    """

    class_names: tuple
    D: int = 32
    patch_size: int = 16
    prototypes: Optional[np.ndarray] = None
    palette: Optional[np.ndarray] = None
    class_confusion: Optional[np.ndarray] = None
    class_prior: Optional[np.ndarray] = None
    decay_strength: float = 0.0
    decay_power: float = 2.0
    noise_scale: float = 0.0
    nuisance_scale: float = 0.0
    common_scale: float = 0.0
    border_drift: Optional[np.ndarray] = None
    pe_frequencies: int = 8
    seed: int = 0

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        C = len(self.class_names)
        if self.prototypes is None:
            self.prototypes = _orthonormal(C, self.D, substream(self.seed, "toy-prototypes"))
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape != (C, self.D):
            raise ShapeError(f"prototypes must be {C}x{self.D}, got {self.prototypes.shape}")
        if np.linalg.matrix_rank(self.prototypes) < C:
            raise ValueError("toy prototypes must be linearly independent")
        if self.palette is None:
            if C > len(DEFAULT_PALETTE):
                raise ValueError(f"default palette supports at most {len(DEFAULT_PALETTE)} classes")
            self.palette = np.array(DEFAULT_PALETTE[:C])
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.class_confusion is None:
            self.class_confusion = np.zeros((C, C))
        self.class_confusion = np.asarray(self.class_confusion, dtype=np.float64)
        if self.class_confusion.shape != (C, C):
            raise ShapeError(f"class_confusion must be {C}x{C}")
        if self.class_prior is None:
            self.class_prior = np.zeros(C)
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        if self.class_prior.shape != (C,):
            raise ShapeError(f"class_prior must have length {C}")
        if self.border_drift is None:
            self.border_drift = np.zeros(C)
        self.border_drift = np.asarray(self.border_drift, dtype=np.float64)
        if self.border_drift.shape != (C,):
            raise ShapeError(f"border_drift must have length {C}")
        if 4 * self.pe_frequencies != self.D:
            raise ValueError("toy positional embedding needs D == 4 * pe_frequencies")

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "D": self.D,
            "patch_size": self.patch_size,
            "prototypes": self.prototypes.tolist(),
            "palette": self.palette.tolist(),
            "class_confusion": self.class_confusion.tolist(),
            "class_prior": self.class_prior.tolist(),
            "decay_strength": self.decay_strength,
            "decay_power": self.decay_power,
            "noise_scale": self.noise_scale,
            "nuisance_scale": self.nuisance_scale,
            "common_scale": self.common_scale,
            "border_drift": self.border_drift.tolist(),
            "pe_frequencies": self.pe_frequencies,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyEncoderSpec":
        d = dict(d)
        for k in ("prototypes", "palette", "class_confusion", "class_prior", "border_drift"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)

    @classmethod
    def with_confusion(cls, class_names, pairs=(), **kw) -> "ToyEncoderSpec":
        """Build a spec from ``(source, target, alpha)`` confusion triples."""
        C = len(class_names)
        A = np.zeros((C, C))
        for src, dst, alpha in pairs:
            A[src, dst] = alpha
        return cls(tuple(class_names), class_confusion=A, **kw)


def patch_distance(grid: PatchGrid) -> np.ndarray:
    """Patch-centre distance to the image centre over half the diagonal, in [0, 1)."""
    rows = np.arange(grid.h_p) + 0.5 - grid.h_p / 2
    cols = np.arange(grid.w_p) + 0.5 - grid.w_p / 2
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    half_diag = 0.5 * math.hypot(grid.h_p, grid.w_p)
    return (np.sqrt(yy**2 + xx**2) / half_diag).reshape(-1)


def spatial_decay(grid: PatchGrid, strength: float, power: float = 2.0) -> np.ndarray:
    """Per-patch scale ``1 - strength * d**power`` with d from :func:`patch_distance`."""
    return 1.0 - strength * patch_distance(grid) ** power


def sinusoidal_pe(grid: PatchGrid, frequencies: int) -> np.ndarray:
    """2-D sinusoidal embedding of normalised patch coordinates, ``n x 4*frequencies``."""
    ys = (np.arange(grid.h_p) + 0.5) / grid.h_p * 2 - 1
    xs = (np.arange(grid.w_p) + 0.5) / grid.w_p * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy, xx = yy.reshape(-1, 1), xx.reshape(-1, 1)
    f = (np.arange(frequencies) + 1) * (math.pi / 2)
    return np.concatenate(
        [np.sin(yy * f), np.cos(yy * f), np.sin(xx * f), np.cos(xx * f)], axis=1
    ) / math.sqrt(2 * frequencies)


class ToyEncoder(FrozenEncoder):
    """Deterministic synthetic encoder with injectable class and space bias.

    Pixels are mapped to classes by nearest palette colour; each patch takes the
    feature of its dominant class.  The text side maps a string to the prototype of
    the (longest) class name it mentions, and a prompt ``[v_1..v_L][name]`` to
    ``normalize(mean(v)) + prototype(name)``.
    """

    max_context_length = 73

    def __init__(self, spec: ToyEncoderSpec, dtype=torch.float32):
        self.spec = spec
        self.dtype = dtype
        self.patch_size = spec.patch_size
        self.dim = spec.D
        self.word_dim = spec.D
        self.pe_dim = 4 * spec.pe_frequencies
        self._protos = torch.as_tensor(spec.prototypes, dtype=dtype)
        self._content = spec.prototypes + spec.class_confusion @ spec.prototypes
        q, _ = np.linalg.qr(spec.prototypes.T)
        self._span = q
        self._complement = np.eye(spec.D) - q @ q.T
        # shared direction: first complement basis vector from a fixed draw
        g = self._complement @ substream(spec.seed, "toy-common").standard_normal(spec.D)
        self._common = g / np.linalg.norm(g)
        self._offset = spec.class_prior @ spec.prototypes + spec.common_scale * self._common

    @property
    def class_names(self) -> tuple:
        return self.spec.class_names

    def with_dtype(self, dtype) -> "ToyEncoder":
        return ToyEncoder(self.spec, dtype=dtype)

    def pixel_classes(self, pixels: np.ndarray) -> np.ndarray:
        d = ((pixels[:, :, None, :] - self.spec.palette[None, None]) ** 2).sum(-1)
        return d.argmin(-1)

    def patch_classes(self, pixels: np.ndarray) -> tuple:
        grid = self.grid_for(*pixels.shape[:2])
        P, C = self.patch_size, len(self.class_names)
        cls = self.pixel_classes(pixels)[: grid.h_p * P, : grid.w_p * P]
        blocks = cls.reshape(grid.h_p, P, grid.w_p, P).transpose(0, 2, 1, 3).reshape(grid.n, P * P)
        counts = np.stack([(blocks == c).sum(1) for c in range(C)], axis=1)
        return counts.argmax(1), grid

    def _noise(self, image_id: str, n: int) -> np.ndarray:
        s = self.spec
        if s.noise_scale == 0 and s.nuisance_scale == 0:
            return np.zeros((n, s.D))
        rng = substream(s.seed, "toy-noise", image_id)
        g = rng.standard_normal((n, s.D))
        in_span = (g @ self._span) @ self._span.T
        out_span = g @ self._complement.T
        k = self._span.shape[1]
        # scale so the expected norm of each part equals its configured scale
        return (
            s.noise_scale * in_span / math.sqrt(k)
            + s.nuisance_scale * out_span / math.sqrt(max(s.D - k, 1))
        )

    def encode_image_patches(self, image: ImageRecord) -> PatchFeatureMap:
        cls, grid = self.patch_classes(image.pixels)
        decay = spatial_decay(grid, self.spec.decay_strength, self.spec.decay_power)
        feats = decay[:, None] * self._content[cls] + self._offset
        if self.spec.border_drift.any():
            d = patch_distance(grid) ** self.spec.decay_power
            feats = feats + d[:, None] * (self.spec.border_drift @ self.spec.prototypes)
        feats = feats + self._noise(image.id, grid.n)
        return PatchFeatureMap(torch.as_tensor(feats, dtype=self.dtype), grid)

    def encode_image_global(self, image: ImageRecord) -> torch.Tensor:
        cls = self.pixel_classes(image.pixels)
        frac = np.bincount(cls.reshape(-1), minlength=len(self.class_names)) / cls.size
        return torch.as_tensor(frac, dtype=self.dtype) @ self._protos

    def _name_index(self, text: str) -> int:
        hits = [(len(n), i) for i, n in enumerate(self.class_names) if n in text]
        if not hits:
            raise KeyError(f"toy encoder knows no class name in {text!r}")
        return max(hits)[1]

    def encode_text(self, text: str) -> torch.Tensor:
        return self._protos[self._name_index(text)].clone()

    def encode_prompt(self, context: torch.Tensor, names: Sequence[str]) -> torch.Tensor:
        if context.shape[0] > self.max_context_length:
            raise ValueError(
                f"prompt context length {context.shape[0]} exceeds {self.max_context_length}"
            )
        idx = [self._name_index(n) for n in names]
        mean = context.mean(dim=0)
        norm = mean.norm()
        shared = mean / norm if norm > 0 else torch.zeros_like(mean)
        return shared.unsqueeze(0) + self._protos[idx].to(context.dtype)

    def positional_embedding(self, grid: PatchGrid) -> torch.Tensor:
        return torch.as_tensor(sinusoidal_pe(grid, self.spec.pe_frequencies), dtype=self.dtype)

    def state_fingerprint(self) -> str:
        s = self.spec
        return array_fingerprint(
            s.prototypes, s.palette, s.class_confusion, s.class_prior, s.border_drift,
            np.array([s.decay_strength, s.decay_power, s.noise_scale, s.nuisance_scale,
                      s.common_scale, s.seed]),
        )

    def baseline_labels(self, image: ImageRecord, W_q) -> np.ndarray:
        """Patch-grid argmax of the query logits (no rectification)."""
        fm = self.encode_image_patches(image)
        return query_logits(fm, W_q).argmax(dim=1).reshape(fm.grid.h_p, fm.grid.w_p).numpy()
