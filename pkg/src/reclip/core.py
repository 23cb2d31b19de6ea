"""Shared domain types, shape contracts and seeded randomness."""

from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

IGNORE = 255


class ShapeError(ValueError):
    """Raised when an array does not have the shape a pipeline stage expects."""


class VocabularyMismatch(ValueError):
    """Raised when two objects were built against different class vocabularies."""


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple

    def __init__(self, names: Iterable[str]):
        names = tuple(str(n) for n in names)
        if len(names) < 2:
            raise ValueError(f"need at least 2 classes, got {len(names)}")
        if any(not n.strip() for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate class names: {dupes}")
        object.__setattr__(self, "names", names)

    @property
    def C(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    def check(self, other: "ClassVocabulary | str") -> None:
        fp = other if isinstance(other, str) else other.fingerprint
        if fp != self.fingerprint:
            raise VocabularyMismatch(
                f"vocabulary fingerprint {fp} does not match {self.fingerprint}"
            )

    def permuted(self, perm: Sequence[int]) -> "ClassVocabulary":
        return ClassVocabulary([self.names[i] for i in perm])


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"image {self.id!r}: expected HxWx3 pixels, got {px.shape}")
        if px.dtype.kind in "ui":
            px = px.astype(np.float32) / 255.0
        self.pixels = px.astype(np.float32, copy=False)
        if self.gt_mask is not None:
            gt = np.asarray(self.gt_mask)
            if gt.shape != px.shape[:2]:
                raise ShapeError(
                    f"image {self.id!r}: mask shape {gt.shape} != image shape {px.shape[:2]}"
                )
            self.gt_mask = gt.astype(np.int64, copy=False)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[:2]

    def validate_mask(self, C: int) -> None:
        if self.gt_mask is None:
            return
        bad = (self.gt_mask != IGNORE) & ((self.gt_mask < 0) | (self.gt_mask >= C))
        if bad.any():
            raise ValueError(
                f"image {self.id!r}: mask has labels outside 0..{C - 1} and {IGNORE}"
            )


@dataclass(frozen=True)
class PatchGrid:
    h_p: int
    w_p: int

    def __post_init__(self):
        if self.h_p <= 0 or self.w_p <= 0:
            raise ShapeError(f"patch grid must be positive, got {self.h_p}x{self.w_p}")

    @property
    def n(self) -> int:
        return self.h_p * self.w_p


def reshape_patches(flat, grid: PatchGrid):
    """Row-major ``n x K -> h_p x w_p x K``. Works for numpy arrays and torch tensors."""
    if flat.shape[0] != grid.n:
        raise ShapeError(
            f"expected n={grid.n} patch rows for a {grid.h_p}x{grid.w_p} grid, "
            f"got n={flat.shape[0]}"
        )
    return flat.reshape(grid.h_p, grid.w_p, *flat.shape[1:])


def flatten_patches(grid_arr, grid: Optional[PatchGrid] = None):
    """Inverse of :func:`reshape_patches`."""
    if grid is not None and tuple(grid_arr.shape[:2]) != (grid.h_p, grid.w_p):
        raise ShapeError(
            f"expected a {grid.h_p}x{grid.w_p} grid, got {tuple(grid_arr.shape[:2])}"
        )
    h, w = grid_arr.shape[:2]
    return grid_arr.reshape(h * w, *grid_arr.shape[2:])


_COMBINE_MODES = ("subtract", "add")
_UPSAMPLE_MODES = ("nearest", "bilinear-logits")


@dataclass
class RunConfig:
    tau_contrastive: float = 0.07
    tau_gumbel: float = 1.0
    crop_ratio: float = 1.0 / 6.0
    freq_threshold: float = 0.07
    prompt_length: int = 73
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    max_iters: int = 300
    batch_size: int = 8
    seed: int = 0
    bias_combine: str = "subtract"
    query_learnable: bool = False
    gumbel_hard: bool = True
    upsample: str = "bilinear-logits"
    crop_size: Optional[int] = None
    flip_prob: float = 0.5
    checkpoint_every: int = 0
    context_init_std: float = 0.02
    projection_init_std: float = 0.01
    norm_momentum: float = 0.1
    distance_bins: int = 10
    min_instance_pixels: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if not self.tau_contrastive > 0:
            raise ValueError("tau_contrastive must be positive")
        if not self.tau_gumbel > 0:
            raise ValueError("tau_gumbel must be positive")
        if not 0 < self.crop_ratio <= 1:
            raise ValueError("crop_ratio must be in (0, 1]")
        if not 0 <= self.freq_threshold < 1:
            raise ValueError("freq_threshold must be in [0, 1)")
        if self.prompt_length < 1:
            raise ValueError("prompt_length must be >= 1")
        if self.max_iters < 0 or self.batch_size < 1:
            raise ValueError("max_iters must be >= 0 and batch_size >= 1")
        if self.bias_combine not in _COMBINE_MODES:
            raise ValueError(f"bias_combine must be one of {_COMBINE_MODES}")
        if self.upsample not in _UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {_UPSAMPLE_MODES}")
        if self.distance_bins < 2:
            raise ValueError("distance_bins must be >= 2")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown RunConfig keys: {unknown}")
        return cls(**d)


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a path of names.

    Streams with different name paths come from distinct spawn keys of the same
    ``SeedSequence``, so they never share state.
    """
    key = tuple(_stream_key(str(n)) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class RngStreams:
    """Named per-consumer generators (prompt init, gumbel noise, augmentation, ...)."""

    seed: int
    streams: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self.streams:
            self.streams[name] = substream(self.seed, name)
        return self.streams[name]

    def state_dict(self) -> dict:
        return {k: g.bit_generator.state for k, g in self.streams.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, st in state.items():
            self[k].bit_generator.state = st


def array_fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(_to_numpy(a))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _to_numpy(a):
    if hasattr(a, "detach"):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def check_finite(name: str, arr) -> None:
    a = _to_numpy(arr)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains non-finite values")
