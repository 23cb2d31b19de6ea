"""Synthetic coloured-shape scenes with known class layout."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence

import numpy as np

from .core import ImageRecord, substream

if TYPE_CHECKING:
    from .backbone import ToyEncoderSpec


def draw_scene(
    rng: np.random.Generator,
    palette: np.ndarray,
    size: int = 128,
    n_objects: tuple = (1, 3),
    object_size: tuple = (0.25, 0.5),
    classes: Optional[Sequence[int]] = None,
    background: int = 0,
    pixel_noise: float = 0.02,
):
    """Return ``(pixels, mask)`` for one scene of rectangles and ellipses.

    Objects are placed uniformly, so some land in the centre and some touch the
    border; later objects occlude earlier ones.
    """
    C = len(palette)
    fg = [c for c in range(C) if c != background] if classes is None else list(classes)
    mask = np.full((size, size), background, dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    k = rng.integers(n_objects[0], n_objects[1] + 1)
    for _ in range(k):
        c = fg[rng.integers(len(fg))]
        h = int(rng.uniform(*object_size) * size)
        w = int(rng.uniform(*object_size) * size)
        top = rng.integers(0, size - h + 1)
        left = rng.integers(0, size - w + 1)
        if rng.random() < 0.5:
            mask[top : top + h, left : left + w] = c
        else:
            cy, cx = top + h / 2, left + w / 2
            inside = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1
            mask[inside] = c
    pixels = palette[mask] + pixel_noise * rng.standard_normal((size, size, 3))
    return np.clip(pixels, 0, 1).astype(np.float32), mask


def make_dataset(
    n: int,
    palette: np.ndarray,
    seed: int = 0,
    prefix: str = "toy",
    **kw,
) -> List[ImageRecord]:
    out = []
    for i in range(n):
        image_id = f"{prefix}-{i:05d}"
        rng = substream(seed, "scene", image_id)
        pixels, mask = draw_scene(rng, np.asarray(palette), **kw)
        out.append(ImageRecord(image_id, pixels, mask))
    return out


def single_object_scene(
    palette: np.ndarray,
    cls: int,
    center: tuple,
    radius: int,
    size: int = 128,
    background: int = 0,
    image_id: str = "single",
) -> ImageRecord:
    """A single disc of class ``cls`` centred at ``center`` (row, col)."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.full((size, size), background, dtype=np.int64)
    mask[(yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2] = cls
    pixels = np.asarray(palette)[mask].astype(np.float32)
    return ImageRecord(image_id, pixels, mask)


TOY_CLASSES = ("background", "sheep", "cow")


@dataclass
class ToyFixture:
    spec: "ToyEncoderSpec"
    train: List[ImageRecord]
    val: List[ImageRecord]

    @property
    def class_names(self) -> tuple:
        return self.spec.class_names


def dual_bias_spec(class_bias: bool = True, space_bias: bool = True, seed: int = 0,
                   background_lean: float = 0.6):
    """Toy encoder carrying a class bias, a space bias, or both.

    Class bias: sheep features contain 0.6 of the cow prototype and every patch
    leans towards cow, so sheep regions fall just on the cow side of the decision
    boundary.  Space bias: class content shrinks towards the image border while
    every patch leans towards background, so objects fade into background there.
    A large shared feature component keeps cosine similarities high and close
    together, as they are for real CLIP features.
    """
    from .backbone import ToyEncoderSpec

    pairs = [(1, 2, 0.6)] if class_bias else []
    prior = [background_lean if space_bias else 0.0, 0.0, 0.45 if class_bias else 0.0]
    return ToyEncoderSpec.with_confusion(
        TOY_CLASSES, pairs,
        class_prior=prior,
        decay_strength=0.8 if space_bias else 0.0,
        noise_scale=0.05,
        common_scale=8.0,
        seed=seed,
    )


def toy_fixture(n_train: int = 200, n_val: int = 60, size: int = 128, seed: int = 0,
                class_bias: bool = True, space_bias: bool = True, **spec_kw) -> ToyFixture:
    spec = dual_bias_spec(class_bias, space_bias, seed, **spec_kw)
    train = make_dataset(n_train, spec.palette, seed=seed, prefix="train", size=size)
    val = make_dataset(n_val, spec.palette, seed=seed + 1, prefix="val", size=size)
    return ToyFixture(spec, train, val)


def write_dataset(root, records: Sequence[ImageRecord], class_names: Sequence[str],
                  split: str = "train") -> Path:
    """Write images/, masks/, classes.txt and ``<split>.txt`` under ``root``."""
    from .io import write_image, write_mask

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(class_names) + "\n")
    for r in records:
        write_image(root / "images" / f"{r.id}.png", r.pixels)
        if r.gt_mask is not None:
            write_mask(root / "masks" / f"{r.id}.png", r.gt_mask)
    split_file = root / f"{split}.txt"
    split_file.write_text("".join(f"{r.id}\n" for r in records))
    return split_file
