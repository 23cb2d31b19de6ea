"""Image, index-mask and dataset-layout I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from .core import IGNORE, ClassVocabulary, ImageRecord

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    """Input data that cannot be loaded as described."""


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, pixels: np.ndarray) -> None:
    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(px).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: index mask must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DatasetError(f"{path}: mask must be 2-D, got shape {m.shape}")
    if m.size and (m.min() < 0 or m.max() > 255):
        raise DatasetError(f"{path}: mask values must fit in 8 bits")
    Image.fromarray(m.astype(np.uint8)).save(path)


def read_classes(path) -> ClassVocabulary:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"classes file not found: {path}")
    names = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    return ClassVocabulary(names)


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find(directory: Path, stem: str) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        p = directory / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


@dataclass
class DatasetLayout:
    """``root/images``, optional ``root/masks``, a classes file and split id lists."""

    root: Path
    classes_file: str = "classes.txt"

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root not found: {self.root}")

    @property
    def vocabulary(self) -> ClassVocabulary:
        return read_classes(self.root / self.classes_file)

    def ids(self, split: str) -> List[str]:
        f = self.root / f"{split}.txt"
        if not f.is_file():
            raise DatasetError(f"split file not found: {f}")
        return [ln.strip() for ln in f.read_text().splitlines() if ln.strip()]

    def load(self, split: str, with_masks: bool = True) -> List[ImageRecord]:
        C = self.vocabulary.C
        out = []
        for image_id in self.ids(split):
            img = _find(self.root / "images", image_id)
            if img is None:
                raise DatasetError(f"split {split!r}: no image for id {image_id!r} in {self.root / 'images'}")
            mask = None
            if with_masks:
                mpath = _find(self.root / "masks", image_id)
                if mpath is not None:
                    mask = read_mask(mpath)
                    bad = (mask >= C) & (mask != IGNORE)
                    if bad.any():
                        raise DatasetError(f"{mpath}: mask values must be < {C} or {IGNORE}")
            out.append(ImageRecord(image_id, read_image(img), mask))
        return out


def paired_masks(pred_dir, gt_dir):
    """Match prediction and ground-truth mask files by basename.

    Returns ``[(stem, pred_path, gt_path)]``; raises listing every unmatched file.
    """
    preds = {p.stem: p for p in list_images(pred_dir)}
    gts = {p.stem: p for p in list_images(gt_dir)}
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        lines = [f"  prediction without ground truth: {preds[s]}" for s in only_pred]
        lines += [f"  ground truth without prediction: {gts[s]}" for s in only_gt]
        raise DatasetError("unmatched mask files:\n" + "\n".join(lines))
    if not preds:
        raise DatasetError(f"no mask files in {pred_dir}")
    return [(s, preds[s], gts[s]) for s in sorted(preds)]


def load_mask_pairs(pred_dir, gt_dir, C: int):
    preds, gts = [], []
    for _, pp, gp in paired_masks(pred_dir, gt_dir):
        p, g = read_mask(pp), read_mask(gp)
        if p.shape != g.shape:
            raise DatasetError(f"size mismatch: {pp} is {p.shape}, {gp} is {g.shape}")
        if p.size and p.max() >= C:
            raise DatasetError(f"{pp}: predicted labels must be < {C}")
        if ((g >= C) & (g != IGNORE)).any():
            raise DatasetError(f"{gp}: ground-truth labels must be < {C} or {IGNORE}")
        preds.append(p)
        gts.append(g)
    return preds, gts
