"""Image-level multi-label hypotheses from sliding-window crop classification."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FrozenEncoder, QueryTextFeatures
from .core import ImageRecord

CACHE_VERSION = 1


@dataclass(frozen=True)
class CropSpec:
    window_h: int
    window_w: int
    stride_h: int
    stride_w: int
    boxes: Tuple[Tuple[int, int, int, int], ...]  # (top, left, bottom, right), exclusive

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class LabelHypothesis:
    classes: Tuple[int, ...]
    freq: np.ndarray
    n_crops: int
    fallback: bool = False

    def __contains__(self, k: int) -> bool:
        return k in self.classes

    def __len__(self) -> int:
        return len(self.classes)


def _positions(extent: int, window: int, stride: int) -> List[int]:
    pos = list(range(0, extent - window + 1, stride))
    if pos[-1] + window < extent:
        pos.append(extent - window)
    return pos


def enumerate_crops(H: int, W: int, r: float) -> CropSpec:
    """Windows of ``ceil(r*H) x ceil(r*W)`` stepped by half a window, border-clamped."""
    if not 0 < r <= 1:
        raise ValueError(f"crop ratio must be in (0, 1], got {r}")
    if r * H < 1 or r * W < 1:
        raise ValueError(f"crop window {r * H:.3f}x{r * W:.3f} is smaller than one pixel")
    # the epsilon absorbs float error in products such as 96 * (1/6)
    wh = min(H, math.ceil(r * H - 1e-9))
    ww = min(W, math.ceil(r * W - 1e-9))
    sh, sw = max(1, wh // 2), max(1, ww // 2)
    boxes = tuple(
        (top, left, top + wh, left + ww)
        for top in _positions(H, wh, sh)
        for left in _positions(W, ww, sw)
    )
    return CropSpec(wh, ww, sh, sw, boxes)


def _crop(image: ImageRecord, box, size) -> ImageRecord:
    top, left, bottom, right = box
    px = image.pixels[top:bottom, left:right]
    if size is not None and px.shape[:2] != (size, size):
        t = torch.as_tensor(px).permute(2, 0, 1).unsqueeze(0)
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
        px = t[0].permute(1, 2, 0).numpy()
    return ImageRecord(f"{image.id}@{top},{left}", px)


def _similarities(feature: torch.Tensor, W_q: torch.Tensor) -> torch.Tensor:
    f = feature.to(torch.float64)
    f = f / f.norm().clamp_min(1e-12)
    w = W_q.to(torch.float64)
    w = w / w.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return w @ f


def detect_per_crop(crop: ImageRecord, enc: FrozenEncoder, W_q) -> int:
    """Index of the class whose query feature is most cosine-similar to the crop."""
    if isinstance(W_q, QueryTextFeatures):
        W_q = W_q.W_q
    with torch.no_grad():
        sims = _similarities(enc.encode_image_global(crop), W_q)
    return int(torch.argmax(sims))


def build_hypothesis(image: ImageRecord, enc: FrozenEncoder, W_q, r: float,
                     t: float) -> LabelHypothesis:
    if not 0 <= t < 1:
        raise ValueError(f"frequency threshold must be in [0, 1), got {t}")
    if isinstance(W_q, QueryTextFeatures):
        W_q = W_q.W_q
    C = W_q.shape[0]
    spec = enumerate_crops(*image.shape, r)
    counts = np.zeros(C, dtype=np.int64)
    for box in spec.boxes:
        counts[detect_per_crop(_crop(image, box, enc.global_input_size), enc, W_q)] += 1
    freq = counts / len(spec)
    classes = tuple(int(k) for k in np.flatnonzero(freq > t))
    if classes:
        return LabelHypothesis(classes, freq, len(spec))
    whole = _crop(image, (0, 0, *image.shape), enc.global_input_size)
    return LabelHypothesis((detect_per_crop(whole, enc, W_q),), freq, len(spec), fallback=True)


class HypothesisCache:
    """Hypotheses keyed by ``(image id, W_q fingerprint, r, t)``.

    One writer (the training loop) fills it; readers only look up.
    """

    def __init__(self):
        self._data: Dict[tuple, LabelHypothesis] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._data)

    @staticmethod
    def key(image_id: str, W_q: QueryTextFeatures, r: float, t: float) -> tuple:
        return (image_id, W_q.fingerprint, float(r), float(t))

    def get(self, image: ImageRecord, enc: FrozenEncoder, W_q: QueryTextFeatures,
            r: float, t: float) -> LabelHypothesis:
        k = self.key(image.id, W_q, r, t)
        hit = self._data.get(k)
        if hit is None:
            hit = build_hypothesis(image, enc, W_q, r, t)
            with self._lock:
                self._data[k] = hit
        return hit

    def save(self, path) -> None:
        keys = list(self._data)
        hyps = [self._data[k] for k in keys]
        C = len(hyps[0].freq) if hyps else 0
        member = np.zeros((len(hyps), C), dtype=bool)
        for i, h in enumerate(hyps):
            member[i, list(h.classes)] = True
        np.savez(
            path,
            version=np.array(CACHE_VERSION),
            ids=np.array([k[0] for k in keys], dtype=str),
            fingerprints=np.array([k[1] for k in keys], dtype=str),
            params=np.array([[k[2], k[3]] for k in keys], dtype=np.float64).reshape(-1, 2),
            freq=np.array([h.freq for h in hyps], dtype=np.float64).reshape(-1, C),
            member=member,
            n_crops=np.array([h.n_crops for h in hyps], dtype=np.int64),
            fallback=np.array([h.fallback for h in hyps], dtype=bool),
        )

    @classmethod
    def load(cls, path) -> "HypothesisCache":
        path = Path(path)
        with np.load(path, allow_pickle=False) as z:
            if "version" not in z or int(z["version"]) != CACHE_VERSION:
                raise ValueError(f"{path}: unsupported hypothesis cache version")
            cache = cls()
            for i in range(len(z["ids"])):
                key = (str(z["ids"][i]), str(z["fingerprints"][i]),
                       float(z["params"][i, 0]), float(z["params"][i, 1]))
                cache._data[key] = LabelHypothesis(
                    tuple(int(k) for k in np.flatnonzero(z["member"][i])),
                    z["freq"][i].copy(), int(z["n_crops"][i]), bool(z["fallback"][i]),
                )
        return cache
