"""Scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backbone import DEFAULT_TEMPLATES, FrozenEncoder, ToyEncoder, ToyEncoderSpec
from .core import ClassVocabulary, ImageRecord, RunConfig
from .metrics import EvalResult, evaluate_labels
from .model import ABLATIONS, RectificationModel, infer
from .train import TrainState, fit, load_checkpoint, save_checkpoint


def as_records(X, y=None) -> list:
    """Coerce images (``ImageRecord`` or ``H x W x 3`` arrays) into records.

    Arrays get positional ids ``img-00000`` ...; ``y`` (label maps) is attached
    when given.
    """
    if isinstance(X, (ImageRecord, np.ndarray)) and not (
        isinstance(X, np.ndarray) and X.ndim == 4
    ):
        raise TypeError("X must be a sequence of images, not a single image")
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} images but y has {len(y)} label maps")
    out = []
    for i, x in enumerate(X):
        gt = None if y is None else np.asarray(y[i])
        if isinstance(x, ImageRecord):
            rec = x if gt is None else ImageRecord(x.id, x.pixels, gt)
        else:
            rec = ImageRecord(f"img-{i:05d}", np.asarray(x), gt)
        if rec.gt_mask is not None and rec.gt_mask.shape != rec.shape:
            raise ValueError(
                f"image {rec.id!r}: label map {rec.gt_mask.shape} does not match image {rec.shape}"
            )
        out.append(rec)
    return out


class ReCLIPSegmenter(BaseEstimator):
    """Unsupervised segmenter that learns to remove class and space bias.

    ``fit`` needs only images; ground truth passed as ``y`` is ignored.  The
    encoder stays frozen throughout.

    Parameters
    ----------
    encoder : FrozenEncoder or ToyEncoderSpec
    class_names : sequence of str, optional
        Defaults to the toy encoder's class names.
    config : RunConfig, optional
        Base configuration; the explicit keyword arguments below override it.
    """

    def __init__(self, encoder=None, class_names=None, templates=DEFAULT_TEMPLATES,
                 config: Optional[RunConfig] = None, max_iters: int = 300,
                 batch_size: int = 8, lr: float = 0.01, seed: int = 0,
                 bias_combine: str = "subtract", query_learnable: bool = False,
                 upsample: str = "bilinear-logits"):
        self.encoder = encoder
        self.class_names = class_names
        self.templates = templates
        self.config = config
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.bias_combine = bias_combine
        self.query_learnable = query_learnable
        self.upsample = upsample

    # -- helpers ---------------------------------------------------------

    def _resolve(self):
        enc = self.encoder
        if isinstance(enc, ToyEncoderSpec):
            enc = ToyEncoder(enc)
        if not isinstance(enc, FrozenEncoder):
            raise TypeError("encoder must be a FrozenEncoder or a ToyEncoderSpec")
        names = self.class_names
        if names is None:
            names = getattr(enc, "class_names", None)
            if names is None:
                raise ValueError("class_names is required for this encoder")
        cfg = (self.config or RunConfig()).replace(
            max_iters=self.max_iters, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, bias_combine=self.bias_combine,
            query_learnable=self.query_learnable, upsample=self.upsample,
        )
        cfg.validate()
        return enc, ClassVocabulary(names), cfg

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit() before using this estimator")

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y=None, checkpoint_path=None):
        enc, vocab, cfg = self._resolve()
        records = as_records(X)
        state = TrainState.create(vocab, enc, cfg, tuple(self.templates))
        fit(records, state, checkpoint_path)
        self._set_state(state)
        return self

    def _set_state(self, state: TrainState):
        self.state_ = state
        self.model_ = state.model
        self.vocabulary_ = state.model.vocab
        self.n_iter_ = state.iteration
        self.loss_curve_ = [h[2] for h in state.history]
        return self

    def predict(self, X, ablate: str = "none") -> list:
        """Per-image ``H x W`` label maps."""
        self._check_fitted()
        if ablate not in ABLATIONS:
            raise ValueError(f"ablate must be one of {ABLATIONS}")
        return [infer(r, self.model_, ablate) for r in as_records(X)]

    def evaluate(self, X, y=None, ablate: str = "none") -> EvalResult:
        records = as_records(X, y)
        if any(r.gt_mask is None for r in records):
            raise ValueError("evaluation needs a label map for every image")
        self._check_fitted()
        cfg = self.model_.config
        preds = self.predict(records, ablate)
        return evaluate_labels(preds, [r.gt_mask for r in records], self.vocabulary_.C,
                               cfg.distance_bins, cfg.min_instance_pixels)

    def score(self, X, y=None) -> float:
        """Mean IoU against ``y`` (or the records' own label maps)."""
        return self.evaluate(X, y).miou

    def baseline(self) -> RectificationModel:
        """The unrectified model for the same encoder and vocabulary."""
        enc, vocab, cfg = self._resolve()
        return RectificationModel.baseline(vocab, enc, cfg, tuple(self.templates))

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path, encoder: Optional[FrozenEncoder] = None) -> "ReCLIPSegmenter":
        state = load_checkpoint(path, encoder)
        cfg = state.config
        est = cls(encoder=state.model.encoder, class_names=state.model.vocab.names,
                  templates=state.model.query.templates, config=cfg,
                  max_iters=cfg.max_iters, batch_size=cfg.batch_size, lr=cfg.lr,
                  seed=cfg.seed, bias_combine=cfg.bias_combine,
                  query_learnable=cfg.query_learnable, upsample=cfg.upsample)
        return est._set_state(state)

