"""Scikit-learn style facade over the fusion model and training loop.

RationaleVqa packs vocabulary building, model construction, and the Adam
loop behind fit/predict/transform with get_params/set_params/clone
compatibility, so the pipeline slots into sklearn tooling (grid search,
cross-validation harnesses) without adapters. X is always a sequence of
VqaSample (or mappings with the same fields); there is no separate y, the
samples carry their own targets.
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import data as dat
from .errors import ContractViolation, DataError
from .metrics import EvalReport, evaluate
from .model import GatedFusionModel, ModelConfig
from .strategies import GenerationOutput, Strategy, generate, two_stage_generate
from .training import TrainConfig, fit as train_fit, fit_two_stage


def check_samples(X, require_pixels: bool = False) -> list[dat.VqaSample]:
    """Coerce X into a validated list of samples.

    Accepts VqaSample instances or mappings with the same field names;
    anything else is a DataError. require_pixels additionally insists every
    sample carries an image grid (prediction needs one).
    """
    if X is None:
        raise DataError("X must be a sequence of samples, got None")
    if isinstance(X, (str, bytes, Mapping)) or not hasattr(X, "__iter__"):
        raise DataError(f"X must be a sequence of samples, got {type(X).__name__}")
    samples: list[dat.VqaSample] = []
    for i, item in enumerate(X):
        if isinstance(item, dat.VqaSample):
            sample = item
        elif isinstance(item, Mapping):
            try:
                sample = dat.VqaSample(**item)
            except TypeError as exc:
                raise DataError(f"X[{i}]: cannot build a sample: {exc}") from exc
        else:
            raise DataError(f"X[{i}] must be a VqaSample or mapping, got {type(item).__name__}")
        dat.validate_sample(sample)
        if require_pixels and sample.pixels is None:
            raise DataError(f"X[{i}] (id {sample.id!r}) carries no pixel grid")
        samples.append(sample)
    if not samples:
        raise DataError("X must contain at least one sample")
    return samples


class RationaleVqa(BaseEstimator):
    """Rationale-augmented VQA estimator.

    fit learns the vocabulary and trains the model(s) for the configured
    serialization strategy; predict returns answer strings; transform
    returns mean-pooled fused features, one row per sample.
    """

    def __init__(
        self,
        strategy: str = Strategy.NO_RATIONALE.value,
        d: int = 32,
        n_max: int = 24,
        m: int = 4,
        enc_layers: int = 1,
        dec_layers: int = 1,
        heads: int = 4,
        image_size: int = 4,
        epochs: int = 60,
        batch_size: int = 32,
        lr: float = 5e-4,
        stage2_lr: float = 5e-5,
        stage2_epochs: int = 20,
        grad_clip: float | None = None,
        min_count: int = 1,
        seed: int = 0,
    ):
        self.strategy = strategy
        self.d = d
        self.n_max = n_max
        self.m = m
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.heads = heads
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.stage2_lr = stage2_lr
        self.stage2_epochs = stage2_epochs
        self.grad_clip = grad_clip
        self.min_count = min_count
        self.seed = seed

    # -- internals -----------------------------------------------------------

    def _model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d=self.d,
            n_max=self.n_max,
            m=self.m,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            heads=self.heads,
            image_size=self.image_size,
            seed=seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            strategy=self.strategy,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            grad_clip=self.grad_clip,
            stage2_lr=self.stage2_lr,
            stage2_epochs=self.stage2_epochs,
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this RationaleVqa instance is not fitted yet; call fit first")

    # -- sklearn surface ------------------------------------------------------

    def fit(self, X, y=None) -> "RationaleVqa":
        samples = check_samples(X, require_pixels=True)
        config = self._train_config()
        strategy = Strategy(config.strategy)
        self.vocab_ = dat.build_vocab(samples, min_count=self.min_count)
        self.model_ = GatedFusionModel(self._model_config(len(self.vocab_), self.seed))
        if strategy is Strategy.TWO_STAGE:
            self.stage2_model_ = GatedFusionModel(self._model_config(len(self.vocab_), self.seed + 1))
            self.reports_ = list(fit_two_stage(self.model_, self.stage2_model_, self.vocab_, samples, config))
        else:
            if hasattr(self, "stage2_model_"):
                del self.stage2_model_
            self.reports_ = [train_fit(self.model_, self.vocab_, samples, config)]
        self.n_samples_fit_ = len(samples)
        return self

    def predict_output(self, X) -> list[GenerationOutput]:
        """Full generation outputs, including rationales and parse flags."""
        self._check_fitted()
        samples = check_samples(X, require_pixels=True)
        strategy = Strategy(self.strategy)
        outputs = []
        for sample in samples:
            if strategy is Strategy.TWO_STAGE:
                outputs.append(
                    two_stage_generate(self.model_, self.stage2_model_, self.vocab_, sample.question, sample.grid())
                )
            else:
                outputs.append(generate(self.model_, self.vocab_, strategy, sample.question, sample.grid()))
        return outputs

    def predict(self, X) -> list[str]:
        """Answer strings; empty string where generation failed to parse."""
        return [out.answer for out in self.predict_output(X)]

    def transform(self, X) -> np.ndarray:
        """Mean-pooled fused features, shape (n_samples, d)."""
        self._check_fitted()
        samples = check_samples(X, require_pixels=True)
        rows = []
        for sample in samples:
            ids, mask = dat.encode(self.vocab_, sample.question, self.n_max)
            real = [i for i, keep in zip(ids, mask) if keep]
            trace = self.model_.fuse(real, sample.grid())
            rows.append(trace.fused.nd().mean(axis=0))
        return np.stack(rows)

    def evaluate(self, X) -> EvalReport:
        """Score generation quality against the samples' own answers."""
        samples = check_samples(X, require_pixels=True)
        outputs = self.predict_output(samples)
        return evaluate(samples, outputs, self.strategy)

    def score(self, X, y=None) -> float:
        """Closed-question accuracy; needs at least one closed sample."""
        report = self.evaluate(X)
        accuracy = report.closed_accuracy
        if accuracy is None:
            raise ContractViolation("score needs at least one closed question in X")
        return accuracy
