"""scikit-learn style front end: a description transformer and the FREE regressor.

``X`` is always a :class:`~free_env.core.Dataset`; labels live on the samples,
so ``y`` is accepted for API compatibility and otherwise ignored.
"""
from __future__ import annotations

import datetime as dt
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .core import Dataset, SiteGraph
from .describe import Describer, DescriptionCache, PromptConfig
from .linearize import linearize, linearize_with_auxiliary, previous_day_aux
from .train import (FINETUNE, PRETRAIN, FreeModel, ModelConfig, TrainConfig, finetune, predict,
                    pretrain, train_from_scratch)

Key = Tuple[str, dt.date]


def check_dataset(X, require: Optional[str] = None) -> Dataset:
    """Validate estimator input; ``require`` is 'simulated' or 'observed'."""
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("empty Dataset")
    if require == "simulated" and X.n_simulated() == 0:
        raise ValueError("Dataset has no simulated labels")
    if require == "observed" and X.n_observed() == 0:
        raise ValueError("Dataset has no observed labels")
    return X


def describe_dataset(
    ds: Dataset,
    describer: Optional[Describer] = None,
    feature_subsets: Optional[Mapping[Key, Iterable[str]]] = None,
    aux_values: Optional[Mapping[Key, float]] = None,
    graph: Optional[SiteGraph] = None,
) -> Dict[Key, str]:
    """Description text per sample.

    ``aux_values`` maps (site, date) to an available target observation; when
    given, each sample is prefixed with the prior-day values of its own site
    and of its neighbors in ``graph``.
    """
    describer = describer or Describer()
    target = describer.cfg.target
    recs = []
    for s in ds:
        subset = None if feature_subsets is None else feature_subsets.get(s.key)
        if aux_values is None:
            recs.append(linearize(s, subset, ds.units))
        else:
            nbrs = graph[s.site_id] if graph is not None else ()
            recs.append(linearize_with_auxiliary(s, previous_day_aux(s, aux_values, nbrs), target, subset, ds.units))
    descs = describer.describe_many(recs)
    return {s.key: d.text for s, d in zip(ds, descs)}


class DescriptionTransformer(TransformerMixin, BaseEstimator):
    """Dataset -> list of description strings (sample order)."""

    def __init__(self, prompt: PromptConfig = PromptConfig(), cache_dir: Optional[str] = None,
                 use_auxiliary: bool = False):
        self.prompt = prompt
        self.cache_dir = cache_dir
        self.use_auxiliary = use_auxiliary

    def fit(self, X, y=None):
        check_dataset(X)
        self.describer_ = Describer(self.prompt, DescriptionCache(self.cache_dir) if self.cache_dir else None)
        return self

    def transform(self, X) -> List[str]:
        if not hasattr(self, "describer_"):
            raise NotFittedError("DescriptionTransformer is not fitted")
        X = check_dataset(X)
        aux = None
        if self.use_auxiliary:
            aux = {s.key: s.observed_label for s in X if s.observed_label is not None}
        texts = describe_dataset(X, self.describer_, aux_values=aux)
        return [texts[s.key] for s in X]


class FREERegressor(RegressorMixin, BaseEstimator):
    """Text-embedding + LSTM regressor for environmental time series.

    ``fit`` with ``target="simulated"`` pretrains from scratch on simulator
    output. Setting ``warm_start=True`` and ``target="observed"`` continues
    from the current weights, i.e. fine-tunes on (sparse) observations.
    ``target="observed"`` without a warm start trains from scratch on
    observations only.
    """

    def __init__(self, model_config: ModelConfig = ModelConfig(), target: str = "simulated",
                 pretrain_config: TrainConfig = PRETRAIN, finetune_config: TrainConfig = FINETUNE,
                 prompt: PromptConfig = PromptConfig(), warm_start: bool = False, seed: int = 0):
        self.model_config = model_config
        self.target = target
        self.pretrain_config = pretrain_config
        self.finetune_config = finetune_config
        self.prompt = prompt
        self.warm_start = warm_start
        self.seed = seed

    def _texts(self, X: Dataset) -> Dict[Key, str]:
        return describe_dataset(X, Describer(self.prompt))

    def fit(self, X, y=None, descriptions: Optional[Mapping[Key, str]] = None):
        if self.target not in ("simulated", "observed"):
            raise ValueError(f"target must be 'simulated' or 'observed', got {self.target!r}")
        X = check_dataset(X, require=self.target)
        texts = dict(descriptions) if descriptions is not None else self._texts(X)
        if self.warm_start and hasattr(self, "model_"):
            if self.target != "observed":
                raise ValueError("warm-start fitting continues on observed labels")
            cfg = _with_seed(self.finetune_config, self.seed, "finetune")
            self.model_, self.history_ = finetune(self.model_, X, texts, cfg)
        elif self.target == "simulated":
            cfg = _with_seed(self.pretrain_config, self.seed, "pretrain")
            self.model_, self.history_ = pretrain(X, texts, cfg, self.model_config)
        else:
            cfg = _with_seed(self.pretrain_config, self.seed, "finetune")
            self.model_, self.history_ = train_from_scratch(X, texts, cfg, self.model_config)
        return self

    def predict(self, X, descriptions: Optional[Mapping[Key, str]] = None) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("FREERegressor is not fitted")
        X = check_dataset(X)
        texts = dict(descriptions) if descriptions is not None else self._texts(X)
        preds = predict(self.model_, X, texts)
        return np.array([preds[s.key] for s in X])

    def score(self, X, y=None, sample_weight=None):
        """Negative RMSE against observed labels (or against ``y`` when given)."""
        X = check_dataset(X)
        pred = self.predict(X)
        if y is None:
            obs = np.array([np.nan if s.observed_label is None else s.observed_label for s in X])
        else:
            obs = np.asarray(y, dtype=float)
        ok = ~np.isnan(obs)
        if not ok.any():
            raise ValueError("no labels to score against")
        return -float(np.sqrt(np.mean((pred[ok] - obs[ok]) ** 2)))

    @classmethod
    def from_model(cls, model: FreeModel, **kwargs) -> "FREERegressor":
        est = cls(model_config=model.config, **kwargs)
        est.model_ = model
        return est


def _with_seed(cfg: TrainConfig, seed: int, phase: str) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed, phase=phase)
