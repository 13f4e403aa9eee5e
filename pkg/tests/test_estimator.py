from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from free_env.core import Dataset, split_by_date, subsample_labels
from free_env.estimator import DescriptionTransformer, FREERegressor, check_dataset, describe_dataset
from free_env.train import TrainConfig

from conftest import TINY_MODEL

FAST = TrainConfig(epochs=2, lr=3e-3, batch_size=4)
TUNE = TrainConfig(phase="finetune", epochs=2, lr=1e-3, batch_size=4)


@pytest.fixture(scope="module")
def split(small_benchmark):
    return split_by_date(small_benchmark, small_benchmark.date_range[0] + np.timedelta64(79, "D").item())


def test_check_dataset(small_benchmark):
    with pytest.raises(TypeError):
        check_dataset([1, 2, 3])
    with pytest.raises(ValueError, match="empty"):
        check_dataset(Dataset([]))
    no_obs = small_benchmark.map(lambda s: replace(s, observed_label=None))
    with pytest.raises(ValueError, match="observed"):
        check_dataset(no_obs, require="observed")


def test_get_params_and_clone():
    est = FREERegressor(model_config=TINY_MODEL, seed=3)
    params = est.get_params()
    assert params["seed"] == 3 and params["model_config"] == TINY_MODEL
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(target="observed")
    assert est.target == "observed"


def test_unfitted_predict_raises(small_benchmark):
    with pytest.raises(NotFittedError):
        FREERegressor().predict(small_benchmark)
    with pytest.raises(NotFittedError):
        DescriptionTransformer().transform(small_benchmark)


def test_pretrain_then_warm_start_finetune(split):
    train, test = split
    est = FREERegressor(model_config=TINY_MODEL, pretrain_config=FAST, finetune_config=TUNE, seed=1)
    est.fit(train)
    pre = est.model_
    preds = est.predict(test)
    assert preds.shape == (len(test),) and np.isfinite(preds).all()
    est.set_params(target="observed", warm_start=True)
    est.fit(subsample_labels(train, 0.2, 1))
    assert est.model_.provenance[0] == pre.provenance[0] and est.model_.provenance[-1]["phase"] == "finetune"
    assert est.score(test) <= 0
    assert est.score(test) == pytest.approx(-np.sqrt(np.mean((est.predict(test) - [s.observed_label for s in test]) ** 2)))


def test_observed_without_warm_start_trains_from_scratch(split):
    train, _ = split
    est = FREERegressor(model_config=TINY_MODEL, target="observed", pretrain_config=FAST, seed=0).fit(train)
    assert est.model_.provenance[0]["phase"] == "scratch"
    with pytest.raises(ValueError):
        FREERegressor(target="forecast").fit(train)


def test_description_transformer(small_benchmark):
    texts = DescriptionTransformer().fit_transform(small_benchmark)
    assert len(texts) == len(small_benchmark)
    assert texts == [describe_dataset(small_benchmark)[s.key] for s in small_benchmark]
    aux = DescriptionTransformer(use_auxiliary=True).fit(small_benchmark).transform(small_benchmark)
    assert aux[0] == texts[0] and aux[1].startswith("On ")
