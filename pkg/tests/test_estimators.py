import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diffalign.data import make_shapes
from diffalign.errors import ContractError
from diffalign.estimators import ConditionalDiffusion, RewardFinetuner, StripeDetector
from diffalign.rewards import BrightnessReward


@pytest.fixture(scope="module")
def shapes():
    return make_shapes(8, 0)


@pytest.fixture(scope="module")
def model(shapes):
    return ConditionalDiffusion(steps=5, batch_size=8, hidden=16, T=4, random_state=0).fit(
        shapes.images, shapes.labels)


def test_params_and_clone():
    est = ConditionalDiffusion(steps=3, hidden=8)
    assert est.get_params()["hidden"] == 8
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_not_fitted_errors():
    with pytest.raises(NotFittedError):
        ConditionalDiffusion().sample([0])
    with pytest.raises(NotFittedError):
        StripeDetector().predict_proba(np.zeros((1, 256)))


def test_diffusion_fit_and_sample(model):
    assert len(model.loss_trace_) == 5 and model.n_features_in_ == 256
    x = model.sample([0, 3, 1], random_state=1)
    assert x.shape == (3, 256) and np.all(np.isfinite(x))
    assert np.array_equal(x, model.sample([0, 3, 1], random_state=1))
    with pytest.raises(ContractError):
        model.sample([4])


def test_detector(shapes):
    det = StripeDetector(steps=200, random_state=0).fit(shapes.images, shapes.stripes)
    p = det.predict_proba(shapes.images)
    assert p.shape == (len(shapes), 2) and np.allclose(p.sum(axis=1), 1.0)
    assert det.score(shapes.images, shapes.stripes) >= 0.9
    assert set(det.predict(shapes.images)) <= {False, True}


def test_finetuner(model):
    ft = RewardFinetuner(model, BrightnessReward(), steps=2, batch_size=2, k_max=4, rank=2,
                         random_state=0).fit([0, 1])
    assert len(ft.metrics_) == 2 and ft.train_conditions_ == (0, 1)
    assert ft.sample([2], random_state=0).shape == (1, 256)
    assert np.isfinite(ft.score([3], n_per_condition=2))


def test_finetuner_validates_inputs(model):
    with pytest.raises(ContractError):
        RewardFinetuner(model, None).fit()
    with pytest.raises(ContractError):
        RewardFinetuner(model, BrightnessReward(), method="ppo").fit()
