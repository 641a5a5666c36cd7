"""scikit-learn style wrappers around the functional API.

Hyperparameters go to ``__init__`` untouched; learned state lands in
trailing-underscore attributes during ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .diffusion import PretrainConfig, generate, pretrain
from .errors import ContractError
from .finetune import FinetuneConfig, TruncationPolicy, evaluate, finetune, rwr_finetune
from .rewards import DetectorConfig, RewardModel, train_detector


def _seed(random_state) -> int:
    return int(check_random_state(random_state).randint(0, 2**31 - 1))


def _conditions(conditions, n_classes: int) -> np.ndarray:
    c = np.asarray(conditions).reshape(-1)
    if c.size == 0:
        raise ContractError("no conditions given")
    if not np.issubdtype(c.dtype, np.integer) or c.min() < 0 or c.max() >= n_classes:
        raise ContractError(f"conditions must be integers in [0, {n_classes})")
    return c


class ConditionalDiffusion(BaseEstimator):
    """Class-conditional denoising diffusion model over flattened 16x16 images."""

    def __init__(self, steps=2000, batch_size=64, lr=1e-3, hidden=256, T=50, beta_start=1e-4,
                 beta_end=0.1, sampler="ddim", random_state=None):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sampler = sampler
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = PretrainConfig(self.steps, self.batch_size, self.lr, self.hidden, self.T,
                             self.beta_start, self.beta_end)
        res = pretrain((X, y.astype(np.int64)), cfg, np.random.default_rng(_seed(self.random_state)))
        self.params_ = res.params
        self.schedule_ = res.schedule
        self.loss_trace_ = np.asarray(res.loss_trace)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, conditions, random_state=None, adapters=None):
        """One image per condition, shape ``(len(conditions), n_features_in_)``."""
        check_is_fitted(self, "params_")
        c = _conditions(conditions, self.params_.n_classes)
        rng = np.random.default_rng(_seed(random_state))
        return generate(self.params_, c, self.schedule_, rng, self.sampler, adapters)


class StripeDetector(ClassifierMixin, BaseEstimator):
    """Logistic stripe detector; its fitted ``reward_`` is the concept-removal reward."""

    def __init__(self, steps=500, lr=0.05, holdout=0.2, random_state=None):
        self.steps = steps
        self.lr = lr
        self.holdout = holdout
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ContractError("the detector needs exactly two label values")
        fit = train_detector((X, y_idx), DetectorConfig(self.steps, self.lr, self.holdout),
                             _seed(self.random_state))
        self.reward_ = fit.reward
        self.holdout_accuracy_ = fit.holdout_accuracy
        self.loss_trace_ = np.asarray(fit.loss_trace)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "reward_")
        X = check_array(X, dtype=np.float64)
        p = self.reward_.detector.predict_proba(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.predict_proba(X)[:, 1] > 0.5).astype(int)]


class RewardFinetuner(BaseEstimator):
    """Aligns a fitted :class:`ConditionalDiffusion` to a reward.

    ``method="backprop"`` backpropagates the reward through the sampling
    chain; ``method="rwr"`` is the reward-weighted regression baseline.
    ``fit`` takes the training conditions in place of ``X``.
    """

    def __init__(self, model=None, reward=None, method="backprop", steps=300, batch_size=8,
                 lr=1e-3, truncation="randomized", k_fixed=1, k_max=50, rank=4,
                 full_finetune=False, max_epochs=7, steps_per_epoch=50, random_state=None):
        self.model = model
        self.reward = reward
        self.method = method
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.truncation = truncation
        self.k_fixed = k_fixed
        self.k_max = k_max
        self.rank = rank
        self.full_finetune = full_finetune
        self.max_epochs = max_epochs
        self.steps_per_epoch = steps_per_epoch
        self.random_state = random_state

    def _check_inputs(self):
        if not isinstance(self.model, ConditionalDiffusion):
            raise ContractError("model must be a ConditionalDiffusion")
        check_is_fitted(self.model, "params_")
        if not isinstance(self.reward, RewardModel):
            raise ContractError("reward must be a RewardModel")
        if self.method not in ("backprop", "rwr"):
            raise ContractError(f"unknown method {self.method!r}")

    def fit(self, X=(0, 1, 2), y=None):
        self._check_inputs()
        base = self.model.params_
        train_c = tuple(int(c) for c in np.unique(_conditions(X, base.n_classes)))
        cfg = FinetuneConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            truncation=TruncationPolicy(self.truncation, self.k_fixed, self.k_max),
            steps_per_epoch=self.steps_per_epoch, max_epochs=self.max_epochs,
            seed=_seed(self.random_state), rank=self.rank, full_finetune=self.full_finetune,
            train_conditions=train_c,
        )
        run = finetune if self.method == "backprop" else rwr_finetune
        res = run(base, cfg, self.reward, self.model.schedule_)
        self.params_ = res.params
        self.adapters_ = res.adapters
        self.metrics_ = res.metrics
        self.train_conditions_ = train_c
        return self

    def sample(self, conditions, random_state=None):
        check_is_fitted(self, "params_")
        c = _conditions(conditions, self.params_.n_classes)
        rng = np.random.default_rng(_seed(random_state))
        return generate(self.params_, c, self.model.schedule_, rng, "ddim", self.adapters_)

    def score(self, X, y=None, n_per_condition=16, random_state=0):
        """Mean reward over fresh samples for each condition in ``X``."""
        check_is_fitted(self, "params_")
        c = [int(v) for v in np.unique(_conditions(X, self.params_.n_classes))]
        res = evaluate(self.params_, self.adapters_, c, self.reward, n_per_condition,
                       _seed(random_state), self.model.schedule_)
        return res.mean


__all__ = ["ConditionalDiffusion", "StripeDetector", "RewardFinetuner"]
