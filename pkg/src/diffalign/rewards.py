"""Differentiable rewards on generated images.

Every reward maps a single image ``(D,)`` to a scalar tensor and a batch
``(B, D)`` to a ``(B,)`` tensor of per-image rewards.  Rewards read the
rendered image, i.e. the chain output clamped to the pixel range [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    affine,
    as_tensor,
    clip,
    concatenate,
    logistic,
    mean,
    negate,
    reshape,
    slice_,
    smooth_abs,
    subtract,
)
from .autodiff.tensor import _stable_logistic
from .diffusion import IMAGE_SIDE
from .errors import ContractError, ShapeError

REWARD_KINDS = ("brightness", "compressibility", "concept_removal", "constant")


class RewardModel:
    """Base class; subclasses implement :meth:`__call__`."""

    kind: str = ""

    def __call__(self, x0) -> Tensor:
        raise NotImplementedError

    def score(self, x0) -> np.ndarray:
        """Untracked per-image reward values."""
        return np.asarray(self(Tensor._wrap(np.asarray(x0, dtype=np.float64))).data)


class BrightnessReward(RewardModel):
    """Mean pixel value; lies in [-1, 1] for valid images."""

    kind = "brightness"

    def __call__(self, x0) -> Tensor:
        return brightness_reward(x0)


class CompressibilityReward(RewardModel):
    kind = "compressibility"

    def __call__(self, x0) -> Tensor:
        return compressibility_reward(x0)


@dataclass
class ConstantReward(RewardModel):
    """Reward that ignores the image; a stub for plumbing checks."""

    value: float = 0.5
    kind: str = field(default="constant", init=False)

    def __call__(self, x0) -> Tensor:
        x0 = as_tensor(x0)
        return Tensor._wrap(np.full(x0.shape[:-1], float(self.value)))


def rendered(x0) -> Tensor:
    return clip(as_tensor(x0), -1.0, 1.0)


def brightness_reward(x0) -> Tensor:
    return mean(rendered(x0), axis=-1)


def compressibility_reward(x0, side: int = IMAGE_SIDE) -> Tensor:
    """Negative mean smooth total variation over horizontal and vertical neighbours."""
    x0 = as_tensor(x0)
    if x0.shape[-1] != side * side:
        raise ShapeError("compressibility_reward", (x0.shape,), f"last axis must be {side * side}")
    lead = x0.shape[:-1]
    img = reshape(rendered(x0), lead + (side, side))
    ell = (Ellipsis,)
    dh = subtract(slice_(img, ell + (slice(None), slice(1, None))),
                  slice_(img, ell + (slice(None), slice(None, -1))))
    dv = subtract(slice_(img, ell + (slice(1, None), slice(None))),
                  slice_(img, ell + (slice(None, -1), slice(None))))
    flat = lead + (side * (side - 1),)
    diffs = concatenate([reshape(dh, flat), reshape(dv, flat)], axis=-1)
    return negate(mean(smooth_abs(diffs), axis=-1))


@dataclass
class ConceptDetector:
    """Logistic classifier ``c = logistic(w . x + b)`` over flattened images."""

    weight: np.ndarray  # (D,)
    bias: float

    def confidence(self, x0) -> Tensor:
        x0 = rendered(x0)
        w = Tensor._wrap(self.weight[None, :])
        b = Tensor._wrap(np.array([self.bias]))
        logits = affine(x0, w, b)
        return reshape(logistic(logits), x0.shape[:-1])

    def predict_proba(self, X) -> np.ndarray:
        return self.confidence(np.asarray(X, dtype=np.float64)).data


@dataclass
class ConceptRemovalReward(RewardModel):
    """``1 - c`` where ``c`` is the detector's confidence the concept is present."""

    detector: ConceptDetector
    kind: str = field(default="concept_removal", init=False)

    def __call__(self, x0) -> Tensor:
        return concept_removal_reward(x0, self)


@dataclass
class DetectorConfig:
    steps: int = 500
    lr: float = 0.05
    holdout: float = 0.2


@dataclass
class DetectorFit:
    reward: ConceptRemovalReward
    holdout_accuracy: float
    loss_trace: list[float]


def train_detector(dataset, config: DetectorConfig | None = None,
                   rng: np.random.Generator | int | None = None) -> DetectorFit:
    """Full-batch gradient descent on binary cross-entropy.

    ``dataset = (images, labels)`` with boolean/0-1 labels.  A random
    ``holdout`` fraction is kept aside for the reported accuracy.
    """
    config = config or DetectorConfig()
    rng = np.random.default_rng(rng)
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ContractError("detector training needs both labels present")
    order = rng.permutation(len(X))
    n_hold = int(round(config.holdout * len(X)))
    hold, train = order[:n_hold], order[n_hold:]
    if len(np.unique(y[train])) < 2:
        raise ContractError("training split lost one of the labels")
    Xt, yt = X[train], y[train]
    w = np.zeros(X.shape[1])
    b = 0.0
    trace = []
    for _ in range(config.steps):
        z = Xt @ w + b
        p = _stable_logistic(z)
        trace.append(float(np.mean(np.logaddexp(0.0, z) - yt * z)))
        err = p - yt
        w -= config.lr * (Xt.T @ err) / len(Xt)
        b -= config.lr * float(err.mean())
    det = ConceptDetector(w, b)
    if n_hold:
        acc = float(np.mean((det.predict_proba(X[hold]) > 0.5) == (y[hold] > 0.5)))
    else:
        acc = float("nan")
    return DetectorFit(ConceptRemovalReward(det), acc, trace)


def concept_removal_reward(x0, model: RewardModel) -> Tensor:
    if not isinstance(model, ConceptRemovalReward):
        raise ContractError(f"concept removal needs a trained detector, got {type(model).__name__}")
    c = model.detector.confidence(x0)
    return subtract(Tensor._wrap(np.ones(c.shape)), c)


def make_reward(kind: str, detector: ConceptDetector | None = None, constant: float = 0.5) -> RewardModel:
    if kind == "brightness":
        return BrightnessReward()
    if kind == "compressibility":
        return CompressibilityReward()
    if kind == "concept_removal":
        if detector is None:
            raise ContractError("concept_removal reward needs a detector")
        return ConceptRemovalReward(detector)
    if kind == "constant":
        return ConstantReward(constant)
    raise ContractError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")
