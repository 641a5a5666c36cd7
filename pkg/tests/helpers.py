"""Shared fixtures-as-functions: tiny denoisers, reward stubs and primitive programs."""
import numpy as np

from diffalign.autodiff import (
    Tensor,
    add,
    affine,
    clip,
    concatenate,
    cos,
    exp,
    log,
    logistic,
    matmul,
    mean,
    multiply,
    negate,
    reshape,
    scale,
    silu,
    sin,
    slice_,
    smooth_abs,
    sqrt,
    square,
    subtract,
    sum_,
)
from diffalign.diffusion import init_denoiser, make_schedule
from diffalign.rewards import RewardModel


def tiny_denoiser(seed=0, data_dim=4, hidden=8, T=3, n_classes=2):
    return init_denoiser(np.random.default_rng(seed), data_dim=data_dim, n_classes=n_classes,
                         hidden=hidden, time_dim=4, class_dim=2, T=T)


def tiny_schedule(T=3):
    return make_schedule(T, 0.05, 0.3)


class StubReward(RewardModel):
    """Per-image reward given by an arbitrary tensor function (default: weighted sum)."""

    kind = "stub"

    def __init__(self, fn=None, weight=None):
        self.fn = fn
        self.weight = weight

    def __call__(self, x0):
        if self.fn is not None:
            return self.fn(x0)
        w = Tensor._wrap(np.asarray(self.weight, dtype=np.float64)[None, :])
        return reshape(affine(x0, w), x0.shape[:-1])


def _weighted(v, r):
    return sum_(multiply(v, Tensor._wrap(r)))


def primitive_cases():
    """(name, n_inputs, input sampler, program) for every primitive.

    Each program reduces to a scalar through a fixed random weighting so
    that every output coordinate contributes to the checked gradient.
    """
    def u(lo, hi):
        return lambda rng, shape: rng.uniform(lo, hi, size=shape)

    anyv = u(-2.0, 2.0)
    pos = u(0.2, 3.0)

    def off_kink(rng, shape):
        # central differences at eps=1e-5 cannot resolve the curvature inside
        # the 1e-3 smoothing band; that band has its own closed-form test
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)
    return [
        ("negate", 1, anyv, negate),
        ("add", 2, anyv, add),
        ("subtract", 2, anyv, subtract),
        ("multiply", 2, anyv, multiply),
        ("scale", 1, anyv, lambda a: scale(a, -1.7)),
        ("square", 1, anyv, square),
        ("sqrt", 1, pos, sqrt),
        ("exp", 1, anyv, exp),
        ("log", 1, pos, log),
        ("logistic", 1, u(-6.0, 6.0), logistic),
        ("sin", 1, anyv, sin),
        ("cos", 1, anyv, cos),
        ("smooth_abs", 1, off_kink, smooth_abs),
        ("silu", 1, anyv, silu),
        ("clip", 1, u(-0.9, 0.9), lambda a: clip(a, -1.0, 1.0)),
        ("sum", 1, anyv, lambda a: sum_(a, axis=-1)),
        ("mean", 1, anyv, lambda a: mean(a, axis=0)),
        ("concatenate", 2, anyv, lambda a, b: concatenate([a, b], axis=-1)),
        ("slice", 1, anyv, lambda a: slice_(a, (slice(None), slice(1, None)))),
        ("reshape", 1, anyv, lambda a: reshape(a, (-1,))),
    ]


def primitive_program(case, rng, dim):
    """Random inputs of shape (2, dim) and a scalar program over them."""
    _, n_in, draw, op = case
    shape = (2, dim)
    inputs = [Tensor(draw(rng, shape)) for _ in range(n_in)]
    out_shape = op(*[Tensor._wrap(t.data) for t in inputs]).shape
    r = rng.normal(size=out_shape)
    return inputs, (lambda *xs: _weighted(op(*xs), r))


def matmul_program(rng, dim):
    a = Tensor(rng.normal(size=(dim, dim)))
    b = Tensor(rng.normal(size=(dim, 2)))
    r = rng.normal(size=(dim, 2))
    return [a, b], lambda x, y: _weighted(matmul(x, y), r)


def affine_program(rng, dim):
    x = Tensor(rng.normal(size=(3, dim)))
    W = Tensor(rng.normal(size=(2, dim)))
    b = Tensor(rng.normal(size=2))
    r = rng.normal(size=(3, 2))
    return [x, W, b], lambda x_, W_, b_: _weighted(affine(x_, W_, b_), r)
