"""Noise schedules, the conditional noise predictor, sampling and pretraining."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    affine,
    backward,
    concatenate,
    matmul,
    mean,
    multiply,
    no_grad,
    scale,
    silu,
    square,
    subtract,
)
from .errors import ContractError, NumericAbort, ShapeError, SingularityError, abort_on_overflow
from .optim import Adam

IMAGE_SIDE = 16
DATA_DIM = IMAGE_SIDE * IMAGE_SIDE
N_CLASSES = 4


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables indexed by ``t - 1`` for ``t = 1..T``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")


def schedule_from_betas(betas) -> NoiseSchedule:
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ContractError("betas must be a non-empty 1-D sequence")
    if np.any(beta < 0) or np.any(beta >= 1):
        raise ContractError("betas must lie in [0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha),
                         sigma=np.sqrt(beta), beta_start=float(beta[0]), beta_end=float(beta[-1]))


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.1) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ContractError("T must be a positive integer")
    if not 0 < beta_start <= beta_end < 1:
        raise ContractError("need 0 < beta_start <= beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T)))


def forward_diffuse(x0, t: int, eps, s: NoiseSchedule) -> Tensor:
    s.check_t(t)
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeError("forward_diffuse", (x0.shape, eps.shape))
    ab = s.alpha_bar[t - 1]
    return add(scale(x0, np.sqrt(ab)), scale(eps, np.sqrt(1.0 - ab)))


def _step_coefficients(t: int, s: NoiseSchedule) -> tuple[float, float]:
    s.check_t(t)
    one_minus_ab = 1.0 - s.alpha_bar[t - 1]
    if one_minus_ab <= 0.0:
        raise SingularityError(f"alpha_bar[{t}] == 1: noise coefficient divides by zero")
    return 1.0 / np.sqrt(s.alpha[t - 1]), s.beta[t - 1] / np.sqrt(one_minus_ab)


def ddim_step(x_t: Tensor, t: int, eps_hat: Tensor, s: NoiseSchedule) -> Tensor:
    """Deterministic reverse update ``(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)``."""
    inv_sqrt_alpha, noise_coef = _step_coefficients(t, s)
    return scale(subtract(x_t, scale(eps_hat, noise_coef)), inv_sqrt_alpha)


def ddpm_step(x_t: Tensor, t: int, eps_hat: Tensor, z, s: NoiseSchedule) -> Tensor:
    """Ancestral update: the deterministic step plus ``sigma_t * z``."""
    mean_ = ddim_step(x_t, t, eps_hat, s)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.shape != mean_.shape:
        raise ShapeError("ddpm_step", (mean_.shape, z.shape))
    return add(mean_, scale(z, s.sigma[t - 1]))


def time_embedding(t, T: int, width: int = 16) -> np.ndarray:
    """Sinusoidal features of ``t / T``; ``t`` may be a scalar or an array."""
    frac = np.asarray(t, dtype=np.float64) / T
    freqs = np.exp(np.linspace(0.0, np.log(100.0), width // 2))
    ang = frac[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class DenoiserParams:
    """Weights of the conditional MLP noise predictor.

    Input is ``[x_t, time features, class embedding]``; two SiLU hidden layers
    feed a linear output of the data width.  Linear layers are named
    ``l0``, ``l1``, ``l2`` (``<name>.weight`` is out x in).
    """

    tensors: dict[str, Tensor]
    data_dim: int
    n_classes: int
    hidden: int = 256
    time_dim: int = 16
    class_dim: int = 8
    layers: tuple[str, ...] = ("l0", "l1", "l2")
    T: int = 50

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def layer_shape(self, name: str) -> tuple[int, int]:
        return self.tensors[f"{name}.weight"].shape

    def copy(self) -> "DenoiserParams":
        fresh = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return DenoiserParams(fresh, self.data_dim, self.n_classes, self.hidden,
                              self.time_dim, self.class_dim, self.layers, self.T)

    def requires_grad_(self, flag: bool = True) -> "DenoiserParams":
        for v in self.tensors.values():
            v.requires_grad = flag
        return self

    def __call__(self, x_t, t, c, adapters=None) -> Tensor:
        return predict_noise(self, x_t, t, c, adapters)


def init_denoiser(rng: np.random.Generator, data_dim: int = DATA_DIM, n_classes: int = N_CLASSES,
                  hidden: int = 256, time_dim: int = 16, class_dim: int = 8, T: int = 50) -> DenoiserParams:
    widths = [data_dim + time_dim + class_dim, hidden, hidden, data_dim]
    tensors = {"embed": Tensor(rng.standard_normal((n_classes, class_dim)), requires_grad=True)}
    for i in range(3):
        fan_in, fan_out = widths[i], widths[i + 1]
        tensors[f"l{i}.weight"] = Tensor(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in),
                                         requires_grad=True)
        tensors[f"l{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return DenoiserParams(tensors, data_dim, n_classes, hidden, time_dim, class_dim, T=T)


def _linear(params: DenoiserParams, name: str, h: Tensor, t, adapters) -> Tensor:
    out = affine(h, params[f"{name}.weight"], params[f"{name}.bias"])
    if adapters is not None:
        extra = adapters.contribution(name, h, t)
        if extra is not None:
            out = add(out, extra)
    return out


def predict_noise(params: DenoiserParams, x_t, t, c, adapters=None) -> Tensor:
    """``eps_theta(x_t, t, c)`` for a batch (rows of ``x_t``) or a single vector."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    c = np.asarray(c)
    if x_t.shape[-1] != params.data_dim:
        raise ShapeError("predict_noise", (x_t.shape,), f"expected last axis {params.data_dim}")
    if np.any(c < 0) or np.any(c >= params.n_classes):
        raise ContractError(f"condition id outside [0, {params.n_classes})")
    batch = x_t.shape[:-1]
    t_arr = np.broadcast_to(np.asarray(t), batch)
    temb = Tensor._wrap(time_embedding(t_arr, params.T, params.time_dim))
    onehot = np.zeros(batch + (params.n_classes,))
    if batch:
        onehot[np.arange(batch[0]), np.broadcast_to(c, batch)] = 1.0
    else:
        onehot[int(c)] = 1.0
    cemb = matmul(Tensor._wrap(onehot), params["embed"])
    h = concatenate([x_t, temb, cemb], axis=-1)
    h = silu(_linear(params, "l0", h, t, adapters))
    h = silu(_linear(params, "l1", h, t, adapters))
    return _linear(params, "l2", h, t, adapters)


def sample(params, c, x_T, s: NoiseSchedule, sampler: str = "ddim",
           rng: np.random.Generator | None = None, adapters=None, noises=None) -> Tensor:
    """Run the reverse chain from ``x_T`` at ``t = T`` down to ``t = 1``.

    ``ddim`` applies the deterministic step; ``ancestral`` adds ``sigma_t z``
    with ``z`` taken from ``noises[T - t]`` or drawn from ``rng``.  The chain
    is differentiable when a tape is active.
    """
    if sampler not in ("ddim", "ancestral"):
        raise ContractError(f"unknown sampler {sampler!r}")
    x = x_T if isinstance(x_T, Tensor) else Tensor(x_T)
    dim = getattr(params, "data_dim", None)
    if dim is not None and (x.ndim == 0 or x.shape[-1] != dim):
        raise ShapeError("sample", (x.shape,), "x_T does not match the data dimension")
    if sampler == "ancestral" and noises is None:
        if rng is None:
            raise ContractError("ancestral sampling needs rng or noises")
        noises = rng.standard_normal((s.T,) + x.shape)
    for t in range(s.T, 0, -1):
        x = denoise_step(params, x, t, c, s, sampler, adapters,
                         None if noises is None else noises[s.T - t])
    return x


def denoise_step(params, x: Tensor, t: int, c, s: NoiseSchedule, sampler: str = "ddim",
                 adapters=None, z=None) -> Tensor:
    eps_hat = params(x, t, c, adapters=adapters)
    if sampler == "ddim":
        return ddim_step(x, t, eps_hat, s)
    return ddpm_step(x, t, eps_hat, z, s)


def diffusion_loss(params, batch, s: NoiseSchedule, rng: np.random.Generator,
                   weights=None, adapters=None) -> Tensor:
    """Mean squared noise-prediction error over a batch ``(x0, c)``.

    Each example draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)``.  With
    ``weights`` the per-example errors are scaled before averaging.
    """
    x0, c = batch
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    c = np.asarray(c)
    if x0.ndim != 2 or len(x0) == 0:
        raise ContractError("diffusion_loss needs a non-empty 2-D batch of examples")
    if len(c) != len(x0):
        raise ContractError("conditions and examples differ in count")
    n = len(x0)
    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = s.alpha_bar[t - 1][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = params(Tensor._wrap(x_t), t, c, adapters=adapters)
    per_example = mean(square(subtract(pred, Tensor._wrap(eps))), axis=1)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError("diffusion_loss", ((n,), w.shape), "one weight per example")
        per_example = multiply(per_example, Tensor._wrap(w))
    return mean(per_example)


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 256
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.1


@dataclass
class PretrainResult:
    params: DenoiserParams
    schedule: NoiseSchedule
    loss_trace: list[float] = field(default_factory=list)


def pretrain(dataset, config: PretrainConfig, rng: np.random.Generator) -> PretrainResult:
    """Fit a fresh denoiser on ``dataset = (images, labels)`` with Adam."""
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ContractError("empty dataset")
    if config.steps < 0:
        raise ContractError("step budget must be non-negative")
    s = make_schedule(config.T, config.beta_start, config.beta_end)
    n_classes = max(N_CLASSES, int(y.max()) + 1)
    params = init_denoiser(rng, data_dim=X.shape[1], n_classes=n_classes,
                           hidden=config.hidden, T=config.T)
    opt = Adam(params.parameters(), lr=config.lr)
    trace: list[float] = []
    for step in range(config.steps):
        idx = rng.integers(0, len(X), size=config.batch_size)
        with abort_on_overflow(step):
            with Tape() as tape:
                loss = diffusion_loss(params, (X[idx], y[idx]), s, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericAbort(step, value)
            opt.step(backward(loss, tape, params.parameters()))
        trace.append(value)
    for p in params.parameters():
        p.grad = None
    return PretrainResult(params, s, trace)


def generate(params, conditions, s: NoiseSchedule, rng: np.random.Generator,
             sampler: str = "ddim", adapters=None) -> np.ndarray:
    """Untracked convenience sampler: one image per entry of ``conditions``."""
    c = np.asarray(conditions)
    x_T = rng.standard_normal((len(c), params.data_dim))
    with no_grad():
        return sample(params, c, Tensor._wrap(x_T), s, sampler, rng, adapters).data
