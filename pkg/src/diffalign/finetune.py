"""Reward finetuning by backpropagation through the sampling chain.

The chain ``x_T -> x_0`` is treated as one differentiable policy.  The
loss is the negative mean reward of its outputs.  Gradients flow only
through the last ``K`` denoising steps (``K`` redrawn per batch when the
truncation policy is randomized), and each of those steps is a checkpoint
segment, so the tape keeps one state per step instead of every activation.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, checkpoint_segment, mean, negate, no_grad
from .diffusion import NoiseSchedule, denoise_step, diffusion_loss, sample
from .errors import ContractError, NumericAbort, abort_on_overflow
from .lora import AdapterSet, attach_lora
from .optim import Adam


@dataclass(frozen=True)
class TruncationPolicy:
    mode: str = "randomized"  # "randomized" | "fixed"
    k_fixed: int = 1
    k_max: int = 50

    def validate(self, T: int) -> None:
        if self.mode not in ("randomized", "fixed"):
            raise ContractError(f"unknown truncation mode {self.mode!r}")
        if self.mode == "fixed" and not 1 <= self.k_fixed <= T:
            raise ContractError(f"k_fixed must lie in [1, {T}]")
        if not 1 <= self.k_max <= T:
            raise ContractError(f"k_max must lie in [1, {T}]")


def sample_truncation(policy: TruncationPolicy, rng: np.random.Generator) -> int:
    """``k_fixed`` in fixed mode, otherwise uniform on ``{1, ..., k_max}``."""
    if policy.mode == "fixed":
        return int(policy.k_fixed)
    return int(rng.integers(1, policy.k_max + 1))


@dataclass
class PromptBatch:
    conditions: np.ndarray  # (B,) int
    noise: np.ndarray  # (B, D) x_T draws

    def __post_init__(self):
        self.conditions = np.asarray(self.conditions)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if len(self.conditions) != len(self.noise):
            raise ContractError("conditions and noises differ in count")

    def __len__(self) -> int:
        return len(self.conditions)


def truncated_rollout(params, adapters, c, x_T, K: int, s: NoiseSchedule, sampler: str = "ddim",
                      noises=None, checkpoint: bool = True) -> Tensor:
    """Sample ``x_0`` while recording only the last ``K`` steps.

    Steps ``t = T .. K+1`` run untracked, so the state entering step ``t = K``
    is a constant.  The forward value does not depend on ``K``.
    """
    if not 1 <= K <= s.T:
        raise ContractError(f"K must lie in [1, {s.T}], got {K}")
    if sampler == "ancestral" and noises is None:
        raise ContractError("ancestral rollout needs pre-drawn noises")
    x = x_T if isinstance(x_T, Tensor) else Tensor(x_T)
    x = x.detach()
    for t in range(s.T, 0, -1):
        z = None if noises is None else noises[s.T - t]
        if t > K:
            with no_grad():
                x = denoise_step(params, x, t, c, s, sampler, adapters, z)
            continue

        def step(x_in, t=t, z=z):
            return denoise_step(params, x_in, t, c, s, sampler, adapters, z)

        x = checkpoint_segment(step, [x]) if checkpoint else step(x)
    return x


def align_loss(params, adapters, batch: PromptBatch, s: NoiseSchedule, reward, K: int | None = None,
               sampler: str = "ddim", noises=None, checkpoint: bool = True) -> Tensor:
    """Negative mean reward of the chain's outputs for every ``(x_T, c)`` in ``batch``.

    ``K=None`` backpropagates through the whole chain.
    """
    if len(batch) == 0:
        raise ContractError("empty prompt batch")
    K = s.T if K is None else K
    x0 = truncated_rollout(params, adapters, batch.conditions, batch.noise, K, s, sampler,
                           noises, checkpoint)
    r = reward(x0)
    if not isinstance(r, Tensor) or r.shape != x0.shape[:-1]:
        shape = getattr(r, "shape", type(r).__name__)
        raise ContractError(f"reward must return one value per sample {x0.shape[:-1]}, got {shape}")
    return negate(mean(r))


def diversity_metric(samples) -> float:
    """Mean pairwise L2 distance over all unordered pairs."""
    arrs = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)
            for x in samples]
    if len(arrs) < 2:
        raise ContractError("diversity needs at least two samples")
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(arrs, 2)]
    return float(np.mean(dists))


@dataclass
class EvalResult:
    mean: float
    per_condition: dict[int, float]
    samples: np.ndarray


def evaluate(params, adapters, conditions, reward, n_per_condition: int, rng,
             s: NoiseSchedule | None = None, sampler: str = "ddim") -> EvalResult:
    """Mean reward over ``n_per_condition`` fresh samples per condition."""
    conditions = [int(c) for c in conditions]
    if not conditions:
        raise ContractError("no conditions to evaluate")
    if n_per_condition < 1:
        raise ContractError("n_per_condition must be at least 1")
    if s is None:
        raise ContractError("evaluate needs the noise schedule")
    rng = np.random.default_rng(rng)
    c = np.repeat(conditions, n_per_condition)
    x_T = rng.standard_normal((len(c), params.data_dim))
    noises = rng.standard_normal((s.T,) + x_T.shape) if sampler == "ancestral" else None
    with no_grad():
        x0 = sample(params, c, Tensor._wrap(x_T), s, sampler, adapters=adapters, noises=noises).data
        r = np.asarray(reward(Tensor._wrap(x0)).data, dtype=np.float64)
    per = {cond: float(r[c == cond].mean()) for cond in conditions}
    return EvalResult(float(r.mean()), per, x0)


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    truncation: TruncationPolicy = field(default_factory=TruncationPolicy)
    steps_per_epoch: int = 50
    max_epochs: int | None = 7
    seed: int = 0
    rank: int = 4
    full_finetune: bool = False
    sampler: str = "ddim"
    train_conditions: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 50
    eval_per_condition: int = 4
    checkpoint: bool = True
    record_wall_time: bool = False

    def validate(self, T: int) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ContractError("step budget, batch size and epoch length must be positive")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ContractError("max_epochs must be positive or None")
        if self.sampler not in ("ddim", "ancestral"):
            raise ContractError(f"unknown sampler {self.sampler!r}")
        if not self.train_conditions:
            raise ContractError("need at least one training condition")
        self.truncation.validate(T)


@dataclass
class RunMetrics:
    step: list[int] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    k_drawn: list[int] = field(default_factory=list)
    diversity: list[float | None] = field(default_factory=list)
    saved_values: list[int] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    COLUMNS = ("step", "mean_reward", "loss", "K_drawn", "diversity", "saved_values", "wall_ms")

    def __len__(self) -> int:
        return len(self.step)

    def append(self, step, mean_reward, loss, k, diversity, saved, wall_ms) -> None:
        self.step.append(step)
        self.mean_reward.append(mean_reward)
        self.loss.append(loss)
        self.k_drawn.append(k)
        self.diversity.append(diversity)
        self.saved_values.append(saved)
        self.wall_ms.append(wall_ms)

    def rows(self):
        return zip(self.step, self.mean_reward, self.loss, self.k_drawn, self.diversity,
                   self.saved_values, self.wall_ms)

    def diversity_trace(self) -> list[tuple[int, float]]:
        return [(s, d) for s, d in zip(self.step, self.diversity) if d is not None]


@dataclass
class FinetuneResult:
    params: object  # DenoiserParams actually sampled from
    adapters: AdapterSet | None
    metrics: RunMetrics
    stopped_early: bool = False


def _streams(seed: int) -> tuple[np.random.Generator, ...]:
    # Independent substreams so the K draws never shift the noise draws.
    seqs = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(sq) for sq in seqs)


def _trainable(base, config: FinetuneConfig, init_rng):
    if config.full_finetune:
        params = base.copy().requires_grad_(True)
        return params, None, params.parameters()
    frozen = base.copy().requires_grad_(False)
    adapters = attach_lora(frozen, config.rank, init_rng)
    return frozen, adapters, adapters.parameters()


def _step_budget(config: FinetuneConfig) -> tuple[int, bool]:
    if config.max_epochs is None:
        return config.steps, False
    cap = config.max_epochs * config.steps_per_epoch
    return min(config.steps, cap), cap < config.steps


def finetune(base, config: FinetuneConfig, reward, s: NoiseSchedule, rng=None) -> FinetuneResult:
    """Gradient descent on the alignment loss.

    Trains LoRA adapters on a frozen copy of ``base`` unless
    ``config.full_finetune`` is set.  ``rng`` (seed or generator) overrides
    ``config.seed``.
    """
    config.validate(s.T)
    seed = config.seed if rng is None else _seed_of(rng)
    k_rng, noise_rng, eval_rng, init_rng = _streams(seed)
    params, adapters, trainable = _trainable(base, config, init_rng)
    opt = Adam(trainable, lr=config.lr)
    train_c = np.asarray(config.train_conditions)
    eval_c = np.repeat(train_c, config.eval_per_condition)
    eval_noise = eval_rng.standard_normal((len(eval_c), params.data_dim))
    budget, stopped_early = _step_budget(config)
    metrics = RunMetrics()
    for step in range(budget):
        start = time.perf_counter()
        K = sample_truncation(config.truncation, k_rng)
        batch = PromptBatch(noise_rng.choice(train_c, config.batch_size),
                            noise_rng.standard_normal((config.batch_size, params.data_dim)))
        noises = None
        if config.sampler == "ancestral":
            noises = noise_rng.standard_normal((s.T, config.batch_size, params.data_dim))
        with abort_on_overflow(step):
            with Tape() as tape:
                loss = align_loss(params, adapters, batch, s, reward, K, config.sampler, noises,
                                  config.checkpoint)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericAbort(step, value)
            saved = tape.saved_value_count()
            opt.step(backward(loss, tape, trainable))
        diversity = None
        if config.eval_every and (step + 1) % config.eval_every == 0:
            with no_grad():
                x0 = sample(params, eval_c, Tensor._wrap(eval_noise), s, "ddim", adapters=adapters).data
            diversity = diversity_metric(list(np.clip(x0, -1.0, 1.0)))
        wall = (time.perf_counter() - start) * 1e3 if config.record_wall_time else 0.0
        metrics.append(step, -value, value, K, diversity, saved, wall)
    for p in trainable:
        p.grad = None
    return FinetuneResult(params, adapters, metrics, stopped_early and budget < config.steps)


def rwr_finetune(base, config: FinetuneConfig, reward, s: NoiseSchedule, rng=None) -> FinetuneResult:
    """Reward-weighted regression baseline.

    Each step samples images without a tape, scores them, and descends the
    diffusion loss on those images with every example's error scaled by its
    reward.  No reward gradient is used.
    """
    config.validate(s.T)
    seed = config.seed if rng is None else _seed_of(rng)
    _, noise_rng, eval_rng, init_rng = _streams(seed)
    params, adapters, trainable = _trainable(base, config, init_rng)
    opt = Adam(trainable, lr=config.lr)
    train_c = np.asarray(config.train_conditions)
    eval_c = np.repeat(train_c, config.eval_per_condition)
    eval_noise = eval_rng.standard_normal((len(eval_c), params.data_dim))
    budget, stopped_early = _step_budget(config)
    metrics = RunMetrics()
    for step in range(budget):
        start = time.perf_counter()
        c = noise_rng.choice(train_c, config.batch_size)
        x_T = noise_rng.standard_normal((config.batch_size, params.data_dim))
        with abort_on_overflow(step):
            with no_grad():
                x0 = sample(params, c, Tensor._wrap(x_T), s, config.sampler, noise_rng, adapters).data
                r = np.asarray(reward(Tensor._wrap(x0)).data, dtype=np.float64)
            loss = rwr_step(params, adapters, trainable, opt, x0, c, r, s, noise_rng)
        if not np.isfinite(loss):
            raise NumericAbort(step, loss)
        diversity = None
        if config.eval_every and (step + 1) % config.eval_every == 0:
            with no_grad():
                xe = sample(params, eval_c, Tensor._wrap(eval_noise), s, "ddim", adapters=adapters).data
            diversity = diversity_metric(list(np.clip(xe, -1.0, 1.0)))
        wall = (time.perf_counter() - start) * 1e3 if config.record_wall_time else 0.0
        metrics.append(step, float(r.mean()), loss, 0, diversity, 0, wall)
    for p in trainable:
        p.grad = None
    return FinetuneResult(params, adapters, metrics, stopped_early and budget < config.steps)


def rwr_step(params, adapters, trainable, opt: Adam, x0, c, rewards, s: NoiseSchedule,
             rng: np.random.Generator) -> float:
    """One optimizer step on the reward-weighted diffusion loss; returns the loss."""
    with Tape() as tape:
        loss = diffusion_loss(params, (x0, c), s, rng, weights=rewards, adapters=adapters)
    value = loss.item()
    if np.isfinite(value):
        if tape.produced(loss):
            opt.step(backward(loss, tape, trainable))
        else:
            tape.release()
    return value


def _seed_of(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)
