"""Low-rank adapters for the denoiser's linear layers.

A layer ``h = W x + b`` becomes ``h = W x + b + up @ (down @ x)`` with
``down`` of shape (rank, in) and ``up`` of shape (out, rank).  ``up``
starts at zero, so attaching adapters leaves the network unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, add, affine, as_tensor, multiply
from .diffusion import DenoiserParams
from .errors import ContractError, ShapeError


@dataclass
class LoraBlock:
    host: str
    down: Tensor  # (rank, in)
    up: Tensor  # (out, rank)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta_weight(self) -> np.ndarray:
        return self.up.data @ self.down.data


@dataclass
class AdapterSet:
    """One :class:`LoraBlock` per adapted layer plus a timestep window.

    ``window`` is ``None`` (always active) or an inclusive ``(t_lo, t_hi)``.
    """

    blocks: dict[str, LoraBlock]
    window: tuple[int, int] | None = None
    consumed: bool = field(default=False, compare=False)

    @property
    def hosts(self) -> tuple[str, ...]:
        return tuple(self.blocks)

    @property
    def rank(self) -> int:
        ranks = {b.rank for b in self.blocks.values()}
        return ranks.pop() if len(ranks) == 1 else -1

    def parameters(self) -> list[Tensor]:
        out = []
        for b in self.blocks.values():
            out.extend((b.down, b.up))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, b in self.blocks.items():
            out[f"{name}.down"] = b.down.data
            out[f"{name}.up"] = b.up.data
        return out

    def active(self, t) -> np.ndarray | bool:
        if self.window is None:
            return True
        lo, hi = self.window
        t = np.asarray(t)
        return (t >= lo) & (t <= hi)

    def contribution(self, name: str, h: Tensor, t):
        """Adapter term for layer ``name`` at timestep(s) ``t``, or ``None``."""
        block = self.blocks.get(name)
        if block is None:
            return None
        on = self.active(t)
        if np.ndim(on) == 0:
            return _lowrank(h, block) if on else None
        if not np.any(on):
            return None
        mask = Tensor._wrap(np.asarray(on, dtype=np.float64)[:, None])
        return multiply(_lowrank(h, block), mask)


def _lowrank(x: Tensor, block: LoraBlock) -> Tensor:
    return affine(affine(x, block.down), block.up)


def attach_lora(base: DenoiserParams, rank: int = 4, rng: np.random.Generator | None = None,
                std: float = 0.01) -> AdapterSet:
    """Adapters on every linear layer: ``down ~ N(0, std^2)``, ``up = 0``."""
    rng = np.random.default_rng(rng)
    min_width = min(min(base.layer_shape(name)) for name in base.layers)
    if int(rank) != rank or not 1 <= rank < min_width:
        raise ContractError(f"rank must satisfy 1 <= rank < {min_width}, got {rank}")
    blocks = {}
    for name in base.layers:
        out_dim, in_dim = base.layer_shape(name)
        down = Tensor(rng.normal(0.0, std, size=(rank, in_dim)), requires_grad=True)
        up = Tensor(np.zeros((out_dim, rank)), requires_grad=True)
        blocks[name] = LoraBlock(name, down, up)
    return AdapterSet(blocks)


def lora_forward(x, W, block: LoraBlock) -> Tensor:
    """``W x + up (down x)`` for a vector or a batch of row vectors."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or block.down.shape[1] != W.shape[1] or block.up.shape[0] != W.shape[0]:
        raise ShapeError("lora_forward", (W.shape, block.down.shape, block.up.shape))
    return add(affine(x, W), _lowrank(x, block))


def merge(base: DenoiserParams, adapters: AdapterSet) -> DenoiserParams:
    """Fold each ``up @ down`` into its host weight; the adapter set is consumed."""
    if adapters.consumed:
        raise ContractError("adapter set already merged; attach or load a fresh one")
    for name, block in adapters.blocks.items():
        if f"{name}.weight" not in base.tensors:
            raise ContractError(f"adapter host {name!r} not in base network")
        if base.layer_shape(name) != (block.up.shape[0], block.down.shape[1]):
            raise ContractError(f"adapter {name!r} does not match host width")
    merged = base.copy()
    for name, block in adapters.blocks.items():
        w = merged.tensors[f"{name}.weight"]
        w.data = w.data + block.delta_weight()
    adapters.consumed = True
    return merged


def _check_same_structure(a1: AdapterSet, a2: AdapterSet) -> None:
    if a1.hosts != a2.hosts:
        raise ContractError(f"adapter hosts differ: {a1.hosts} vs {a2.hosts}")
    for name in a1.hosts:
        b1, b2 = a1.blocks[name], a2.blocks[name]
        if b1.down.shape != b2.down.shape or b1.up.shape != b2.up.shape:
            raise ContractError(f"adapter {name!r} shapes differ")


def mix(a1: AdapterSet, a2: AdapterSet, alpha: float) -> AdapterSet:
    """Elementwise ``alpha * a1 + (1 - alpha) * a2`` of every adapter matrix."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"mixing coefficient must lie in [0, 1], got {alpha}")
    _check_same_structure(a1, a2)
    w1, w2 = _mix_weights(float(alpha))
    blocks = {}
    for name in a1.hosts:
        b1, b2 = a1.blocks[name], a2.blocks[name]
        blocks[name] = LoraBlock(
            name,
            Tensor(_convex(b1.down.data, b2.down.data, w1, w2)),
            Tensor(_convex(b1.up.data, b2.up.data, w1, w2)),
        )
    return AdapterSet(blocks, window=a1.window)


def _mix_weights(alpha: float) -> tuple[float, float]:
    # The larger weight is always derived as 1 - smaller (exact by Sterbenz),
    # so (alpha, a1, a2) and (1 - alpha, a2, a1) produce identical weights.
    if alpha >= 0.5:
        return alpha, 1.0 - alpha
    w2 = 1.0 - alpha
    return 1.0 - w2, w2


def _convex(x: np.ndarray, y: np.ndarray, w1: float, w2: float) -> np.ndarray:
    return np.where(x == y, x, w1 * x + w2 * y)


def set_active_window(adapters: AdapterSet, t_lo: int, t_hi: int, T: int) -> AdapterSet:
    """Same adapters, applied only while ``t_lo <= t <= t_hi``."""
    if not 1 <= t_lo <= t_hi <= T:
        raise ContractError(f"window needs 1 <= t_lo <= t_hi <= {T}, got [{t_lo}, {t_hi}]")
    return replace(adapters, window=(int(t_lo), int(t_hi)), consumed=False)


def clear_window(adapters: AdapterSet) -> AdapterSet:
    return replace(adapters, window=None, consumed=False)
