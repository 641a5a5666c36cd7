"""Backward pass, segment checkpointing and the finite-difference check."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DeterminismError, NumericOverflowError, TapeReuseError
from .tensor import Tape, Tensor, _capturing, _emit, as_tensor, current_tape, no_grad

GradientSet = dict  # Tensor -> np.ndarray


def evaluate_graph(inputs: Sequence[Tensor], program: Callable[..., Tensor]) -> Tensor:
    """Run ``program(*inputs)``; if any input is tracked, the output carries a ``tape``."""
    inputs = [as_tensor(x) for x in inputs]
    for x in inputs:
        if not np.all(np.isfinite(x.data)):
            raise NumericOverflowError("evaluate_graph", "non-finite input")
    if any(x.requires_grad for x in inputs):
        with Tape() as tape:
            out = program(*inputs)
        out.tape = tape
    else:
        out = program(*inputs)
        out.tape = None
    return out


def _propagate(tape: Tape, output: Tensor, seed: np.ndarray,
               targets: Sequence[Tensor]) -> list[np.ndarray]:
    grads: dict[int, np.ndarray] = {id(output): seed}
    target_ids = {id(t) for t in targets}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        if id(rec.output) not in target_ids:
            del grads[id(rec.output)]
        if rec.saved is None:
            raise TapeReuseError(f"saved values of {rec.op} were already released")
        in_grads = rec.vjp(g, rec.saved)
        for t, ig in zip(rec.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = np.array(ig, dtype=np.float64)
    return [grads.get(id(t), np.zeros(t.shape)) for t in targets]


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> GradientSet:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns ``{leaf: gradient}`` for every tracked leaf on the tape (or for
    ``wrt`` when given) and accumulates into each leaf's ``.grad``.  Leaves
    the loss does not reach get exact zeros.  The tape is consumed.
    """
    if tape.consumed:
        raise TapeReuseError("tape already consumed; record the computation again")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = list(wrt) if wrt is not None else tape.leaves()
    if not tape.produced(loss) and not any(loss is t for t in leaves):
        raise ContractError("loss was not recorded on this tape")
    seed = np.ones(loss.shape)
    grads = _propagate(tape, loss, seed, leaves)
    tape.release()
    out: GradientSet = {}
    for t, g in zip(leaves, grads):
        out[t] = g
        t.grad = g.copy() if t.grad is None else t.grad + g
    return out


def checkpoint_segment(program: Callable[..., Tensor], boundary_inputs: Sequence[Tensor]) -> Tensor:
    """Run ``program`` keeping only its boundary inputs for the backward pass.

    The interior is recomputed once during backward under a private tape.
    Tracked tensors the program closes over (weights) are discovered on the
    forward run and become inputs of the segment record.
    """
    boundary = [as_tensor(b) for b in boundary_inputs]
    tape = current_tape()
    if tape is None:
        return program(*boundary)
    proxies = [Tensor._wrap(b.data) for b in boundary]
    with _capturing() as found:
        out = program(*proxies)
    value = out.data
    captured = tuple(found.values())
    n = len(boundary)

    def vjp(g, saved):
        replay_in = [Tensor(arr, requires_grad=True) for arr in saved]
        with Tape() as inner:
            replay_out = program(*replay_in)
        if not np.array_equal(replay_out.data, value):
            raise DeterminismError("checkpointed program replayed to a different value")
        if not inner.produced(replay_out):
            return [None] * (n + len(captured))
        grads = _propagate(inner, replay_out, g, replay_in + list(captured))
        inner.release()
        return grads

    return _emit("checkpoint", tuple(boundary) + captured, value,
                 tuple(b.data for b in boundary), vjp)


def finite_diff_check(program: Callable[..., Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``program(*params)`` must return a scalar.  The relative error of one
    coordinate is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in params]
    with Tape() as tape:
        out = program(*leaves)
    if out.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued program")
    if not np.all(np.isfinite(out.data)):
        raise NumericOverflowError("finite_diff_check", "program output")
    if tape.produced(out):
        analytic = _propagate(tape, out, np.ones(out.shape), leaves)
        tape.release()
    else:
        analytic = [np.zeros(p.shape) for p in leaves]

    def value_at(i, flat_idx, delta):
        probe = [p.data.copy() for p in params]
        probe[i].reshape(-1)[flat_idx] += delta
        with no_grad():
            v = program(*[Tensor._wrap(a) for a in probe])
        val = float(np.asarray(v.data).reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericOverflowError("finite_diff_check", "perturbed program output")
        return val

    worst = 0.0
    for i, p in enumerate(params):
        ga = analytic[i].reshape(-1)
        for j in range(p.size):
            num = (value_at(i, j, eps) - value_at(i, j, -eps)) / (2.0 * eps)
            err = abs(ga[j] - num) / (abs(ga[j]) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
