"""Flat ``key = value`` run configuration.

One file fully determines a run.  Blank lines and ``#`` comments are
ignored; every key must appear in :data:`SCHEMA`, so a typo fails loudly
instead of silently falling back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigValidationError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


def _path(text: str) -> str:
    return text.strip()


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.options = options
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    # run
    "seed": Key(int, 0, "master seed; --seed overrides it"),
    # artifacts (relative paths resolve against --out)
    "dataset": Key(_path, "dataset.bin", "dataset file"),
    "model": Key(_path, "model.bin", "pretrained denoiser file"),
    "adapters": Key(_path, "adapters.bin", "adapter file written by finetune, read by evaluate/sample"),
    "adapters_b": Key(_path, "adapters_b.bin", "second adapter file for the mix sweep"),
    "detector": Key(_path, "detector.bin", "stripe detector file"),
    # dataset
    "n_per_class": Key(int, 256, "images per class for generate"),
    # pretraining
    "T": Key(int, 50, "number of diffusion steps"),
    "beta_start": Key(float, 1e-4, "first noise variance"),
    "beta_end": Key(float, 0.1, "last noise variance"),
    "hidden": Key(int, 256, "denoiser hidden width"),
    "pretrain_steps": Key(int, 2000, "pretraining optimizer steps"),
    "pretrain_batch_size": Key(int, 64, "pretraining batch size"),
    "pretrain_lr": Key(float, 1e-3, "pretraining learning rate"),
    # detector
    "detector_steps": Key(int, 500, "detector gradient steps"),
    "detector_lr": Key(float, 0.05, "detector learning rate"),
    "detector_holdout": Key(float, 0.2, "fraction of images held out for detector accuracy"),
    # finetuning
    "method": Key(_choice("backprop", "rwr"), "backprop", "finetuning method: reward backpropagation or reward-weighted regression"),
    "reward": Key(_choice("brightness", "compressibility", "concept_removal", "constant"),
                  "brightness", "reward model"),
    "reward_b": Key(_choice("brightness", "compressibility", "concept_removal", "constant"),
                    "compressibility", "second reward, scored alongside the first by mix"),
    "reward_constant": Key(float, 0.5, "value returned by the constant reward"),
    "steps": Key(int, 300, "finetuning optimizer steps"),
    "batch_size": Key(int, 8, "finetuning batch size"),
    "lr": Key(float, 1e-3, "finetuning learning rate"),
    "truncation": Key(_choice("randomized", "fixed"), "randomized", "truncation policy"),
    "k_fixed": Key(int, 1, "K for the fixed policy"),
    "k_max": Key(int, 50, "upper end of the randomized K range"),
    "steps_per_epoch": Key(int, 50, "optimizer steps per epoch"),
    "max_epochs": Key(int, 7, "early-stopping epoch cap; 0 disables it"),
    "rank": Key(int, 4, "LoRA rank"),
    "full_finetune": Key(_bool, False, "train every base weight instead of adapters"),
    "sampler": Key(_choice("ddim", "ancestral"), "ddim", "sampler used during finetuning"),
    "checkpoint": Key(_bool, True, "checkpoint each in-gradient denoising step"),
    "record_wall_time": Key(_bool, False, "fill wall_ms; off keeps CSVs byte-reproducible"),
    "eval_every": Key(int, 50, "steps between diversity evaluations; 0 disables"),
    "eval_per_condition": Key(int, 4, "samples per condition at each diversity evaluation"),
    # evaluation and sampling
    "train_conditions": Key(_ints, (0, 1, 2), "conditions used for finetuning"),
    "test_conditions": Key(_ints, (3,), "held-out conditions"),
    "n_eval": Key(int, 16, "samples per condition for evaluate and mix"),
    "n_samples": Key(int, 4, "images per condition for sample and ablate-window"),
    "sample_sampler": Key(_choice("ddim", "ancestral"), "ddim", "sampler for evaluate, sample, mix"),
}


def defaults() -> dict[str, Any]:
    return {k: v.default for k, v in SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text over the defaults.  Raises ConfigValidationError."""
    cfg = defaults()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigValidationError(f"{source}:{lineno}: duplicate config key {key!r}")
        seen.add(key)
        try:
            cfg[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise ConfigValidationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    validate(cfg)
    return cfg


def load_config(path) -> dict[str, Any]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def validate(cfg: dict[str, Any]) -> None:
    unknown = set(cfg) - set(SCHEMA)
    if unknown:
        raise ConfigValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    positive = ("n_per_class", "T", "hidden", "pretrain_batch_size", "batch_size",
                "steps_per_epoch", "rank", "n_eval", "n_samples", "eval_per_condition", "k_fixed",
                "k_max")
    for key in positive:
        if cfg[key] < 1:
            raise ConfigValidationError(f"{key!r} must be at least 1, got {cfg[key]}")
    for key in ("pretrain_steps", "steps", "detector_steps", "max_epochs", "eval_every"):
        if cfg[key] < 0:
            raise ConfigValidationError(f"{key!r} must be non-negative, got {cfg[key]}")
    for key in ("pretrain_lr", "lr", "detector_lr"):
        if not cfg[key] > 0:
            raise ConfigValidationError(f"{key!r} must be positive, got {cfg[key]}")
    if not 0.0 <= cfg["beta_start"] <= cfg["beta_end"] < 1.0:
        raise ConfigValidationError("need 0 <= beta_start <= beta_end < 1")
    if not 0.0 <= cfg["detector_holdout"] < 1.0:
        raise ConfigValidationError("'detector_holdout' must lie in [0, 1)")
    if cfg["k_max"] > cfg["T"] or cfg["k_fixed"] > cfg["T"]:
        raise ConfigValidationError("'k_max' and 'k_fixed' must not exceed 'T'")
    for key in ("train_conditions", "test_conditions"):
        if not cfg[key]:
            raise ConfigValidationError(f"{key!r} must list at least one condition")
        if any(not 0 <= c < 4 for c in cfg[key]):
            raise ConfigValidationError(f"{key!r} entries must lie in [0, 4)")


def render_config(cfg: dict[str, Any]) -> str:
    """Inverse of :func:`parse_config`; ``parse_config(render_config(c)) == c``."""
    lines = []
    for key in SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ",".join(str(i) for i in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
