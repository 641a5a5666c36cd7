"""Command-line entry point: ``diffalign <subcommand> [--config F] [--out DIR] [--seed N]``.

Exit codes: 0 success, 2 validation error, 3 missing or unreadable input
artifact, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io
from .config import defaults, load_config, render_config, validate
from .data import make_shapes
from .diffusion import PretrainConfig, pretrain, sample
from .autodiff import Tensor, no_grad
from .errors import (
    ConfigValidationError,
    ContractError,
    DependencyError,
    NumericOverflowError,
)
from .finetune import FinetuneConfig, TruncationPolicy, evaluate, finetune, rwr_finetune
from .lora import mix, set_active_window
from .rewards import DetectorConfig, make_reward, train_detector

log = logging.getLogger("diffalign")

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4
MIX_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    hashes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "command": self.command,
            "config": render_config(self.config),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
            "hashes": self.hashes,
        }, indent=2, sort_keys=True)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Resolves artifact paths and records the manifest for one subcommand."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.manifest = RunManifest(command, cfg, {"seed": cfg["seed"]}, started=_now())

    def path(self, key_or_name: str) -> Path:
        name = self.cfg.get(key_or_name, key_or_name)
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def need(self, key: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise DependencyError(f"missing input artifact for {key!r}: {p}")
        self.manifest.inputs.append(str(p))
        return p

    def wrote(self, path) -> Path:
        self.manifest.outputs.append(str(path))
        return Path(path)

    def finish(self) -> Path:
        self.manifest.finished = _now()
        self.manifest.hashes = {p: sha256_file(p) for p in self.manifest.outputs}
        target = self.out / f"manifest_{self.manifest.command.replace('-', '_')}.json"
        target.write_text(self.manifest.to_json() + "\n")
        return target


def _load(loader, path):
    try:
        return loader(path)
    except io.FormatError as exc:
        raise DependencyError(str(exc)) from None


def _reward(run: Run, kind: str):
    detector = None
    if kind == "concept_removal":
        detector = _load(io.load_detector, run.need("detector")).detector
    return make_reward(kind, detector, run.cfg["reward_constant"])


def _finetune_config(cfg: dict) -> FinetuneConfig:
    trunc = TruncationPolicy(cfg["truncation"], cfg["k_fixed"], cfg["k_max"])
    return FinetuneConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], truncation=trunc,
        steps_per_epoch=cfg["steps_per_epoch"], max_epochs=cfg["max_epochs"] or None,
        seed=cfg["seed"], rank=cfg["rank"], full_finetune=cfg["full_finetune"],
        sampler=cfg["sampler"], train_conditions=cfg["train_conditions"],
        eval_every=cfg["eval_every"], eval_per_condition=cfg["eval_per_condition"],
        checkpoint=cfg["checkpoint"], record_wall_time=cfg["record_wall_time"],
    )


def _finetuned(run: Run):
    """Base params plus adapters, or a fully finetuned model when configured."""
    if run.cfg["full_finetune"]:
        params, s = _load(io.load_model, run.need("adapters"))
        return params, s, None
    params, s = _load(io.load_model, run.need("model"))
    return params, s, _load(io.load_adapters, run.need("adapters"))


def cmd_generate(run: Run) -> None:
    ds = make_shapes(run.cfg["n_per_class"], run.cfg["seed"])
    io.save_dataset(run.wrote(run.path("dataset")), ds)
    log.info("wrote %d images", len(ds))


def cmd_train_detector(run: Run) -> None:
    ds = _load(io.load_dataset, run.need("dataset"))
    cfg = run.cfg
    fit = train_detector((ds.images, ds.stripes),
                         DetectorConfig(cfg["detector_steps"], cfg["detector_lr"], cfg["detector_holdout"]),
                         cfg["seed"])
    io.save_detector(run.wrote(run.path("detector")), fit.reward)
    io.write_table_csv(run.wrote(run.out / "detector_loss.csv"), ("step", "loss"),
                       list(enumerate(fit.loss_trace)))
    log.info("detector held-out accuracy %.4f", fit.holdout_accuracy)


def cmd_pretrain(run: Run) -> None:
    ds = _load(io.load_dataset, run.need("dataset"))
    cfg = run.cfg
    pc = PretrainConfig(cfg["pretrain_steps"], cfg["pretrain_batch_size"], cfg["pretrain_lr"],
                        cfg["hidden"], cfg["T"], cfg["beta_start"], cfg["beta_end"])
    res = pretrain((ds.images, ds.labels), pc, np.random.default_rng(cfg["seed"]))
    io.save_model(run.wrote(run.path("model")), res.params, res.schedule)
    io.write_table_csv(run.wrote(run.out / "pretrain_loss.csv"), ("step", "loss"),
                       list(enumerate(res.loss_trace)))
    if res.loss_trace:
        log.info("final pretraining loss %.5f", res.loss_trace[-1])


def cmd_finetune(run: Run) -> None:
    cfg = run.cfg
    base, s = _load(io.load_model, run.need("model"))
    reward = _reward(run, cfg["reward"])
    fc = _finetune_config(cfg)
    method = finetune if cfg["method"] == "backprop" else rwr_finetune
    res = method(base, fc, reward, s)
    if res.adapters is None:
        io.save_model(run.wrote(run.path("adapters")), res.params, s)
    else:
        io.save_adapters(run.wrote(run.path("adapters")), res.adapters, s)
    io.write_metrics_csv(run.wrote(run.out / "metrics.csv"), res.metrics)
    if len(res.metrics):
        log.info("final batch reward %.5f", res.metrics.mean_reward[-1])


def _eval_seed(cfg: dict) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg["seed"], 7])


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    params, s, adapters = _finetuned(run)
    base, _ = _load(io.load_model, run.need("model")) if cfg["full_finetune"] else (params, s)
    reward = _reward(run, cfg["reward"])
    rows = []
    for label, p, a in (("base", base, None), ("finetuned", params, adapters)):
        cells = []
        for split in ("train_conditions", "test_conditions"):
            r = evaluate(p, a, cfg[split], reward, cfg["n_eval"],
                         np.random.default_rng(_eval_seed(cfg)), s, cfg["sample_sampler"])
            cells.append(r.mean)
        rows.append((label, *cells))
        log.info("%s: train %.5f test %.5f", label, *cells)
    io.write_table_csv(run.wrote(run.out / "evaluate.csv"),
                       ("model", "train_reward", "test_reward"), rows)


def _sample_batch(params, adapters, cfg, s, conditions):
    rng = np.random.default_rng(_eval_seed(cfg))
    c = np.repeat(np.asarray(conditions), cfg["n_samples"])
    x_T = rng.standard_normal((len(c), params.data_dim))
    noises = rng.standard_normal((s.T,) + x_T.shape) if cfg["sample_sampler"] == "ancestral" else None
    with no_grad():
        x0 = sample(params, c, Tensor._wrap(x_T), s, cfg["sample_sampler"], adapters=adapters,
                    noises=noises).data
    return c, x0


def _dump(run: Run, prefix: str, c, x0) -> None:
    counts: dict[int, int] = {}
    for cond, img in zip(c, x0):
        i = counts.get(int(cond), 0)
        counts[int(cond)] = i + 1
        run.wrote(io.export_image(img, run.out / f"{prefix}_c{int(cond)}_{i:02d}.pgm"))


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    params, s, adapters = _finetuned(run)
    conditions = cfg["train_conditions"] + cfg["test_conditions"]
    c, x0 = _sample_batch(params, adapters, cfg, s, conditions)
    _dump(run, "sample", c, x0)


def cmd_mix(run: Run) -> None:
    cfg = run.cfg
    params, s = _load(io.load_model, run.need("model"))
    a1 = _load(io.load_adapters, run.need("adapters"))
    a2 = _load(io.load_adapters, run.need("adapters_b"))
    r1, r2 = _reward(run, cfg["reward"]), _reward(run, cfg["reward_b"])
    conditions = cfg["train_conditions"] + cfg["test_conditions"]
    rows = []
    for alpha in MIX_ALPHAS:
        mixed = mix(a1, a2, alpha)
        rng = np.random.default_rng(_eval_seed(cfg))
        res = evaluate(params, mixed, conditions, r1, cfg["n_eval"], rng, s, cfg["sample_sampler"])
        v1 = res.mean
        v2 = float(np.mean(r2.score(res.samples)))
        rows.append((alpha, v1, v2, 0.5 * (v1 + v2)))
        log.info("alpha %.2f: %s %.5f  %s %.5f", alpha, cfg["reward"], v1, cfg["reward_b"], v2)
    io.write_table_csv(run.wrote(run.out / "mix.csv"),
                       ("alpha", f"reward_{cfg['reward']}", f"reward_{cfg['reward_b']}", "average"),
                       rows)


def window_variants(T: int) -> list[tuple[str, tuple[int, int] | None]]:
    """Named timestep windows: full chain, none, late (near the data) and early (near noise)."""
    half = T // 2
    return [("full", (1, T)), ("none", None), ("low", (1, half)), ("high", (half + 1, T))]


def cmd_ablate_window(run: Run) -> None:
    cfg = run.cfg
    params, s, adapters = _finetuned(run)
    if adapters is None:
        raise ConfigValidationError("ablate-window needs adapters; full_finetune must be false")
    reward = _reward(run, cfg["reward"])
    conditions = cfg["train_conditions"] + cfg["test_conditions"]
    rows = []
    for name, window in window_variants(s.T):
        a = None if window is None else set_active_window(adapters, *window, s.T)
        c, x0 = _sample_batch(params, a, cfg, s, conditions)
        _dump(run, f"window_{name}", c, x0)
        lo, hi = window if window else (0, 0)
        rows.append((name, lo, hi, float(np.mean(reward.score(x0)))))
    io.write_table_csv(run.wrote(run.out / "ablate_window.csv"),
                       ("window", "t_lo", "t_hi", "mean_reward"), rows)


COMMANDS = {
    "generate": cmd_generate,
    "train-detector": cmd_train_detector,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "mix": cmd_mix,
    "ablate-window": cmd_ablate_window,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffalign", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def run_command(command: str, cfg: dict, out) -> Path:
    """Run one subcommand in-process and return its manifest path."""
    validate(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(command, cfg, out)
    COMMANDS[command](run)
    return run.finish()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    start = time.perf_counter()
    try:
        if args.config is not None and not args.config.is_file():
            raise DependencyError(f"config file not found: {args.config}")
        cfg = load_config(args.config) if args.config else defaults()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigValidationError("--seed must be non-negative")
            cfg["seed"] = args.seed
        manifest = run_command(args.command, cfg, args.out)
    except NumericOverflowError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except DependencyError as exc:
        log.error("%s", exc)
        return EXIT_DEPENDENCY
    except ContractError as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    log.info("%s done in %.1fs; manifest %s", args.command, time.perf_counter() - start, manifest)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
