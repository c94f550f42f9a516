"""AdamW training with linear warmup and linear decay over composite batches."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .tasks import Sample, Scheduler, TaskSpec, check_registry
from .transformer import (ModelConfig, Parameters, example_loss, init_hybrid,
                          load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return base * step / warmup if warmup > 0 else base
    return base * (total - step) / (total - warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, nx.Tensor]) -> "OptimizerState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()}, 0)

    def save(self, path: str | Path) -> None:
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        np.savez(path, step=np.array(self.step), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "OptimizerState":
        with np.load(path) as z:
            m = {k[2:]: z[k] for k in z.files if k.startswith("m/")}
            v = {k[2:]: z[k] for k in z.files if k.startswith("v/")}
            return cls(m, v, int(z["step"]))


def decays(name: str) -> bool:
    """Weight decay applies to matrices and embedding tables, not biases or norm gains."""
    return not name.endswith((".b", ".g"))


def optimizer_step(params: Mapping[str, nx.Tensor], grads: Mapping[str, np.ndarray | None],
                   state: OptimizerState, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if weight_decay and decays(name):
            p.data *= 1.0 - lr * weight_decay
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    warmup: int = 200
    total_steps: int = 20_000
    weight_decay: float = 1e-4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    validate_every: int = 1000
    checkpoint_every: int = 0
    log_every: int = 1
    tasks: tuple[TaskSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "tasks", tuple(
            t if isinstance(t, TaskSpec) else TaskSpec.from_json(t) for t in self.tasks))
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.total_steps > 0 and not 0 < self.warmup < self.total_steps:
            raise ValueError(f"need 0 < warmup ({self.warmup}) < total_steps ({self.total_steps})")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["tasks"] = [t.to_json() for t in self.tasks]
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        return cls(**obj)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, task: str):
        super().__init__(f"non-finite loss at step {step} (task {task})")
        self.step = step
        self.task = task


@dataclass
class TrainResult:
    params: Parameters
    log: list[dict]
    curves: list[dict]
    state: OptimizerState
    steps: int


Validator = Callable[[Parameters, int], list[dict]]

LOG_FIELDS = ("step", "epoch", "task", "loss", "lr")


def write_csv(path: str | Path, rows: Sequence[Mapping], fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def train(cfg: TrainConfig, params: Parameters, samples: Mapping[str, Sequence[Sample]],
          out_dir: str | Path | None = None, validator: Validator | None = None,
          state: OptimizerState | None = None, start_step: int = 0,
          checkpoint_meta: Mapping | None = None) -> TrainResult:
    """Run ``cfg.total_steps - start_step`` composite-batch updates on ``params`` in place.

    ``start_step`` > 0 resumes: the scheduler is fast-forwarded so the example
    stream continues exactly where an uninterrupted run would be.
    """
    check_registry(cfg.tasks)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = state or OptimizerState.for_params(params)
    rows: list[dict] = []
    curves: list[dict] = []
    if cfg.total_steps == 0 or start_step >= cfg.total_steps:
        return TrainResult(params, rows, curves, state, start_step)

    sched = Scheduler(cfg.tasks, samples, cfg.seed)
    for _ in range(start_step):
        sched.next()
    meta = dict(checkpoint_meta or {})
    meta["tasks"] = [t.to_json() for t in cfg.tasks]

    def checkpoint(name: str, step: int) -> None:
        if out is None:
            return
        save_checkpoint(params, out / name, {**meta, "step": step})
        state.save(out / (name + ".optim.npz"))

    for step in range(start_step + 1, cfg.total_steps + 1):
        batch = sched.next()
        lr = lr_at(step, cfg.base_lr, cfg.warmup, cfg.total_steps)
        params.zero_grad()
        losses = [example_loss(ex, params) for ex in batch]
        for ex, l in zip(batch, losses):
            if not math.isfinite(l.item()):
                checkpoint("last_good.ckpt", step - 1)
                raise NonFiniteLoss(step, ex.task)
        nx.backward(nx.sum_scalars(losses))
        optimizer_step(params, {k: t.grad for k, t in params.items()}, state, lr,
                       cfg.betas, cfg.eps, cfg.weight_decay)
        if cfg.log_every and step % cfg.log_every == 0:
            for ex, l in zip(batch, losses):
                rows.append({"step": step, "epoch": sched.epoch, "task": ex.task,
                             "loss": l.item(), "lr": lr})
        if validator is not None and cfg.validate_every and (
                step % cfg.validate_every == 0 or step == cfg.total_steps):
            curves.extend(validator(params, step))
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(f"step{step}.ckpt", step)
    params.zero_grad()
    if out is not None:
        checkpoint("final.ckpt", cfg.total_steps)
        write_csv(out / "train_log.csv", rows, LOG_FIELDS)
        if curves:
            write_csv(out / "curves.csv", curves, CURVE_FIELDS)
    return TrainResult(params, rows, curves, state, cfg.total_steps)


# ---------------------------------------------------------------------------
# validation curves and ablations
# ---------------------------------------------------------------------------

CURVE_FIELDS = ("variant", "step", "task", "exact", "bleu")


def make_validator(heldout: Mapping[str, Sequence[Sample]], variant: str = "run") -> Validator:
    from .inference import evaluate_samples

    def _validate(params: Parameters, step: int) -> list[dict]:
        rows = []
        for task in sorted(heldout):
            rep = evaluate_samples(params, heldout[task])
            rows.append({"variant": variant, "step": step, "task": task,
                         "exact": rep.exact, "bleu": rep.bleu})
        return rows

    return _validate


@dataclass
class AblationReport:
    mode: str
    reference: str
    curves: dict[str, list[dict]]        # variant -> rows
    manifests: dict[str, dict[str, str]]
    elapsed: dict[str, float] = field(default_factory=dict)     # wall-clock seconds, not written

    def series(self, variant: str, task: str | None = None, metric: str = "exact") -> list[tuple[int, float]]:
        task = task or self.reference
        return [(r["step"], r[metric]) for r in self.curves[variant] if r["task"] == task]

    def summary(self, metric: str = "exact") -> list[dict]:
        """Reference-task metric per variant on the shared step grid."""
        grids = {v: dict(self.series(v, metric=metric)) for v in self.curves}
        steps = sorted(set.intersection(*(set(g) for g in grids.values())))
        return [{"step": s, **{v: grids[v][s] for v in self.curves}} for s in steps]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for v, rows in self.curves.items():
            write_csv(out / f"curves_{v}.csv", rows, CURVE_FIELDS)
        write_csv(out / "summary.csv", self.summary(), ["step", *self.curves])
        (out / "manifests.json").write_text(json.dumps(self.manifests, indent=1, sort_keys=True) + "\n")


def steps_to_reach(series: Sequence[tuple[int, float]], target: float) -> int | None:
    for step, value in series:
        if value >= target:
            return step
    return None


INIT_VARIANTS = ("random", "visual", "hybrid")
MULTITASK_VARIANTS = ("single", "multi")


def run_ablation(mode: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 samples: Mapping[str, Sequence[Sample]], heldout: Mapping[str, Sequence[Sample]],
                 text_ckpt: Parameters | None = None, visual_ckpt: Parameters | None = None,
                 out_dir: str | Path | None = None) -> AblationReport:
    """Train the variants of one ablation on identical data and seeds.

    ``init``: reference task only, initialised at random / from the visual
    checkpoint only / hybrid. ``multitask``: reference task alone vs all
    registered tasks, both from the same initialisation (hybrid when both
    checkpoints are given).
    """
    check_registry(train_cfg.tasks)
    ref = next(t for t in train_cfg.tasks if t.reference)
    single_cfg = TrainConfig(**{**asdict(train_cfg), "tasks": (ref,)})
    curves: dict[str, list[dict]] = {}
    manifests: dict[str, dict[str, str]] = {}

    if mode == "init":
        if text_ckpt is None or visual_ckpt is None:
            raise ValueError("init ablation needs both a text and a visual checkpoint")
        inits = {"random": (None, None), "visual": (None, visual_ckpt), "hybrid": (text_ckpt, visual_ckpt)}
        runs = [(v, single_cfg, inits[v]) for v in INIT_VARIANTS]
        val_sets = {ref.name: heldout[ref.name]}
        per_variant_val = {v: val_sets for v in INIT_VARIANTS}
    elif mode == "multitask":
        init = (text_ckpt, visual_ckpt)
        runs = [("single", single_cfg, init), ("multi", train_cfg, init)]
        per_variant_val = {"single": {ref.name: heldout[ref.name]},
                           "multi": {t.name: heldout[t.name] for t in train_cfg.tasks}}
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")

    elapsed: dict[str, float] = {}
    for variant, cfg, (text, visual) in runs:
        t0 = time.perf_counter()
        params, manifest = init_hybrid(model_cfg, text, visual)
        manifests[variant] = manifest
        sub = None if out_dir is None else Path(out_dir) / variant
        log.info("ablation %s: training variant %s", mode, variant)
        res = train(cfg, params, samples, out_dir=sub,
                    validator=make_validator(per_variant_val[variant], variant))
        curves[variant] = res.curves
        elapsed[variant] = time.perf_counter() - t0
    report = AblationReport(mode, ref.name, curves, manifests, elapsed)
    if out_dir is not None:
        report.write(out_dir)
    return report


def load_params(path: str | Path) -> Parameters:
    return load_checkpoint(path)[0]
