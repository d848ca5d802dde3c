"""Adapter fine-tuning with a frozen base network, and paired init comparisons."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from .adapter import InitMode, LoraAdapter, adapter_params
from .net import Batch, DataGenerator, NumericalError, TaskConfig, ToyNetwork, _forward, backward, loss_and_grad, make_teacher_student
from .pipeline import INIT_STREAM_OFFSET, initialize
from .svdstream import StreamConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float | None = None
    optimizer: str = "sgd"
    batch_size: int = 16
    seed: int = 0
    warmup_fraction: float = 0.0
    schedule: str = "constant"
    loss: str = "mse"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    threshold: float | None = None
    # steps_to_threshold uses the running mean of this many step losses
    threshold_window: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "linear_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")

    @property
    def base_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-2 if self.optimizer == "sgd" else 1e-3

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        warm = int(round(self.warmup_fraction * self.steps))
        if step < warm:
            return self.base_lr * (step + 1) / warm
        if self.schedule == "linear_decay":
            return self.base_lr * (self.steps - step) / max(self.steps - warm, 1)
        return self.base_lr


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)
    steps_to_threshold: int | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.records])


def _batches(data, cfg: TrainConfig) -> Iterator[Batch]:
    if isinstance(data, DataGenerator):
        return data.stream(cfg.batch_size, cfg.seed)
    return iter(data)


def finetune(net: ToyNetwork, adapters: Mapping[str, LoraAdapter], data, cfg: TrainConfig) -> RunMetrics:
    """Train the adapters in place; the base weights are never touched.

    ``data`` is a DataGenerator (streamed with ``cfg.seed``) or an iterable of
    batches.  Each step records the batch loss and the global L2 norm of all
    adapter gradients, both taken before the update.
    """
    if not adapters:
        raise ValueError("no adapters to train")
    trainable = [l.name for l in net.iter_layers() if not l.frozen]
    if trainable:
        raise ValueError(f"base layers must be frozen: {trainable}")
    keys = list(adapter_params(adapters))
    moments = {k: (0.0, 0.0) for k in keys}
    b1, b2 = cfg.betas
    metrics = RunMetrics()
    window: list[float] = []
    stream = _batches(data, cfg)
    for step in range(cfg.steps):
        try:
            batch = next(stream)
        except StopIteration:
            if step == 0:
                raise ValueError("empty data stream") from None
            break
        loss, grads = backward(net, batch, cfg.loss, adapters)
        gvec = [grads[k] for k in keys]
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in gvec)))
        if not np.isfinite(gnorm):
            raise NumericalError(f"non-finite adapter gradient at step {step + 1}")
        metrics.records.append(StepRecord(step + 1, loss, gnorm))
        if cfg.threshold is not None and metrics.steps_to_threshold is None:
            window = (window + [loss])[-cfg.threshold_window:]
            if len(window) == cfg.threshold_window and np.mean(window) <= cfg.threshold:
                metrics.steps_to_threshold = step + 1

        lr = cfg.lr_at(step)
        params = adapter_params(adapters)
        new = {}
        for k in keys:
            g = grads[k]
            if cfg.optimizer == "sgd":
                new[k] = params[k] - lr * g
            else:
                m, v = moments[k]
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                moments[k] = (m, v)
                mhat = m / (1 - b1 ** (step + 1))
                vhat = v / (1 - b2 ** (step + 1))
                new[k] = params[k] * (1 - lr * cfg.weight_decay) - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        for name, ad in adapters.items():
            ad.a = new[f"{name}.lora_a"]
            ad.b = new[f"{name}.lora_b"]
    return metrics


# --- gradient verification ------------------------------------------------

def _loss_and_kinks(net, batch, loss, adapters):
    out, cache = _forward(net, batch.inputs, adapters)
    signs = [extra > 0 for block, (kind, _, extra) in zip(net.blocks, cache)
             if kind == "dense" and block.activation == "relu"]
    return loss_and_grad(out, batch.targets, loss)[0], signs


def gradient_check(net: ToyNetwork, adapters: Mapping[str, LoraAdapter], batch: Batch,
                   eps: float = 1e-5, loss: str = "mse", abs_floor: float = 1e-7) -> float:
    """Largest relative error between analytic and central-difference adapter gradients.

    Relative error is ``|g - fd| / max(|g|, |fd|, abs_floor)``.  Entries whose
    +-eps perturbation flips a ReLU input sign are skipped: the loss is not
    differentiable across that kink.
    """
    _, grads = backward(net, batch, loss, adapters)
    if any(k.endswith((".w", ".bias")) for k in grads):
        raise ValueError("gradient_check expects a frozen base network")
    _, base_signs = _loss_and_kinks(net, batch, loss, adapters)
    worst = 0.0
    skipped = 0
    for key, arr in adapter_params(adapters).items():
        g = grads[key]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, sp = _loss_and_kinks(net, batch, loss, adapters)
            arr[idx] = orig - eps
            lm, sm = _loss_and_kinks(net, batch, loss, adapters)
            arr[idx] = orig
            if any(np.any(a != b) or np.any(c != b) for a, b, c in zip(sp, base_signs, sm)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * eps)
            err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), abs_floor)
            worst = max(worst, err)
    if skipped:
        log.debug("gradient_check skipped %d entries at ReLU kinks", skipped)
    return worst


# --- paired init comparison -----------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    mode: InitMode
    seed: int
    train: TrainConfig
    task: TaskConfig
    stream: StreamConfig
    init_rows: int
    threshold_factor: float


@dataclass
class RunOutcome:
    label: str
    seed: int
    metrics: RunMetrics | None
    init_batches: int = 0
    error: str | None = None


def prepare_run(mode: InitMode, seed: int, task: TaskConfig, stream: StreamConfig, init_rows: int,
                alpha: float = 1.0, measure: str = "eva", mask: float = 0.0):
    """Student, data source and initialised adapters for one seeded run.

    Returns ``(student, data, init_result)``.  The init pass streams from
    ``seed + INIT_STREAM_OFFSET`` so it never replays the training batches.
    """
    _, student, data = make_teacher_student(task, seed)
    if mode.seed is None and mode.kind in ("eva_perm", "eva_rot", "lora_redist", "random"):
        mode = replace(mode, seed=seed)
    batches = data.stream(init_rows, seed + INIT_STREAM_OFFSET, mask) if mode.needs_states else None
    result = initialize(student, mode, replace(stream, seed=seed), batches, measure=measure, alpha=alpha)
    return student, data, result


def execute_run(run: RunSpec) -> RunOutcome:
    label = run.mode.kind
    try:
        student, data, init = prepare_run(run.mode, run.seed, run.task, run.stream, run.init_rows)
        cfg = replace(run.train, seed=run.seed, threshold=run.threshold_factor * data.noise_floor)
        return RunOutcome(label, run.seed, finetune(student, init.adapters, data, cfg), init_batches=init.batches)
    except (NumericalError, ValueError) as exc:
        log.warning("run %s/seed %d failed: %s", label, run.seed, exc)
        return RunOutcome(label, run.seed, None, error=str(exc))


@dataclass
class ModeSummary:
    label: str
    runs: list[RunOutcome]
    steps: int

    @property
    def ok(self) -> list[RunMetrics]:
        return [r.metrics for r in self.runs if r.metrics is not None]

    @property
    def partial(self) -> bool:
        return any(r.metrics is None for r in self.runs)

    def _stack(self, attr: str) -> np.ndarray:
        curves = [getattr(m, attr) for m in self.ok]
        n = min(c.size for c in curves)
        return np.stack([c[:n] for c in curves])

    @property
    def mean_loss_curve(self) -> np.ndarray:
        return self._stack("losses").mean(axis=0)

    @property
    def std_loss_curve(self) -> np.ndarray:
        return self._stack("losses").std(axis=0)

    @property
    def mean_grad_norm_curve(self) -> np.ndarray:
        return self._stack("grad_norms").mean(axis=0)

    def steps_to_threshold(self) -> list[int]:
        """Per-run steps to threshold; runs that never get there count as steps + 1."""
        return [m.steps_to_threshold if m.steps_to_threshold is not None else self.steps + 1 for m in self.ok]

    def row(self) -> dict:
        finals = np.array([m.final_loss for m in self.ok])
        return {
            "mode": self.label,
            "mean_final_loss": float(finals.mean()),
            "std_final_loss": float(finals.std()),
            "mean_steps_to_threshold": float(np.mean(self.steps_to_threshold())),
            "mean_gradnorm_step1": float(np.mean([m.records[0].grad_norm for m in self.ok])),
        }


@dataclass
class ComparisonReport:
    modes: list[ModeSummary]
    seeds: list[int]

    def rows(self) -> list[dict]:
        return [m.row() for m in self.modes if m.ok]

    def mode(self, label: str) -> ModeSummary:
        return next(m for m in self.modes if m.label == label)


def default_workers() -> int:
    env = os.environ.get("EVA_THREADS")
    if env:
        return max(1, int(env))
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def compare_inits(modes: Sequence[InitMode], seeds: Sequence[int], train: TrainConfig,
                  task: TaskConfig | None = None, stream: StreamConfig | None = None,
                  init_rows: int = 16, threshold_factor: float = 2.0, workers: int = 1) -> ComparisonReport:
    """Fine-tune every mode on every seed with identical data per seed.

    The same seed fixes the teacher, the student perturbation, the init-pass
    stream and the training stream for all modes, so differences between
    modes are paired.
    """
    if len(modes) < 2:
        raise ValueError("need at least two modes")
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    task = task or TaskConfig()
    stream = stream or StreamConfig()
    specs = [RunSpec(m, s, train, task, stream, init_rows, threshold_factor) for m in modes for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(execute_run, specs))
    else:
        outcomes = [execute_run(s) for s in specs]
    summaries = []
    for i, m in enumerate(modes):
        runs = outcomes[i * len(seeds):(i + 1) * len(seeds)]
        summaries.append(ModeSummary(m.kind, runs, train.steps))
    return ComparisonReport(summaries, list(seeds))
