"""SGD training loops: single-task, interleaved multi-task, frozen-trunk adaptation.

The optimizer is plain minibatch SGD with an exponentially decaying learning
rate and a per-layer max-change cap: the update for a layer's (W, b) pair is
rescaled whenever its joint L2 norm exceeds the cap. Layers with mask scale 0
are never touched, so their parameters stay bitwise identical across a run.

One epoch visits every (task, frame) example exactly once: each task's
utterances are permuted, concatenated, and cut into minibatch-sized slices;
the slices of all tasks are then shuffled together, so tasks interleave at
minibatch granularity with no per-task reweighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .model import FreezeMask, Network, forward_batch
from .numerics import NumericError, Rng, backward_chain, softmax_xent

LogSink = Callable[[dict], None] | None


@dataclass
class TrainConfig:
    initial_lr: float = 0.0015
    final_lr_factor: float = 10.0
    epochs: float = 3.0
    minibatch: int = 256
    max_change: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.final_lr_factor < 1:
            raise ValueError(f"final_lr_factor must be >= 1, got {self.final_lr_factor}")
        if self.epochs <= 0:
            raise ValueError(f"epochs must be > 0, got {self.epochs}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.max_change <= 0:
            raise ValueError(f"max_change must be > 0, got {self.max_change}")

    def to_dict(self) -> dict:
        return {
            "initial_lr": self.initial_lr,
            "final_lr_factor": self.final_lr_factor,
            "epochs": self.epochs,
            "minibatch": self.minibatch,
            "max_change": self.max_change,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(cfg: TrainConfig, progress: float) -> float:
    """lr(p) = initial * factor**(-p); endpoints are exact by construction."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    if progress == 0.0:
        return cfg.initial_lr
    if progress == 1.0:
        return cfg.initial_lr / cfg.final_lr_factor
    return cfg.initial_lr * cfg.final_lr_factor ** (-progress)


# -----------------------------------------------------------------------------
# Parameter updates
# -----------------------------------------------------------------------------


@dataclass
class ClipInfo:
    raw_norm: float
    applied_norm: float
    clipped: bool


def apply_update(
    net: Network,
    grads: dict[str, tuple[np.ndarray, np.ndarray]],
    lr: float,
    mask: FreezeMask,
    max_change: float,
) -> dict[str, ClipInfo]:
    """In-place SGD step; returns the per-layer clip report.

    Frozen layers (scale 0) are skipped outright, not written with zeros, so
    their bit patterns cannot change. Non-finite gradients abort training.
    """
    report: dict[str, ClipInfo] = {}
    for name, (gw, gb) in grads.items():
        scale = mask.scale(name)
        if scale == 0.0:
            continue
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient for layer {name}; aborting")
        dw = (-lr * scale) * gw
        db = (-lr * scale) * gb
        norm = math.sqrt(float(np.sum(dw * dw)) + float(np.sum(db * db)))
        applied = norm
        clipped = norm > max_change
        if clipped:
            factor = max_change / norm
            dw *= factor
            db *= factor
            applied = math.sqrt(float(np.sum(dw * dw)) + float(np.sum(db * db)))
        w, b = net.params[name]
        w += dw
        b += db
        report[name] = ClipInfo(norm, applied, clipped)
    return report


# -----------------------------------------------------------------------------
# Epoch batch plans
# -----------------------------------------------------------------------------


@dataclass
class PlanEntry:
    task: str
    segments: list[tuple[int, int, int]]  # (utterance index, frame lo, frame hi)
    n_frames: int


@dataclass
class TaskBatchPlan:
    entries: list[PlanEntry]

    def steps(self) -> int:
        return len(self.entries)


def _corpus_sizes(corpus) -> list[int]:
    return [u.frames.shape[0] for u in corpus.utterances]


def steps_per_epoch(corpora: dict, minibatch: int) -> int:
    return sum(
        math.ceil(sum(_corpus_sizes(c)) / minibatch) for c in corpora.values()
    )


def make_epoch_plan(corpora: dict, minibatch: int, rng: Rng) -> TaskBatchPlan:
    """Exact-cover plan: every (task, frame) appears in exactly one entry.

    Each task's utterances are permuted and concatenated; consecutive
    minibatch-sized slices of that stream become entries, with slices mapped
    back to per-utterance frame ranges. Entry order is shuffled across tasks.
    """
    entries: list[PlanEntry] = []
    for task in sorted(corpora):
        corpus = corpora[task]
        sizes = _corpus_sizes(corpus)
        n = sum(sizes)
        if n == 0:
            raise ValueError(f"empty corpus for task {task!r}")
        perm = rng.split(f"perm.{task}").permutation(len(sizes))
        bounds = np.cumsum([0] + [sizes[u] for u in perm])
        for start in range(0, n, minibatch):
            end = min(start + minibatch, n)
            lo_u = int(np.searchsorted(bounds, start, side="right")) - 1
            segments = []
            pos = start
            while pos < end:
                u = int(perm[lo_u])
                seg_lo = pos - int(bounds[lo_u])
                seg_hi = min(end - int(bounds[lo_u]), sizes[u])
                segments.append((u, seg_lo, seg_hi))
                pos = int(bounds[lo_u]) + seg_hi
                lo_u += 1
            entries.append(PlanEntry(task, segments, end - start))
    order = rng.split("order").permutation(len(entries))
    return TaskBatchPlan([entries[i] for i in order])


# -----------------------------------------------------------------------------
# Training loops
# -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: Network
    loss_curve: list[tuple[int, str, float]] = field(default_factory=list)

    def losses(self, task: str | None = None) -> list[float]:
        return [l for _, t, l in self.loss_curve if task is None or t == task]


def _materialize(corpus, entry: PlanEntry):
    frames = [corpus.utterances[u].frames[lo:hi] for u, lo, hi in entry.segments]
    labels = np.concatenate(
        [corpus.utterances[u].labels[lo:hi] for u, lo, hi in entry.segments]
    )
    return frames, labels


def _validate_labels(net: Network, task: str, corpus) -> None:
    senones = net.spec.senones(task)
    for u in corpus.utterances:
        if u.labels.size and int(u.labels.max()) >= senones:
            raise ValueError(
                f"label {int(u.labels.max())} out of range for task {task!r} "
                f"({senones} senones)"
            )


def _run(
    net: Network,
    corpora: dict,
    cfg: TrainConfig,
    mask: FreezeMask,
    stage: str,
    log: LogSink = None,
    batch_hook: Callable[[PlanEntry], None] | None = None,
) -> TrainResult:
    mask.validate(net.spec)
    for task, corpus in corpora.items():
        if not corpus.utterances:
            raise ValueError(f"empty corpus for task {task!r}")
        _validate_labels(net, task, corpus)
    unfrozen = mask.unfrozen_names()
    rng = Rng(cfg.seed).split(f"run.{stage}")
    per_epoch = steps_per_epoch(corpora, cfg.minibatch)
    total = math.ceil(cfg.epochs * per_epoch)
    result = TrainResult(net)
    step = 0
    epoch = 0
    while step < total:
        plan = make_epoch_plan(corpora, cfg.minibatch, rng.split(f"epoch{epoch}"))
        for entry in plan.entries:
            if step >= total:
                break
            progress = step / (total - 1) if total > 1 else 0.0
            lr = lr_schedule(cfg, progress)
            frames, labels = _materialize(corpora[entry.task], entry)
            logits, caches, _ = forward_batch(net, entry.task, frames)
            loss, dlogits = softmax_xent(logits, labels)
            grads = backward_chain(caches, dlogits, unfrozen)
            report = apply_update(net, grads, lr, mask, cfg.max_change)
            if batch_hook is not None:
                batch_hook(entry)
            result.loss_curve.append((step, entry.task, loss))
            if log is not None:
                log(
                    {
                        "stage": stage,
                        "step": step,
                        "task": entry.task,
                        "lr": lr,
                        "loss": loss,
                        "clipped_layers": sorted(
                            n for n, info in report.items() if info.clipped
                        ),
                    }
                )
            step += 1
        epoch += 1
    net.add_provenance(
        stage,
        tasks=sorted(corpora),
        steps=total,
        **cfg.to_dict(),
    )
    return result


def train_single_task(
    net: Network,
    task: str,
    corpus,
    cfg: TrainConfig,
    stage: str = "train_single",
    log: LogSink = None,
) -> TrainResult:
    """Train trunk + one head on one corpus; mutates net in place."""
    return _run(net, {task: corpus}, cfg, FreezeMask.all_unfrozen(net.spec), stage, log)


def train_multitask(
    net: Network,
    corpora: dict,
    cfg: TrainConfig,
    stage: str = "train_multitask",
    log: LogSink = None,
    batch_hook: Callable[[PlanEntry], None] | None = None,
) -> TrainResult:
    """Interleaved multi-task training; each minibatch updates trunk + its head."""
    for task in corpora:
        net.spec.head_layers(task)  # raises for tasks without a head
    return _run(
        net, dict(corpora), cfg, FreezeMask.all_unfrozen(net.spec), stage, log, batch_hook
    )


def adapt_shared_layers(
    net: Network,
    adapt_task: str,
    corpus,
    k_layers: int,
    cfg: TrainConfig,
    stage: str = "adapt",
    log: LogSink = None,
) -> Network:
    """Adapt trunk layers 1..k on new-domain data; returns an adapted copy.

    Deeper trunk layers and every head (including the one producing the loss)
    are frozen, so the original network's upper stack is carried unchanged.
    """
    net.spec.head_layers(adapt_task)
    mask = FreezeMask.shared_adaptation(net.spec, k_layers)
    adapted = net.copy()
    _run(adapted, {adapt_task: corpus}, cfg, mask, stage, log)
    adapted.provenance[-1]["k_layers"] = k_layers
    adapted.provenance[-1]["adapt_task"] = adapt_task
    return adapted


def set_input_normalization(net: Network, corpora: Iterable) -> None:
    """Fix the input transform to per-dimension standardization of the training data."""
    frames = np.vstack([u.frames for c in corpora for u in c.utterances])
    mean = frames.mean(axis=0)
    std = np.maximum(frames.std(axis=0), 1e-8)
    net.input_scale = 1.0 / std
    net.input_shift = -mean / std
