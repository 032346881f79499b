"""Freeze-aware optimization.

Only parameters the manifest marks trainable take part: they alone get
``requires_grad``, optimizer moments, and updates.  Frozen tensors are never
written to, so their bytes stay exactly as loaded.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from depthup import tensor as tc
from depthup.data import Batch
from depthup.model import Model
from depthup.surgery import FreezeManifest

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Raised when a step produces a NaN/inf loss; no state was changed."""


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 200
    final_lr: float = 2e-5
    total_steps: int = 2000
    batch_size: int = 8
    max_context: int = 256
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    loss_on_speech: bool = False
    eval_every: int = 0  # 0 disables periodic eval hooks
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to ``final_lr``
    at ``total_steps``, flat afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.final_lr
    span = cfg.total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * frac


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed set of named tensors.

    Weight decay applies to matrices only; gains and embedding rows are exempt.
    """

    params: dict[str, tc.Tensor]
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def decays(self, name: str) -> bool:
        return self.params[name].data.ndim == 2 and not name.startswith("embed.")

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decays(name):
                update = update + self.weight_decay * p.data
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out


def make_optimizer(model: Model, manifest: FreezeManifest, cfg: TrainConfig) -> AdamW:
    named = model.named_parameters()
    trainable = {n: named[n] for n in manifest.trainable_names()}
    return AdamW(trainable, cfg.betas, cfg.eps, cfg.weight_decay)


def set_trainable(model: Model, manifest: FreezeManifest) -> None:
    """Mirror the manifest onto ``requires_grad`` flags."""
    named = model.named_parameters()
    if set(named) != set(manifest.entries):
        raise ValueError("manifest does not describe this model")
    for name, t in named.items():
        t.requires_grad = manifest.entries[name].trainable
        t.grad = None


def batch_loss(model: Model, batch: Batch) -> tc.Tensor:
    """Next-token loss: position ``t`` predicts the token at ``t + 1``."""
    logits = model(batch.ids[:, :-1], batch.speech_mask[:, :-1])
    return tc.softmax_cross_entropy(logits, batch.ids[:, 1:], batch.loss_mask[:, 1:])


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= factor
    return total


def train_step(model: Model, manifest: FreezeManifest, batch: Batch, opt: AdamW, cfg: TrainConfig) -> float:
    """Forward, backward and one clipped AdamW update of the trainable tensors.

    Returns the masked mean loss.  ``set_trainable`` must have been applied.
    """
    loss = batch_loss(model, batch)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {opt.step_count + 1}")
    if not opt.params:
        return value
    for p in opt.params.values():
        p.grad = None
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in opt.params.items()}
    clip_by_global_norm(grads, cfg.grad_clip)
    opt.step(grads, lr_at(opt.step_count, cfg))
    for p in opt.params.values():
        p.grad = None
    return value


def batch_stream(n_items: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless deterministic stream of index batches, reshuffled each epoch."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        if n_items < batch_size:
            yield order


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


Hook = Callable[[int, Model], dict]


def run_training(
    model: Model,
    manifest: FreezeManifest,
    make_batch_fn: Callable[[np.ndarray], Batch],
    n_items: int,
    cfg: TrainConfig,
    eval_hooks: dict[str, Hook] | None = None,
    on_checkpoint: Callable[[int, Model, AdamW], None] | None = None,
    opt: AdamW | None = None,
) -> tuple[TrainingLog, AdamW]:
    """Run ``cfg.total_steps`` steps over a dataset of ``n_items`` examples.

    ``make_batch_fn`` turns an index array into a :class:`Batch`.  Eval hooks
    run every ``cfg.eval_every`` steps (and after the last step) and their
    results are merged into that step's log record.
    """
    if n_items < 1:
        raise ValueError("dataset is empty")
    set_trainable(model, manifest)
    opt = opt or make_optimizer(model, manifest, cfg)
    log_ = TrainingLog()
    stream = batch_stream(n_items, cfg.batch_size, cfg.seed)
    eval_hooks = eval_hooks or {}
    for step in range(opt.step_count + 1, cfg.total_steps + 1):
        lr = lr_at(opt.step_count, cfg)
        loss = train_step(model, manifest, make_batch_fn(next(stream)), opt, cfg)
        record = {"step": step, "loss": loss, "lr": lr}
        last = step == cfg.total_steps
        if eval_hooks and ((cfg.eval_every and step % cfg.eval_every == 0) or last):
            for name, hook in eval_hooks.items():
                record[name] = hook(step, model)
        if on_checkpoint and ((cfg.checkpoint_every and step % cfg.checkpoint_every == 0) or last):
            on_checkpoint(step, model, opt)
        log_.append(record)
        if step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
    return log_, opt


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
