"""Adam training loop, learning-rate schedules and synthetic tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .layers import LabeledBatch, ModelSpec, model_loss, loss_value, per_class_accuracy, accuracy
from .rng import substream
from .stats import five_number_summary
from .tensor import ContractError, backward

SCHEDULES = ("cosine", "linear", "constant")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    schedule: str = "cosine"
    min_lr: float = 1e-9
    decay_rate: float = 0.01
    warmup: float = 0.03
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 <= self.warmup < 1.0:
            raise ContractError("warmup fraction must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update of ``params`` in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    lr = config.learning_rate
    last = max(total_steps - 1, 1)
    if config.schedule == "constant":
        return lr
    if config.schedule == "cosine":
        return config.min_lr + 0.5 * (lr - config.min_lr) * (1.0 + math.cos(math.pi * step / last))
    warm = int(round(config.warmup * total_steps))
    if step < warm:
        return lr * step / warm
    if last <= warm:
        return lr
    frac = (step - warm) / (last - warm)
    return lr * (1.0 - (1.0 - config.decay_rate) * frac)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthTaskSpec:
    num_classes: int = 3
    input_dim: int = 8
    separation: float = 3.0  # distance between class means, in noise standard deviations
    noise: float = 1.0
    n_train: int = 600
    n_val: int = 300
    balanced: bool = True
    imbalance: float = 0.2  # class t gets weight imbalance**(t/(p-1)) when unbalanced
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.input_dim < self.num_classes:
            raise ContractError("need 1 <= num_classes <= input_dim")
        if self.balanced and min(self.n_train, self.n_val) < self.num_classes:
            raise ContractError("balanced sizes must be at least num_classes")
        if not 0 < self.imbalance <= 1:
            raise ContractError("imbalance must lie in (0, 1]")


def class_means(spec: SynthTaskSpec) -> np.ndarray:
    """Simplex-like means with pairwise distance separation*noise, randomly rotated."""
    rng = substream(spec.seed, "data", 0)
    q, _ = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.input_dim)))
    base = np.zeros((spec.num_classes, spec.input_dim))
    base[np.arange(spec.num_classes), np.arange(spec.num_classes)] = spec.separation * spec.noise / math.sqrt(2.0)
    return base @ q.T


def _counts(n: int, weights: np.ndarray) -> np.ndarray:
    w = weights / weights.sum()
    c = np.floor(n * w).astype(int)
    c = np.maximum(c, 1)
    order = np.argsort(-(n * w - np.floor(n * w)), kind="stable")
    i = 0
    while c.sum() < n:
        c[order[i % len(c)]] += 1
        i += 1
    while c.sum() > n:
        j = int(np.argmax(c))
        c[j] -= 1
    return c


def make_synth_task(spec: SynthTaskSpec) -> tuple[LabeledBatch, LabeledBatch]:
    """Gaussian class clusters; deterministic under ``spec.seed``."""
    means = class_means(spec)
    p = spec.num_classes
    flat = np.ones(p)
    skewed = spec.imbalance ** (np.arange(p) / max(p - 1, 1))

    def draw(n, weights, stream):
        rng = substream(spec.seed, "data", stream)
        labels = np.repeat(np.arange(p), _counts(n, weights))
        labels = labels[rng.permutation(n)]
        x = means[labels] + spec.noise * rng.standard_normal((n, spec.input_dim))
        return LabeledBatch(x, labels, p)

    train = draw(spec.n_train, flat if spec.balanced else skewed, 1)
    val = draw(spec.n_val, flat, 2)
    return train, val


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainablePlan:
    """What a run may update: adapter parameters and/or named base parameters."""
    adapters: list = field(default_factory=list)
    base_params: list[str] = field(default_factory=list)

    def count(self, model: ModelSpec) -> int:
        params = model.parameters()
        return int(sum(a.num_parameters() for a in self.adapters)
                   + sum(params[n].size for n in self.base_params))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def evaluate(model: ModelSpec, data: LabeledBatch, adapters: Iterable = ()) -> dict:
    adapters = list(adapters)
    out = {"loss": loss_value(model, data, adapters), "accuracy": accuracy(model, data, adapters)}
    present = set(np.unique(data.labels).tolist())
    if present == set(range(model.num_classes)):
        out["per_class"] = five_number_summary(per_class_accuracy(model, data, adapters))
    return out


def train(model: ModelSpec, plan: TrainablePlan, train_data: LabeledBatch,
          val_data: LabeledBatch | None, config: TrainConfig) -> TrainResult:
    """Fixed-budget Adam training; the batch order is reshuffled every epoch."""
    base = model.parameters()
    unknown = [n for n in plan.base_params if n not in base]
    if unknown:
        raise ContractError(f"unknown base parameters {unknown}")
    params: dict[str, np.ndarray] = {n: base[n] for n in plan.base_params}
    for ad in plan.adapters:
        params.update(ad.parameters())
    result = TrainResult()
    n = len(train_data)
    if config.epochs == 0 or n == 0:
        return result
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    state = AdamState()
    drop_rng = substream(config.seed, "dropout")
    step = 0
    for epoch in range(config.epochs):
        perm = substream(config.seed, "shuffle", epoch).permutation(n)
        losses = []
        for b in range(per_epoch):
            batch = train_data.subset(perm[b * config.batch_size:(b + 1) * config.batch_size])
            loss, tape = model_loss(model, batch, plan.adapters, grad_params=plan.base_params,
                                    training=True, rng=drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            grads = backward(tape, loss)
            if params:
                adam_step(state, params, grads, lr_at(config, step, total),
                          config.beta1, config.beta2, config.adam_eps)
            losses.append(value)
            result.step_losses.append(value)
            step += 1
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if val_data is not None:
            ev = evaluate(model, val_data, plan.adapters)
            record["val_loss"] = ev["loss"]
            record["val_accuracy"] = ev["accuracy"]
            if "per_class" in ev:
                record["val_per_class"] = ev["per_class"]
        result.history.append(record)
    return result


# ---------------------------------------------------------------------------
# trainable-budget allocation

def rows_for_ratio(model: ModelSpec, layer_ids: Iterable[str], ratio: float,
                   reserved: int = 0) -> dict[str, int]:
    """Rows per layer so that rows plus ``reserved`` scalars come to ``ratio`` of all parameters.

    Rows are first shared in proportion to each layer's size, rounded down,
    then single rows are added while that moves the total closer to target.
    """
    if not 0 < ratio <= 1:
        raise ContractError("ratio must lie in (0, 1]")
    lin = model.linear_layers()
    ids = list(layer_ids)
    budget = ratio * model.num_parameters() - reserved
    if budget <= 0:
        return {lid: 0 for lid in ids}
    area = sum(lin[l].d_out * lin[l].d_in for l in ids)
    ideal = {l: budget * lin[l].d_out / area for l in ids}
    rows = {l: min(int(math.floor(ideal[l])), lin[l].d_out) for l in ids}
    remaining = budget - sum(rows[l] * lin[l].d_in for l in ids)
    order = sorted(ids, key=lambda l: -(ideal[l] - math.floor(ideal[l])))
    improved = True
    while improved:
        improved = False
        for l in order:
            w = lin[l].d_in
            if rows[l] < lin[l].d_out and abs(remaining - w) < abs(remaining):
                rows[l] += 1
                remaining -= w
                improved = True
    return rows
