"""Experiment configuration and the importance -> selection -> adapters -> train pipeline.

Configs are single JSON documents. Every section is loaded strictly: unknown
keys are an error. All randomness flows from the top-level ``seed`` through
named substreams.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .adapters import (build_column_adapter, build_lora_adapter, build_row_adapter, dependency_groups,
                       build_dependency_adapters)
from .importance import (ImportanceVector, SPSAConfig, aggregate_products, magnitude_importance,
                         qm_taylor, random_importance, select_top_r, taylor_importance, zo_gradient)
from .layers import LabeledBatch, ModelSpec, tiny_mlp, toy_transformer
from .rng import substream
from .tensor import ContractError
from .trainer import SynthTaskSpec, TrainablePlan, TrainConfig, TrainResult, make_synth_task, rows_for_ratio, train

METHODS = ("sprufft", "lora", "full", "head", "sprufft-dep")
METRICS = ("l2", "taylor", "qm-taylor", "zo-taylor", "random")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def derive_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31))


def _strict(cls, doc: Mapping | None, where: str, **fixed):
    """Instantiate dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}; allowed {sorted(names - set(fixed))}")
    doc.update(fixed)
    try:
        return cls(**doc)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class LoRASettings:
    alpha: float = 16.0
    dropout: float = 0.1


@dataclass
class PretrainSettings:
    """Full fine-tuning on a source task before the target run; the head is re-initialized afterwards."""
    task: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    reset_head: bool = True


@dataclass
class MemorySettings:
    batch_size: int = 4
    compare: dict | None = None  # overrides applied to the config for the B side


@dataclass
class StudySettings:
    """Monte-Carlo study of SPSA on L(theta) = 0.5 * ||theta - theta_star||^2."""
    gradient: list | None = None  # known g; default is drawn from the seed
    dim: int = 6
    n: int = 8
    k: int = 1
    epsilon: float = 1e-3
    replications: int = 10000
    gaps: list = field(default_factory=lambda: [0.0, 1.0, 2.0])


@dataclass
class ExperimentConfig:
    model: Any = field(default_factory=lambda: {"kind": "mlp", "input_dim": 8, "hidden": [32], "num_classes": 3})
    task: dict = field(default_factory=dict)
    method: str = "sprufft"
    metric: str = "taylor"
    rank: int | None = None
    ratio: float | None = None
    layers: list | None = None
    freeze_attention: bool = False
    train_head: bool = True
    importance_batch: int | None = None
    train: dict = field(default_factory=dict)
    spsa: dict = field(default_factory=dict)
    lora: dict = field(default_factory=dict)
    pretrain: dict | None = None
    memory: dict = field(default_factory=dict)
    spsa_study: dict = field(default_factory=dict)
    save_merged: bool = True
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.rank is not None and self.ratio is not None:
            raise ConfigError("set either rank or ratio, not both")
        if self.method in ("sprufft", "lora", "sprufft-dep") and (self.rank is None) == (self.ratio is None):
            raise ConfigError(f"method {self.method!r} needs exactly one of rank or ratio")
        if self.rank is not None and self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ConfigError("ratio must lie in (0, 1]")
        self.train_config = _strict(TrainConfig, self.train, "train", seed=self.seed)
        self.task_spec = _strict(SynthTaskSpec, self.task, "task", seed=derive_seed(self.seed, "data"))
        spsa = dict(self.spsa)
        self.spsa_config = _strict(SPSAConfig, spsa, "spsa", base_seed=derive_seed(self.seed, "spsa"))
        self.lora_settings = _strict(LoRASettings, self.lora, "lora")
        self.pretrain_settings = None if self.pretrain is None else _strict(PretrainSettings, self.pretrain, "pretrain")
        self.memory_settings = _strict(MemorySettings, self.memory, "memory")
        self.study_settings = _strict(StudySettings, self.spsa_study, "spsa_study")
        if self.metric == "qm-taylor" and self.task_spec.num_classes < 2:
            raise ConfigError("qm-taylor needs labeled data with at least 2 classes (p=1 has no "
                              "per-class spread); use metric 'taylor' instead")

    @classmethod
    def from_dict(cls, doc: Mapping, seed: int | None = None) -> ExperimentConfig:
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        if seed is not None:
            doc["seed"] = seed
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - names
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}; allowed {sorted(names)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str, seed: int | None = None) -> ExperimentConfig:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc, seed)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def with_overrides(self, overrides: Mapping) -> ExperimentConfig:
        doc = self.to_dict()
        doc.update(overrides)
        return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# model and data

def build_model(spec: Any, seed: int) -> ModelSpec:
    """Model from a builder description, an inline model document, or a path to one."""
    if isinstance(spec, str):
        with open(spec, encoding="utf-8") as fh:
            return ModelSpec.from_json(fh.read())
    if not isinstance(spec, Mapping):
        raise ConfigError("model must be an object or a path")
    spec = dict(spec)
    kind = spec.pop("kind", None)
    init = derive_seed(seed, "init")
    try:
        if kind == "mlp":
            allowed = {"input_dim", "hidden", "num_classes", "dependencies"}
            if set(spec) - allowed:
                raise ConfigError(f"model: unknown keys {sorted(set(spec) - allowed)}")
            return tiny_mlp(int(spec["input_dim"]), [int(h) for h in spec.get("hidden", [])],
                            int(spec["num_classes"]), init, bool(spec.get("dependencies", False)))
        if kind == "transformer":
            allowed = {"token_dim", "seq_len", "d_model", "d_ff", "n_blocks", "num_classes"}
            if set(spec) - allowed:
                raise ConfigError(f"model: unknown keys {sorted(set(spec) - allowed)}")
            return toy_transformer(seed=init, **{k: int(v) for k, v in spec.items()})
        if kind is None and "layers" in spec:
            return ModelSpec.from_dict(spec)
    except KeyError as exc:
        raise ConfigError(f"model: missing key {exc}") from None
    except ContractError as exc:
        raise ConfigError(f"model: {exc}") from None
    raise ConfigError(f"model kind must be 'mlp' or 'transformer', got {kind!r}")


def build_task(config: ExperimentConfig, model: ModelSpec) -> tuple[LabeledBatch, LabeledBatch]:
    spec = config.task_spec
    if spec.input_dim != model.input_dim or spec.num_classes != model.num_classes:
        raise ConfigError(f"task is {spec.input_dim}-d with {spec.num_classes} classes, model expects "
                          f"{model.input_dim}-d with {model.num_classes}")
    return make_synth_task(spec)


def prepare_model(config: ExperimentConfig) -> ModelSpec:
    """Base model for the target run, pretrained on a source task if configured."""
    model = build_model(config.model, config.seed)
    pre = config.pretrain_settings
    if pre is None:
        return model
    defaults = {"input_dim": model.input_dim, "num_classes": model.num_classes}
    spec = _strict(SynthTaskSpec, {**defaults, **pre.task}, "pretrain.task",
                   seed=derive_seed(config.seed, "pretrain-data"))
    tcfg = _strict(TrainConfig, pre.train, "pretrain.train", seed=derive_seed(config.seed, "pretrain"))
    source, _ = make_synth_task(spec)
    train(model, TrainablePlan(base_params=list(model.parameters())), source, None, tcfg)
    if pre.reset_head:
        head = model.layer(model.head_id)
        rng = substream(config.seed, "init", 1)
        head.weight[...] = rng.standard_normal(head.weight.shape) / math.sqrt(head.d_in)
        if head.bias is not None:
            head.bias[...] = 0.0
    return model


# ---------------------------------------------------------------------------
# importance and selection

def target_layers(config: ExperimentConfig, model: ModelSpec) -> list[str]:
    lin = model.linear_layers()
    if config.layers is not None:
        unknown = [l for l in config.layers if l not in lin]
        if unknown:
            raise ConfigError(f"unknown layers {unknown}; linear layers are {list(lin)}")
        ids = list(config.layers)
    else:
        ids = [l for l in lin if l != model.head_id]
    if config.freeze_attention:
        attn = set(model.attention_ids())
        ids = [l for l in ids if l not in attn]
    if not ids:
        raise ConfigError("no layers left to adapt")
    return ids


def importance_data(config: ExperimentConfig, data: LabeledBatch) -> LabeledBatch:
    if config.importance_batch is None or config.importance_batch >= len(data):
        return data
    idx = np.sort(substream(config.seed, "select").permutation(len(data))[:config.importance_batch])
    return data.subset(idx)


def compute_importance(config: ExperimentConfig, model: ModelSpec, layer_ids: list[str],
                       data: LabeledBatch, axis: str = "row") -> dict[str, ImportanceVector]:
    """One score vector per layer under the configured metric."""
    lin = model.linear_layers()
    metric = config.metric
    if metric == "zo-taylor":
        est = zo_gradient(model, layer_ids, data, config.spsa_config).split()
        return {lid: ImportanceVector(lid, aggregate_products(lin[lid].weight, est[f"{lid}.weight"],
                                                              "abs_sum", axis), "zo-taylor")
                for lid in layer_ids}
    out = {}
    for i, lid in enumerate(layer_ids):
        layer = lin[lid]
        if metric == "l2":
            out[lid] = magnitude_importance(layer, axis)
        elif metric == "taylor":
            out[lid] = taylor_importance(model, lid, data, axis=axis)
        elif metric == "qm-taylor":
            out[lid] = qm_taylor(model, lid, data, axis=axis)
        else:
            rng = substream(config.seed, "select", 1 + i, axis == "column")
            if axis == "row":
                out[lid] = random_importance(layer, rng)
            else:
                out[lid] = ImportanceVector(lid, rng.permutation(layer.d_in).astype(np.float64), "random")
    return out


def _head_params(model: ModelSpec) -> list[str]:
    return [n for n in model.parameters() if n.startswith(model.head_id + ".")]


@dataclass
class Plan:
    plan: TrainablePlan
    importance: dict[str, ImportanceVector] = field(default_factory=dict)
    selected: dict[str, tuple[int, ...]] = field(default_factory=dict)


def build_plan(config: ExperimentConfig, model: ModelSpec, data: LabeledBatch) -> Plan:
    """Trainable set for the configured method."""
    head = _head_params(model) if config.train_head else []
    if config.method == "full":
        return Plan(TrainablePlan(base_params=list(model.parameters())))
    if config.method == "head":
        return Plan(TrainablePlan(base_params=_head_params(model)))
    ids = target_layers(config, model)
    lin = model.linear_layers()
    reserved = sum(model.parameters()[n].size for n in head)

    if config.method == "lora":
        if config.rank is not None:
            r = config.rank
        else:
            budget = config.ratio * model.num_parameters() - reserved
            r = max(1, int(budget // sum(lin[l].d_in + lin[l].d_out for l in ids)))
        rng = substream(config.seed, "init", 2)
        ads = [build_lora_adapter(lin[l], r, rng, config.lora_settings.alpha, config.lora_settings.dropout)
               for l in ids]
        return Plan(TrainablePlan(ads, head))

    sample = importance_data(config, data)
    if config.method == "sprufft":
        if config.rank is not None:
            rows = {l: min(config.rank, lin[l].d_out) for l in ids}
        else:
            rows = rows_for_ratio(model, ids, config.ratio, reserved)
        scores = compute_importance(config, model, ids, sample)
        ads, chosen = [], {}
        for l in ids:
            if rows[l]:
                sel = select_top_r(scores[l], rows[l])
                ads.append(build_row_adapter(lin[l], sel))
                chosen[l] = sel.indices
        return Plan(TrainablePlan(ads, head), scores, chosen)

    # sprufft-dep: only the declared (rows, cols) pairs are adapted
    pairs = [(a, b) for a, b in model.dependencies if a in ids and b in lin]
    if not pairs:
        raise ConfigError("method 'sprufft-dep' needs dependency pairs among the target layers; "
                          "set model.dependencies")
    row_ids = sorted({a for a, _ in pairs}, key=list(lin).index)
    col_ids = sorted({b for _, b in pairs}, key=list(lin).index)
    row_scores = compute_importance(config, model, row_ids, sample)
    col_scores = compute_importance(config, model, col_ids, sample, axis="column")
    if config.ratio is not None:
        budget = config.ratio * model.num_parameters() - reserved
        area = sum(lin[a].d_in + lin[b].d_out for a, b in pairs)
    ads, scores, chosen = [], {}, {}
    for a, b in pairs:
        width = lin[a].d_in + lin[b].d_out
        g = config.rank if config.rank is not None else int(max(budget, 0) * width / area // width)
        g = max(1, min(g, lin[a].d_out))
        groups = dependency_groups(lin[a], lin[b], row_scores[a].scores, col_scores[b].scores)
        row_ad, col_ad = build_dependency_adapters(lin[a], lin[b], groups, g)
        ads += [row_ad, col_ad]
        scores[a] = row_scores[a]
        scores[f"{b}:columns"] = col_scores[b]
        chosen[a] = row_ad.indices
        chosen[f"{b}:columns"] = col_ad.indices
    return Plan(TrainablePlan(ads, head), scores, chosen)


# ---------------------------------------------------------------------------
# runs

@dataclass
class RunResult:
    model: ModelSpec
    plan: Plan
    result: TrainResult
    trainable: int


def run_training(config: ExperimentConfig, model: ModelSpec | None = None) -> RunResult:
    model = prepare_model(config) if model is None else model
    train_data, val_data = build_task(config, model)
    plan = build_plan(config, model, train_data)
    result = train(model, plan.plan, train_data, val_data, config.train_config)
    return RunResult(model, plan, result, plan.plan.count(model))


def memory_batch(config: ExperimentConfig, model: ModelSpec) -> LabeledBatch:
    train_data, _ = build_task(config, model)
    b = config.memory_settings.batch_size
    if not 1 <= b <= len(train_data):
        raise ConfigError(f"memory.batch_size must lie in [1, {len(train_data)}]")
    return train_data.subset(slice(0, b))


# ---------------------------------------------------------------------------
# SPSA study on a quadratic with known gradient

def quadratic_problem(g) -> tuple[np.ndarray, Any]:
    """theta = 0 and L(theta) = 0.5 * ||theta + g||^2, so the gradient at theta is exactly g."""
    g = np.asarray(g, dtype=np.float64)
    theta = np.zeros_like(g)
    return theta, lambda: 0.5 * float(((theta + g) ** 2).sum())


def spsa_replicates(g, n: int, k: int, epsilon: float, replications: int, seed: int) -> np.ndarray:
    """``replications`` independent n*k-averaged SPSA estimates of the quadratic's gradient."""
    from .importance import averaged_spsa

    theta, loss = quadratic_problem(g)
    out = np.empty((replications, theta.size))
    for rep in range(replications):
        cfg = SPSAConfig(n=n, k=k, epsilon=epsilon, base_seed=seed + rep)
        out[rep] = averaged_spsa([loss] * k, [theta], cfg).estimate
    return out


def gradient_at_gap(g, i: int, j: int, gap: float, samples: int) -> np.ndarray:
    """Copy of ``g`` with g_i moved so the rank statistic's normalized gap equals ``gap``.

    The normalized gap is (g_i - g_j) / sqrt((v_i + v_j) / 2) with v from the
    variance law. It increases monotonically in g_i above g_j, so bisection works.
    """
    from .importance import spsa_variance

    g = np.array(g, dtype=np.float64)

    def norm_gap(x):
        h = g.copy()
        h[i] = x
        v = spsa_variance(h, samples)
        return (x - g[j]) / math.sqrt((v[i] + v[j]) / 2.0)

    if gap == 0:
        g[i] = g[j]
        return g
    sign = 1.0 if gap > 0 else -1.0
    lo, hi = g[j], g[j] + sign
    while sign * norm_gap(hi) < abs(gap):
        hi = g[j] + 2.0 * (hi - g[j])
        if abs(hi) > 1e12:
            raise ConfigError(f"normalized gap {gap} is not reachable with n*k={samples} averaged "
                              "estimates; the gap is bounded by sqrt(2*n*k/3), raise n or k")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sign * norm_gap(mid) < abs(gap):
            lo = mid
        else:
            hi = mid
    g[i] = 0.5 * (lo + hi)
    return g


def study_gradient(settings: StudySettings, seed: int) -> np.ndarray:
    if settings.gradient is not None:
        g = np.asarray(settings.gradient, dtype=np.float64)
        if g.ndim != 1 or g.size < 2:
            raise ConfigError("spsa_study.gradient must be a list of at least 2 numbers")
        return g
    if settings.dim < 2:
        raise ConfigError("spsa_study.dim must be >= 2")
    return np.round(substream(seed, "spsa", 1).uniform(-1.0, 1.0, settings.dim), 6)


def run_spsa_study(settings: StudySettings, seed: int) -> tuple[list[dict], list[dict]]:
    """Moment rows (one per coordinate) and rank rows (one per gap)."""
    from .importance import pair_rank_probability, spsa_difference_probability, spsa_variance

    if settings.replications < 2:
        raise ConfigError("spsa_study.replications must be >= 2")
    samples = settings.n * settings.k
    g = study_gradient(settings, seed)
    base = derive_seed(seed, "spsa")
    est = spsa_replicates(g, settings.n, settings.k, settings.epsilon, settings.replications, base)
    mean = est.mean(axis=0)
    var = est.var(axis=0, ddof=1)
    law = spsa_variance(g, samples)
    moments = []
    for c in range(g.size):
        se = math.sqrt(var[c] / settings.replications)
        moments.append({"coordinate": c, "g": float(g[c]), "mean": float(mean[c]), "std_error": se,
                        "z_score": float((mean[c] - g[c]) / se), "variance": float(var[c]),
                        "predicted_variance": float(law[c]), "variance_ratio": float(var[c] / law[c])})
    ranks = []
    for t, gap in enumerate(settings.gaps):
        h = gradient_at_gap(g, 0, 1, float(gap), samples)
        est = spsa_replicates(h, settings.n, settings.k, settings.epsilon, settings.replications,
                              base + (t + 1) * settings.replications)
        v = spsa_variance(h, samples)
        ranks.append({"gap": float(gap), "g_i": float(h[0]), "g_j": float(h[1]),
                      "empirical": float((est[:, 0] > est[:, 1]).mean()),
                      "predicted": pair_rank_probability(h[0], h[1], v[0], v[1]),
                      "predicted_with_covariance": spsa_difference_probability(h, 0, 1, samples)})
    return moments, ranks
