"""Neuron importance scores and top-r row selection.

Metrics: weight magnitude, first-order Taylor, class-wise Taylor reduced by
the quantiles-mean, and a zeroth-order Taylor whose gradient comes from
averaged SPSA estimates.

Two aggregations of the per-coordinate products ``w_ij * g_ij`` over a
neuron's row are supported:

* ``"sum_abs"``: sum_j |w_ij g_ij|
* ``"abs_sum"``: |sum_j w_ij g_ij|

:func:`taylor_importance` defaults to the former, :func:`classwise_taylor` and
:func:`zo_taylor` to the latter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .adapters import RowSelection
from .layers import LabeledBatch, LinearLayer, ModelSpec, loss_value, model_loss
from .rng import GaussianStream, substream
from .stats import DECILES, quantiles
from .tensor import ContractError, backward

FORMS = ("sum_abs", "abs_sum")


@dataclass
class ImportanceVector:
    layer_id: str
    scores: np.ndarray
    metric: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ContractError("importance scores must be a vector")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ContractError(f"{self.layer_id}: importance scores must be finite and nonnegative")

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass
class ClassScoreMatrix:
    layer_id: str
    scores: np.ndarray  # d_out x p
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ContractError("class scores must be a matrix")
        if np.any(self.scores < 0):
            raise ContractError("class scores must be nonnegative")
        if not self.classes:
            self.classes = tuple(range(self.scores.shape[1]))

    @property
    def p(self) -> int:
        return self.scores.shape[1]


@dataclass
class SPSAConfig:
    n: int = 5
    k: int = 8
    epsilon: float = 1e-3
    base_seed: int = 0
    subsample: int | None = None  # examples per calibration set used in each loss

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ContractError("SPSA needs n >= 1 and k >= 1")
        if not self.epsilon > 0:
            raise ContractError("SPSA epsilon must be positive")
        if self.subsample is not None and self.subsample < 1:
            raise ContractError("subsample must be positive")


@dataclass
class GradientEstimate:
    estimate: np.ndarray
    samples: int
    variance: np.ndarray | None = None
    names: list[str] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def split(self) -> dict[str, np.ndarray]:
        """Estimate reshaped per named parameter."""
        out, off = {}, 0
        for name, shape in zip(self.names, self.shapes):
            size = int(np.prod(shape))
            out[name] = self.estimate[off: off + size].reshape(shape)
            off += size
        return out


# ---------------------------------------------------------------------------
# selection

def select_top_r(scores, r: int) -> RowSelection:
    """Indices of the ``r`` largest scores, ties to the smaller index, ascending."""
    s = scores.scores if isinstance(scores, ImportanceVector) else np.asarray(scores, dtype=np.float64)
    d = s.shape[0]
    if not 1 <= r <= d:
        raise ContractError(f"r={r} out of range [1, {d}]")
    order = np.argsort(-s, kind="stable")
    return RowSelection(tuple(sorted(int(i) for i in order[:r])), d)


def random_importance(layer: LinearLayer, rng: np.random.Generator) -> ImportanceVector:
    """Scores from a seeded uniform permutation; top-r is a uniform random subset."""
    perm = rng.permutation(layer.d_out).astype(np.float64)
    return ImportanceVector(layer.id, perm, "random")


# ---------------------------------------------------------------------------
# magnitude and Taylor

def magnitude_importance(layer: LinearLayer, axis: str = "row") -> ImportanceVector:
    """Euclidean norm of each neuron's weight row (or input column)."""
    w = layer.weight if axis == "row" else layer.weight.T
    return ImportanceVector(layer.id, np.sqrt((w ** 2).sum(axis=1)), "l2")


def aggregate_products(weight: np.ndarray, grad: np.ndarray, form: str, axis: str = "row") -> np.ndarray:
    if form not in FORMS:
        raise ContractError(f"unknown aggregation {form!r}; use one of {FORMS}")
    prod = weight * grad
    if axis == "column":
        prod = prod.T
    if form == "sum_abs":
        return np.abs(prod).sum(axis=1)
    return np.abs(prod.sum(axis=1))


def layer_gradient(model: ModelSpec, layer_id: str, data: LabeledBatch) -> np.ndarray:
    """Gradient of the mean loss over ``data`` with respect to a layer's weight."""
    if len(data) == 0:
        raise ContractError("importance needs at least one example")
    name = f"{layer_id}.weight"
    loss, tape = model_loss(model, data, grad_params=[name])
    return backward(tape, loss)[name]


def taylor_importance(model: ModelSpec, layer_id: str, data: LabeledBatch,
                      form: str = "sum_abs", axis: str = "row") -> ImportanceVector:
    layer = model.linear_layers()[layer_id]
    g = layer_gradient(model, layer_id, data)
    return ImportanceVector(layer_id, aggregate_products(layer.weight, g, form, axis), "taylor")


def classwise_taylor(model: ModelSpec, layer_id: str, data: LabeledBatch,
                     classes: Sequence[int] | None = None, form: str = "abs_sum",
                     axis: str = "row") -> ClassScoreMatrix:
    """Column t scores each neuron against the mean loss over class-t examples only."""
    layer = model.linear_layers()[layer_id]
    classes = tuple(range(model.num_classes)) if classes is None else tuple(classes)
    cols = []
    for t in classes:
        part = data.of_class(t)
        if len(part) == 0:
            raise ContractError(f"class {t} has no examples")
        g = layer_gradient(model, layer_id, part)
        cols.append(aggregate_products(layer.weight, g, form, axis))
    return ClassScoreMatrix(layer_id, np.stack(cols, axis=1), classes)


def quantiles_mean(scores) -> ImportanceVector:
    """Per neuron, the mean of its 0%, 10%, ..., 100% class-score quantiles."""
    mat = scores.scores if isinstance(scores, ClassScoreMatrix) else np.asarray(scores, dtype=np.float64)
    layer_id = scores.layer_id if isinstance(scores, ClassScoreMatrix) else ""
    if mat.ndim != 2 or mat.shape[1] < 1:
        raise ContractError("quantiles-mean needs at least one class column")
    q = quantiles(mat, DECILES, axis=1)
    # averaging offsets from the minimum keeps constant rows exact
    return ImportanceVector(layer_id, q[:, 0] + (q - q[:, :1]).mean(axis=1), "qm-taylor")


def qm_taylor(model: ModelSpec, layer_id: str, data: LabeledBatch, **kw) -> ImportanceVector:
    return quantiles_mean(classwise_taylor(model, layer_id, data, **kw))


# ---------------------------------------------------------------------------
# zeroth order

_CHUNK = 4096


def _perturb(arrays: Sequence[np.ndarray], stream: GaussianStream, coef: float,
             accumulate: np.ndarray | None = None, proj: float = 0.0) -> None:
    """arrays += coef * z in place, chunk by chunk; optionally accumulate proj * z."""
    off = 0
    for a in arrays:
        flat = a.reshape(-1)
        if not np.shares_memory(flat, a):
            raise ContractError("SPSA parameters must be contiguous arrays")
        for s in range(0, flat.size, _CHUNK):
            n = min(_CHUNK, flat.size - s)
            z = stream.chunk(off + s, n)
            flat[s: s + n] += coef * z
            if accumulate is not None:
                accumulate[off + s: off + s + n] += proj * z
        off += flat.size


def spsa_estimate(loss_fn: Callable[[], float], arrays: Sequence[np.ndarray], epsilon: float,
                  stream: GaussianStream, out: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """One SPSA estimate, accumulated into ``out``.

    The arrays are perturbed in place to +epsilon*z, then -epsilon*z, then
    restored; z is regenerated from ``stream`` for each of the three passes.
    Returns ``(out, projected_gradient)``.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    total = int(sum(a.size for a in arrays))
    if out is None:
        out = np.zeros(total)
    _perturb(arrays, stream, epsilon)
    up = loss_fn()
    _perturb(arrays, stream, -2.0 * epsilon)
    down = loss_fn()
    proj = (up - down) / (2.0 * epsilon)
    _perturb(arrays, stream, epsilon, accumulate=out, proj=proj)
    return out, proj


def _layer_arrays(model: ModelSpec, layer_ids: Iterable[str]):
    lin = model.linear_layers()
    names, arrays = [], []
    for lid in layer_ids:
        if lid not in lin:
            raise ContractError(f"unknown linear layer {lid!r}")
        names.append(f"{lid}.weight")
        arrays.append(lin[lid].weight)
    return names, arrays


def spsa_single(model: ModelSpec, layer_ids: Iterable[str], data: LabeledBatch,
                epsilon: float = 1e-3, seed: int | Sequence[int] = 0) -> GradientEstimate:
    names, arrays = _layer_arrays(model, layer_ids)
    key = (seed,) if isinstance(seed, int) else tuple(seed)
    est, _ = spsa_estimate(lambda: loss_value(model, data), arrays, epsilon, GaussianStream(*key))
    return GradientEstimate(est, 1, None, names, [a.shape for a in arrays])


def calibration_sets(data: LabeledBatch, k: int, seed: int = 0) -> list[LabeledBatch]:
    """``k`` disjoint equal-size slices of a seeded shuffle; the remainder is dropped."""
    if len(data) < k:
        raise ContractError(f"{len(data)} examples cannot form {k} calibration sets")
    perm = substream(seed, "spsa", 0).permutation(len(data))
    size = len(data) // k
    return [data.subset(np.sort(perm[i * size:(i + 1) * size])) for i in range(k)]


def averaged_spsa(loss_fns: Sequence[Callable[[], float]], arrays: Sequence[np.ndarray],
                  config: SPSAConfig, track_variance: bool = False) -> GradientEstimate:
    """Mean of n estimates per loss function (one per calibration set).

    Perturbation (s, q) uses the stream keyed by (base_seed, s, q). The sum is
    Kahan-compensated and always taken in (set, perturbation) order.
    """
    total = int(sum(a.size for a in arrays))
    acc = np.zeros(total)
    comp = np.zeros(total)
    sq = np.zeros(total) if track_variance else None
    one = np.zeros(total)
    count = 0
    for s, fn in enumerate(loss_fns):
        for q in range(config.n):
            one[:] = 0.0
            spsa_estimate(fn, arrays, config.epsilon, GaussianStream(config.base_seed, s, q), one)
            y = one - comp
            t = acc + y
            comp = (t - acc) - y
            acc = t
            if sq is not None:
                sq += one * one
            count += 1
    mean = acc / count
    var = None
    if sq is not None and count > 1:
        var = (sq / count - mean ** 2) * count / (count - 1)
    return GradientEstimate(mean, count, var)


def zo_gradient(model: ModelSpec, layer_ids: Sequence[str], data: LabeledBatch,
                config: SPSAConfig, track_variance: bool = False) -> GradientEstimate:
    names, arrays = _layer_arrays(model, layer_ids)
    sets = calibration_sets(data, config.k, config.base_seed)
    if config.subsample is not None:
        sets = [s.subset(slice(0, config.subsample)) for s in sets]
    fns = [lambda s=s: loss_value(model, s) for s in sets]
    est = averaged_spsa(fns, arrays, config, track_variance)
    est.names, est.shapes = names, [a.shape for a in arrays]
    return est


def zo_taylor(model: ModelSpec, layer_ids: Sequence[str], data: LabeledBatch,
              config: SPSAConfig | None = None, form: str = "abs_sum") -> dict[str, ImportanceVector]:
    """Taylor scores from one joint n*k-SPSA gradient estimate over the given layers."""
    config = config or SPSAConfig()
    est = zo_gradient(model, layer_ids, data, config).split()
    lin = model.linear_layers()
    return {lid: ImportanceVector(lid, aggregate_products(lin[lid].weight, est[f"{lid}.weight"], form),
                                  "zo-taylor")
            for lid in layer_ids}


# ---------------------------------------------------------------------------
# analytics

def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def pair_rank_probability(g_i: float, g_j: float, var_i: float, var_j: float) -> float:
    """Pr[Z > -(g_i - g_j) / sqrt((var_i + var_j) / 2)] for standard normal Z."""
    if not (var_i > 0 and var_j > 0):
        raise ContractError("variances must be positive")
    return normal_cdf((g_i - g_j) / math.sqrt((var_i + var_j) / 2.0))


def spsa_variance(g, samples: int = 1) -> np.ndarray:
    """Per-coordinate variance (g_i^2 + sum_l g_l^2) / samples of an averaged SPSA estimate."""
    g = np.asarray(g, dtype=np.float64)
    return (g ** 2 + (g ** 2).sum()) / samples


def spsa_difference_probability(g, i: int, j: int, samples: int = 1) -> float:
    """Normal approximation of Pr[ghat_i > ghat_j] with the covariance the shared z induces.

    Var[ghat_i - ghat_j] = ((g_i - g_j)^2 + 2 sum_l g_l^2) / samples.
    """
    g = np.asarray(g, dtype=np.float64)
    var = ((g[i] - g[j]) ** 2 + 2.0 * (g ** 2).sum()) / samples
    return normal_cdf((g[i] - g[j]) / math.sqrt(var))
