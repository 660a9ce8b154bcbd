"""Fine-tuning adapters attached to frozen layers.

All adapters are additive: a layer's output is its frozen forward plus one
branch per attached adapter. The frozen weights are never written to; a
trained adapter is folded into a copy of the layer by :func:`merge`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .layers import ForwardContext, LayerNormLayer, LinearLayer, ModelSpec
from .tensor import ContractError, ShapeError, Tensor

ADAPTER_FORMAT = "spruft-adapters/1"


def _as_indices(indices, bound: int, what: str) -> tuple[int, ...]:
    idx = [int(i) for i in indices]
    if not idx:
        raise ContractError(f"{what}: empty index set")
    if len(set(idx)) != len(idx):
        raise ContractError(f"{what}: duplicate indices {sorted(idx)}")
    bad = [i for i in idx if not 0 <= i < bound]
    if bad:
        raise ContractError(f"{what}: indices {bad} out of range [0, {bound})")
    return tuple(sorted(idx))


@dataclass(frozen=True)
class RowSelection:
    """Sorted, distinct output-row indices of one layer."""
    indices: tuple[int, ...]
    d_out: int

    def __post_init__(self):
        object.__setattr__(self, "indices", _as_indices(self.indices, self.d_out, "row selection"))

    @property
    def r(self) -> int:
        return len(self.indices)

    def matrix(self) -> np.ndarray:
        """The d_out x r 0/1 matrix that scatters row j to position indices[j]."""
        m = np.zeros((self.d_out, self.r))
        m[list(self.indices), np.arange(self.r)] = 1.0
        return m


# ---------------------------------------------------------------------------
# adapter types

@dataclass
class RowAdapter:
    target: str
    selection: RowSelection
    weight: np.ndarray  # r x d_in, the trainable rows
    kind = "row"

    @property
    def indices(self) -> tuple[int, ...]:
        return self.selection.indices

    @property
    def name(self) -> str:
        return f"{self.target}.row.weight"

    def parameters(self) -> dict[str, np.ndarray]:
        return {self.name: self.weight}

    def num_parameters(self) -> int:
        return int(self.weight.size)

    def branch(self, ctx: ForwardContext, layer: LinearLayer, x: Tensor) -> Tensor:
        wf = ctx.adapter_param(self.name, self.weight)
        # the r-wide product feeds only a fixed scatter, so nothing downstream retains it
        return T.scatter_cols(T.linear(x, wf), self.indices, layer.d_out)

    def delta(self, shape: tuple[int, int]) -> np.ndarray:
        d = np.zeros(shape)
        d[list(self.indices)] = self.weight
        return d


@dataclass
class ColumnAdapter:
    """Trainable input columns of a layer whose producer's rows are selected."""
    target: str
    indices: tuple[int, ...]
    weight: np.ndarray  # d_out x r_c
    kind = "column"

    @property
    def name(self) -> str:
        return f"{self.target}.col.weight"

    def parameters(self) -> dict[str, np.ndarray]:
        return {self.name: self.weight}

    def num_parameters(self) -> int:
        return int(self.weight.size)

    def branch(self, ctx: ForwardContext, layer: LinearLayer, x: Tensor) -> Tensor:
        wd = ctx.adapter_param(self.name, self.weight)
        return T.linear(T.gather_cols(x, self.indices), wd)

    def delta(self, shape: tuple[int, int]) -> np.ndarray:
        d = np.zeros(shape)
        d[:, list(self.indices)] = self.weight
        return d


@dataclass
class LoRAAdapter:
    target: str
    A: np.ndarray  # r x d_in
    B: np.ndarray  # d_out x r
    alpha: float = 16.0
    dropout: float = 0.0
    kind = "lora"

    def __post_init__(self):
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeError(f"LoRA rank mismatch: A {self.A.shape}, B {self.B.shape}")
        if not self.alpha > 0:
            raise ContractError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("LoRA dropout must lie in [0, 1)")

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{self.target}.lora.A": self.A, f"{self.target}.lora.B": self.B}

    def num_parameters(self) -> int:
        return int(self.A.size + self.B.size)

    def branch(self, ctx: ForwardContext, layer: LinearLayer, x: Tensor) -> Tensor:
        a = ctx.adapter_param(f"{self.target}.lora.A", self.A)
        b = ctx.adapter_param(f"{self.target}.lora.B", self.B)
        xd = T.dropout(x, self.dropout, ctx.rng, ctx.training)
        return T.scale(T.linear(T.linear(xd, a), b), self.scaling)

    def delta(self, shape: tuple[int, int]) -> np.ndarray:
        return self.scaling * (self.B @ self.A)


@dataclass
class VectorAdapter:
    """Index-selected additive update of a layer-norm gain or shift."""
    target: str
    param: str  # "gain" or "shift"
    indices: tuple[int, ...]
    delta_values: np.ndarray
    size: int
    kind = "vector"

    def __post_init__(self):
        if self.param not in ("gain", "shift"):
            raise ContractError(f"vector adapter param must be gain or shift, got {self.param!r}")
        self.indices = _as_indices(self.indices, self.size, "vector selection")
        if self.delta_values.shape != (len(self.indices),):
            raise ShapeError("vector adapter values do not match its index set")

    @property
    def name(self) -> str:
        return f"{self.target}.{self.param}.delta"

    def parameters(self) -> dict[str, np.ndarray]:
        return {self.name: self.delta_values}

    def num_parameters(self) -> int:
        return int(self.delta_values.size)

    def branch(self, ctx: ForwardContext, layer: LayerNormLayer, x=None) -> Tensor:
        dv = ctx.adapter_param(self.name, self.delta_values)
        return T.scatter_cols(dv, self.indices, self.size)

    def delta(self, shape) -> np.ndarray:
        d = np.zeros(self.size)
        d[list(self.indices)] = self.delta_values
        return d


@dataclass
class DependencyGroup:
    """Channels that are fine-tuned together; member index sets have equal size."""
    members: list[tuple[str, str, tuple[int, ...]]]
    score: float = 0.0

    def __post_init__(self):
        sizes = {len(ix) for _, _, ix in self.members}
        if len(sizes) > 1:
            raise ContractError("dependency group members select different numbers of channels")
        for _, role, _ in self.members:
            if role not in ("row", "column"):
                raise ContractError(f"unknown dependency role {role!r}")


# ---------------------------------------------------------------------------
# construction

def build_row_adapter(layer: LinearLayer, selection: RowSelection | Sequence[int]) -> RowAdapter:
    if not isinstance(selection, RowSelection):
        selection = RowSelection(tuple(selection), layer.d_out)
    if selection.d_out != layer.d_out:
        raise ShapeError(f"selection for d_out={selection.d_out} applied to {layer.id} with d_out={layer.d_out}")
    return RowAdapter(layer.id, selection, np.zeros((selection.r, layer.d_in)))


def build_column_adapter(layer: LinearLayer, indices: Sequence[int]) -> ColumnAdapter:
    idx = _as_indices(indices, layer.d_in, "column selection")
    return ColumnAdapter(layer.id, idx, np.zeros((layer.d_out, len(idx))))


def build_lora_adapter(layer: LinearLayer, r: int, rng: np.random.Generator,
                       alpha: float = 16.0, dropout: float = 0.0) -> LoRAAdapter:
    """A ~ N(0, 1/r), B = 0, so the initial update is zero."""
    if not 1 <= r:
        raise ContractError("LoRA rank must be positive")
    a = rng.standard_normal((r, layer.d_in)) / np.sqrt(r)
    return LoRAAdapter(layer.id, a, np.zeros((layer.d_out, r)), float(alpha), float(dropout))


def build_vector_adapter(layer: LayerNormLayer, param: str, indices: Sequence[int]) -> VectorAdapter:
    idx = _as_indices(indices, layer.d, "vector selection")
    return VectorAdapter(layer.id, param, idx, np.zeros(len(idx)), layer.d)


def dependency_groups(row_layer: LinearLayer, col_layer: LinearLayer, row_scores, col_scores,
                      aggregate: str = "sum") -> list[DependencyGroup]:
    """One group per shared channel: row i of ``row_layer`` with column i of ``col_layer``."""
    if row_layer.d_out != col_layer.d_in:
        raise ShapeError(f"{row_layer.id} rows ({row_layer.d_out}) do not feed {col_layer.id} columns ({col_layer.d_in})")
    agg = {"sum": np.add, "mean": lambda a, b: (a + b) / 2.0, "max": np.maximum}.get(aggregate)
    if agg is None:
        raise ContractError(f"unknown aggregate {aggregate!r}; use sum, mean or max")
    scores = agg(np.asarray(row_scores, dtype=np.float64), np.asarray(col_scores, dtype=np.float64))
    return [DependencyGroup([(row_layer.id, "row", (i,)), (col_layer.id, "column", (i,))], float(s))
            for i, s in enumerate(scores)]


def build_dependency_adapters(row_layer: LinearLayer, col_layer: LinearLayer,
                              groups: Sequence[DependencyGroup], r: int) -> tuple[RowAdapter, ColumnAdapter]:
    """Adapters for the top-``r`` groups (ties to the lower channel)."""
    from .importance import select_top_r

    chosen = select_top_r(np.array([g.score for g in groups]), r).indices
    return build_row_adapter(row_layer, chosen), build_column_adapter(col_layer, chosen)


# ---------------------------------------------------------------------------
# forward helpers

def _run(layer, parts, x, ctx, training=False, rng=None) -> Tensor:
    if ctx is None:
        tape = x.tape if isinstance(x, Tensor) else None
        ctx = ForwardContext(tape, training=training, rng=rng)
    xt = x if isinstance(x, Tensor) else ctx.tape.constant(x, name="x")
    for p in parts:
        if p is not None:
            if p.target != layer.id:
                raise ContractError(f"adapter targets {p.target!r}, layer is {layer.id!r}")
            ctx.attach(p)
    return layer.forward(ctx, xt)


def adapted_forward(layer: LinearLayer, adapter: RowAdapter, x, ctx: ForwardContext | None = None) -> Tensor:
    """Frozen forward plus the scattered row branch."""
    if adapter.weight.shape[1] != layer.d_in:
        raise ShapeError(f"adapter width {adapter.weight.shape[1]} vs layer d_in {layer.d_in}")
    return _run(layer, [adapter], x, ctx)


def lora_forward(layer: LinearLayer, adapter: LoRAAdapter, x, training: bool = False,
                 rng: np.random.Generator | None = None, ctx: ForwardContext | None = None) -> Tensor:
    if adapter.A.shape[1] != layer.d_in or adapter.B.shape[0] != layer.d_out:
        raise ShapeError(f"LoRA shapes A {adapter.A.shape}, B {adapter.B.shape} vs layer {layer.weight.shape}")
    return _run(layer, [adapter], x, ctx, training, rng)


def dependency_adapted_forward(layer: LinearLayer, row_part: RowAdapter | None,
                               col_part: ColumnAdapter, x, ctx: ForwardContext | None = None) -> Tensor:
    """Frozen branch + row-selected branch + column-selected branch."""
    if col_part.weight.shape[0] != layer.d_out:
        raise ShapeError(f"column part has {col_part.weight.shape[0]} outputs, layer has {layer.d_out}")
    if max(col_part.indices) >= layer.d_in:
        raise ShapeError(f"column index out of range for d_in={layer.d_in}")
    return _run(layer, [row_part, col_part], x, ctx)


# ---------------------------------------------------------------------------
# merging and bookkeeping

def merge(adapter, layer):
    """A new layer with the adapter folded into its weights."""
    if isinstance(layer, LayerNormLayer):
        out = LayerNormLayer(layer.id, layer.gain.copy(), layer.shift.copy(), layer.eps)
        vec = out.gain if adapter.param == "gain" else out.shift
        vec += adapter.delta(None)
        return out
    w = layer.weight.copy()
    if isinstance(adapter, RowAdapter):
        rows = list(adapter.indices)
        w[rows] = w[rows] + adapter.weight
    else:
        w = w + adapter.delta(w.shape)
    return LinearLayer(layer.id, w, None if layer.bias is None else layer.bias.copy())


def merge_model(model: ModelSpec, adapters: Iterable) -> ModelSpec:
    """Copy of ``model`` with every adapter merged into its target."""
    merged = model.copy()
    for ad in adapters:
        target = merged.layer(ad.target)
        folded = merge(ad, target)
        if isinstance(target, LinearLayer):
            target.weight[...] = folded.weight
        else:
            target.gain[...] = folded.gain
            target.shift[...] = folded.shift
    return merged


class ParameterView(NamedTuple):
    count: int
    names: list[str]
    flat: np.ndarray


def trainable_parameters(adapters: Iterable) -> ParameterView:
    """Count and flattened copy of every adapter-owned scalar."""
    names, parts = [], []
    for ad in adapters:
        for name, arr in ad.parameters().items():
            names.append(name)
            parts.append(arr.reshape(-1))
    flat = np.concatenate(parts) if parts else np.empty(0)
    return ParameterView(int(flat.size), names, flat)


def lora_matched_rows(layer: LinearLayer, rank: int) -> int:
    """Row count whose SPruFT parameter count equals a rank-``rank`` LoRA on ``layer``."""
    return int(round(rank * (layer.d_in + layer.d_out) / layer.d_in))


# ---------------------------------------------------------------------------
# serialization

def adapter_to_dict(ad) -> dict:
    if isinstance(ad, RowAdapter):
        return {"kind": "row", "target": ad.target, "indices": list(ad.indices),
                "shape": list(ad.weight.shape), "values": ad.weight.reshape(-1).tolist()}
    if isinstance(ad, ColumnAdapter):
        return {"kind": "column", "target": ad.target, "indices": list(ad.indices),
                "shape": list(ad.weight.shape), "values": ad.weight.reshape(-1).tolist()}
    if isinstance(ad, LoRAAdapter):
        return {"kind": "lora", "target": ad.target, "alpha": ad.alpha, "dropout": ad.dropout,
                "A": {"shape": list(ad.A.shape), "values": ad.A.reshape(-1).tolist()},
                "B": {"shape": list(ad.B.shape), "values": ad.B.reshape(-1).tolist()}}
    if isinstance(ad, VectorAdapter):
        return {"kind": "vector", "target": ad.target, "param": ad.param, "size": ad.size,
                "indices": list(ad.indices), "values": ad.delta_values.tolist()}
    raise TypeError(f"cannot serialize {type(ad).__name__}")


def _matrix(doc) -> np.ndarray:
    return np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"])


def adapter_from_dict(doc, model: ModelSpec | None = None):
    kind = doc["kind"]
    if kind == "row":
        d_out = model.layer(doc["target"]).d_out if model is not None else max(doc["indices"]) + 1
        return RowAdapter(doc["target"], RowSelection(tuple(doc["indices"]), d_out), _matrix(doc))
    if kind == "column":
        return ColumnAdapter(doc["target"], tuple(doc["indices"]), _matrix(doc))
    if kind == "lora":
        return LoRAAdapter(doc["target"], _matrix(doc["A"]), _matrix(doc["B"]),
                           float(doc["alpha"]), float(doc["dropout"]))
    if kind == "vector":
        return VectorAdapter(doc["target"], doc["param"], tuple(doc["indices"]),
                             np.asarray(doc["values"], dtype=np.float64), int(doc["size"]))
    raise ContractError(f"unknown adapter kind {kind!r}")


def adapters_to_json(adapters: Iterable, base_params: dict[str, np.ndarray] | None = None) -> str:
    """Adapter checkpoint; ``base_params`` holds any base parameters trained alongside (e.g. the head)."""
    doc = {"format": ADAPTER_FORMAT, "adapters": [adapter_to_dict(a) for a in adapters]}
    if base_params:
        doc["base_params"] = {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                              for k, v in base_params.items()}
    return json.dumps(doc, indent=1)


def checkpoint_from_json(text: str, model: ModelSpec | None = None) -> tuple[list, dict[str, np.ndarray]]:
    """(adapters, trained base parameters) from an adapter checkpoint."""
    doc = json.loads(text)
    if doc.get("format") != ADAPTER_FORMAT:
        raise ContractError(f"unsupported adapter format {doc.get('format')!r}")
    base = {k: _matrix(v) for k, v in doc.get("base_params", {}).items()}
    return [adapter_from_dict(d, model) for d in doc["adapters"]], base


def adapters_from_json(text: str, model: ModelSpec | None = None) -> list:
    return checkpoint_from_json(text, model)[0]


def apply_checkpoint(model: ModelSpec, adapters: Iterable, base_params: dict[str, np.ndarray]) -> ModelSpec:
    """Copy of ``model`` with trained base parameters restored and adapters merged."""
    params = model.parameters()
    for name, value in base_params.items():
        if name not in params:
            raise ContractError(f"checkpoint has unknown base parameter {name!r}")
        if params[name].shape != value.shape:
            raise ShapeError(f"{name}: checkpoint {value.shape} vs model {params[name].shape}")
    out = merge_model(model, adapters)
    out_params = out.parameters()
    for name, value in base_params.items():
        out_params[name][...] = value
    return out
