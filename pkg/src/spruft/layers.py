"""Layers, desk-scale models, losses and the finite-difference oracle.

A :class:`ModelSpec` owns plain numpy parameter arrays. Every forward pass
builds a fresh :class:`~spruft.tensor.Tape` through a :class:`ForwardContext`
that decides which parameters are trainable leaves and which adapters are
attached to which layers.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .rng import substream
from .stats import five_number_summary
from .tensor import ContractError, ShapeError, Tape, Tensor

MODEL_FORMAT = "spruft-model/1"


# ---------------------------------------------------------------------------
# data

@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.inputs.ndim != 2:
            raise ShapeError(f"inputs must be [b, d_in], got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs")
        if self.labels.size and self.labels.min() < 0:
            raise ContractError("labels must be nonnegative")
        if self.num_classes is not None and self.labels.size and self.labels.max() >= self.num_classes:
            raise ContractError(f"label {self.labels.max()} out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> LabeledBatch:
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.num_classes)

    def of_class(self, t: int) -> LabeledBatch:
        return self.subset(self.labels == t)


# ---------------------------------------------------------------------------
# forward context

class ForwardContext:
    """Per-pass state: the tape, trainable set, attached adapters, mode."""

    def __init__(self, tape: Tape | None = None, adapters: Iterable = (),
                 grad_params: Iterable[str] = (), training: bool = False,
                 rng: np.random.Generator | None = None, adapters_trainable: bool = True):
        self.tape = tape if tape is not None else Tape()
        self.grad_params = set(grad_params)
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.adapters_trainable = adapters_trainable
        self._by_target: dict[str, list] = {}
        for ad in adapters:
            self._by_target.setdefault(ad.target, []).append(ad)

    def param(self, name: str, array: np.ndarray) -> Tensor:
        return self.tape.param(name, array, trainable=name in self.grad_params)

    def adapter_param(self, name: str, array: np.ndarray) -> Tensor:
        return self.tape.param(name, array, trainable=self.adapters_trainable)

    def attach(self, adapter) -> None:
        bucket = self._by_target.setdefault(adapter.target, [])
        if not any(a is adapter for a in bucket):
            bucket.append(adapter)

    def adapters_for(self, layer_id: str) -> list:
        return self._by_target.get(layer_id, [])

    @property
    def targets(self) -> set[str]:
        return set(self._by_target)


# ---------------------------------------------------------------------------
# layers

@dataclass
class LinearLayer:
    id: str
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ShapeError(f"{self.id}: weight must be a nonempty matrix, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.d_out,):
                raise ShapeError(f"{self.id}: bias {self.bias.shape} vs d_out {self.d_out}")

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"{self.id}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.id}.bias"] = self.bias
        return out

    def forward(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        with ctx.tape.scope(self.id):
            w = ctx.param(f"{self.id}.weight", self.weight)
            b = None if self.bias is None else ctx.param(f"{self.id}.bias", self.bias)
            out = T.linear(x, w, b)
            for ad in ctx.adapters_for(self.id):
                out = T.add(out, ad.branch(ctx, self, x))
        return out

    def describe(self) -> dict:
        return {"kind": "linear", "id": self.id, "d_in": self.d_in, "d_out": self.d_out,
                "bias": self.bias is not None}


@dataclass
class LayerNormLayer:
    id: str
    gain: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.gain.ndim != 1 or self.gain.shape != self.shift.shape:
            raise ShapeError(f"{self.id}: gain {self.gain.shape} and shift {self.shift.shape} differ")
        if not self.eps > 0:
            raise ContractError(f"{self.id}: epsilon must be positive")

    @property
    def d(self) -> int:
        return self.gain.shape[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{self.id}.gain": self.gain, f"{self.id}.shift": self.shift}

    def forward(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        with ctx.tape.scope(self.id):
            vec = {"gain": ctx.param(f"{self.id}.gain", self.gain),
                   "shift": ctx.param(f"{self.id}.shift", self.shift)}
            for ad in ctx.adapters_for(self.id):
                vec[ad.param] = T.add(vec[ad.param], ad.branch(ctx, self, None))
            return T.layer_norm(x, vec["gain"], vec["shift"], self.eps)

    def describe(self) -> dict:
        return {"kind": "layernorm", "id": self.id, "d": self.d, "eps": self.eps}


class ReLU:
    kind = "relu"

    def forward(self, ctx, x):
        return T.relu(x)

    def describe(self):
        return {"kind": "relu"}


class GELU:
    kind = "gelu"

    def forward(self, ctx, x):
        return T.gelu(x)

    def describe(self):
        return {"kind": "gelu"}


@dataclass
class Tokens:
    """[b, T*f] -> [b*T, f]."""
    seq_len: int

    def forward(self, ctx, x):
        b, width = x.shape
        if width % self.seq_len:
            raise ShapeError(f"input width {width} is not a multiple of seq_len {self.seq_len}")
        return T.reshape(x, (b * self.seq_len, width // self.seq_len))

    def describe(self):
        return {"kind": "tokens", "seq_len": self.seq_len}


@dataclass
class MeanPool:
    """[b*T, d] -> [b, d], averaging over tokens."""
    seq_len: int

    def forward(self, ctx, x):
        n, d = x.shape
        with ctx.tape.scope("pool"):
            return T.mean(T.reshape(x, (n // self.seq_len, self.seq_len, d)), axis=1)

    def describe(self):
        return {"kind": "mean_pool", "seq_len": self.seq_len}


@dataclass
class TransformerBlock:
    """Pre-norm encoder block: single-head attention and a GELU MLP, both residual."""
    id: str
    seq_len: int
    ln1: LayerNormLayer
    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    o: LinearLayer
    ln2: LayerNormLayer
    fc1: LinearLayer
    fc2: LinearLayer

    @property
    def d_model(self) -> int:
        return self.q.d_in

    @property
    def d_ff(self) -> int:
        return self.fc1.d_out

    def sublayers(self) -> list:
        return [self.ln1, self.q, self.k, self.v, self.o, self.ln2, self.fc1, self.fc2]

    def attention_ids(self) -> list[str]:
        return [self.q.id, self.k.id, self.v.id, self.o.id]

    def forward(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        n, d = x.shape
        t = self.seq_len
        b = n // t
        h = self.ln1.forward(ctx, x)
        q = T.reshape(self.q.forward(ctx, h), (b, t, d))
        k = T.reshape(self.k.forward(ctx, h), (b, t, d))
        v = T.reshape(self.v.forward(ctx, h), (b, t, d))
        with ctx.tape.scope(f"{self.id}.attn"):
            scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
            att = T.reshape(T.matmul(T.softmax(scores), v), (n, d))
        x = T.add(x, self.o.forward(ctx, att))
        h = self.ln2.forward(ctx, x)
        u = self.fc1.forward(ctx, h)
        with ctx.tape.scope(f"{self.id}.mlp"):
            u = T.gelu(u)
        return T.add(x, self.fc2.forward(ctx, u))

    def describe(self):
        return {"kind": "transformer_block", "id": self.id, "seq_len": self.seq_len,
                "d_model": self.d_model, "d_ff": self.d_ff}


# ---------------------------------------------------------------------------
# model

@dataclass
class ModelSpec:
    input_dim: int
    num_classes: int
    layers: list
    seed: int = 0
    dependencies: list[tuple[str, str]] = field(default_factory=list)
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ContractError("num_classes must be positive")
        ids = [lyr.id for lyr in self._flat() if hasattr(lyr, "id")]
        if len(ids) != len(set(ids)):
            raise ContractError("layer ids must be unique")
        lin = self.linear_layers()
        for rows, cols in self.dependencies:
            if rows not in lin or cols not in lin:
                raise ContractError(f"dependency ({rows}, {cols}) names an unknown linear layer")
            if lin[rows].d_out != lin[cols].d_in:
                raise ShapeError(f"dependency {rows}->{cols}: d_out {lin[rows].d_out} != d_in {lin[cols].d_in}")

    def _flat(self) -> list:
        out = []
        for lyr in self.layers:
            out.extend(lyr.sublayers() if isinstance(lyr, TransformerBlock) else [lyr])
            if isinstance(lyr, TransformerBlock):
                out.append(lyr)
        return out

    def linear_layers(self) -> dict[str, LinearLayer]:
        return {l.id: l for l in self._flat() if isinstance(l, LinearLayer)}

    def norm_layers(self) -> dict[str, LayerNormLayer]:
        return {l.id: l for l in self._flat() if isinstance(l, LayerNormLayer)}

    def layer(self, layer_id: str):
        for l in self._flat():
            if getattr(l, "id", None) == layer_id:
                return l
        raise KeyError(f"no layer {layer_id!r}")

    @property
    def head_id(self) -> str:
        return list(self.linear_layers())[-1]

    def attention_ids(self) -> list[str]:
        return [i for l in self.layers if isinstance(l, TransformerBlock) for i in l.attention_ids()]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self._flat():
            if hasattr(l, "named_parameters"):
                out.update(l.named_parameters())
        return out

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def forward(self, ctx: ForwardContext, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"model expects input width {self.input_dim}, got {x.shape[-1]}")
        for lyr in self.layers:
            x = lyr.forward(ctx, x)
        return x

    def copy(self) -> ModelSpec:
        return copy.deepcopy(self)

    # -- serialization --------------------------------------------------
    def to_dict(self, include_parameters: bool = True) -> dict:
        doc = {
            "format": MODEL_FORMAT,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "seed": self.seed,
            "loss": self.loss,
            "layers": [l.describe() for l in self.layers],
            "dependencies": [{"rows": r, "cols": c} for r, c in self.dependencies],
        }
        if include_parameters:
            doc["parameters"] = {name: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
                                 for name, a in self.parameters().items()}
        return doc

    def to_json(self, include_parameters: bool = True) -> str:
        return json.dumps(self.to_dict(include_parameters), indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping) -> ModelSpec:
        known = {"format", "input_dim", "num_classes", "seed", "loss", "layers",
                 "dependencies", "parameters"}
        extra = set(doc) - known
        if extra:
            raise ContractError(f"unknown model keys: {sorted(extra)}")
        if doc.get("format", MODEL_FORMAT) != MODEL_FORMAT:
            raise ContractError(f"unsupported model format {doc.get('format')!r}")
        if doc.get("loss", "softmax_cross_entropy") != "softmax_cross_entropy":
            raise ContractError("only softmax_cross_entropy is supported")
        seed = int(doc.get("seed", 0))
        rng = substream(seed, "init")
        layers = [_build_layer(d, rng) for d in doc["layers"]]
        deps = [(d["rows"], d["cols"]) for d in doc.get("dependencies", [])]
        model = cls(int(doc["input_dim"]), int(doc["num_classes"]), layers, seed, deps)
        params = doc.get("parameters")
        if params is not None:
            own = model.parameters()
            if set(params) != set(own):
                missing, unknown = set(own) - set(params), set(params) - set(own)
                raise ContractError(f"parameter mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
            for name, p in params.items():
                arr = np.asarray(p["values"], dtype=np.float64).reshape(p["shape"])
                if arr.shape != own[name].shape:
                    raise ShapeError(f"{name}: stored shape {arr.shape} vs {own[name].shape}")
                own[name][...] = arr
        _check_composes(model)
        return model

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))


def _init_linear(layer_id, d_in, d_out, bias, rng) -> LinearLayer:
    w = rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)
    return LinearLayer(layer_id, w, np.zeros(d_out) if bias else None)


def _init_norm(layer_id, d, eps=1e-5) -> LayerNormLayer:
    return LayerNormLayer(layer_id, np.ones(d), np.zeros(d), eps)


def _build_layer(d: Mapping, rng: np.random.Generator):
    kind = d.get("kind")
    if kind == "linear":
        return _init_linear(d["id"], int(d["d_in"]), int(d["d_out"]), bool(d.get("bias", True)), rng)
    if kind == "layernorm":
        return _init_norm(d["id"], int(d["d"]), float(d.get("eps", 1e-5)))
    if kind == "relu":
        return ReLU()
    if kind == "gelu":
        return GELU()
    if kind == "tokens":
        return Tokens(int(d["seq_len"]))
    if kind == "mean_pool":
        return MeanPool(int(d["seq_len"]))
    if kind == "transformer_block":
        return _init_block(d["id"], int(d["seq_len"]), int(d["d_model"]), int(d["d_ff"]), rng)
    raise ContractError(f"unknown layer kind {kind!r}")


def _init_block(block_id, seq_len, d, d_ff, rng) -> TransformerBlock:
    lin = lambda name, i, o: _init_linear(f"{block_id}.{name}", i, o, True, rng)  # noqa: E731
    return TransformerBlock(
        block_id, seq_len,
        _init_norm(f"{block_id}.ln1", d),
        lin("q", d, d), lin("k", d, d), lin("v", d, d), lin("o", d, d),
        _init_norm(f"{block_id}.ln2", d),
        lin("fc1", d, d_ff), lin("fc2", d_ff, d),
    )


def _check_composes(model: ModelSpec) -> None:
    width = model.input_dim
    for lyr in model.layers:
        if isinstance(lyr, LinearLayer):
            if lyr.d_in != width:
                raise ShapeError(f"{lyr.id}: d_in {lyr.d_in} does not match incoming width {width}")
            width = lyr.d_out
        elif isinstance(lyr, LayerNormLayer):
            if lyr.d != width:
                raise ShapeError(f"{lyr.id}: d {lyr.d} does not match incoming width {width}")
        elif isinstance(lyr, Tokens):
            if width % lyr.seq_len:
                raise ShapeError(f"width {width} not divisible by seq_len {lyr.seq_len}")
            width //= lyr.seq_len
        elif isinstance(lyr, TransformerBlock):
            if lyr.d_model != width:
                raise ShapeError(f"{lyr.id}: d_model {lyr.d_model} vs incoming width {width}")
    if width != model.num_classes:
        raise ShapeError(f"final width {width} does not match num_classes {model.num_classes}")


def tiny_mlp(input_dim: int, hidden: Iterable[int], num_classes: int, seed: int = 0,
             dependencies: bool = False) -> ModelSpec:
    """Linear/ReLU stack named fc1, fc2, ..., head."""
    dims = [input_dim, *hidden]
    ids = [f"fc{i + 1}" for i in range(len(dims) - 1)] + ["head"]
    dims.append(num_classes)
    doc_layers = []
    for i, lid in enumerate(ids):
        doc_layers.append({"kind": "linear", "id": lid, "d_in": dims[i], "d_out": dims[i + 1]})
        if lid != "head":
            doc_layers.append({"kind": "relu"})
    deps = []
    if dependencies:
        deps = [{"rows": ids[i], "cols": ids[i + 1]} for i in range(len(ids) - 1)]
    return ModelSpec.from_dict({"input_dim": input_dim, "num_classes": num_classes, "seed": seed,
                                "layers": doc_layers, "dependencies": deps})


def toy_transformer(token_dim: int = 8, seq_len: int = 4, d_model: int = 32, d_ff: int = 64,
                    n_blocks: int = 1, num_classes: int = 3, seed: int = 0) -> ModelSpec:
    """embed -> transformer block(s) -> mean pool -> head."""
    doc_layers = [
        {"kind": "tokens", "seq_len": seq_len},
        {"kind": "linear", "id": "embed", "d_in": token_dim, "d_out": d_model},
    ]
    for i in range(n_blocks):
        doc_layers.append({"kind": "transformer_block", "id": f"blk{i}", "seq_len": seq_len,
                           "d_model": d_model, "d_ff": d_ff})
    doc_layers += [
        {"kind": "mean_pool", "seq_len": seq_len},
        {"kind": "linear", "id": "head", "d_in": d_model, "d_out": num_classes},
    ]
    return ModelSpec.from_dict({"input_dim": token_dim * seq_len, "num_classes": num_classes,
                                "seed": seed, "layers": doc_layers})


# ---------------------------------------------------------------------------
# forward helpers

def forward_linear(layer: LinearLayer, x) -> np.ndarray:
    """``x @ W.T + bias`` on a fresh tape; accepts arrays or tensors."""
    if isinstance(x, Tensor):
        return LinearLayer.forward(layer, ForwardContext(x.tape), x).data
    ctx = ForwardContext()
    return layer.forward(ctx, ctx.tape.constant(x)).data


def model_loss(model: ModelSpec, batch: LabeledBatch, adapters: Iterable = (),
               grad_params: Iterable[str] = (), training: bool = False,
               rng: np.random.Generator | None = None,
               adapters_trainable: bool = True) -> tuple[Tensor, Tape]:
    """Mean softmax cross-entropy over the batch, with the tape that produced it."""
    if batch.labels.size and batch.labels.max() >= model.num_classes:
        raise ContractError(f"label {batch.labels.max()} out of range for {model.num_classes} classes")
    ctx = ForwardContext(adapters=adapters, grad_params=grad_params, training=training, rng=rng,
                         adapters_trainable=adapters_trainable)
    x = ctx.tape.constant(batch.inputs, name="inputs")
    logits = model.forward(ctx, x)
    with ctx.tape.scope("loss"):
        loss = T.cross_entropy(logits, batch.labels)
    return loss, ctx.tape


def loss_value(model: ModelSpec, batch: LabeledBatch, adapters: Iterable = ()) -> float:
    loss, _ = model_loss(model, batch, adapters, adapters_trainable=False)
    return loss.item()


def logits(model: ModelSpec, inputs: np.ndarray, adapters: Iterable = ()) -> np.ndarray:
    ctx = ForwardContext(adapters=adapters, adapters_trainable=False)
    return model.forward(ctx, ctx.tape.constant(inputs)).data


def predict(model: ModelSpec, inputs: np.ndarray, adapters: Iterable = ()) -> np.ndarray:
    return np.argmax(logits(model, inputs, adapters), axis=1)


# ---------------------------------------------------------------------------
# finite differences

def numeric_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``array``, perturbed in place."""
    if not step > 0:
        raise ContractError("finite-difference step must be positive")
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        up = f()
        flat[j] = orig - step
        down = f()
        flat[j] = orig
        out[j] = (up - down) / (2.0 * step)
    return grad


def finite_diff_gradient(model: ModelSpec, batch: LabeledBatch, param: str,
                         step: float = 1e-5, adapters: Iterable = ()) -> np.ndarray:
    """Central-difference gradient of the mean loss for one named parameter.

    ``param`` names a model parameter or an adapter parameter.
    """
    adapters = list(adapters)
    arrays = dict(model.parameters())
    for ad in adapters:
        arrays.update(ad.parameters())
    if param not in arrays:
        raise KeyError(f"no parameter {param!r}")
    return numeric_gradient(lambda: loss_value(model, batch, adapters), arrays[param], step)


# ---------------------------------------------------------------------------
# evaluation

def per_class_accuracy(model: ModelSpec, batch: LabeledBatch, adapters: Iterable = ()) -> np.ndarray:
    pred = predict(model, batch.inputs, adapters)
    acc = np.empty(model.num_classes)
    for t in range(model.num_classes):
        mask = batch.labels == t
        if not mask.any():
            raise ContractError(f"label {t} has no examples")
        acc[t] = float((pred[mask] == t).mean())
    return acc


def per_class_accuracy_summary(model: ModelSpec, batch: LabeledBatch, adapters: Iterable = ()) -> dict[str, float]:
    """mean/min/Q1/median/Q3/max of the per-label accuracies."""
    return five_number_summary(per_class_accuracy(model, batch, adapters))


def accuracy(model: ModelSpec, batch: LabeledBatch, adapters: Iterable = ()) -> float:
    return float((predict(model, batch.inputs, adapters) == batch.labels).mean())
