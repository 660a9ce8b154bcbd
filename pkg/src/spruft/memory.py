"""Analytic training-memory accounting in element counts.

The footprint of one training step splits into

* ``mem_model``: frozen parameters,
* ``mem_ft``: trainable parameters plus their gradients,
* ``mem_opt``: Adam's two moment buffers per trainable scalar,
* ``mem_aux``: buffers cached for the backward pass (``cache``) plus dropout
  masks (``masks``), read from the tape's cache ledger.

Counts are attributed to the layer (tape scope) that owns them, and totals are
always the sum of the per-layer rows. Multiply by 8 for float64 bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import LabeledBatch, ModelSpec, model_loss
from .tensor import ContractError, backward
from .trainer import TrainablePlan

COMPONENTS = ("mem_model", "mem_ft", "mem_opt", "cache", "masks")
OTHER = "(activations)"


def _owner(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


@dataclass
class MemoryReport:
    layers: dict[str, dict[str, int]] = field(default_factory=dict)
    ledger: list = field(default_factory=list)
    trainable: int = 0

    def _row(self, scope: str) -> dict[str, int]:
        return self.layers.setdefault(scope, {c: 0 for c in COMPONENTS})

    @property
    def totals(self) -> dict[str, int]:
        tot = {c: 0 for c in COMPONENTS}
        for row in self.layers.values():
            for c in COMPONENTS:
                tot[c] += row[c]
        return tot

    def __getattr__(self, name):
        # mem_model / mem_ft / mem_opt / mem_aux / total as totals
        if name in ("mem_model", "mem_ft", "mem_opt", "cache", "masks"):
            return self.totals[name]
        if name == "mem_aux":
            t = self.totals
            return t["cache"] + t["masks"]
        if name == "total":
            return sum(self.totals.values())
        raise AttributeError(name)

    def layer_aux(self, scope: str) -> int:
        row = self.layers.get(scope)
        return 0 if row is None else row["cache"] + row["masks"]

    def to_dict(self) -> dict:
        t = self.totals
        return {
            "units": "elements",
            "bytes_per_element": 8,
            "trainable_parameters": self.trainable,
            "totals": {**t, "mem_aux": t["cache"] + t["masks"], "total": sum(t.values())},
            "layers": {k: dict(v) for k, v in sorted(self.layers.items())},
            "ledger": [{"label": e.label, "elements": e.element_count, "reason": e.reason,
                        "kind": e.kind, "scope": e.scope or OTHER} for e in self.ledger],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        """Aligned plain-text table, one row per layer plus a total row."""
        head = ("layer", "#param", "mem_model", "mem_ft", "mem_opt", "cache", "masks", "mem_aux", "total")
        rows = []
        for name in sorted(self.layers):
            r = self.layers[name]
            rows.append((name, r["mem_ft"] // 2, r["mem_model"], r["mem_ft"], r["mem_opt"],
                         r["cache"], r["masks"], r["cache"] + r["masks"], sum(r.values())))
        t = self.totals
        rows.append(("TOTAL", self.trainable, t["mem_model"], t["mem_ft"], t["mem_opt"], t["cache"],
                     t["masks"], t["cache"] + t["masks"], sum(t.values())))
        cells = [head] + [tuple(str(c) for c in r) for r in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _check_plan(model: ModelSpec, plan: TrainablePlan) -> None:
    params = model.parameters()
    for name in plan.base_params:
        if name not in params:
            raise ContractError(f"plan trains unknown parameter {name!r}")
    for ad in plan.adapters:
        try:
            model.layer(ad.target)
        except KeyError:
            raise ContractError(f"adapter targets unknown layer {ad.target!r}") from None


def measure_training_footprint(model: ModelSpec, plan: TrainablePlan | None, batch: LabeledBatch,
                               seed: int = 0) -> MemoryReport:
    """Trace one training step and account its memory."""
    plan = plan or TrainablePlan()
    _check_plan(model, plan)
    report = MemoryReport()
    trained = set(plan.base_params)
    for name, arr in model.parameters().items():
        row = report._row(_owner(name))
        if name in trained:
            row["mem_ft"] += 2 * arr.size
            row["mem_opt"] += 2 * arr.size
        else:
            row["mem_model"] += arr.size
    for ad in plan.adapters:
        row = report._row(ad.target)
        row["mem_ft"] += 2 * ad.num_parameters()
        row["mem_opt"] += 2 * ad.num_parameters()
    report.trainable = plan.count(model)

    loss, tape = model_loss(model, batch, plan.adapters, grad_params=plan.base_params,
                            training=True, rng=np.random.default_rng(seed))
    if tape.trainable:
        backward(tape, loss)
    for entry in tape.ledger:
        row = report._row(entry.scope or OTHER)
        row["masks" if entry.kind == "mask" else "cache"] += entry.element_count
    report.ledger = list(tape.ledger)
    return report


@dataclass
class CacheComparison:
    a: MemoryReport
    b: MemoryReport
    deltas: dict[str, int]  # per layer: mem_aux(a) - mem_aux(b)

    @property
    def total_delta(self) -> int:
        return int(sum(self.deltas.values()))

    def summary(self) -> str:
        d = self.total_delta
        if d == 0:
            return "A and B cache the same number of elements"
        fewer = "B" if d > 0 else "A"
        return f"{fewer} caches {abs(d)} fewer elements (mem_aux A={self.a.mem_aux}, B={self.b.mem_aux})"

    def to_dict(self) -> dict:
        return {"a": self.a.to_dict(), "b": self.b.to_dict(), "aux_deltas": dict(sorted(self.deltas.items())),
                "total_aux_delta": self.total_delta, "summary": self.summary()}


def compare_configurations(model: ModelSpec, config_a: TrainablePlan, config_b: TrainablePlan,
                           batch: LabeledBatch, seed: int = 0) -> CacheComparison:
    """Per-layer mem_aux deltas (A minus B) for two plans on the same base model."""
    ra = measure_training_footprint(model, config_a, batch, seed)
    rb = measure_training_footprint(model, config_b, batch, seed)
    scopes = set(ra.layers) | set(rb.layers)
    deltas = {s: ra.layer_aux(s) - rb.layer_aux(s) for s in scopes}
    return CacheComparison(ra, rb, deltas)
