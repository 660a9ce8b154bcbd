"""Acceptance checks, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import json
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

from spruft.adapters import (build_column_adapter, build_lora_adapter, build_row_adapter, build_vector_adapter,
                             dependency_adapted_forward, lora_forward, adapted_forward, lora_matched_rows, merge,
                             merge_model)
from spruft.cli import main as cli_main
from spruft.experiment import ExperimentConfig, StudySettings, run_spsa_study, run_training, spsa_replicates
from spruft.importance import SPSAConfig, aggregate_products, averaged_spsa, quantiles_mean, select_top_r, spsa_variance
from spruft.layers import LabeledBatch, LinearLayer, forward_linear, model_loss, numeric_gradient, loss_value
from spruft.layers import tiny_mlp, toy_transformer
from spruft.memory import compare_configurations
from spruft.tensor import backward
from spruft.trainer import SynthTaskSpec, TrainConfig, TrainablePlan, make_synth_task, train

# tolerances
ADDITIVITY_TOL = 1e-10
GRADIENT_TOL = 1e-6
EQUIVALENCE_TOL = 1e-8
MEAN_SE = 3.0
VAR_TOL_SINGLE = 0.20
VAR_TOL_AVERAGED = 0.25
RANK_TOL = 0.03
QM_TOL = 1e-12
ZO_TOL = 0.05
CLOSURE_MIN = 0.70


def quantile_oracle(values, q):
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


# ---------------------------------------------------------------------------

def forward_additivity():
    rng = np.random.default_rng(100)
    worst = 0.0
    for t in range(120):
        d_out, d_in = rng.integers(2, 12, size=2)
        layer = LinearLayer("lin", rng.standard_normal((d_out, d_in)),
                            rng.standard_normal(d_out) if t % 2 else None)
        x = rng.standard_normal((int(rng.integers(1, 6)), d_in))
        kind = t % 4
        if kind == 0:
            ad = build_row_adapter(layer, rng.choice(d_out, int(rng.integers(1, d_out + 1)), replace=False))
            ad.weight[...] = rng.standard_normal(ad.weight.shape)
            got, merged = adapted_forward(layer, ad, x).data, merge(ad, layer)
        elif kind == 1:
            ad = build_lora_adapter(layer, int(rng.integers(1, 4)), rng, alpha=float(rng.uniform(1, 16)))
            ad.B[...] = rng.standard_normal(ad.B.shape)
            got, merged = lora_forward(layer, ad, x).data, merge(ad, layer)
        else:
            col = build_column_adapter(layer, rng.choice(d_in, int(rng.integers(1, d_in + 1)), replace=False))
            col.weight[...] = rng.standard_normal(col.weight.shape)
            row = None
            if kind == 3:
                row = build_row_adapter(layer, rng.choice(d_out, int(rng.integers(1, d_out + 1)), replace=False))
                row.weight[...] = rng.standard_normal(row.weight.shape)
            got = dependency_adapted_forward(layer, row, col, x).data
            merged = merge(col, layer if row is None else merge(row, layer))
        worst = max(worst, float(np.abs(got - forward_linear(merged, x)).max()))
    return worst < ADDITIVITY_TOL, f"120 triples, max |diff| = {worst:.2e} (< {ADDITIVITY_TOL:g})"


def gradient_correctness():
    worst = 0.0
    for t in range(60):
        rng = np.random.default_rng(200 + t)
        model = toy_transformer(token_dim=3, seq_len=2, d_model=6, d_ff=8, seed=t)
        batch = LabeledBatch(rng.standard_normal((3, 6)), rng.integers(0, 3, 3), 3)
        kind = t % 3
        if kind == 0:
            target = ["blk0.q", "blk0.fc1", "blk0.fc2", "embed"][t % 4]
            lyr = model.layer(target)
            ad = build_row_adapter(lyr, rng.choice(lyr.d_out, 2, replace=False))
            ad.weight[...] = 0.3 * rng.standard_normal(ad.weight.shape)
        elif kind == 1:
            target = ["blk0.v", "blk0.o", "blk0.fc1"][t % 3]
            ad = build_lora_adapter(model.layer(target), 2, rng)
            ad.B[...] = 0.3 * rng.standard_normal(ad.B.shape)
        else:
            target = ["blk0.ln1", "blk0.ln2"][t % 2]
            ad = build_vector_adapter(model.layer(target), ["gain", "shift"][(t // 3) % 2], (0, 2, 5))
            ad.delta_values[...] = 0.3 * rng.standard_normal(3)
        loss, tape = model_loss(model, batch, [ad])
        grads = backward(tape, loss)
        for name, arr in ad.parameters().items():
            fd = numeric_gradient(lambda: loss_value(model, batch, [ad]), arr)
            denom = max(np.abs(fd).max(), np.abs(grads[name]).max(), 1e-12)
            worst = max(worst, float(np.abs(grads[name] - fd).max() / denom))
    return worst < GRADIENT_TOL, f"60 configurations, max relative error = {worst:.2e} (< {GRADIENT_TOL:g})"


def full_coverage_equivalence():
    tr, _ = make_synth_task(SynthTaskSpec(input_dim=8, n_train=200, seed=1))
    cfg = TrainConfig(learning_rate=0.01, epochs=10, batch_size=10, seed=1)
    direct = tiny_mlp(8, [16], 3, seed=1)
    curve_a = train(direct, TrainablePlan(base_params=["fc1.weight"]), tr, None, cfg).step_losses
    base = tiny_mlp(8, [16], 3, seed=1)
    ad = build_row_adapter(base.layer("fc1"), range(16))
    curve_b = train(base, TrainablePlan([ad]), tr, None, cfg).step_losses
    diff = float(np.abs(np.array(curve_a) - np.array(curve_b)).max())
    ok = len(curve_a) == 200 and diff < EQUIVALENCE_TOL
    return ok, f"{len(curve_a)} steps, max loss-curve difference = {diff:.2e} (< {EQUIVALENCE_TOL:g})"


def spsa_moments():
    g = np.array([0.8, -0.5, 0.3, 1.2, -0.1])
    single = spsa_replicates(g, 1, 1, 1e-3, 10_000, seed=3)
    se = single.std(axis=0, ddof=1) / math.sqrt(len(single))
    z = np.abs(single.mean(axis=0) - g) / se
    ratio1 = single.var(axis=0, ddof=1) / spsa_variance(g, 1)
    avg = spsa_replicates(g, 5, 8, 1e-3, 1_000, seed=4)
    ratio2 = avg.var(axis=0, ddof=1) / spsa_variance(g, 40)
    ok = (z.max() < MEAN_SE and np.abs(ratio1 - 1).max() < VAR_TOL_SINGLE
          and np.abs(ratio2 - 1).max() < VAR_TOL_AVERAGED)
    return ok, (f"max |mean-g|/SE = {z.max():.2f} (< {MEAN_SE:g}); n=1 variance ratios "
                f"[{ratio1.min():.3f}, {ratio1.max():.3f}] (within ±{VAR_TOL_SINGLE:.0%}); n=5,k=8 ratios "
                f"[{ratio2.min():.3f}, {ratio2.max():.3f}] (within ±{VAR_TOL_AVERAGED:.0%})")


def rank_probability():
    _, ranks = run_spsa_study(StudySettings(), seed=0)
    parts, ok = [], True
    for r in ranks:
        err = abs(r["empirical"] - r["predicted"])
        ok &= err <= RANK_TOL
        parts.append(f"gap {r['gap']:g}: empirical {r['empirical']:.4f} vs predicted {r['predicted']:.4f} "
                     f"(|d| = {err:.4f}; covariance-aware {r['predicted_with_covariance']:.4f})")
    return ok, f"tol ±{RANK_TOL}; " + "; ".join(parts)


def quantiles_mean_check():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        row = rng.random(int(rng.integers(1, 12))) * rng.choice([1e-3, 1.0, 1e3])
        want = sum(quantile_oracle(list(row), q) for q in np.linspace(0, 1, 11)) / 11
        worst = max(worst, abs(quantiles_mean(row[None, :]).scores[0] - want))
    consts = [0.3, 1e-7, 42.0, 0.1 + 0.2]
    const_ok = all(quantiles_mean(np.full((1, 5), c)).scores[0] == c for c in consts)
    m = rng.random((40, 6))
    base = select_top_r(quantiles_mean(m).scores, 7).indices
    scale_ok = all(select_top_r(quantiles_mean(c * m).scores, 7).indices == base for c in (1e-6, 0.37, 5.0, 1e6))
    ok = worst < QM_TOL and const_ok and scale_ok
    return ok, (f"1000 rows, max |QM - oracle| = {worst:.2e} (< {QM_TOL:g}); constant rows exact: {const_ok}; "
                f"selection scale-invariant: {scale_ok}")


def zo_taylor_consistency():
    # the root-mean-square error over replicate estimates follows sqrt((1 + R) / (n*k)),
    # with R = ||W||^2 ||G||^2 / sum_i s_i^2 fixed by the problem
    rng = np.random.default_rng(7)
    w = rng.standard_normal((3, 4))
    w_star = rng.standard_normal((3, 4))
    exact = aggregate_products(w, w - w_star, "abs_sum")
    ratio = float((w ** 2).sum() * ((w - w_star) ** 2).sum() / (exact ** 2).sum())
    k, reps, errors = 4, 16, []
    for budget in (64, 256, 1024, 4096):
        sq = []
        for rep in range(reps):
            theta = w.copy()
            loss = lambda: 0.5 * float(((theta - w_star) ** 2).sum())  # noqa: E731
            est = averaged_spsa([loss] * k, [theta], SPSAConfig(n=budget // k, k=k, base_seed=rep)).estimate
            sq.append(float(((aggregate_products(w, est.reshape(w.shape), "abs_sum") - exact) ** 2).sum()))
        errors.append(math.sqrt(np.mean(sq)) / float(np.linalg.norm(exact)))
    inversions = [i for i in range(3) if errors[i + 1] >= errors[i]]
    ok = errors[-1] < ZO_TOL and (not inversions or inversions == [2])
    return ok, ("RMS relative error over 16 replicates at n*k = 64/256/1024/4096: "
                + ", ".join(f"{e:.4f}" for e in errors)
                + f" (final < {ZO_TOL:g}, predicted {math.sqrt((1 + ratio) / 4096):.4f}, inversions {inversions})")


def memory_ordering():
    model = toy_transformer(seed=0)
    rng = np.random.default_rng(0)
    batch = LabeledBatch(rng.standard_normal((5, 32)), np.arange(5) % 3, 3)
    ids = ("blk0.q", "blk0.k", "blk0.v", "blk0.o", "blk0.fc1", "blk0.fc2")
    r, p = 2, 0.1
    lora = TrainablePlan([build_lora_adapter(model.layer(l), r, np.random.default_rng(1), dropout=p) for l in ids])
    sp = TrainablePlan([build_row_adapter(model.layer(l), range(lora_matched_rows(model.layer(l), r))) for l in ids])
    cmp = compare_configurations(model, lora, sp, batch)
    rows = 5 * 4  # tokens are flattened into the batch
    want = sum(rows * r + rows * model.layer(l).d_in for l in ids)
    every = TrainablePlan([build_row_adapter(model.layer(l), range(2)) for l in ids])
    fa = TrainablePlan([build_row_adapter(model.layer("blk0.fc1"), range(6)),
                        build_row_adapter(model.layer("blk0.fc2"), range(4))])
    fcmp = compare_configurations(model, every, fa, batch)
    ok = (sp.count(model) == lora.count(model) and cmp.b.mem_aux < cmp.a.mem_aux and cmp.total_delta == want
          and every.count(model) == fa.count(model) and fcmp.b.mem_aux < fcmp.a.mem_aux)
    return ok, (f"#param {sp.count(model)} each: mem_aux SPruFT {cmp.b.mem_aux} < LoRA {cmp.a.mem_aux}, "
                f"delta {cmp.total_delta} == expected {want}; #param {fa.count(model)} each: freeze-attention "
                f"{fcmp.b.mem_aux} < all layers {fcmp.a.mem_aux}")


def _blob_config(seed, **kw):
    doc = {"model": {"kind": "mlp", "input_dim": 16, "hidden": [128, 128], "num_classes": 3},
           "task": {"input_dim": 16, "separation": 3.0, "n_train": 600, "n_val": 300},
           "pretrain": {"task": {"n_train": 1200}, "train": {"learning_rate": 0.01, "epochs": 10}},
           "train": {"learning_rate": 0.01, "epochs": 5}, "seed": seed}
    task = kw.pop("task", {})
    doc["task"].update(task)
    doc.update(kw)
    return ExperimentConfig.from_dict(doc)


def end_to_end():
    seeds = range(5)

    def final(**kw):
        return [run_training(_blob_config(s, **kw)).result.history[-1] for s in seeds]

    head = np.mean([h["val_accuracy"] for h in final(method="head")])
    full = np.mean([h["val_accuracy"] for h in final(method="full")])
    sp = np.mean([h["val_accuracy"] for h in final(method="sprufft", metric="taylor", ratio=0.05)])
    closure = (sp - head) / (full - head)
    skew = {"balanced": False, "imbalance": 0.1}
    qm = np.mean([h["val_per_class"]["min"] for h in final(method="sprufft", metric="qm-taylor", ratio=0.05,
                                                           task=skew)])
    ty = np.mean([h["val_per_class"]["min"] for h in final(method="sprufft", metric="taylor", ratio=0.05,
                                                           task=skew)])
    ok = closure >= CLOSURE_MIN and qm >= ty
    return ok, (f"accuracy head {head:.4f}, full {full:.4f}, SPruFT 5% {sp:.4f}: closes {closure:.1%} of the gap "
                f"(>= {CLOSURE_MIN:.0%}); imbalanced min per-class accuracy QM-Taylor {qm:.4f} vs Taylor {ty:.4f}")


def _outputs(directory):
    return {name: open(os.path.join(directory, name), "rb").read() for name in sorted(os.listdir(directory))}


def determinism():
    base = {"model": {"kind": "mlp", "input_dim": 8, "hidden": [16, 16], "num_classes": 3},
            "task": {"input_dim": 8, "n_train": 120, "n_val": 60}, "train": {"epochs": 2}}
    runs = {
        "importance": {**base, "metric": "zo-taylor", "rank": 3, "spsa": {"n": 2, "k": 3}},
        "train": {**base, "metric": "random", "ratio": 0.1, "method": "sprufft"},
        "train-lora": {**base, "method": "lora", "rank": 2},
        "spsa-study": {"method": "full", "spsa_study": {"dim": 4, "replications": 300}},
        "memory-report": {**base, "rank": 2, "memory": {"compare": {"method": "lora"}}},
    }
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, doc in runs.items():
            command = name.split("-lora")[0]
            cfg = os.path.join(tmp, f"{name}.json")
            with open(cfg, "w") as fh:
                json.dump(doc, fh)
            outs = []
            for rep in range(2):
                out = os.path.join(tmp, f"{name}-{rep}")
                if cli_main([command, "--config", cfg, "--seed", "13", "--out", out]) != 0:
                    return False, f"{name} exited nonzero"
                outs.append(_outputs(out))
            if outs[0] != outs[1]:
                mismatched.append(name)
        adapter = os.path.join(tmp, "train-0", "adapter.json")
        model = os.path.join(tmp, "train-0", "base_model.json")
        merged = [os.path.join(tmp, f"merge-{rep}") for rep in range(2)]
        for out in merged:
            cli_main(["merge", "--model", model, "--adapter", adapter, "--out", out])
        if _outputs(merged[0]) != _outputs(merged[1]):
            mismatched.append("merge")
    return not mismatched, f"{len(runs) + 1} command runs repeated: byte-identical outputs, mismatches {mismatched}"


CRITERIA = [
    ("forward additivity", forward_additivity),
    ("gradient correctness", gradient_correctness),
    ("full-coverage equivalence", full_coverage_equivalence),
    ("SPSA moments", spsa_moments),
    ("rank probability", rank_probability),
    ("quantiles-mean", quantiles_mean_check),
    ("ZO-Taylor consistency", zo_taylor_consistency),
    ("analytic memory ordering", memory_ordering),
    ("end-to-end sanity", end_to_end),
    ("determinism", determinism),
]


def report(label, fn):
    start = time.perf_counter()
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail} [{time.perf_counter() - start:.1f}s]"
    return ok, line


@pytest.mark.parametrize("label, fn", CRITERIA, ids=[c[0].replace(" ", "_") for c in CRITERIA])
def test_acceptance(label, fn, capsys):
    ok, line = report(label, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [report(label, fn) for label, fn in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
