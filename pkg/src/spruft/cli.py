"""Command-line entry point: ``spruft <command> --config cfg.json [--seed N] [--out DIR]``.

Exit status: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .adapters import adapters_to_json, apply_checkpoint, checkpoint_from_json, merge_model
from .experiment import (ConfigError, ExperimentConfig, build_plan, build_task, compute_importance,
                         memory_batch, prepare_model, run_spsa_study, run_training, target_layers)
from .layers import ModelSpec
from .memory import compare_configurations, measure_training_footprint
from .tensor import ContractError, ShapeError
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SUMMARY_KEYS = ("mean", "min", "q1", "median", "q3", "max")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=",", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row.get(h)) for h in header])


def write_json(path: str, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands

def cmd_importance(config: ExperimentConfig, out: str) -> None:
    model = prepare_model(config)
    train_data, _ = build_task(config, model)
    if config.method in ("sprufft", "sprufft-dep"):
        plan = build_plan(config, model, train_data)
        scores, selected = plan.importance, plan.selected
    else:
        scores = compute_importance(config, model, target_layers(config, model), train_data)
        selected = {}
    rows, doc = [], {}
    for name, vec in scores.items():
        chosen = set(selected.get(name, ()))
        for i, s in enumerate(vec.scores):
            rows.append({"layer": name, "neuron": i, "score": float(s), "selected": int(i in chosen)})
        doc[name] = {"metric": vec.metric, "scores": vec.scores.tolist(),
                     "selected": list(selected.get(name, ()))}
    write_csv(os.path.join(out, "importance.csv"), ["layer", "neuron", "score", "selected"], rows)
    write_json(os.path.join(out, "importance.json"), doc)


def _metric_rows(history: list[dict]) -> list[dict]:
    rows = []
    for rec in history:
        rows.append({"epoch": rec["epoch"], "split": "train", "loss": rec["train_loss"]})
        if "val_loss" in rec:
            row = {"epoch": rec["epoch"], "split": "val", "loss": rec["val_loss"], "accuracy": rec["val_accuracy"]}
            for k, v in rec.get("val_per_class", {}).items():
                row[f"class_{k}"] = v
            rows.append(row)
    return rows


def cmd_train(config: ExperimentConfig, out: str) -> None:
    model = prepare_model(config)
    write_text(os.path.join(out, "base_model.json"), model.to_json() + "\n")
    run = run_training(config, model)
    header = ["epoch", "split", "loss", "accuracy"] + [f"class_{k}" for k in SUMMARY_KEYS]
    write_csv(os.path.join(out, "metrics.csv"), header, _metric_rows(run.result.history))
    write_json(os.path.join(out, "metrics.json"), {
        "method": config.method, "metric": config.metric, "trainable_parameters": run.trainable,
        "total_parameters": run.model.num_parameters(), "history": run.result.history,
        "step_losses": run.result.step_losses,
        "selected": {k: list(v) for k, v in run.plan.selected.items()},
    })
    adapters = run.plan.plan.adapters
    params = run.model.parameters()
    trained = {n: params[n] for n in run.plan.plan.base_params}
    write_text(os.path.join(out, "adapter.json"), adapters_to_json(adapters, trained) + "\n")
    if config.save_merged:
        write_text(os.path.join(out, "model.json"), merge_model(run.model, adapters).to_json() + "\n")


STUDY_HEADER = ["section", "index", "g", "mean", "std_error", "z_score", "variance", "predicted_variance",
                "variance_ratio", "gap", "g_i", "g_j", "empirical", "predicted", "predicted_with_covariance"]


def cmd_spsa_study(config: ExperimentConfig, out: str) -> None:
    settings = config.study_settings
    moments, ranks = run_spsa_study(settings, config.seed)
    rows = [{"section": "moment", "index": m["coordinate"], **m} for m in moments]
    rows += [{"section": "rank", "index": i, **r} for i, r in enumerate(ranks)]
    write_csv(os.path.join(out, "spsa_diagnostics.csv"), STUDY_HEADER, rows)
    write_json(os.path.join(out, "spsa_diagnostics.json"),
               {"n": settings.n, "k": settings.k, "replications": settings.replications,
                "epsilon": settings.epsilon, "moments": moments, "ranks": ranks})


def _footprint_plan(config: ExperimentConfig, model: ModelSpec):
    train_data, _ = build_task(config, model)
    return build_plan(config, model, train_data).plan


def cmd_memory_report(config: ExperimentConfig, out: str) -> None:
    model = prepare_model(config)
    batch = memory_batch(config, model)
    compare = config.memory_settings.compare
    plan_a = _footprint_plan(config, model)
    if compare is None:
        report = measure_training_footprint(model, plan_a, batch, config.seed)
        write_json(os.path.join(out, "memory.json"), report.to_dict())
        write_text(os.path.join(out, "memory.txt"), report.table())
        return
    other = config.with_overrides(compare)
    if other.model != config.model or other.pretrain != config.pretrain:
        raise ConfigError("memory.compare must not change the base model")
    plan_b = _footprint_plan(other, model)
    cmp = compare_configurations(model, plan_a, plan_b, batch, config.seed)
    write_json(os.path.join(out, "memory.json"), cmp.to_dict())
    lines = ["A", cmp.a.table(), "B", cmp.b.table(), "mem_aux delta (A - B) per layer"]
    width = max(len(k) for k in cmp.deltas)
    lines += [f"{k.ljust(width)}  {v:>8d}" for k, v in sorted(cmp.deltas.items())]
    lines += [f"{'TOTAL'.ljust(width)}  {cmp.total_delta:>8d}", cmp.summary(), ""]
    write_text(os.path.join(out, "memory.txt"), "\n".join(lines))


def cmd_merge(model_path: str, adapter_path: str, out: str) -> None:
    with open(model_path, encoding="utf-8") as fh:
        model = ModelSpec.from_json(fh.read())
    with open(adapter_path, encoding="utf-8") as fh:
        adapters, base = checkpoint_from_json(fh.read(), model)
    write_text(os.path.join(out, "model.json"), apply_checkpoint(model, adapters, base).to_json() + "\n")


COMMANDS = {"importance": cmd_importance, "train": cmd_train, "spsa-study": cmd_spsa_study,
            "memory-report": cmd_memory_report}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spruft", description="Row-sparse fine-tuning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides config 'out')")
    p = sub.add_parser("merge", help="fold adapter.json into model.json")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", default="out")
    return parser


def load_config(path: str, seed: int | None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return ExperimentConfig.from_json(text, seed)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "merge":
            os.makedirs(args.out, exist_ok=True)
            cmd_merge(args.model, args.adapter, args.out)
            return EXIT_OK
        config = load_config(args.config, args.seed)
        out = args.out or config.out or "out"
        os.makedirs(out, exist_ok=True)
        COMMANDS[args.command](config, out)
    except (ConfigError, ContractError, ShapeError, KeyError, json.JSONDecodeError) as exc:
        print(f"spruft: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"spruft: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"spruft: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
