"""Command-line pipeline: split, train, evaluate, rank, embed, classify,
robustness.

Every setting resolves as defaults <- config file <- flags; the resolved
values (with per-key provenance) are written beside the outputs, all of which
land inside one run directory.  All randomness hangs off --seed, and inputs
are validated before any heavy compute starts.  Failures print a single
machine-readable JSON line on stderr and exit non-zero.
"""

from __future__ import annotations

import datetime
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import centrality, evaluation, graph as graph_mod, model as model_mod, training

LEARNED, ALL_ONES = model_mod.LEARNED, model_mod.ALL_ONES

MODEL_DEFAULTS = {
    "features": "onehot",
    "heads1": 8,
    "heads2": 1,
    "hidden": 32,
    "embed_dim": 128,
    "attention": LEARNED,
    "sample_size": 20,
    "dropout": 0.0,
}
TRAIN_DEFAULTS = {
    "batch_size": 32,
    "lr": 5e-4,
    "patience": 100,
    "max_epochs": 2000,
}


def _coerce(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def resolve_config(defaults: dict, config_file, flags: dict) -> tuple[dict, dict]:
    """Merge defaults <- key=value file <- flags, tracking provenance."""
    file_vals: dict[str, str] = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{config_file}:{lineno}: expected key=value")
                key, val = line.split("=", 1)
                file_vals[key.strip()] = val.strip()
    unknown = set(file_vals) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    resolved, provenance = {}, {}
    for key, default in defaults.items():
        if flags.get(key) is not None:
            resolved[key] = flags[key]
            provenance[key] = "flag"
        elif key in file_vals:
            ref = default if default is not None else ""
            resolved[key] = _coerce(file_vals[key], ref)
            provenance[key] = "file"
        else:
            resolved[key] = default
            provenance[key] = "default"
    return resolved, provenance


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        raise ValueError(f"missing required settings: {', '.join(missing)}")


def _require_files(resolved: dict, *keys: str) -> None:
    for key in keys:
        value = resolved.get(key)
        if key == "features" and value == "onehot":
            continue
        if value is not None and not Path(value).is_file():
            raise FileNotFoundError(f"{key} file not found: {value}")


def _run_dir(resolved: dict) -> Path:
    out = resolved.get("out")
    if out is None:
        out = Path("runs") / datetime.datetime.now().strftime("run-%Y%m%d-%H%M%S")
        resolved["out"] = str(out)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved(out: Path, command: str, resolved: dict, provenance: dict) -> None:
    payload = {
        "command": command,
        "settings": {k: {"value": resolved[k], "source": provenance[k]}
                     for k in sorted(resolved)},
    }
    _write_json(out / "resolved_config.json", payload)


def _fail_fast(fn):
    """Report any error as one machine-readable line and exit non-zero."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - the CLI error contract
            click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
                       err=True)
            sys.exit(1)

    return wrapper


def _common_options(fn):
    fn = click.option("--config", type=str, default=None,
                      help="Flat key=value config file; flags win over it.")(fn)
    fn = click.option("--out", type=str, default=None,
                      help="Run directory for every output (default: timestamped).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master random seed.")(fn)
    fn = click.option("--threads", type=int, default=None,
                      help="BLAS thread cap (default 1, for reproducibility).")(fn)
    return fn


def _model_options(fn):
    fn = click.option("--features", type=str, default=None,
                      help='"onehot" or a feature file path.')(fn)
    fn = click.option("--heads1", type=int, default=None)(fn)
    fn = click.option("--heads2", type=int, default=None)(fn)
    fn = click.option("--hidden", type=int, default=None)(fn)
    fn = click.option("--embed-dim", type=int, default=None)(fn)
    fn = click.option("--attention", type=click.Choice([LEARNED, ALL_ONES]), default=None)(fn)
    fn = click.option("--sample-size", type=int, default=None)(fn)
    fn = click.option("--dropout", type=float, default=None)(fn)
    return fn


def _train_options(fn):
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--lr", type=float, default=None)(fn)
    fn = click.option("--patience", type=int, default=None)(fn)
    fn = click.option("--max-epochs", type=int, default=None)(fn)
    return fn


@click.group()
def cli() -> None:
    """Train and evaluate a sampled-attention link predictor."""


@cli.command("split")
@click.option("--edges", type=str, default=None, help="Edge list file.")
@click.option("--test-frac", type=float, default=None)
@click.option("--val-frac", type=float, default=None)
@_common_options
@_fail_fast
def cmd_split(**flags):
    """Partition edges into train/val/test with matched negatives."""
    defaults = {"edges": None, "test_frac": 0.10, "val_frac": 0.05,
                "seed": 0, "threads": 1, "out": None}
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "edges")
    _require_files(resolved, "edges")
    out = _run_dir(resolved)
    g = graph_mod.load_graph(resolved["edges"])
    split = graph_mod.split_edges(g, resolved["test_frac"], resolved["val_frac"],
                                  resolved["seed"])
    graph_mod.save_split(split, g, out / "split.json")
    graph_mod.save_id_map(g, out / "id_map.json")
    _write_resolved(out, "split", resolved, prov)
    click.echo(json.dumps({
        "split": str(out / "split.json"),
        "nodes": g.num_nodes,
        "edges": g.num_edges,
        "train_pos": int(split.train_pos.shape[0]),
        "val_pos": int(split.val_pos.shape[0]),
        "test_pos": int(split.test_pos.shape[0]),
    }))


def _load_graph_for(resolved: dict) -> graph_mod.Graph:
    return graph_mod.load_graph(resolved["edges"], resolved.get("features", "onehot"))


def _model_config(resolved: dict, in_dim: int) -> model_mod.ModelConfig:
    return model_mod.ModelConfig(
        in_dim=in_dim,
        hidden=resolved["hidden"],
        heads1=resolved["heads1"],
        heads2=resolved["heads2"],
        embed_dim=resolved["embed_dim"],
        sample_size=resolved["sample_size"],
        attention=resolved["attention"],
        dropout=resolved["dropout"],
    )


def _train_config(resolved: dict) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=resolved["lr"],
        batch_size=resolved["batch_size"],
        max_epochs=resolved["max_epochs"],
        patience=resolved["patience"],
        seed=resolved["seed"],
        sample_size=resolved["sample_size"],
    )


def _echo_progress(epoch: int, loss: float, val_acc: float, val_auc: float) -> None:
    if epoch % 10 == 0:
        click.echo(f"epoch {epoch}: loss={loss:.4f} val_acc={val_acc:.4f} "
                   f"val_auc={val_auc:.4f}", err=True)


@cli.command("train")
@click.option("--edges", type=str, default=None)
@click.option("--split", "split_file", type=str, default=None)
@_model_options
@_train_options
@_common_options
@_fail_fast
def cmd_train(**flags):
    """Train on a saved split; writes checkpoint + history into the run dir."""
    defaults = {"edges": None, "split": None, "seed": 0, "threads": 1, "out": None,
                **MODEL_DEFAULTS, **TRAIN_DEFAULTS}
    flags["split"] = flags.pop("split_file")
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "edges", "split")
    _require_files(resolved, "edges", "split", "features")
    out = _run_dir(resolved)
    with threadpool_limits(limits=resolved["threads"]):
        g = _load_graph_for(resolved)
        split = graph_mod.load_split(resolved["split"], g)
        table = graph_mod.build_neighbor_table(g, split.train_pos,
                                               resolved["sample_size"], resolved["seed"])
        model_config = _model_config(resolved, g.features.dim)
        train_config = _train_config(resolved)
        params, history = training.train(
            g, split, table, model_config, train_config,
            checkpoint_path=out / "checkpoint.dlnk", progress=_echo_progress,
        )
    history.save(out / "history.json")
    graph_mod.save_id_map(g, out / "id_map.json")
    _write_resolved(out, "train", resolved, prov)
    best = history.epochs[history.best_epoch] if history.epochs else None
    click.echo(json.dumps({
        "checkpoint": str(out / "checkpoint.dlnk"),
        "epochs_run": len(history.epochs),
        "best_epoch": history.best_epoch,
        "best_val_acc": best["val_acc"] if best else None,
    }))


@cli.command("evaluate")
@click.option("--checkpoint", type=str, default=None)
@click.option("--edges", type=str, default=None)
@click.option("--split", "split_file", type=str, default=None)
@click.option("--features", type=str, default=None)
@_common_options
@_fail_fast
def cmd_evaluate(**flags):
    """Score the held-out test edges of a split with a trained checkpoint."""
    defaults = {"checkpoint": None, "edges": None, "split": None,
                "features": "onehot", "seed": None, "threads": 1, "out": None}
    flags["split"] = flags.pop("split_file")
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "checkpoint", "edges", "split")
    _require_files(resolved, "checkpoint", "edges", "split", "features")
    out = _run_dir(resolved)
    with threadpool_limits(limits=resolved["threads"]):
        params = model_mod.load_checkpoint(resolved["checkpoint"])
        g = _load_graph_for(resolved)
        if g.features.dim != params.config.in_dim:
            raise ValueError(
                f"feature dim {g.features.dim} does not match checkpoint "
                f"in_dim {params.config.in_dim}"
            )
        split = graph_mod.load_split(resolved["split"], g)
        seed = resolved["seed"] if resolved["seed"] is not None else split.seed
        resolved["seed"] = seed
        table = graph_mod.build_neighbor_table(g, split.train_pos,
                                               params.config.sample_size, seed)
        scored = training.score_test_edges(params, split, table, g.features)
        metrics = {
            "accuracy": evaluation.accuracy(scored),
            "auc": evaluation.auc(scored),
            "test_pairs": int(scored.labels.size),
        }
    _write_json(out / "metrics.json", metrics)
    _write_resolved(out, "evaluate", resolved, prov)
    click.echo(json.dumps(metrics))


@cli.command("rank")
@click.option("--checkpoint", type=str, default=None)
@click.option("--edges", type=str, default=None)
@click.option("--features", type=str, default=None)
@click.option("--truth", type=str, default=None, help="Ground-truth node file.")
@click.option("--methods", type=str, default=None,
              help="Comma list from: attention,pagerank,closeness,betweenness.")
@click.option("--top-k", type=int, default=None,
              help="Hit-accuracy cutoff (default: size of the truth set).")
@_common_options
@_fail_fast
def cmd_rank(**flags):
    """Rank nodes by each method and score against a ground-truth file."""
    defaults = {"checkpoint": None, "edges": None, "features": "onehot",
                "truth": None, "methods": "attention,pagerank,closeness,betweenness",
                "top_k": None, "seed": 0, "threads": 1, "out": None}
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "edges", "truth")
    methods = [m.strip() for m in resolved["methods"].split(",") if m.strip()]
    known = {"attention", "pagerank", "closeness", "betweenness"}
    bad = set(methods) - known
    if bad:
        raise ValueError(f"unknown ranking methods: {sorted(bad)}")
    if "attention" in methods:
        _require(resolved, "checkpoint")
        _require_files(resolved, "checkpoint")
        params = model_mod.load_checkpoint(resolved["checkpoint"])
        if params.config.attention == ALL_ONES:
            raise ValueError("attention ranking needs a learned-attention checkpoint; "
                             "this one was trained with --attention all_ones")
    _require_files(resolved, "edges", "truth", "features")
    out = _run_dir(resolved)

    with threadpool_limits(limits=resolved["threads"]):
        g = _load_graph_for(resolved)
        binary_truth, real_ids, real_vals = _load_truth(resolved["truth"], g)
        scores: dict[str, np.ndarray] = {}
        for method in methods:
            if method == "attention":
                scores[method] = evaluation.attention_rank(params, g)
            elif method == "pagerank":
                scores[method] = centrality.pagerank(g)
            elif method == "closeness":
                scores[method] = centrality.closeness(g)
            else:
                scores[method] = centrality.betweenness(g)
        report: dict[str, dict] = {}
        for method, vec in scores.items():
            if binary_truth is not None:
                k = resolved["top_k"] or binary_truth.size
                report[method] = {"hit_accuracy": evaluation.hit_accuracy(vec, binary_truth, k)}
            else:
                report[method] = {"spearman": evaluation.spearman(vec[real_ids], real_vals)}

    payload = {"methods": report,
               "truth_type": "binary" if binary_truth is not None else "real"}
    if binary_truth is not None:
        payload["top_k"] = int(resolved["top_k"] or binary_truth.size)
    _write_json(out / "rank.json", payload)
    with open(out / "rank_scores.tsv", "w", encoding="utf-8") as fh:
        fh.write("node_id\t" + "\t".join(methods) + "\n")
        for i in range(g.num_nodes):
            row = "\t".join(repr(float(scores[m][i])) for m in methods)
            fh.write(f"{g.node_ids[i]}\t{row}\n")
    _write_resolved(out, "rank", resolved, prov)
    click.echo(json.dumps(payload))


def _load_truth(path: str, g: graph_mod.Graph):
    """Detect binary (one id per line) vs real ("id value") truth files."""
    with open(path, encoding="utf-8") as fh:
        widths = {len(line.split()) for line in fh if line.split()}
    if widths == {1}:
        return evaluation.load_binary_truth(path, g), None, None
    if widths == {2}:
        ids, vals = evaluation.load_real_truth(path, g)
        return None, ids, vals
    raise ValueError(f"{path}: mixed or malformed ground-truth lines")


@cli.command("embed")
@click.option("--checkpoint", type=str, default=None)
@click.option("--edges", type=str, default=None)
@click.option("--features", type=str, default=None)
@click.option("--split", "split_file", type=str, default=None,
              help="Reuse the training split's neighbor table (recommended).")
@_common_options
@_fail_fast
def cmd_embed(**flags):
    """Export one embedding line per node from a trained checkpoint."""
    defaults = {"checkpoint": None, "edges": None, "features": "onehot",
                "split": None, "seed": None, "threads": 1, "out": None}
    flags["split"] = flags.pop("split_file")
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "checkpoint", "edges")
    _require_files(resolved, "checkpoint", "edges", "split", "features")
    out = _run_dir(resolved)
    with threadpool_limits(limits=resolved["threads"]):
        params = model_mod.load_checkpoint(resolved["checkpoint"])
        g = _load_graph_for(resolved)
        if resolved["split"] is not None:
            split = graph_mod.load_split(resolved["split"], g)
            train_edges = split.train_pos
            seed = resolved["seed"] if resolved["seed"] is not None else split.seed
        else:
            train_edges = g.edges()
            seed = resolved["seed"] if resolved["seed"] is not None else 0
        resolved["seed"] = seed
        table = graph_mod.build_neighbor_table(g, train_edges,
                                               params.config.sample_size, seed)
        evaluation.export_embeddings(params, g, table, out / "embeddings.txt")
    _write_resolved(out, "embed", resolved, prov)
    click.echo(json.dumps({"embeddings": str(out / "embeddings.txt"),
                           "nodes": g.num_nodes,
                           "dim": params.config.embed_dim}))


@cli.command("classify")
@click.option("--embeddings", type=str, default=None)
@click.option("--labels", type=str, default=None)
@click.option("--fractions", type=str, default=None,
              help="Comma list of training fractions, e.g. 0.01,0.05,0.1.")
@click.option("--repeats", type=int, default=None)
@_common_options
@_fail_fast
def cmd_classify(**flags):
    """Micro-F1 of a logistic classifier on exported embeddings."""
    defaults = {"embeddings": None, "labels": None,
                "fractions": "0.01,0.05,0.1,0.2,0.5", "repeats": 10,
                "seed": 0, "threads": 1, "out": None}
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "embeddings", "labels")
    _require_files(resolved, "embeddings", "labels")
    fractions = [float(tok) for tok in resolved["fractions"].split(",") if tok.strip()]
    if not fractions:
        raise ValueError("no training fractions given")
    out = _run_dir(resolved)
    with threadpool_limits(limits=resolved["threads"]):
        ids, emb = evaluation.load_embeddings(resolved["embeddings"])
        label_map = evaluation.load_labels(resolved["labels"])
        keep = [i for i, node in enumerate(ids) if node in label_map]
        if len(keep) < len(ids):
            click.echo(f"note: {len(ids) - len(keep)} embedded nodes have no label "
                       "and were skipped", err=True)
        if not keep:
            raise ValueError("no embedded node has a label")
        labels = [label_map[ids[i]] for i in keep]
        micro = evaluation.classify_eval(emb[keep], labels, fractions,
                                         repeats=resolved["repeats"],
                                         seed=resolved["seed"])
    payload = {"micro_f1": {str(f): v for f, v in micro.items()},
               "repeats": resolved["repeats"], "nodes": len(keep)}
    _write_json(out / "microf1.json", payload)
    _write_resolved(out, "classify", resolved, prov)
    click.echo(json.dumps(payload))


@cli.command("robustness")
@click.option("--edges", type=str, default=None)
@click.option("--break-frac", type=float, default=None,
              help="Fraction of existing edges to remove before the pipeline.")
@click.option("--test-frac", type=float, default=None)
@click.option("--val-frac", type=float, default=None)
@_model_options
@_train_options
@_common_options
@_fail_fast
def cmd_robustness(**flags):
    """Break a fraction of edges, then run split + train + evaluate."""
    defaults = {"edges": None, "break_frac": 0.20, "test_frac": 0.10,
                "val_frac": 0.05, "seed": 0, "threads": 1, "out": None,
                **MODEL_DEFAULTS, **TRAIN_DEFAULTS}
    resolved, prov = resolve_config(defaults, flags.pop("config"), flags)
    _require(resolved, "edges")
    _require_files(resolved, "edges", "features")
    out = _run_dir(resolved)
    with threadpool_limits(limits=resolved["threads"]):
        g_full = _load_graph_for(resolved)
        g = graph_mod.remove_edges(g_full, resolved["break_frac"], resolved["seed"])
        split = graph_mod.split_edges(g, resolved["test_frac"], resolved["val_frac"],
                                      resolved["seed"])
        graph_mod.save_split(split, g, out / "split.json")
        table = graph_mod.build_neighbor_table(g, split.train_pos,
                                               resolved["sample_size"], resolved["seed"])
        model_config = _model_config(resolved, g.features.dim)
        train_config = _train_config(resolved)
        params, history = training.train(
            g, split, table, model_config, train_config,
            checkpoint_path=out / "checkpoint.dlnk", progress=_echo_progress,
        )
        scored = training.score_test_edges(params, split, table, g.features)
        metrics = {
            "accuracy": evaluation.accuracy(scored),
            "auc": evaluation.auc(scored),
            "break_fraction": resolved["break_frac"],
            "edges_before": g_full.num_edges,
            "edges_after": g.num_edges,
        }
    history.save(out / "history.json")
    graph_mod.save_id_map(g, out / "id_map.json")
    _write_json(out / "metrics.json", metrics)
    _write_resolved(out, "robustness", resolved, prov)
    click.echo(json.dumps(metrics))


def main() -> None:
    cli(prog_name="deeplinker")


if __name__ == "__main__":
    main()
