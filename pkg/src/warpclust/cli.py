"""Command-line surface: train, eval, synth, robustness, elbow, plots.

Configuration comes from an optional flat ``key=value`` file overridden by
command-line flags; every default matches the method's reference settings.
All numeric artifacts are written with ``%.17g`` so they reload bitwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import data, metrics, trainer
from .errors import ConfigError, WarpclustError

_SYNTH_KEYS = ("synth_per_cluster", "synth_grid", "synth_sharpness",
               "synth_sigma")
_PROTOCOL_LEVELS = {
    "missing": (0.05, 0.10, 0.20),
    "irregular": (0.1, 0.2, 0.3),
    "noise": (0.02, 0.05, 0.10),
}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            pass
    return low


def load_config_file(path: str) -> dict:
    """Flat ``key=value`` settings; '#' starts a comment line."""
    settings = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            settings[key.strip()] = _parse_value(value)
    return settings


def _gather_settings(args) -> dict:
    settings = {}
    if args.config:
        _require_file(args.config)
        settings.update(load_config_file(args.config))
    for key in ("clusters", "epochs", "alpha", "basis_k", "seed", "dims"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _train_config(settings: dict) -> trainer.TrainConfig:
    known = {f.name for f in fields(trainer.TrainConfig)}
    kwargs = {}
    for key, value in settings.items():
        if key not in known:
            continue
        if key in ("encoder_channels", "flow_hidden") and isinstance(
                value, str):
            value = tuple(int(v) for v in value.split(","))
        kwargs[key] = value
    config = trainer.TrainConfig(**kwargs)
    config.validate()
    return config


def _synth_spec(settings: dict) -> data.SyntheticSpec:
    base = data.SyntheticSpec()
    return data.SyntheticSpec(
        clusters=int(settings.get("clusters", base.clusters)),
        per_cluster=int(settings.get("synth_per_cluster", base.per_cluster)),
        grid_size=int(settings.get("synth_grid", base.grid_size)),
        dims=int(settings.get("dims", base.dims)),
        sharpness=float(settings.get("synth_sharpness", base.sharpness)),
        noise_sigma=float(settings.get("synth_sigma", base.noise_sigma)),
        seed=int(settings.get("seed", base.seed)),
    )


def _require_file(path: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def _resolve_dataset(args, settings: dict) -> tuple[data.Dataset, str]:
    """Pick one data source: --data beats a config data= key, which beats
    the synthetic recipe; data= plus synth_* in one file is ambiguous."""
    paths = getattr(args, "data", None)
    if not paths:
        paths = settings.get("data")
        if paths and any(key in settings for key in _SYNTH_KEYS):
            raise ConfigError("config mixes data= with synth_* settings")
    if isinstance(paths, str):
        paths = paths.split(",")
    if paths:
        for path in paths:
            _require_file(path)
        return data.load_table(paths), os.path.basename(paths[0])
    spec = _synth_spec(settings)
    return data.generate_synthetic(spec), f"synthetic-c{spec.clusters}"


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _write_matrix(path: str, array: np.ndarray) -> None:
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    with open(path, "w", encoding="ascii") as fh:
        for row in array:
            fh.write("\t".join("%.17g" % v for v in row) + "\n")


def read_matrix(path: str) -> np.ndarray:
    """Reload a ``_write_matrix`` table to the identical float array."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(c) for c in line.split("\t")])
    return np.asarray(rows, dtype=np.float64)


def _write_labels(path: str, labels: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for value in labels:
            fh.write(f"{int(value)}\n")


def _read_labels(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        return np.array([int(line) for line in fh if line.strip()],
                        dtype=np.int64)


def _score(results_path: str, name: str, dataset_name: str, seed: int,
           true_labels: np.ndarray, pred_labels: np.ndarray,
           raw: np.ndarray, aligned: np.ndarray) -> dict:
    clusters = int(np.unique(true_labels).size)
    scores = {
        "acc": metrics.clustering_accuracy(pred_labels, true_labels),
        "nmi": metrics.nmi(pred_labels, true_labels),
    }
    if clusters >= 2:
        scores["atv_pre"] = metrics.atv(raw, true_labels, clusters)
        scores["atv_post"] = metrics.atv(aligned, true_labels, clusters)
    for key, value in scores.items():
        metrics.append_metric(results_path, f"{name}{key}", value,
                              dataset=dataset_name, seed=seed)
    return scores


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _train_into(out: str, dataset: data.Dataset, dataset_name: str,
                config: trainer.TrainConfig) -> dict:
    os.makedirs(out, exist_ok=True)
    report = trainer.train(dataset, config)
    trainer.save_checkpoint(os.path.join(out, "checkpoint.bin"),
                            report.params, config, config.epochs)
    raw_labels = dataset.labels if dataset.labels is not None else \
        np.zeros(dataset.n, dtype=np.int64)
    data.save_table(
        data.Dataset(values=dataset.values, grid=dataset.grid,
                     labels=raw_labels),
        [os.path.join(out, f"raw_dim{r}.tsv") for r in range(dataset.dims)])
    data.save_table(
        data.Dataset(values=report.aligned, grid=dataset.grid,
                     labels=report.labels),
        [os.path.join(out, f"aligned_dim{r}.tsv")
         for r in range(dataset.dims)])
    _write_matrix(os.path.join(out, "warps.tsv"), report.warps)
    _write_matrix(os.path.join(out, "assignments.tsv"), report.assignments)
    _write_labels(os.path.join(out, "labels.tsv"), report.labels)
    if dataset.labels is not None:
        _write_labels(os.path.join(out, "truth_labels.tsv"), dataset.labels)
    if dataset.warps is not None:
        _write_matrix(os.path.join(out, "truth_warps.tsv"), dataset.warps)
    with open(os.path.join(out, "timings.txt"), "w", encoding="ascii") as fh:
        for value in report.epoch_seconds:
            fh.write(f"{value:.6f}\n")

    summary = {
        "dataset": dataset_name,
        "config": {f.name: getattr(config, f.name)
                   for f in fields(trainer.TrainConfig)},
        "reg_losses": ["%.17g" % v for v in report.reg_losses],
        "clu_losses": ["%.17g" % v for v in report.clu_losses],
        "total_losses": ["%.17g" % v for v in report.total_losses],
    }
    results_path = os.path.join(out, "results.jsonl")
    metrics.append_metric(results_path, "final_total_loss",
                          report.total_losses[-1], dataset=dataset_name,
                          seed=config.seed)
    if dataset.labels is not None:
        summary["scores"] = _score(
            results_path, "", dataset_name, config.seed, dataset.labels,
            report.labels, dataset.values, report.aligned)
    with open(os.path.join(out, "report.json"), "w", encoding="ascii") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def cmd_train(args) -> int:
    settings = _gather_settings(args)
    dataset, name = _resolve_dataset(args, settings)
    config = _train_config(settings)
    summary = _train_into(args.out, dataset, name, config)
    final = summary["total_losses"][-1]
    print(f"trained {name}: final total loss {float(final):.6f}")
    if "scores" in summary:
        print("  " + "  ".join(f"{k}={v:.4f}"
                               for k, v in summary["scores"].items()))
    return 0


def cmd_eval(args) -> int:
    out = args.out
    for name in ("labels.tsv", "truth_labels.tsv", "raw_dim0.tsv",
                 "aligned_dim0.tsv"):
        _require_file(os.path.join(out, name))
    pred = _read_labels(os.path.join(out, "labels.tsv"))
    true = _read_labels(os.path.join(out, "truth_labels.tsv"))
    if pred.size != true.size:
        raise ConfigError(f"{pred.size} predictions vs {true.size} truths")
    raw_paths, aligned_paths = [], []
    r = 0
    while os.path.exists(os.path.join(out, f"raw_dim{r}.tsv")):
        raw_paths.append(os.path.join(out, f"raw_dim{r}.tsv"))
        aligned_paths.append(os.path.join(out, f"aligned_dim{r}.tsv"))
        r += 1
    raw = data.load_table(raw_paths).values
    aligned = data.load_table(aligned_paths).values
    scores = _score(os.path.join(out, "results.jsonl"), "eval_",
                    args.dataset_name, args.seed or 0, true, pred, raw,
                    aligned)
    with open(os.path.join(out, "eval.json"), "w", encoding="ascii") as fh:
        json.dump(scores, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print("  ".join(f"{k}={v:.6f}" for k, v in sorted(scores.items())))
    return 0


def cmd_synth(args) -> int:
    settings = _gather_settings(args)
    spec = _synth_spec(settings)
    dataset = data.generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    paths = [os.path.join(args.out, f"data_dim{r}.tsv")
             for r in range(dataset.dims)]
    data.save_table(dataset, paths)
    _write_matrix(os.path.join(args.out, "truth_warps.tsv"), dataset.warps)
    print(f"wrote {dataset.n} curves of length {dataset.length} "
          f"to {args.out}")
    return 0


def cmd_robustness(args) -> int:
    settings = _gather_settings(args)
    dataset, name = _resolve_dataset(args, settings)
    config = _train_config(settings)
    protocol = args.protocol
    levels = args.levels or list(_PROTOCOL_LEVELS[protocol])
    os.makedirs(args.out, exist_ok=True)
    results_path = os.path.join(args.out, "results.jsonl")

    rows = []
    for tag, level in [("clean", 0.0)] + [(protocol, lv) for lv in levels]:
        if tag == "clean":
            corrupted = dataset
        elif protocol == "missing":
            corrupted = data.corrupt_missing(dataset, level,
                                             seed=config.seed + 1)
        elif protocol == "irregular":
            corrupted = data.corrupt_grid(dataset, level,
                                          seed=config.seed + 1)
        else:
            corrupted = data.corrupt_noise(dataset, level,
                                           seed=config.seed + 1)
        report = trainer.train(corrupted, config)
        acc = metrics.clustering_accuracy(report.labels, dataset.labels)
        nmi_score = metrics.nmi(report.labels, dataset.labels)
        rows.append((tag, level, acc, nmi_score))
        metrics.append_metric(results_path, f"robust_{tag}_{level:g}_acc",
                              acc, dataset=name, seed=config.seed)
    with open(os.path.join(args.out, "robustness.tsv"), "w",
              encoding="ascii") as fh:
        fh.write("protocol\tlevel\tacc\tnmi\n")
        for tag, level, acc, nmi_score in rows:
            fh.write(f"{tag}\t{level:g}\t%.17g\t%.17g\n" % (acc, nmi_score))
    for tag, level, acc, nmi_score in rows:
        print(f"{tag:>10} level={level:g}  acc={acc:.4f}  nmi={nmi_score:.4f}")
    return 0


def _parse_c_range(text: str) -> list[int]:
    if "-" in text and "," not in text:
        lo, _, hi = text.partition("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def cmd_elbow(args) -> int:
    settings = _gather_settings(args)
    dataset, name = _resolve_dataset(args, settings)
    config = _train_config(settings)
    result = metrics.tv_elbow(dataset, _parse_c_range(args.c_range), config)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "elbow.tsv"), "w",
              encoding="ascii") as fh:
        fh.write("clusters\ttv\tstatus\n")
        for c in sorted(set(result.tv) | set(result.failed)):
            if c in result.tv:
                fh.write(f"{c}\t%.17g\tok\n" % result.tv[c])
            else:
                fh.write(f"{c}\tnan\tfailed\n")
    metrics.append_metric(os.path.join(args.out, "results.jsonl"),
                          "elbow_suggested", result.suggested,
                          dataset=name, seed=config.seed)
    print(f"suggested cluster count: {result.suggested}")
    return 0


def cmd_export_plots(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "warpclust"
    import matplotlib.pyplot as plt

    out = args.out
    for name in ("raw_dim0.tsv", "aligned_dim0.tsv", "warps.tsv",
                 "labels.tsv"):
        _require_file(os.path.join(out, name))
    raw = data.load_table(os.path.join(out, "raw_dim0.tsv"))
    aligned = data.load_table(os.path.join(out, "aligned_dim0.tsv"))
    warps = read_matrix(os.path.join(out, "warps.tsv"))
    pred = _read_labels(os.path.join(out, "labels.tsv"))
    truth_path = os.path.join(out, "truth_labels.tsv")
    truth = _read_labels(truth_path) if os.path.exists(truth_path) else pred
    grid = raw.grid

    def panel(path, curves, colors, title, bold=None):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for row, color in zip(curves, colors):
            ax.plot(grid, row, color=f"C{int(color)}", alpha=0.35, lw=0.8)
        if bold is not None:
            for c, row in enumerate(bold):
                ax.plot(grid, row, color=f"C{c}", lw=2.2)
        ax.set_title(title)
        ax.set_xlabel("t")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)

    panel(os.path.join(out, "raw.svg"), raw.values[:, 0, :], truth,
          "raw curves")
    panel(os.path.join(out, "warps.svg"), warps, pred, "learned warps")
    panel(os.path.join(out, "aligned.svg"), aligned.values[:, 0, :], pred,
          "aligned curves")
    clusters = int(pred.max()) + 1
    templates = np.stack([aligned.values[pred == c, 0, :].mean(axis=0)
                          if (pred == c).any() else np.zeros_like(grid)
                          for c in range(clusters)])
    panel(os.path.join(out, "templates.svg"),
          aligned.values[:, 0, :], pred, "cluster templates",
          bold=templates)
    _write_matrix(os.path.join(out, "templates.tsv"), templates)
    print(f"wrote 4 panels to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpclust",
        description="joint curve alignment and clustering")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_data=True):
        p.add_argument("--config", help="flat key=value settings file")
        if with_data:
            p.add_argument("--data", nargs="+",
                           help="label-first TSV files, one per dimension")
        p.add_argument("--dims", type=int)
        p.add_argument("--clusters", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--basis-k", dest="basis_k", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="fit the model and dump artifacts")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score saved artifacts")
    common(p_eval, with_data=False)
    p_eval.add_argument("--dataset-name", default="artifacts")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth, with_data=False)
    p_synth.set_defaults(func=cmd_synth)

    p_rob = sub.add_parser("robustness", help="corruption sweep")
    common(p_rob)
    p_rob.add_argument("--protocol", required=True,
                       choices=sorted(_PROTOCOL_LEVELS))
    p_rob.add_argument("--levels", nargs="*", type=float)
    p_rob.set_defaults(func=cmd_robustness)

    p_elbow = sub.add_parser("elbow", help="suggest a cluster count")
    common(p_elbow)
    p_elbow.add_argument("--c-range", default="1-5",
                         help="candidates, e.g. 1-5 or 2,3,4")
    p_elbow.set_defaults(func=cmd_elbow)

    p_plots = sub.add_parser("export-plots", help="render figure panels")
    common(p_plots, with_data=False)
    p_plots.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc}", file=sys.stderr)
        return 2
    except WarpclustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
