"""Command line entry point: ``fedlab {gen-data,run,compare,probe}``.

Exit codes: 0 success, 2 usage or config validation error, 3 numeric failure
during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from fedlab import analysis, engine
from fedlab.config import ConfigError, load_config
from fedlab.data import save_dataset
from fedlab.errors import ConfigurationError, NumericError
from fedlab.metrics import MetricsLog
from fedlab.nn import atomic_write_bytes, save_checkpoint

log = logging.getLogger("fedlab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _write_text(path, text):
    atomic_write_bytes(path, text.encode())


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FEDLAB_THREADS")
    return int(env) if env else 1


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.with_threads(_threads(args))


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.output
    if not out:
        raise ConfigError("output", "no output directory (use --out or the config's 'output')")
    return Path(out)


def comm_cost_report(cfg, summary, n_clients):
    algo = cfg.algorithm
    w = summary["model_params"]
    if algo.variant in ("fedavg", "fedprox"):
        return {"w": w, "N": n_clients, "T": algo.rounds, "total_fedavg": analysis.fedavg_cost(w, n_clients, algo.rounds),
                "total_fedavg_bytes": analysis.fedavg_cost(w, n_clients, algo.rounds) * analysis.BYTES_PER_PARAM}
    c = summary["classifier_params"] / w
    report = analysis.CommCostReport(
        w, c, n_clients, summary["K"], algo.encoder_rounds, algo.classifier_rounds, algo.rounds,
        inference_round=algo.variant == "fedconcat-id" or algo.clustering == "inferred-dist",
    )
    return report.to_json()


def run_experiment(cfg, out: Path, figures: bool = False) -> MetricsLog:
    train, test = cfg.build_datasets()
    part = cfg.build_partition(train)
    clients = engine.make_clients(part.client_datasets(train))
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s on %d clients", cfg.algorithm.variant, len(clients))
    result, metrics = engine.run(clients, cfg.algorithm, test)

    if cfg.algorithm.variant in ("fedavg", "fedprox"):
        save_checkpoint(result, out / "model.fck")
    else:
        ckpt = out / "checkpoints"
        for k, enc in enumerate(result.encoder.members):
            save_checkpoint(enc, ckpt / f"encoder_{k}.fck")
        save_checkpoint(result.classifier, ckpt / "classifier.fck")
        manifest = {
            "format": "FCK1",
            "encoders": [f"encoder_{k}.fck" for k in range(len(result.encoder.members))],
            "classifier": "classifier.fck",
            "feature_dims": [e.output_dim for e in result.encoder.members],
            "cluster_members": [m.tolist() for m in result.assignment.members()],
        }
        _write_text(ckpt / "manifest.json", json.dumps(manifest, indent=2))

    metrics.environment = {
        "seeds": {"dataset": cfg.dataset.get("seed"), "partition": cfg.partition["seed"],
                  "algorithm": cfg.algorithm.seed},
        "config_hash": cfg.config_hash(),
        "test_set_hash": cfg.test_set_hash(),
        "variant": cfg.algorithm.variant,
    }
    metrics.extra["comm_cost"] = comm_cost_report(cfg, metrics.summary, len(clients))
    metrics.extra["partition"] = part.describe()
    _write_text(out / "metrics.json", metrics.dumps())
    _write_text(out / "curves.csv", metrics.curves_csv())
    _write_text(out / "config.resolved.json", json.dumps(cfg.resolved(), indent=2, sort_keys=True))
    if figures:
        from fedlab.plotting import plot_curves

        plot_curves(metrics.records, out / "curves.png", title=cfg.algorithm.variant)
    return metrics


# -- compare -------------------------------------------------------------------


def accuracy_at_budget(records, budget):
    """Accuracy of the last record whose cumulative cost is within ``budget``."""
    best = None
    for r in records:
        if r["cumulative_cost"] <= budget:
            best = r["accuracy"]
    return best


def compare_runs(logs: dict, n_points: int = 5):
    """Align runs on communication cost.

    ``logs`` maps run labels to loaded metrics JSON. Returns ``(rows, budget,
    warnings)``; each row is ``{"budget", <label>: accuracy, ...}`` and the last
    row is the matched final budget (the smallest total among the runs).
    """
    warnings = []
    hashes = {lbl: m.get("environment", {}).get("test_set_hash") for lbl, m in logs.items()}
    if len(set(hashes.values())) > 1:
        warnings.append("runs were evaluated on different test sets; accuracies may not be comparable")
    finals = [m["records"][-1]["cumulative_cost"] if m["records"] else 0 for m in logs.values()]
    budget = min(finals)
    points = sorted({int(round(budget * (i + 1) / n_points)) for i in range(n_points)})
    rows = []
    for b in points:
        row = {"budget": b}
        for lbl, m in logs.items():
            row[lbl] = accuracy_at_budget(m["records"], b)
        rows.append(row)
    return rows, budget, warnings


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def comparison_table(logs, rows, budget):
    labels = list(logs)
    ref = labels[0]
    lines = ["budget," + ",".join(labels) + "," + ",".join(f"gap_{l}_vs_{ref}" for l in labels[1:])]
    text = [f"{'budget':>14} " + " ".join(f"{l:>14}" for l in labels)]
    for row in rows:
        gaps = []
        for l in labels[1:]:
            a, b = row[l], row[ref]
            gaps.append("" if a is None or b is None else repr(a - b))
        lines.append(",".join([str(row["budget"])] + ["" if row[l] is None else repr(row[l]) for l in labels] + gaps))
        text.append(f"{row['budget']:>14} " + " ".join(f"{_fmt(row[l]):>14}" for l in labels))
    text.append("")
    text.append(f"matched budget: {budget}")
    for l in labels:
        final = logs[l]["records"][-1]["accuracy"] if logs[l]["records"] else None
        text.append(f"  {l}: accuracy at budget {_fmt(rows[-1][l])}, final accuracy {_fmt(final)}")
    for l in labels[1:]:
        a, b = rows[-1][l], rows[-1][ref]
        if a is not None and b is not None:
            text.append(f"  gap {l} - {ref} at matched budget: {a - b:+.4f}")
    return "\n".join(lines) + "\n", "\n".join(text)


# -- probe -------------------------------------------------------------------


def parse_groups(text):
    """``"0,1:2,3"`` -> ``[[0, 1], [2, 3]]``."""
    try:
        groups = [[int(v) for v in part.split(",")] for part in text.split(":")]
    except ValueError:
        raise ConfigError("--groups", f"expected comma-separated class ids split by ':', got {text!r}") from None
    if len(groups) != 2:
        raise ConfigError("--groups", "expected exactly two class groups")
    return groups


def run_probes(cfg, out: Path, figures=False, groups=((0, 1), (2, 3)), epochs=50, rounds=2,
               local_epochs=10) -> dict:
    train, test = cfg.build_datasets()
    pair = analysis.class_group_clients(train, groups)
    algo = cfg.algorithm
    probes = analysis.encoder_exchange_probes(pair[0], pair[1], test, algo.layer_dims, epochs, algo.optimizer(),
                                              algo.batch_size, algo.seed)
    curve = analysis.track_averaging_degradation(pair, test, rounds, local_epochs, algo.layer_dims, algo.optimizer(),
                                                 algo.batch_size, algo.seed)
    report = {"groups": [list(g) for g in groups], "probes": probes, "degradation": curve.records,
              "initial_accuracy": curve.initial_accuracy, "environment": {"config_hash": cfg.config_hash()}}
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "probes.json", json.dumps(report, indent=2, sort_keys=True))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "epoch", "phase", "client", "accuracy"])
    for r in curve.records:
        w.writerow([r["round"], r["epoch"], r["phase"], r["client"], repr(r["accuracy"])])
    _write_text(out / "degradation.csv", buf.getvalue())
    if figures:
        from fedlab.plotting import plot_degradation

        plot_degradation(curve, out / "degradation.png")
    return report


# -- argument parsing ----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fedlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--threads", type=int, help="worker threads; never changes results (env FEDLAB_THREADS)")

    g = sub.add_parser("gen-data", help="write the configured blob dataset as FDS1 files")
    common(g)

    r = sub.add_parser("run", help="run one experiment")
    common(r)
    r.add_argument("--figures", action="store_true", help="also render curves.png")

    c = sub.add_parser("compare", help="compare metrics.json files at matched communication")
    c.add_argument("metrics", nargs="*")
    c.add_argument("--out", help="directory for comparison.csv")
    c.add_argument("--figures", action="store_true")

    pr = sub.add_parser("probe", help="encoder-exchange probes and the averaging-degradation curve")
    common(pr)
    pr.add_argument("--figures", action="store_true")
    pr.add_argument("--epochs", type=int, default=50, help="local epochs before probing")
    pr.add_argument("--groups", default="0,1:2,3", help="class ids of the two clients, e.g. 0,1:2,3")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            return _cmd_compare(args)
        cfg = _load(args)
        out = _out_dir(args, cfg)
        if args.command == "gen-data":
            if cfg.dataset["kind"] != "blobs":
                raise ConfigError("dataset.kind", "gen-data needs a blobs dataset")
            train, test = cfg.build_datasets()
            save_dataset(train, out / "train.fds")
            save_dataset(test, out / "test.fds")
            print(f"wrote {out / 'train.fds'} ({train.n} rows) and {out / 'test.fds'} ({test.n} rows)")
        elif args.command == "run":
            metrics = run_experiment(cfg, out, args.figures)
            print(f"final accuracy {_fmt(metrics.summary.get('final_accuracy'))}, "
                  f"total cost {metrics.summary['total_cost']} parameters -> {out}")
        elif args.command == "probe":
            report = run_probes(cfg, out, args.figures, parse_groups(args.groups), epochs=args.epochs)
            pb = report["probes"]
            for i in range(2):
                print(f"client {report['groups'][i]}: own loss {pb['own'][i]['loss']:.4f}, "
                      f"exchanged loss {pb['exchanged'][i]['loss']:.4f}")
            print(f"combined: concat loss {pb['combined_concat']['loss']:.4f}, single losses "
                  + ", ".join(f"{r['loss']:.4f}" for r in pb["combined_single"]))
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE


def _cmd_compare(args) -> int:
    if len(args.metrics) < 2:
        print("usage: fedlab compare METRICS METRICS [...]  (at least two metrics.json files)", file=sys.stderr)
        return EXIT_USAGE
    logs = {}
    for path in args.metrics:
        label = Path(path).parent.name or Path(path).stem
        while label in logs:
            label += "'"
        logs[label] = json.loads(Path(path).read_text())
    rows, budget, warnings = compare_runs(logs)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    csv_text, text = comparison_table(logs, rows, budget)
    print(text)
    if args.out:
        out = Path(args.out)
        _write_text(out / "comparison.csv", csv_text)
        if args.figures:
            from fedlab.plotting import plot_comparison

            plot_comparison({l: m["records"] for l, m in logs.items()}, out / "comparison.png", budget)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
