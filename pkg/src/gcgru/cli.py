"""Command-line entry point wiring the modules into reproducible experiments.

Commands compose into the standard pipeline:

    gcgru synth --out fixtures/demo
    gcgru build-graphs --shareholding ... --industry ... --topicality ... --out graphs/
    gcgru train --prices ... --mode multi --out runs/multi
    gcgru evaluate --checkpoint runs/multi/checkpoint.npz --prices ... --split test
    gcgru sweep-lag --prices ... --out runs/sweep
    gcgru gradcheck

Every command writes a manifest (config snapshot, input digests, seed,
outputs, wall-clock); identical inputs and seeds reproduce identical outputs
byte for byte, apart from the manifest's wall-clock fields.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .graphs import (
    Laplacian,
    build_industry_graph,
    build_shareholding_graph,
    build_topicality_graph,
    density_report,
    normalized_laplacian,
    read_industry_csv,
    read_shareholding_csv,
    read_topicality_csv,
    write_matrix_csv,
)
from .metrics import classify, compute_metrics, confusion, format_report, write_metrics_csv
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate
from .training import (
    CLI_MODES,
    TrainConfig,
    build_propagators,
    core_mode,
    gradcheck,
    gradcheck_all,
    predict_samples,
    read_config_file,
    select_laplacians,
    train,
)
from .universe import (
    StockUniverse,
    build_panel,
    load_prices,
    read_universe,
    write_normalization_csv,
)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    inputs: dict[str, Path],
    outputs: list[Path],
    seed: int | None,
    started: float,
) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "wall_clock_seconds": time.perf_counter() - started,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_graphs(args, universe: StockUniverse) -> list[Laplacian]:
    laplacians = []
    if args.shareholding:
        edges = read_shareholding_csv(args.shareholding)
        laplacians.append(normalized_laplacian(build_shareholding_graph(edges, universe)))
    if args.industry:
        membership, capital = read_industry_csv(args.industry)
        laplacians.append(normalized_laplacian(build_industry_graph(membership, capital, universe)))
    if args.topicality:
        topics = read_topicality_csv(args.topicality)
        laplacians.append(normalized_laplacian(build_topicality_graph(topics, universe)))
    return laplacians


def _train_config(args) -> TrainConfig:
    """Defaults < config file < explicit flags."""
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for key, flag in (
        ("lag", args.lag),
        ("kernel_size", args.k),
        ("mode", args.mode),
        ("learning_rate", args.lr),
        ("batch_size", args.batch),
        ("max_epochs", args.epochs),
        ("patience", args.patience),
        ("seed", args.seed),
    ):
        if flag is not None:
            values[key] = flag
    if getattr(args, "shuffle", False):
        values["shuffle"] = True
    return TrainConfig.from_mapping(values)


def _prepare_data(prices: str, config: TrainConfig):
    universe = read_universe(prices)
    series = load_prices(prices, universe)
    panel, samples, splits = build_panel(series, universe, config.lag)
    return universe, panel, samples, splits


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    config = SynthConfig(
        n_stocks=args.stocks,
        n_days=args.days,
        n_industries=args.industries,
        leaders_per_industry=args.leaders,
        lead_strength=args.beta,
        noise_sigma=args.noise,
        leader_sigma=args.leader_sigma,
        topic_count=args.topics,
        seed=args.seed,
        aligned_shareholding=not args.misaligned_shareholding,
        aligned_topics=not args.misaligned_topics,
    )
    result = generate(config, args.out)
    print(f"wrote fixture to {result.out_dir} (oracle follower accuracy {result.oracle_accuracy:.4f})")
    _write_manifest(
        result.out_dir,
        "synth",
        config.to_dict(),
        inputs={},
        outputs=[p for k, p in result.paths.items() if k != "manifest"],
        seed=config.seed,
        started=started,
    )
    return 0


def cmd_build_graphs(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.prices:
        universe = read_universe(args.prices)
    else:
        membership, _ = read_industry_csv(args.industry)
        universe = StockUniverse.from_ids(sorted(membership))

    edges = read_shareholding_csv(args.shareholding)
    membership, capital = read_industry_csv(args.industry)
    topics = read_topicality_csv(args.topicality)
    adjs = [
        build_shareholding_graph(edges, universe),
        build_industry_graph(membership, capital, universe),
        build_topicality_graph(topics, universe),
    ]
    outputs = []
    for adj in adjs:
        lap = normalized_laplacian(adj)
        adj_path = out_dir / f"adjacency_{adj.kind}.csv"
        lap_path = out_dir / f"laplacian_{adj.kind}.csv"
        write_matrix_csv(adj_path, universe.ids, adj.weights)
        write_matrix_csv(lap_path, universe.ids, lap.matrix)
        outputs.extend([adj_path, lap_path])
    report = density_report(adjs)
    report_path = out_dir / "density_report.txt"
    report_path.write_text(report, encoding="utf-8")
    outputs.append(report_path)
    print(report, end="")

    inputs = {
        "shareholding": Path(args.shareholding),
        "industry": Path(args.industry),
        "topicality": Path(args.topicality),
    }
    if args.prices:
        inputs["prices"] = Path(args.prices)
    _write_manifest(out_dir, "build-graphs", {}, inputs, outputs, seed=None, started=started)
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = _train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    universe, panel, _, (train_split, val_split, test_split) = _prepare_data(args.prices, config)
    laplacians = select_laplacians(config.mode, _load_graphs(args, universe))

    init = None
    if args.init_from:
        init, _ = load_checkpoint(args.init_from)
    params, history = train(train_split, val_split, laplacians, config, init=init)

    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt_path, params, extra={"train_config": config.to_dict(), "best_epoch": history.best_epoch})
    history_path = out_dir / "history.csv"
    history.write_csv(history_path)
    norm_path = out_dir / "normalization.csv"
    write_normalization_csv(norm_path, universe, panel.norm)

    print(
        f"trained {config.mode} for {history.epochs_run} epochs "
        f"(best epoch {history.best_epoch}, val loss {min(history.val_loss):.6f})"
    )
    inputs = {"prices": Path(args.prices)}
    for name in ("shareholding", "industry", "topicality"):
        if getattr(args, name):
            inputs[name] = Path(getattr(args, name))
    if args.config:
        inputs["config"] = Path(args.config)
    if args.init_from:
        inputs["init_from"] = Path(args.init_from)
    _write_manifest(
        out_dir,
        "train",
        config.to_dict(),
        inputs,
        [ckpt_path, history_path, norm_path],
        seed=config.seed,
        started=started,
    )
    return 0


def _split_samples(splits, name: str):
    return {"train": splits[0], "val": splits[1], "test": splits[2]}[name]


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_mapping(meta["extra"]["train_config"])

    universe, _, _, splits = _prepare_data(args.prices, config)
    laplacians = select_laplacians(config.mode, _load_graphs(args, universe))
    samples = _split_samples(splits, args.split)
    props = build_propagators(params, laplacians)
    probs, labels = predict_samples(samples, params, props)
    counts = confusion(classify(probs.ravel(), args.threshold), labels.ravel())
    report = compute_metrics(counts)

    text = format_report(report, counts)
    print(text, end="")
    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, report)
    text_path = out_dir / "metrics.txt"
    text_path.write_text(text, encoding="utf-8")

    inputs = {"checkpoint": Path(args.checkpoint), "prices": Path(args.prices)}
    for name in ("shareholding", "industry", "topicality"):
        if getattr(args, name):
            inputs[name] = Path(getattr(args, name))
    _write_manifest(
        out_dir,
        "evaluate",
        {"split": args.split, "threshold": args.threshold, "train_config": config.to_dict()},
        inputs,
        [metrics_path, text_path],
        seed=config.seed,
        started=started,
    )
    return 0


def cmd_sweep_lag(args) -> int:
    started = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = _train_config(args)
    lags = [int(x) for x in args.lags.split(",")]

    rows = []
    for lag in lags:
        config = TrainConfig.from_mapping({**base.to_dict(), "lag": lag})
        universe, _, _, (train_split, val_split, test_split) = _prepare_data(args.prices, config)
        laplacians = select_laplacians(config.mode, _load_graphs(args, universe))
        params, _ = train(train_split, val_split, laplacians, config)
        props = build_propagators(params, laplacians)
        probs, labels = predict_samples(test_split, params, props)
        counts = confusion(classify(probs.ravel(), args.threshold), labels.ravel())
        report = compute_metrics(counts)
        rows.append((lag, report.accuracy, report.mcc))
        print(f"lag={lag:<3d} accuracy={report.accuracy:.4f} mcc={report.mcc:.4f}")

    sweep_path = out_dir / "sweep.csv"
    with sweep_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lag", "accuracy", "mcc"])
        for lag, acc, mcc in rows:
            writer.writerow([lag, f"{acc:.17g}", f"{mcc:.17g}"])

    inputs = {"prices": Path(args.prices)}
    for name in ("shareholding", "industry", "topicality"):
        if getattr(args, name):
            inputs[name] = Path(getattr(args, name))
    _write_manifest(
        out_dir,
        "sweep-lag",
        {**base.to_dict(), "lags": lags, "threshold": args.threshold},
        inputs,
        [sweep_path],
        seed=base.seed,
        started=started,
    )
    return 0


def cmd_gradcheck(args) -> int:
    if args.mode == "all":
        results = gradcheck_all(seed=args.seed)
    else:
        results = [gradcheck(args.mode, seed=args.seed, kernel_size=args.k or 1)]
    for result in results:
        print(result.format())
    if all(r.passed for r in results):
        print("gradient check: PASS")
        return 0
    print("gradient check: FAIL")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcgru",
        description="Relationship-driven stock movement prediction experiments.",
    )
    parser.add_argument("--version", action="version", version=f"gcgru {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic lead-lag market fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--stocks", type=int, default=20)
    p.add_argument("--days", type=int, default=1000)
    p.add_argument("--industries", type=int, default=4)
    p.add_argument("--leaders", type=int, default=1)
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--leader-sigma", type=float, default=0.03)
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--misaligned-shareholding", action="store_true")
    p.add_argument("--misaligned-topics", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graphs", help="build adjacency matrices and Laplacians")
    p.add_argument("--shareholding", required=True)
    p.add_argument("--industry", required=True)
    p.add_argument("--topicality", required=True)
    p.add_argument("--prices", help="derive the universe from this prices file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graphs)

    def add_train_flags(p, with_mode=True):
        p.add_argument("--prices", required=True)
        p.add_argument("--shareholding")
        p.add_argument("--industry")
        p.add_argument("--topicality")
        if with_mode:
            p.add_argument("--mode", choices=CLI_MODES, default=None)
        p.add_argument("--lag", type=int, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--shuffle", action="store_true")
        p.add_argument("--config", help="key=value config file; flags override it")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    add_train_flags(p)
    p.add_argument("--init-from", help="checkpoint to resume from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prices", required=True)
    p.add_argument("--shareholding")
    p.add_argument("--industry")
    p.add_argument("--topicality")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-lag", help="train once per lag size and tabulate test metrics")
    add_train_flags(p)
    p.add_argument("--lags", default="3,5,7,9,11")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lag)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--mode", choices=("all", "single", "multi", "dynamic"), default="all")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
