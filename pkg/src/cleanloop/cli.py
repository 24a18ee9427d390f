"""Command-line interface.

Subcommands:

- ``generate``: write a synthetic dataset file.
- ``perturb``: inject uniform label noise at an exact rate (creates gold).
- ``run``: run a detection method over several seeds and write reports,
  score/PR CSVs, and figures into an output directory.
- ``serve``: start the HTTP annotation service.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
All randomness derives from ``--seed-base`` (seed i = seed-base + i), so a
run's manifest pins its outputs byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import DatasetError, load_dataset, perturb_labels, write_dataset
from .evaluation import METHODS, ExperimentResult, format_aggregate_table, run_experiment
from .loop import StopConfig, dataset_sha256
from .scoring import EnsembleConfig, write_scores_csv
from .synth import token_tag_sequences, two_cluster_classification
from .trainer import TrainerConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cleanloop", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cleanloop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("out", type=Path)
    gen.add_argument("--task", choices=["classification", "sequence"], default="classification")
    gen.add_argument("--size", type=int, default=2000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--dim", type=int, default=None, help="feature dimension (power of two)")
    gen.add_argument("--overlap", type=float, default=0.0,
                     help="classification only: shared-vocabulary rate in [0, 1)")
    gen.set_defaults(func=cmd_generate)

    pert = sub.add_parser("perturb", help="resample a fraction of labels, keeping gold")
    pert.add_argument("input", type=Path)
    pert.add_argument("out", type=Path)
    pert.add_argument("--rate", type=float, default=0.05)
    pert.add_argument("--seed", type=int, default=0)
    pert.set_defaults(func=cmd_perturb)

    run = sub.add_parser("run", help="run a detection experiment")
    run.add_argument("dataset", type=Path)
    run.add_argument("--method", choices=list(METHODS), default="active")
    run.add_argument("--folds", type=int, default=10)
    run.add_argument("--epochs", type=int, default=10)
    run.add_argument("--k", type=int, default=50)
    run.add_argument("--max-iters", type=int, default=40)
    run.add_argument("--seeds", type=int, default=3, help="number of seeds")
    run.add_argument("--seed-base", type=int, default=0)
    run.add_argument("--no-train-ens", action="store_true")
    run.add_argument("--no-test-ens", action="store_true")
    run.add_argument("--out", type=Path, default=Path("cleanloop_run"))
    run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    run.set_defaults(func=cmd_run)

    serve = sub.add_parser("serve", help="start the annotation session service")
    serve.add_argument("--port", type=int, default=8321)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--dataset", type=Path, default=None, help="default dataset to serve")
    serve.add_argument("--k", type=int, default=50)
    serve.add_argument("--checkpoint", type=Path, default=None, help="session checkpoint dir")
    serve.set_defaults(func=cmd_serve)

    return parser


def cmd_generate(args) -> int:
    kwargs = {} if args.dim is None else {"dim": args.dim}
    if args.task == "classification":
        dataset = two_cluster_classification(
            args.size, args.seed, overlap=args.overlap, **kwargs
        )
    else:
        dataset = token_tag_sequences(args.size, args.seed, **kwargs)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.instances)} {args.task} instances to {args.out}")
    return 0


def cmd_perturb(args) -> int:
    dataset = load_dataset(args.input)
    perturbed = perturb_labels(dataset, args.rate, args.seed)
    write_dataset(perturbed, args.out)
    flipped = sum(
        inst.observed_labels != inst.gold_labels for inst in perturbed.instances
    )
    print(
        f"perturbed {round(args.rate * dataset.annotation_count)} of "
        f"{dataset.annotation_count} annotations ({flipped} instances affected) -> {args.out}"
    )
    return 0


def _report_payload(seed: int, method: str, run) -> dict:
    return {
        "v": 1,
        "seed": seed,
        "method": method,
        "ap": run.report.ap,
        "positives": run.report.positives,
        "total": run.report.total,
        "per_iteration_yield": [list(row) for row in run.report.per_iteration_yield],
        "ranking": run.ranking,
    }


def _pr_csv(points) -> str:
    lines = ["recall,precision"]
    lines += [f"{repr(r)},{repr(p)}" for r, p in points]
    return "\n".join(lines) + "\n"


def write_run_outputs(
    result: ExperimentResult, out_dir: Path, manifest: dict, figures: bool = True
) -> list[Path]:
    """Write the full report bundle; on failure, remove everything written."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, content: str) -> None:
        path = out_dir / name
        path.write_text(content, encoding="utf-8")
        written.append(path)

    try:
        agg = result.aggregate
        emit("manifest.json", json.dumps(manifest, indent=2) + "\n")
        emit(
            "aggregate.json",
            json.dumps(
                {
                    "v": 1,
                    "method": result.method,
                    "seeds": list(result.seeds),
                    "aps": list(agg.aps),
                    "ap_mean": agg.mean,
                    "ap_std": agg.std,
                    "std_kind": "population",
                },
                indent=2,
            )
            + "\n",
        )
        for i, run in enumerate(result.runs):
            emit(f"seed{i}.report.json", json.dumps(_report_payload(run.seed, result.method, run), indent=2) + "\n")
            write_scores_csv(run.scores, out_dir / f"seed{i}.scores.csv")
            written.append(out_dir / f"seed{i}.scores.csv")
            emit(f"seed{i}.pr.csv", _pr_csv(run.report.pr_curve))
        if figures:
            from .figures import render_iteration_yield, render_pr_curves

            pr_path = out_dir / "pr_curves.png"
            render_pr_curves(result, pr_path)
            written.append(pr_path)
            if result.method == "active":
                yield_path = out_dir / "iteration_yield.png"
                render_iteration_yield(result, yield_path)
                written.append(yield_path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return written


def cmd_run(args) -> int:
    ensemble_config = EnsembleConfig(
        use_train_ensembling=not args.no_train_ens,
        use_test_ensembling=not args.no_test_ens,
    )
    trainer_config = replace(TrainerConfig(), epochs=args.epochs)
    stop_config = StopConfig(max_iterations=args.max_iters)
    seeds = [args.seed_base + i for i in range(args.seeds)]
    dataset = load_dataset(args.dataset)

    result = run_experiment(
        dataset,
        args.method,
        seeds,
        fold_count=args.folds,
        trainer_config=trainer_config,
        ensemble_config=ensemble_config,
        k=args.k,
        stop_config=stop_config,
    )
    manifest = {
        "v": 1,
        "tool": "cleanloop",
        "version": __version__,
        "command": "run",
        "dataset": {"path": str(args.dataset), "sha256": dataset_sha256(args.dataset)},
        "config": {
            "method": args.method,
            "folds": args.folds,
            "epochs": args.epochs,
            "learning_rate": trainer_config.learning_rate,
            "batch_size": trainer_config.batch_size,
            "l2": trainer_config.l2,
            "k": args.k,
            "max_iterations": args.max_iters,
            "use_train_ensembling": ensemble_config.use_train_ensembling,
            "use_test_ensembling": ensemble_config.use_test_ensembling,
            "feature_dim": dataset.feature_dim,
            "seed_base": args.seed_base,
        },
        "seeds": seeds,
    }
    written = write_run_outputs(result, args.out, manifest, figures=not args.no_figures)
    print(format_aggregate_table([result]), end="")
    print(f"{len(written)} files -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        default_dataset=args.dataset,
        default_k=args.k,
        checkpoint_dir=args.checkpoint,
    )
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except SystemExit as exc:  # uvicorn exits nonzero (e.g. 3) on bind failure
        if exc.code:
            print(f"error: could not start server on {args.host}:{args.port}", file=sys.stderr)
            return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
