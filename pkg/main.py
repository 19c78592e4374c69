"""
Command-line entry point: train, eval, gen-data, dump-embeddings, grad-check, plot-history.

Every command prints one JSON document. Exit codes: 0 success, 1 validation
error, 2 numerical failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from dataio import generate_synthetic, load_dataset, load_synthetic_config, save_dataset, summarize
from gradcheck_suite import MODULES, run_suite
from history_plot import plot_history
from model import load_checkpoint
from run_config import RunConfig
from telemetry import (
    configure_tracing,
    create_span,
    default_output_dir,
    get_tracer,
    load_environment,
    log_level,
    set_attributes,
)
from tensor_core import NonFiniteError
from trainer import DivergenceError, dump_embeddings, evaluate, prepare_data, run_sweep, train

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class GradCheckFailed(ArithmeticError):
    pass


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _output_dir(args, config: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if config.output_dir:
        return Path(config.output_dir)
    return Path(default_output_dir()) / Path(args.config).stem


def cmd_train(args) -> dict:
    config = RunConfig.from_file(args.config).with_overrides(
        seed=args.seed, ablate=args.ablate, modalities=args.modalities, profile=args.spec
    )
    data = prepare_data(config, base_dir=Path(args.config).parent)
    out_dir = _output_dir(args, config)

    with tracer.start_as_current_span("cli_train") as span:
        span.set_attribute("config", str(args.config))
        span.set_attribute("seeds", args.seeds)
        if args.seeds > 1:
            table, summary = run_sweep(config, data, args.seeds, out_dir)
            return {"seeds": table["seed"].tolist(), "summary": summary, "output_dir": str(out_dir)}

        result = train(config, data.train, data.val, data.spec, out_dir, data.test)
        payload = {
            "best_epoch": result.best_epoch,
            "epochs_run": int(len(result.history)),
            "parameters": result.model.parameter_count(),
            "validation": result.best_metrics.to_dict(data.spec),
            "output_dir": str(out_dir),
        }
        if result.test_metrics is not None:
            payload["test"] = result.test_metrics.to_dict(data.spec)
        return payload


def cmd_eval(args) -> dict:
    model, meta = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, model.spec)
    metrics = evaluate(model, dataset)
    return {"checkpoint": str(args.checkpoint), "best_epoch": meta.get("best_epoch"), **metrics.to_dict(model.spec)}


def cmd_gen_data(args) -> dict:
    config = load_synthetic_config(args.synthetic_config)
    conversations = generate_synthetic(config)
    save_dataset(args.out, conversations)
    summary = summarize(conversations)
    return {"out": str(args.out), **asdict(summary)}


def cmd_dump_embeddings(args) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, model.spec)
    path = dump_embeddings(model, dataset, args.out)
    return {"out": str(path), "rows": sum(len(c) for c in dataset), "width": model.d + model.fused_width}


def cmd_grad_check(args) -> dict:
    modules = [args.module] if args.module else None
    results = run_suite(modules, instances=args.instances, seed=args.seed)
    failed = [f"{r.module}:{r.case}" for r in results if not r.passed]
    payload = {
        "cases": len(results),
        "failed": failed,
        "max_rel_error": max((r.max_rel_error for r in results), default=0.0),
        "results": [asdict(r) for r in results],
    }
    if failed:
        _emit(payload)
        raise GradCheckFailed(f"{len(failed)} grad-check case(s) failed")
    return payload


def cmd_plot_history(args) -> dict:
    return {"out": str(plot_history(args.history, args.out))}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpthcl", description="Multimodal prompt transformer with hybrid contrastive learning"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="Train K seeds and report mean and std")
    p.add_argument("--ablate", help="Comma list of no_mpt,no_ucl,no_scl,no_rgcn,full_audio,full_visual")
    p.add_argument("--modalities", help="Comma list over t,a,v")
    p.add_argument("--spec", help="Feature profile: iemocap, meld or custom:dt,da,dv,J")
    p.add_argument("--out", help="Output directory (overrides the config)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gen-data", help="Write a synthetic dataset")
    p.add_argument("--synthetic-config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("dump-embeddings", help="Write fused utterance embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_dump_embeddings)

    p = sub.add_parser("grad-check", help="Run finite-difference gradient checks")
    p.add_argument("--module", choices=MODULES)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_grad_check)

    p = sub.add_parser("plot-history", help="Render a history CSV as an HTML chart")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_plot_history)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    configure_tracing()
    args = build_parser().parse_args(argv)

    try:
        with create_span(tracer, "cli_command") as span:
            set_attributes(span, command=args.command)
            payload = args.handler(args)
        _emit(payload)
        return EXIT_OK
    except GradCheckFailed as e:
        logger.error("%s", e)
        return EXIT_NUMERICAL
    except (NonFiniteError, DivergenceError) as e:
        _emit({"error": str(e)})
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        _emit({"error": str(e)})
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
