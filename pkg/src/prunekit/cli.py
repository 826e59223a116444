"""Command-line front door: gen, prune, eval, compare.

Exit codes: 0 success, 1 usage, 2 validation, 3 I/O, 4 numeric failure.
The PRUNEKIT_LOG environment variable ({error, info, debug}) controls
logging verbosity on stderr.  Every subcommand takes an explicit seed, so
identical invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalreport, tensorio
from .errors import FormatError, NumericError, PrunekitError, ShapeError, ValidationError
from .model import GenConfig, gen_synthetic, load_model, save_model
from .pipeline import PruneConfig, param_count, run_pipeline

log = logging.getLogger("prunekit")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        raise _UsageError(message)


def _write_tokens(path, tokens: np.ndarray) -> None:
    tensorio.write_tensors(path, {"tokens": tokens.astype(np.float64)})


def _read_tokens(path) -> np.ndarray:
    arr = tensorio.read_tensors(path).get("tokens")
    if arr is None:
        raise ValidationError(f"{path}: no 'tokens' tensor")
    ints = arr.astype(np.int64)
    if not np.array_equal(ints.astype(arr.dtype), arr):
        raise ValidationError(f"{path}: token values are not integral")
    return ints


def _load_gen_config(path) -> GenConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON: {exc}") from exc
    try:
        return GenConfig(**doc)
    except TypeError as exc:
        raise ValidationError(f"config {path}: {exc}") from exc


def cmd_gen(args) -> int:
    config = _load_gen_config(args.config)
    model, calib, evalb = gen_synthetic(config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model")
    _write_tokens(out / "calib.bin", calib)
    _write_tokens(out / "eval.bin", evalb)
    tensorio.write_report(out / "config.json", dataclasses.asdict(config) | {"seed": args.seed})
    log.info("wrote model (%d params) and token batches to %s", param_count(model), out)
    return EXIT_OK


def _site_ratios(site: str, ratio: float) -> tuple[float, float]:
    return {
        "heads": (ratio, 1.0),
        "neurons": (1.0, ratio),
        "both": (ratio, ratio),
    }[site]


def cmd_prune(args) -> int:
    model = load_model(args.model)
    calib = _read_tokens(args.calib)
    keep_heads, keep_neurons = _site_ratios(args.site, args.ratio)
    config = PruneConfig(
        keep_heads=keep_heads,
        keep_neurons=keep_neurons,
        criterion=args.criterion,
        method={"bias": "bias_comp", "mask-tuning": "mask_tuning",
                "liar-direct": "liar_direct"}.get(args.reconstruct, args.reconstruct),
        seed=args.seed,
        global_allocation=args.global_allocation,
    )
    pruned, _, report = run_pipeline(model, calib, config)
    save_model(pruned, args.out)
    tensorio.write_report(args.report, report)
    log.info(
        "pruned %d -> %d params, deviation %.3e",
        report["end_to_end"]["params_before"],
        report["end_to_end"]["params_after"],
        report["end_to_end"]["output_deviation"],
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    evalb = _read_tokens(args.eval)
    report = evalreport.eval_metrics(model, evalb)
    report["params"] = param_count(model)
    if args.baseline:
        baseline = load_model(args.baseline)
        report["deviation_vs_baseline"] = evalreport.end_to_end_deviation(
            model, baseline, evalb
        )
    tensorio.write_report(args.report, report)
    log.info("perplexity %.4f", report["perplexity"])
    return EXIT_OK


def _parse_list(text: str, cast):
    items = [cast(part.strip()) for part in text.split(",") if part.strip()]
    if not items:
        raise ValidationError(f"empty list argument: {text!r}")
    return items


def cmd_compare(args) -> int:
    model = load_model(args.model)
    calib = _read_tokens(args.calib)
    evalb = _read_tokens(args.eval)
    method_map = {"bias": "bias_comp", "mask-tuning": "mask_tuning",
                  "liar-direct": "liar_direct"}
    methods = [method_map.get(m, m) for m in _parse_list(args.methods, str)]
    results = evalreport.compare_sweep(
        model,
        calib,
        evalb,
        ratios=_parse_list(args.ratios, float),
        criteria=_parse_list(args.criteria, str),
        methods=methods,
        seed=args.seed,
        jobs=args.jobs,
    )
    evalreport.write_sweep_csv(args.out, results)
    tensorio.write_report(
        str(args.out) + ".json",
        {"rows": [r["row"] for r in results],
         "reports": [r["report"] for r in results]},
    )
    ok = sum(1 for r in results if r["row"]["status"] == "ok")
    log.info("sweep: %d/%d cells succeeded", ok, len(results))
    return EXIT_OK if ok >= 1 else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prunekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic model and token batches")
    gen.add_argument("--config", required=True, help="JSON generation config")
    gen.add_argument("--seed", required=True, type=int)
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cmd_gen)

    prune = sub.add_parser("prune", help="prune and reconstruct a model")
    prune.add_argument("--model", required=True, help="model directory")
    prune.add_argument("--calib", required=True, help="calibration token file")
    prune.add_argument("--ratio", required=True, type=float, help="keep ratio in (0, 1]")
    prune.add_argument("--criterion", default="magnitude",
                       choices=["magnitude", "snip", "fluctuation"])
    prune.add_argument("--reconstruct", default="liar",
                       choices=["naive", "bias", "mask-tuning", "liar", "liar-direct"])
    prune.add_argument("--site", default="both", choices=["heads", "neurons", "both"])
    prune.add_argument("--global", dest="global_allocation", action="store_true",
                       help="rank groups model-wide instead of per layer")
    prune.add_argument("--seed", required=True, type=int)
    prune.add_argument("--out", required=True, help="pruned model output directory")
    prune.add_argument("--report", required=True, help="run report JSON path")
    prune.set_defaults(func=cmd_prune)

    evalp = sub.add_parser("eval", help="evaluate perplexity (and deviation vs a baseline)")
    evalp.add_argument("--model", required=True)
    evalp.add_argument("--eval", required=True, help="eval token file")
    evalp.add_argument("--baseline", default=None, help="reference model directory")
    evalp.add_argument("--report", required=True)
    evalp.set_defaults(func=cmd_eval)

    cmp = sub.add_parser("compare", help="full-factorial pruning sweep to CSV + JSON")
    cmp.add_argument("--model", required=True)
    cmp.add_argument("--calib", required=True)
    cmp.add_argument("--eval", required=True)
    cmp.add_argument("--ratios", required=True, help="comma-separated keep ratios")
    cmp.add_argument("--criteria", required=True, help="comma-separated criteria")
    cmp.add_argument("--methods", required=True, help="comma-separated methods")
    cmp.add_argument("--out", required=True, help="CSV output path")
    cmp.add_argument("--seed", required=True, type=int)
    cmp.add_argument("--jobs", type=int, default=1, help="sweep worker count")
    cmp.set_defaults(func=cmd_compare)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PRUNEKIT_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ValidationError, ShapeError) as exc:
        log.error("validation: %s", exc)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        log.error("i/o: %s", exc)
        return EXIT_IO
    except (NumericError, PrunekitError) as exc:
        log.error("numeric: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
