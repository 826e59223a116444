"""Metrics and factorial comparison sweeps.

Task accuracy on real benchmarks is out of reach for a synthetic toy model,
so reports carry proxies instead: relative logits deviation against the
dense model and next-token cross-entropy / perplexity on a held-out batch.
Sweep results are emitted as RFC-4180 CSV plus a JSON report with the full
per-cell run reports.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import linalg
from .errors import PrunekitError, ValidationError
from .model import ToyTransformer, cross_entropy, forward
from .pipeline import PlanRecord, PruneConfig, run_pipeline

log = logging.getLogger("prunekit")

SWEEP_CSV_COLUMNS = [
    "ratio",
    "criterion",
    "method",
    "status",
    "output_deviation",
    "cross_entropy",
    "perplexity",
    "params_before",
    "params_after",
    "mean_layer_l2",
    "error",
]


def layer_l2_error(dense_out, pruned_out) -> float:
    """Squared Frobenius distance between dense and reconstructed layer outputs."""
    a = np.asarray(dense_out, dtype=np.float64)
    b = np.asarray(pruned_out, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return linalg.frobenius_sq(a - b)


def end_to_end_deviation(model_a: ToyTransformer, model_b: ToyTransformer, tokens) -> float:
    """Relative Frobenius distance of logits, with model_b as the reference."""
    if model_a.vocab != model_b.vocab or model_a.max_seq_len != model_b.max_seq_len:
        raise ValidationError("models disagree on vocab or sequence configuration")
    logits_a, _ = forward(model_a, tokens)
    logits_b, _ = forward(model_b, tokens)
    denom = max(1e-12, math.sqrt(linalg.frobenius_sq(logits_b)))
    return math.sqrt(linalg.frobenius_sq(logits_a - logits_b)) / denom


def perplexity(model: ToyTransformer, tokens, targets) -> float:
    """exp of the mean token cross-entropy."""
    logits, _ = forward(model, tokens)
    return float(np.exp(cross_entropy(logits, np.asarray(targets, dtype=np.int64))))


def eval_metrics(model: ToyTransformer, eval_tokens) -> dict:
    """Next-token cross-entropy and perplexity on a held-out token batch."""
    tokens = np.asarray(eval_tokens)
    if tokens.shape[1] < 2:
        raise ValidationError("evaluation needs sequences of length >= 2")
    logits, _ = forward(model, tokens[:, :-1])
    ce = cross_entropy(logits, np.asarray(tokens[:, 1:], dtype=np.int64))
    return {"cross_entropy": ce, "perplexity": float(np.exp(ce))}


def channel_error_rows(records: list[PlanRecord]) -> list[dict]:
    """Per-channel reconstruction errors flattened for histogram plotting."""
    rows = []
    for rec in records:
        for pos, eps in zip(np.flatnonzero(~rec.mask.keep), rec.eps):
            rows.append(
                {
                    "layer": rec.layer,
                    "site": rec.site,
                    "method": rec.plan.method,
                    "channel": int(pos),
                    "eps": float(eps),
                }
            )
    return rows


def write_channel_errors_csv(path, records: list[PlanRecord]) -> None:
    rows = channel_error_rows(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "site", "method", "channel", "eps"])
        writer.writeheader()
        writer.writerows(rows)


def _run_cell(
    model: ToyTransformer, calib, eval_tokens, ratio: float, criterion: str, method: str,
    seed: int, global_allocation: bool, site_ratios,
) -> dict:
    keep_heads, keep_neurons = site_ratios(ratio)
    config = PruneConfig(
        keep_heads=keep_heads,
        keep_neurons=keep_neurons,
        criterion=criterion,
        method=method,
        seed=seed,
        global_allocation=global_allocation,
    )
    _, records, report = run_pipeline(model, calib, config, eval_tokens=eval_tokens)
    e2e = report["end_to_end"]
    row = {
        "ratio": ratio,
        "criterion": criterion,
        "method": method,
        "status": "ok",
        "output_deviation": e2e["output_deviation"],
        "cross_entropy": e2e["cross_entropy"],
        "perplexity": e2e["perplexity"],
        "params_before": e2e["params_before"],
        "params_after": e2e["params_after"],
        "mean_layer_l2": float(np.mean([r["l2_error"] for r in report["layers"]])),
        "error": "",
    }
    return {"row": row, "report": report}


def compare_sweep(
    model: ToyTransformer,
    calib_tokens,
    eval_tokens,
    ratios: list[float],
    criteria: list[str],
    methods: list[str],
    seed: int = 0,
    jobs: int = 1,
    site: str = "both",
    global_allocation: bool = False,
) -> list[dict]:
    """Full-factorial pruning sweep; one result dict per (ratio, criterion, method).

    Failed cells are recorded with status "failed" and the sweep continues.
    Cells are independent, so ``jobs`` > 1 runs them in a thread pool; rows
    come back in grid order regardless.
    """
    if not ratios or not criteria or not methods:
        raise ValidationError("ratios, criteria and methods must be nonempty")

    def site_ratios(ratio: float) -> tuple[float, float]:
        if site == "heads":
            return ratio, 1.0
        if site == "neurons":
            return 1.0, ratio
        if site == "both":
            return ratio, ratio
        raise ValidationError(f"unknown site {site!r}")

    cells = [(r, c, m) for r in ratios for c in criteria for m in methods]

    def run_one(cell):
        ratio, criterion, method = cell
        try:
            return _run_cell(
                model, calib_tokens, eval_tokens, ratio, criterion, method,
                seed, global_allocation, site_ratios,
            )
        except PrunekitError as exc:
            log.warning("sweep cell %s failed: %s", cell, exc)
            row = dict.fromkeys(SWEEP_CSV_COLUMNS, "")
            row.update(ratio=ratio, criterion=criterion, method=method,
                       status="failed", error=str(exc))
            return {"row": row, "report": None}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, cells))
    else:
        results = [run_one(cell) for cell in cells]
    return results


def write_sweep_csv(path, results: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_COLUMNS)
        writer.writeheader()
        for res in results:
            writer.writerow(res["row"])
