"""Layer-by-layer prune-and-reconstruct orchestration.

Sites are processed in network order (attention output, then FFN down
projection, per layer).  Before each site the calibration batch is pushed
through the already-updated earlier layers, so the activations every solve
sees are exactly the ones the final pruned model produces -- pruning layer
l+1 uses inputs collected from the updated weights of layers 1..l.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import criteria as crit
from . import linalg, reconstruct
from .errors import PrunekitError, ValidationError
from .model import (
    SITE_ATTN,
    SITE_FFN,
    SITES,
    ChannelMask,
    ToyTransformer,
    apply_surgery,
    cross_entropy,
    forward,
    install_site_update,
)

log = logging.getLogger("prunekit")


@dataclass
class PruneConfig:
    keep_heads: float = 1.0
    keep_neurons: float = 1.0
    criterion: str = "magnitude"
    method: str = "liar"
    seed: int = 0
    global_allocation: bool = False
    calib_n: int | None = None  # None: use the whole provided batch
    calib_t: int | None = None

    def __post_init__(self):
        for name, r in (("keep_heads", self.keep_heads), ("keep_neurons", self.keep_neurons)):
            if not 0.0 < r <= 1.0:
                raise ValidationError(f"{name} must be in (0, 1], got {r}")
        if self.criterion not in crit.CRITERIA:
            raise ValidationError(f"unknown criterion {self.criterion!r}")
        if self.method not in reconstruct.METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if (self.calib_n is not None and self.calib_n < 1) or (
            self.calib_t is not None and self.calib_t < 1
        ):
            raise ValidationError("calibration shape must be at least 1x1")

    def keep_ratio(self, site: str) -> float:
        return self.keep_heads if site == SITE_ATTN else self.keep_neurons


@dataclass
class PlanRecord:
    """One reconstructed site: the mask, the plan, and its calibration metrics."""

    layer: int
    site: str
    mask: ChannelMask
    plan: reconstruct.ReconPlan
    eps: np.ndarray  # per dropped channel, Eq-style relative squared error
    l2_error: float


def param_count(model: ToyTransformer) -> int:
    """Exact number of scalar parameters."""
    total = model.embed.size + model.head_w.size + model.head_b.size
    total += model.final_ln_g.size + model.final_ln_b.size
    for lp in model.layers:
        for arr in (
            lp.wq, lp.bq, lp.wk, lp.bk, lp.wv, lp.bv, lp.wo, lp.bo,
            lp.wup, lp.bup, lp.wdown, lp.bdown,
            lp.ln1_g, lp.ln1_b, lp.ln2_g, lp.ln2_b,
        ):
            total += arr.size
    return int(total)


def check_constraint(model: ToyTransformer, budget: int) -> bool:
    return param_count(model) <= budget


def _group_size(model: ToyTransformer, site: str) -> int:
    return model.head_dim if site == SITE_ATTN else 1


def _score_site(
    model: ToyTransformer,
    trace_input: np.ndarray,
    layer: int,
    site: str,
    config: PruneConfig,
    snip_cache: dict | None,
) -> crit.GroupScores:
    w, _ = model.site_weight(layer, site)
    gs = _group_size(model, site)
    if config.criterion == "magnitude":
        return crit.magnitude_scores(w, gs, site=site, layer=layer)
    if config.criterion == "fluctuation":
        return crit.fluctuation_scores(trace_input, w, gs, site=site, layer=layer)
    return snip_cache[(site, layer)]


def _snip_all_sites(model: ToyTransformer, calib: np.ndarray) -> dict:
    """SNIP scores for every site, on the dense model (the gate is defined at c=1)."""
    if calib.shape[1] < 2:
        raise ValidationError("SNIP needs sequences of length >= 2 for next-token targets")
    inputs, targets = calib[:, :-1], calib[:, 1:]
    cache = {}
    for layer in range(model.num_layers):
        for site in SITES:
            cache[(site, layer)] = crit.snip_scores(
                model, inputs, targets, site, layer, _group_size(model, site)
            )
    return cache


def _eps_for(view: reconstruct.SplitView, plan: reconstruct.ReconPlan) -> np.ndarray:
    if view.num_dropped == 0:
        return np.zeros(0)
    return reconstruct.channel_recon_error(
        reconstruct.masked_input_estimate(view, plan), view.x_m
    )


def run_pipeline(
    model: ToyTransformer,
    calib_tokens,
    config: PruneConfig,
    eval_tokens=None,
) -> tuple[ToyTransformer, list[PlanRecord], dict]:
    """Score, mask, reconstruct and surger every prunable site in network order.

    Returns the structurally smaller model, one PlanRecord per (layer, site),
    and a run report.  End-to-end metrics use ``eval_tokens`` when given and
    fall back to the calibration batch otherwise.
    """
    t0 = time.perf_counter()
    calib = np.asarray(calib_tokens)
    if config.calib_n is not None or config.calib_t is not None:
        n = config.calib_n or calib.shape[0]
        t = config.calib_t or calib.shape[1]
        if n > calib.shape[0] or t > calib.shape[1]:
            raise ValidationError(
                f"requested calibration shape ({n}, {t}) exceeds batch {calib.shape}"
            )
        calib = calib[:n, :t]

    dense_model = model
    params_before = param_count(model)

    snip_cache = None
    if config.criterion == "snip":
        snip_cache = _snip_all_sites(dense_model, calib)

    fixed_masks: dict[tuple[str, int], ChannelMask] = {}
    if config.global_allocation:
        # model-wide ranking needs all scores up front, so score the dense model
        _, dense_trace = forward(dense_model, calib)
        for site in SITES:
            scored = [
                _score_site(
                    dense_model, dense_trace.site_input(l, site), l, site, config, snip_cache
                )
                for l in range(dense_model.num_layers)
            ]
            for mask in crit.select_masks_global(scored, config.keep_ratio(site)):
                fixed_masks[(mask.site, mask.layer)] = mask

    records: list[PlanRecord] = []
    for layer in range(model.num_layers):
        for site in SITES:
            try:
                _, trace = forward(model, calib)
                x = trace.site_input(layer, site)
                w, b = model.site_weight(layer, site)

                if config.global_allocation:
                    mask = fixed_masks[(site, layer)]
                else:
                    scores = _score_site(model, x, layer, site, config, snip_cache)
                    mask = crit.select_mask(scores, config.keep_ratio(site))

                view = reconstruct.split(x, w, b, mask)
                plan = reconstruct.make_plan(config.method, view, b)
                l2 = linalg.frobenius_sq(
                    reconstruct.dense_output(view, b) - reconstruct.plan_output(view, plan)
                )
                model = apply_surgery(model, mask)
                model = install_site_update(model, layer, site, plan.w_new, plan.b_new)
            except PrunekitError as exc:
                raise type(exc)(f"layer {layer} site {site}: {exc}") from exc

            records.append(
                PlanRecord(layer=layer, site=site, mask=mask, plan=plan,
                           eps=_eps_for(view, plan), l2_error=l2)
            )
            log.info(
                "layer %d %s: kept %d/%d groups, l2=%.3e",
                layer, site, int(mask.group_keep.sum()), mask.num_groups, l2,
            )

    report = build_report(
        dense_model, model, records, config, params_before,
        eval_tokens if eval_tokens is not None else calib,
        "eval" if eval_tokens is not None else "calib",
    )
    report["wall_seconds"] = time.perf_counter() - t0
    return model, records, report


def build_report(
    dense_model: ToyTransformer,
    pruned_model: ToyTransformer,
    records: list[PlanRecord],
    config: PruneConfig,
    params_before: int,
    metric_tokens,
    metric_source: str,
) -> dict:
    """Assemble the serializable run report from pipeline results."""
    from .evalreport import end_to_end_deviation  # local import avoids a cycle

    tokens = np.asarray(metric_tokens)
    deviation = end_to_end_deviation(pruned_model, dense_model, tokens)
    if tokens.shape[1] >= 2:
        logits, _ = forward(pruned_model, tokens[:, :-1])
        ce = cross_entropy(logits, np.asarray(tokens[:, 1:], dtype=np.int64))
    else:
        ce = float("nan")

    layer_entries = []
    for rec in records:
        eps = rec.eps
        layer_entries.append(
            {
                "layer": rec.layer,
                "site": rec.site,
                "method": rec.plan.method,
                "groups_total": rec.mask.num_groups,
                "groups_kept": int(rec.mask.group_keep.sum()),
                "groups_dropped": int((~rec.mask.group_keep).sum()),
                "channels_kept": rec.mask.kept_channels,
                "channels_dropped": int(rec.mask.keep.size - rec.mask.kept_channels),
                "l2_error": rec.l2_error,
                "eps_mean": float(eps.mean()) if eps.size else 0.0,
                "eps_max": float(eps.max()) if eps.size else 0.0,
            }
        )

    return {
        "config": asdict(config),
        "layers": layer_entries,
        "end_to_end": {
            "output_deviation": deviation,
            "cross_entropy": ce,
            "perplexity": float(np.exp(ce)),
            "metric_source": metric_source,
            "params_before": params_before,
            "params_after": param_count(pruned_model),
        },
    }
