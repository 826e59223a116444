"""Distortion reconstruction after structured pruning.

The layer output X W + B splits exactly into a kept part X_u W_u + B and a
dropped part X_m W_m.  Each method here folds an estimate of the dropped
part back into the kept weight and bias:

* ``naive``        -- no compensation; W_u and B unchanged.
* ``bias_comp``    -- replace each dropped channel by its calibration mean,
                      folded into the bias.
* ``mask_tuning``  -- rescale each kept channel by a least-squares scalar.
* ``liar``         -- least-squares transforms Q (activation side) and P
                      (weight side) folded as (I + Q P) W_u, with bias
                      mean(X_m) W_m + B.
* ``liar_direct``  -- fold Q W_m directly into the kept weight, skipping
                      the P approximation (ablation variant).

All methods leave the kept weight's shape unchanged, so one surgered model
accepts any plan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ShapeError, ValidationError
from .model import ChannelMask

METHODS = ("naive", "bias_comp", "mask_tuning", "liar", "liar_direct")


@dataclass
class SplitView:
    """Exact partition of one layer's calibration input and weight."""

    x_u: np.ndarray  # (NT, C_u)
    x_m: np.ndarray  # (NT, C_m)
    w_u: np.ndarray  # (C_u, C_out)
    w_m: np.ndarray  # (C_m, C_out)
    kept_idx: np.ndarray
    dropped_idx: np.ndarray

    @property
    def num_kept(self) -> int:
        return self.w_u.shape[0]

    @property
    def num_dropped(self) -> int:
        return self.w_m.shape[0]


@dataclass
class ReconPlan:
    """Computed reconstruction for one layer: transforms plus updated weights."""

    q: np.ndarray  # (C_u, C_m)
    p: np.ndarray  # (C_m, C_u)
    xbar_m: np.ndarray  # (1, C_m)
    w_new: np.ndarray  # (C_u, C_out)
    b_new: np.ndarray  # (C_out,)
    method: str


def split(x, w, b, mask: ChannelMask) -> SplitView:
    """Partition activations and weight rows into kept and dropped channels.

    Accepts a (N, T, C) batch or an already-flattened (NT, C) matrix.
    The reassembly x_u w_u + x_m w_m + b reproduces the dense output exactly.
    """
    flat = linalg.flatten_batch(x) if np.asarray(x).ndim == 3 else linalg.as_matrix(x, "x")
    w = linalg.as_matrix(w, "w")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if flat.shape[1] != w.shape[0]:
        raise ShapeError(f"x channels {flat.shape[1]} != w rows {w.shape[0]}")
    if b.size != w.shape[1]:
        raise ShapeError(f"bias length {b.size} != w cols {w.shape[1]}")
    if mask.keep.size != w.shape[0]:
        raise ValidationError(f"mask length {mask.keep.size} != {w.shape[0]} channels")
    keep = mask.keep
    if not keep.any():
        raise ValidationError("all channels pruned")
    kept_idx = np.flatnonzero(keep)
    dropped_idx = np.flatnonzero(~keep)
    return SplitView(
        x_u=flat[:, kept_idx],
        x_m=flat[:, dropped_idx],
        w_u=w[kept_idx, :],
        w_m=w[dropped_idx, :],
        kept_idx=kept_idx,
        dropped_idx=dropped_idx,
    )


def dense_output(view: SplitView, b) -> np.ndarray:
    """The unpruned layer output on the calibration set, via the split parts."""
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return view.x_u @ view.w_u + view.x_m @ view.w_m + b


def plan_output(view: SplitView, plan: ReconPlan) -> np.ndarray:
    """The reconstructed layer output X_u W_new + B_new on the calibration set."""
    return view.x_u @ plan.w_new + plan.b_new


def solve_q(x_u, x_m, xbar_m) -> np.ndarray:
    """Least-squares transform mapping kept activations to centered dropped ones."""
    x_u = linalg.as_matrix(x_u, "x_u")
    x_m = linalg.as_matrix(x_m, "x_m")
    xbar_m = np.asarray(xbar_m, dtype=np.float64).reshape(1, -1)
    if x_m.shape[1] != xbar_m.shape[1]:
        raise ShapeError("xbar_m length does not match x_m channels")
    return linalg.least_squares(x_u, x_m - xbar_m)


def solve_p(w_u, w_m) -> np.ndarray:
    """Least-squares transform expressing dropped weight rows by kept ones.

    Minimizes ||w_m - p w_u||_F via the transposed system; no mean term,
    unlike the activation-side solve.
    """
    w_u = linalg.as_matrix(w_u, "w_u")
    w_m = linalg.as_matrix(w_m, "w_m")
    if w_u.shape[1] != w_m.shape[1]:
        raise ShapeError(f"w_u cols {w_u.shape[1]} != w_m cols {w_m.shape[1]}")
    return linalg.least_squares(w_u.T, w_m.T).T


def _identity_plan(view: SplitView, b, method: str) -> ReconPlan:
    cu = view.num_kept
    return ReconPlan(
        q=np.zeros((cu, view.num_dropped)),
        p=np.zeros((view.num_dropped, cu)),
        xbar_m=np.zeros((1, view.num_dropped)),
        w_new=view.w_u.copy(),
        b_new=np.asarray(b, dtype=np.float64).reshape(-1).copy(),
        method=method,
    )


def naive_update(view: SplitView, b) -> ReconPlan:
    """Drop the masked channels with no compensation at all."""
    return _identity_plan(view, b, "naive")


def bias_compensation(view: SplitView, b) -> ReconPlan:
    """Fold the mean dropped contribution into the bias; weights untouched."""
    if view.num_dropped == 0:
        return _identity_plan(view, b, "bias_comp")
    plan = _identity_plan(view, b, "bias_comp")
    plan.xbar_m = linalg.column_means(view.x_m)
    plan.b_new = (plan.xbar_m @ view.w_m)[0] + plan.b_new
    return plan


def mask_tuning(view: SplitView, b) -> ReconPlan:
    """Per-kept-channel rescale minimizing the full-output residual.

    Solves for scalars r so that X_u diag(r) W_u best matches the dense
    product X W; the bias cancels from both sides and stays unchanged.
    """
    if view.num_dropped == 0:
        return _identity_plan(view, b, "mask_tuning")
    nt, cu = view.x_u.shape
    c_out = view.w_u.shape[1]
    # design column i is vec(outer(x_u[:, i], w_u[i, :]))
    design = (view.x_u[:, :, None] * view.w_u[None, :, :]).transpose(0, 2, 1).reshape(
        nt * c_out, cu
    )
    target = (view.x_u @ view.w_u + view.x_m @ view.w_m).reshape(nt * c_out, 1)
    r = linalg.least_squares(design, target)[:, 0]
    plan = _identity_plan(view, b, "mask_tuning")
    plan.xbar_m = linalg.column_means(view.x_m)
    plan.w_new = r[:, None] * view.w_u
    return plan


def liar_update(
    view: SplitView, b, update_weight: bool = True, update_bias: bool = True
) -> ReconPlan:
    """Least-squares interpolation folded into the kept weight and bias.

    The ablation flags disable the weight term (I + Q P) or the bias term
    mean(X_m) W_m independently; both enabled is the standard method.
    """
    if view.num_dropped == 0:
        return _identity_plan(view, b, "liar")
    if update_weight and update_bias:
        method = "liar"
    elif update_weight:
        method = "liar_weight_only"
    elif update_bias:
        method = "liar_bias_only"
    else:
        method = "naive"
    xbar_m = linalg.column_means(view.x_m)
    q = solve_q(view.x_u, view.x_m, xbar_m)
    p = solve_p(view.w_u, view.w_m)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    w_new = view.w_u + q @ (p @ view.w_u) if update_weight else view.w_u.copy()
    b_new = (xbar_m @ view.w_m)[0] + b if update_bias else b.copy()
    return ReconPlan(q=q, p=p, xbar_m=xbar_m, w_new=w_new, b_new=b_new, method=method)


def direct_fold_update(view: SplitView, b) -> ReconPlan:
    """Fold Q W_m into the kept weight directly, skipping the P approximation."""
    if view.num_dropped == 0:
        return _identity_plan(view, b, "liar_direct")
    xbar_m = linalg.column_means(view.x_m)
    q = solve_q(view.x_u, view.x_m, xbar_m)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return ReconPlan(
        q=q,
        p=np.zeros((view.num_dropped, view.num_kept)),
        xbar_m=xbar_m,
        w_new=view.w_u + q @ view.w_m,
        b_new=(xbar_m @ view.w_m)[0] + b,
        method="liar_direct",
    )


def make_plan(method: str, view: SplitView, b) -> ReconPlan:
    """Dispatch by method tag (see METHODS)."""
    if method == "naive":
        return naive_update(view, b)
    if method == "bias_comp":
        return bias_compensation(view, b)
    if method == "mask_tuning":
        return mask_tuning(view, b)
    if method == "liar":
        return liar_update(view, b)
    if method == "liar_direct":
        return direct_fold_update(view, b)
    raise ValidationError(f"unknown reconstruction method {method!r}")


def masked_input_estimate(view: SplitView, plan: ReconPlan) -> np.ndarray:
    """Each method's implied estimate of the dropped input channels.

    liar variants estimate X_u Q + mean, bias compensation the mean alone;
    naive and mask tuning carry no input estimate and count as zero.
    """
    nt = view.x_u.shape[0]
    if plan.method in ("liar", "liar_direct", "liar_weight_only", "liar_bias_only"):
        return view.x_u @ plan.q + plan.xbar_m
    if plan.method == "bias_comp":
        return np.broadcast_to(plan.xbar_m, (nt, view.num_dropped)).copy()
    return np.zeros((nt, view.num_dropped))


def channel_recon_error(x_hat, x) -> np.ndarray:
    """Per-channel relative squared error ||x_hat_k - x_k||^2 / ||x_k||^2.

    A zero-norm reference channel scores 0 when the estimate is also zero
    there, +inf otherwise.
    """
    x_hat = linalg.as_matrix(x_hat, "x_hat")
    x = linalg.as_matrix(x, "x")
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    num = np.sum((x_hat - x) ** 2, axis=0)
    den = np.sum(x * x, axis=0)
    out = np.empty(x.shape[1])
    zero = den == 0.0
    out[~zero] = num[~zero] / den[~zero]
    out[zero] = np.where(num[zero] == 0.0, 0.0, np.inf)
    return out
