"""Shared synthetic constructions for the test suite."""

import numpy as np

from prunekit import criteria, linalg
from prunekit import reconstruct as rc
from prunekit.model import ChannelMask


def correlated_layer(seed, nt=256, c=32, c_out=16, rho=0.8):
    """One synthetic layer whose channels share a common factor (corr = rho).

    Channel means are nonzero so bias compensation has signal to absorb,
    and the common factor gives the least-squares estimate real structure.
    """
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(nt, 1))
    e = rng.normal(size=(nt, c))
    mu = rng.normal(size=c)
    x = mu + np.sqrt(rho) * f + np.sqrt(1.0 - rho) * e
    w = rng.normal(size=(c, c_out)) / np.sqrt(c)
    b = rng.normal(size=c_out) * 0.1
    return x, w, b


def method_layer_errors(seed, keep_ratio=0.5, methods=None):
    """Calibration-set layer l2 error of each method on one correlated layer."""
    x, w, b = correlated_layer(seed)
    scores = criteria.magnitude_scores(w, 1, site="ffn_down", layer=0)
    mask = criteria.select_mask(scores, keep_ratio)
    view = rc.split(x, w, b, mask)
    dense = rc.dense_output(view, b)
    plans = {
        "naive": rc.naive_update(view, b),
        "bias_comp": rc.bias_compensation(view, b),
        "mask_tuning": rc.mask_tuning(view, b),
        "liar": rc.liar_update(view, b),
        "liar_weight_only": rc.liar_update(view, b, update_bias=False),
        "liar_bias_only": rc.liar_update(view, b, update_weight=False),
    }
    if methods is not None:
        plans = {m: plans[m] for m in methods}
    return {
        name: linalg.frobenius_sq(dense - rc.plan_output(view, plan))
        for name, plan in plans.items()
    }


def planted_split(seed, nt=128, cu=8, cm=4, c_out=20):
    """SplitView where both LIAR approximations are exact by construction.

    X_u has zero column means, X_m = X_u A + c, and W_m = P0 W_u with W_u
    of full row rank, so the interpolation chain reproduces the dense
    output up to solver rounding.
    """
    rng = np.random.default_rng(seed)
    xu = rng.normal(size=(nt, cu))
    xu = xu - xu.mean(axis=0)
    a = rng.normal(size=(cu, cm))
    c = rng.normal(size=cm)
    xm = xu @ a + c
    wu = rng.normal(size=(cu, c_out))
    p0 = rng.normal(size=(cm, cu))
    wm = p0 @ wu
    b = rng.normal(size=c_out)
    view = rc.SplitView(
        x_u=xu, x_m=xm, w_u=wu, w_m=wm,
        kept_idx=np.arange(cu), dropped_idx=np.arange(cu, cu + cm),
    )
    return view, b, a, c, p0


def random_masked_layer(seed, nt=64, c=12, c_out=7, drop=3):
    """Random dense layer with a random neuron mask, for exactness checks."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(nt, c))
    w = rng.normal(size=(c, c_out))
    b = rng.normal(size=c_out)
    keep = np.ones(c, dtype=bool)
    keep[rng.choice(c, size=drop, replace=False)] = False
    mask = ChannelMask(keep=keep, group_size=1, layer=0, site="ffn_down")
    return x, w, b, mask
