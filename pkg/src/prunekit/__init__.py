"""Retraining-free structured pruning with least-squares output reconstruction.

Prunes attention heads and FFN neurons of a self-contained toy transformer
by configurable criteria, then folds a least-squares estimate of the
dropped contribution back into the kept weights.  See the README for the
file formats, report schema and CLI.
"""

from .criteria import (
    GroupScores,
    fluctuation_scores,
    magnitude_scores,
    select_mask,
    select_masks_global,
    snip_scores,
)
from .errors import (
    CorruptionError,
    FormatError,
    NumericError,
    PrunekitError,
    ShapeError,
    ValidationError,
)
from .evalreport import (
    compare_sweep,
    end_to_end_deviation,
    eval_metrics,
    layer_l2_error,
    perplexity,
    write_sweep_csv,
)
from .model import (
    ChannelMask,
    GenConfig,
    HiddenTrace,
    LayerParams,
    ToyTransformer,
    apply_surgery,
    cross_entropy,
    forward,
    gen_synthetic,
    load_model,
    loss_and_mask_grads,
    save_model,
)
from .pipeline import PlanRecord, PruneConfig, check_constraint, param_count, run_pipeline
from .reconstruct import (
    ReconPlan,
    SplitView,
    bias_compensation,
    channel_recon_error,
    direct_fold_update,
    liar_update,
    make_plan,
    mask_tuning,
    naive_update,
    solve_p,
    solve_q,
    split,
)

__version__ = "0.1.0"
