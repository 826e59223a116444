"""Self-contained toy transformer with hidden-state capture and surgery.

Pre-norm encoder blocks over float64 numpy arrays:

    x   = x + W_O-projection(multi-head attention(LN1(x)))
    x   = x + W_down-projection(gelu(LN2(x) @ W_up + b_up))
    out = LM head(final LN(x))

The two prunable sites per block are the input channels of the attention
output projection (``attn_out``, grouped per head) and of the FFN down
projection (``ffn_down``, one group per hidden neuron).  Forward captures
exactly the activations those matrices consume, and a manual reverse-mode
pass provides exact gradients of the token cross-entropy with respect to
multiplicative channel gates at either site.

Models are treated as immutable: surgery and weight updates return new
instances and never mutate shared arrays in place.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ValidationError
from .tensorio import ModelManifest, read_tensors, write_tensors

LN_EPS = 1e-5

SITE_ATTN = "attn_out"
SITE_FFN = "ffn_down"
SITES = (SITE_ATTN, SITE_FFN)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LayerParams:
    wq: np.ndarray  # (C, A) with A = heads * head_dim after any surgery
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray  # (A, C)
    bo: np.ndarray
    wup: np.ndarray  # (C, F)
    bup: np.ndarray
    wdown: np.ndarray  # (F, C)
    bdown: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class ToyTransformer:
    embed: np.ndarray  # (V, C)
    layers: list[LayerParams]
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    head_w: np.ndarray  # (C, V)
    head_b: np.ndarray  # (V,)
    head_dim: int
    max_seq_len: int
    causal: bool = False

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embed.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def heads_at(self, layer: int) -> int:
        return self.layers[layer].wo.shape[0] // self.head_dim

    def neurons_at(self, layer: int) -> int:
        return self.layers[layer].wdown.shape[0]

    def site_weight(self, layer: int, site: str) -> tuple[np.ndarray, np.ndarray]:
        """The prunable (weight, bias) pair consumed at ``site``."""
        lp = self.layers[layer]
        if site == SITE_ATTN:
            return lp.wo, lp.bo
        if site == SITE_FFN:
            return lp.wdown, lp.bdown
        raise ValidationError(f"unknown site {site!r}")


@dataclass
class HiddenTrace:
    """Per-layer inputs of the two prunable matrices plus the final hidden state."""

    attn_inputs: list[np.ndarray]  # layer l: (N, T, A_l)
    ffn_inputs: list[np.ndarray]  # layer l: (N, T, F_l)
    final_hidden: np.ndarray  # (N, T, C)

    def site_input(self, layer: int, site: str) -> np.ndarray:
        if site == SITE_ATTN:
            return self.attn_inputs[layer]
        if site == SITE_FFN:
            return self.ffn_inputs[layer]
        raise ValidationError(f"unknown site {site!r}")


@dataclass
class ChannelMask:
    """Boolean keep/drop vector over the input channels of a prunable matrix.

    ``group_size`` is 1 for FFN neurons and ``head_dim`` for attention heads;
    for heads the vector is constant within each contiguous block.
    """

    keep: np.ndarray
    group_size: int
    layer: int
    site: str

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.site not in SITES:
            raise ValidationError(f"unknown site {self.site!r}")
        if self.group_size < 1 or self.keep.size % self.group_size != 0:
            raise ValidationError(
                f"group size {self.group_size} does not divide {self.keep.size} channels"
            )
        blocks = self.keep.reshape(-1, self.group_size)
        if np.any(blocks.any(axis=1) != blocks.all(axis=1)):
            raise ValidationError("mask must be constant within each channel group")
        if not self.keep.any():
            raise ValidationError("mask drops every channel group")

    @property
    def num_groups(self) -> int:
        return self.keep.size // self.group_size

    @property
    def group_keep(self) -> np.ndarray:
        return self.keep.reshape(-1, self.group_size)[:, 0]

    @property
    def kept_channels(self) -> int:
        return int(self.keep.sum())


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def _gelu_grad(z):
    phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(z / math.sqrt(2.0))) + z * phi


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, head_dim):
    n, t, a = x.shape
    return x.reshape(n, t, a // head_dim, head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * d)


def validate_tokens(model: ToyTransformer, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.ndim != 2:
        raise ValidationError(f"token batch must be 2-D (N, T), got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[1] > model.max_seq_len:
        raise ValidationError(
            f"sequence length {arr.shape[1]} outside [1, {model.max_seq_len}]"
        )
    if arr.min() < 0 or arr.max() >= model.vocab:
        raise ValidationError(f"token id out of range [0, {model.vocab})")
    return arr.astype(np.int64)


def _forward_cache(model: ToyTransformer, tokens: np.ndarray):
    d = model.head_dim
    x = model.embed[tokens]
    n, t, _ = x.shape
    causal_bias = None
    if model.causal:
        causal_bias = np.where(np.triu(np.ones((t, t), bool), k=1), -np.inf, 0.0)

    caches = []
    for lp in model.layers:
        c: dict[str, object] = {"x_in": x}
        h1, ln1 = _layer_norm(x, lp.ln1_g, lp.ln1_b)
        q = _split_heads(h1 @ lp.wq + lp.bq, d)
        k = _split_heads(h1 @ lp.wk + lp.bk, d)
        v = _split_heads(h1 @ lp.wv + lp.bv, d)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
        if causal_bias is not None:
            scores = scores + causal_bias
        attn = _softmax(scores)
        a = _merge_heads(attn @ v)  # input consumed by wo
        x = x + (a @ lp.wo + lp.bo)
        c.update(h1=h1, ln1=ln1, q=q, k=k, v=v, attn=attn, a=a, x_mid=x)

        h2, ln2 = _layer_norm(x, lp.ln2_g, lp.ln2_b)
        z = h2 @ lp.wup + lp.bup
        u = _gelu(z)  # input consumed by wdown
        x = x + (u @ lp.wdown + lp.bdown)
        c.update(h2=h2, ln2=ln2, z=z, u=u, x_out=x)
        caches.append(c)

    h_final, ln_f = _layer_norm(x, model.final_ln_g, model.final_ln_b)
    logits = h_final @ model.head_w + model.head_b
    return logits, {"layers": caches, "h_final": h_final, "ln_f": ln_f}


def forward(model: ToyTransformer, tokens) -> tuple[np.ndarray, HiddenTrace]:
    """Run the model, returning logits and the prunable-site activations."""
    tokens = validate_tokens(model, tokens)
    logits, cache = _forward_cache(model, tokens)
    trace = HiddenTrace(
        attn_inputs=[c["a"] for c in cache["layers"]],
        ffn_inputs=[c["u"] for c in cache["layers"]],
        final_hidden=cache["h_final"],
    )
    return logits, trace


# ---------------------------------------------------------------------------
# Loss and gate gradients
# ---------------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean token-level cross-entropy of logits against integer targets."""
    n, t, _ = logits.shape
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return float((logz - picked).mean())


def _backward_gate_grads(model: ToyTransformer, tokens: np.ndarray, targets: np.ndarray):
    """Loss plus per-channel gate gradients dL/dc at c=1 for every site and layer."""
    logits, cache = _forward_cache(model, tokens)
    n, t, _ = logits.shape
    loss = cross_entropy(logits, targets)

    dlogits = _softmax(logits)
    np.put_along_axis(
        dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1
    )
    dlogits /= n * t

    dx = _layer_norm_backward(dlogits @ model.head_w.T, cache["ln_f"])

    d = model.head_dim
    attn_grads: list[np.ndarray] = [None] * model.num_layers
    ffn_grads: list[np.ndarray] = [None] * model.num_layers
    for li in range(model.num_layers - 1, -1, -1):
        lp = model.layers[li]
        c = cache["layers"][li]

        # FFN block: x_out = x_mid + gelu(LN2(x_mid) @ wup + bup) @ wdown + bdown
        du = dx @ lp.wdown.T
        ffn_grads[li] = np.einsum("ntf,ntf->f", du, c["u"])
        dz = du * _gelu_grad(c["z"])
        dx = dx + _layer_norm_backward(dz @ lp.wup.T, c["ln2"])

        # attention block: x_mid = x_in + merge(softmax(qk/sqrt d) v) @ wo + bo
        da = dx @ lp.wo.T
        attn_grads[li] = np.einsum("nta,nta->a", da, c["a"])
        dctx = _split_heads(da, d)
        attn = c["attn"]
        dp = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        ds = attn * (dp - (dp * attn).sum(axis=-1, keepdims=True))
        dq = ds @ c["k"] / math.sqrt(d)
        dk = ds.transpose(0, 1, 3, 2) @ c["q"] / math.sqrt(d)
        dh1 = _merge_heads(dq) @ lp.wq.T + _merge_heads(dk) @ lp.wk.T + _merge_heads(dv) @ lp.wv.T
        dx = dx + _layer_norm_backward(dh1, c["ln1"])

    return loss, attn_grads, ffn_grads


def loss_and_mask_grads(
    model: ToyTransformer, tokens, targets, site: str, layer: int
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and exact gate gradients for one (site, layer).

    The gate is a multiplicative scalar per channel group (head or neuron)
    applied to the inputs of the site matrix and differentiated at gate
    value 1 through every downstream layer.
    """
    tokens = validate_tokens(model, tokens)
    targets = validate_tokens(model, targets)
    if tokens.shape != targets.shape:
        raise ValidationError("tokens and targets must have equal shapes")
    if site not in SITES:
        raise ValidationError(f"unknown site {site!r}")
    if not 0 <= layer < model.num_layers:
        raise ValidationError(f"layer {layer} out of range [0, {model.num_layers})")

    loss, attn_grads, ffn_grads = _backward_gate_grads(model, tokens, targets)
    if site == SITE_ATTN:
        per_channel = attn_grads[layer]
        group = model.head_dim
    else:
        per_channel = ffn_grads[layer]
        group = 1
    return loss, per_channel.reshape(-1, group).sum(axis=1)


# ---------------------------------------------------------------------------
# Structural surgery
# ---------------------------------------------------------------------------


def apply_surgery(model: ToyTransformer, mask: ChannelMask) -> ToyTransformer:
    """Physically delete the dropped channel groups of one site.

    Producing-side columns (wq/wk/wv or wup, plus their biases) and the
    consuming-side rows (wo or wdown) vanish; kept-channel order is
    preserved.  Returns a new model, inputs untouched.
    """
    if not 0 <= mask.layer < model.num_layers:
        raise ValidationError(f"layer {mask.layer} out of range")
    lp = model.layers[mask.layer]
    keep = mask.keep

    if mask.site == SITE_ATTN:
        if mask.group_size != model.head_dim:
            raise ValidationError(
                f"attention masks must use group_size == head_dim ({model.head_dim})"
            )
        if keep.size != lp.wo.shape[0]:
            raise ValidationError(
                f"mask length {keep.size} != attention width {lp.wo.shape[0]}"
            )
        new_lp = replace(
            lp,
            wq=lp.wq[:, keep].copy(),
            bq=lp.bq[keep].copy(),
            wk=lp.wk[:, keep].copy(),
            bk=lp.bk[keep].copy(),
            wv=lp.wv[:, keep].copy(),
            bv=lp.bv[keep].copy(),
            wo=lp.wo[keep, :].copy(),
        )
    else:
        if mask.group_size != 1:
            raise ValidationError("neuron masks must use group_size == 1")
        if keep.size != lp.wdown.shape[0]:
            raise ValidationError(
                f"mask length {keep.size} != FFN width {lp.wdown.shape[0]}"
            )
        new_lp = replace(
            lp,
            wup=lp.wup[:, keep].copy(),
            bup=lp.bup[keep].copy(),
            wdown=lp.wdown[keep, :].copy(),
        )

    layers = list(model.layers)
    layers[mask.layer] = new_lp
    return replace(model, layers=layers)


def install_site_update(
    model: ToyTransformer, layer: int, site: str, w_new: np.ndarray, b_new: np.ndarray
) -> ToyTransformer:
    """Return a model with the site's consuming weight and bias replaced."""
    lp = model.layers[layer]
    current, _ = model.site_weight(layer, site)
    if w_new.shape != current.shape:
        raise ValidationError(
            f"update shape {w_new.shape} != surgered weight shape {current.shape}"
        )
    if site == SITE_ATTN:
        new_lp = replace(lp, wo=np.array(w_new, dtype=np.float64), bo=np.array(b_new, dtype=np.float64).reshape(-1))
    else:
        new_lp = replace(lp, wdown=np.array(w_new, dtype=np.float64), bdown=np.array(b_new, dtype=np.float64).reshape(-1))
    layers = list(model.layers)
    layers[layer] = new_lp
    return replace(model, layers=layers)


# ---------------------------------------------------------------------------
# Synthetic assets
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    layers: int = 2
    embed_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    vocab: int = 50
    max_seq_len: int = 32
    causal: bool = False
    calib_n: int = 8
    calib_t: int = 16
    eval_n: int = 8
    eval_t: int = 16

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValidationError("embed_dim must be divisible by heads")
        for name in ("layers", "embed_dim", "heads", "ffn_dim", "vocab", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.calib_n * self.calib_t < 1 or self.eval_n * self.eval_t < 1:
            raise ValidationError("token batches must be nonempty")
        if max(self.calib_t, self.eval_t) > self.max_seq_len:
            raise ValidationError("token length exceeds max_seq_len")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


class MarkovChain:
    """Seeded token source; calibration and eval batches share one chain."""

    def __init__(self, rng: np.random.Generator, vocab: int):
        self._rng = rng
        self._cum_init = np.cumsum(_softmax(rng.normal(0.0, 1.5, size=vocab)))
        self._cum_trans = np.cumsum(_softmax(rng.normal(0.0, 1.5, size=(vocab, vocab))), axis=1)
        self._vocab = vocab

    def sample(self, n: int, t: int) -> np.ndarray:
        out = np.empty((n, t), dtype=np.int64)
        state = np.searchsorted(self._cum_init, self._rng.random(n), side="right")
        state = state.clip(0, self._vocab - 1)
        out[:, 0] = state
        for j in range(1, t):
            u = self._rng.random(n)
            state = (self._cum_trans[state] > u[:, None]).argmax(axis=1)
            out[:, j] = state
        return out


def gen_synthetic(config: GenConfig, seed: int) -> tuple[ToyTransformer, np.ndarray, np.ndarray]:
    """Seeded model plus calibration and eval token batches; fully reproducible."""
    rng = np.random.default_rng(seed)
    c, f, v = config.embed_dim, config.ffn_dim, config.vocab
    a = config.heads * config.head_dim

    def lin(rows, cols):
        return rng.normal(0.0, rows ** -0.5, size=(rows, cols))

    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerParams(
                wq=lin(c, a), bq=rng.normal(0.0, 0.02, a),
                wk=lin(c, a), bk=rng.normal(0.0, 0.02, a),
                wv=lin(c, a), bv=rng.normal(0.0, 0.02, a),
                wo=lin(a, c), bo=rng.normal(0.0, 0.02, c),
                wup=lin(c, f), bup=rng.normal(0.0, 0.02, f),
                wdown=lin(f, c), bdown=rng.normal(0.0, 0.02, c),
                ln1_g=np.ones(c), ln1_b=np.zeros(c),
                ln2_g=np.ones(c), ln2_b=np.zeros(c),
            )
        )
    model = ToyTransformer(
        embed=rng.normal(0.0, 1.0, size=(v, c)),
        layers=layers,
        final_ln_g=np.ones(c),
        final_ln_b=np.zeros(c),
        head_w=lin(c, v),
        head_b=np.zeros(v),
        head_dim=config.head_dim,
        max_seq_len=config.max_seq_len,
        causal=config.causal,
    )
    chain = MarkovChain(rng, v)
    calib = chain.sample(config.calib_n, config.calib_t)
    evalb = chain.sample(config.eval_n, config.eval_t)
    return model, calib, evalb


# ---------------------------------------------------------------------------
# Persistence (ModelManifest + TensorFile)
# ---------------------------------------------------------------------------


def _manifest_for(model: ToyTransformer) -> ModelManifest:
    heads = [model.heads_at(i) for i in range(model.num_layers)]
    return ModelManifest(
        layers=model.num_layers,
        embed_dim=model.embed_dim,
        heads=max(heads) if heads else 0,
        head_dim=model.head_dim,
        ffn_dim=max((model.neurons_at(i) for i in range(model.num_layers)), default=0),
        vocab=model.vocab,
        max_seq_len=model.max_seq_len,
        causal=model.causal,
        layer_heads=heads,
        layer_neurons=[model.neurons_at(i) for i in range(model.num_layers)],
    )


def model_tensors(model: ToyTransformer) -> dict[str, np.ndarray]:
    tensors = {"embed": model.embed}
    for i, lp in enumerate(model.layers):
        p = f"layers.{i}."
        tensors.update(
            {
                p + "wq": lp.wq, p + "bq": lp.bq,
                p + "wk": lp.wk, p + "bk": lp.bk,
                p + "wv": lp.wv, p + "bv": lp.bv,
                p + "wo": lp.wo, p + "bo": lp.bo,
                p + "wup": lp.wup, p + "bup": lp.bup,
                p + "wdown": lp.wdown, p + "bdown": lp.bdown,
                p + "ln1.g": lp.ln1_g, p + "ln1.b": lp.ln1_b,
                p + "ln2.g": lp.ln2_g, p + "ln2.b": lp.ln2_b,
            }
        )
    tensors["final_ln.g"] = model.final_ln_g
    tensors["final_ln.b"] = model.final_ln_b
    tensors["head.w"] = model.head_w
    tensors["head.b"] = model.head_b
    return {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}


def save_model(model: ToyTransformer, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_for(model)
    (directory / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    write_tensors(directory / "tensors.bin", model_tensors(model))


def load_model(directory) -> ToyTransformer:
    directory = Path(directory)
    manifest = ModelManifest.from_json((directory / "manifest.json").read_text(encoding="utf-8"))
    tensors = read_tensors(directory / "tensors.bin")
    manifest.validate_tensors(tensors)

    layers = []
    for i in range(manifest.layers):
        p = f"layers.{i}."
        layers.append(
            LayerParams(
                wq=tensors[p + "wq"], bq=tensors[p + "bq"],
                wk=tensors[p + "wk"], bk=tensors[p + "bk"],
                wv=tensors[p + "wv"], bv=tensors[p + "bv"],
                wo=tensors[p + "wo"], bo=tensors[p + "bo"],
                wup=tensors[p + "wup"], bup=tensors[p + "bup"],
                wdown=tensors[p + "wdown"], bdown=tensors[p + "bdown"],
                ln1_g=tensors[p + "ln1.g"], ln1_b=tensors[p + "ln1.b"],
                ln2_g=tensors[p + "ln2.g"], ln2_b=tensors[p + "ln2.b"],
            )
        )
    return ToyTransformer(
        embed=tensors["embed"],
        layers=layers,
        final_ln_g=tensors["final_ln.g"],
        final_ln_b=tensors["final_ln.b"],
        head_w=tensors["head.w"],
        head_b=tensors["head.b"],
        head_dim=manifest.head_dim,
        max_seq_len=manifest.max_seq_len,
        causal=manifest.causal,
    )


def copy_model(model: ToyTransformer) -> ToyTransformer:
    return copy.deepcopy(model)
