"""Straight-line reimplementation of the toy transformer forward math.

Deliberately structured nothing like the library: per-sequence and
per-position loops, per-head slices, stdlib math for the scalar pieces.
Used as an independent oracle for logits and perplexity.
"""

import math

import numpy as np

LN_EPS = 1e-5


def _layer_norm_vec(vec, g, b):
    mu = float(np.mean(vec))
    var = float(np.mean((vec - mu) ** 2))
    return g * (vec - mu) / math.sqrt(var + LN_EPS) + b


def _softmax_vec(vec):
    m = float(np.max(vec))
    e = np.exp(vec - m)
    return e / float(np.sum(e))


def _gelu_scalar(z):
    return 0.5 * z * (1.0 + math.erf(z / math.sqrt(2.0)))


def reference_forward(model, tokens):
    """Logits computed position by position and head by head."""
    tokens = np.asarray(tokens)
    n_seq, t_len = tokens.shape
    d = model.head_dim
    logits = np.zeros((n_seq, t_len, model.vocab))

    for s in range(n_seq):
        x = np.array([model.embed[tok] for tok in tokens[s]])  # (T, C)
        for lp in model.layers:
            h1 = np.array([_layer_norm_vec(x[i], lp.ln1_g, lp.ln1_b) for i in range(t_len)])
            width = lp.wo.shape[0]
            heads = width // d
            attn_in = np.zeros((t_len, width))
            for h in range(heads):
                cols = slice(h * d, (h + 1) * d)
                q = h1 @ lp.wq[:, cols] + lp.bq[cols]
                k = h1 @ lp.wk[:, cols] + lp.bk[cols]
                v = h1 @ lp.wv[:, cols] + lp.bv[cols]
                for i in range(t_len):
                    scores = np.array([float(q[i] @ k[j]) / math.sqrt(d) for j in range(t_len)])
                    if model.causal:
                        scores[i + 1 :] = -np.inf
                    weights = _softmax_vec(scores)
                    attn_in[i, cols] = sum(weights[j] * v[j] for j in range(t_len))
            for i in range(t_len):
                x[i] = x[i] + attn_in[i] @ lp.wo + lp.bo

            h2 = np.array([_layer_norm_vec(x[i], lp.ln2_g, lp.ln2_b) for i in range(t_len)])
            for i in range(t_len):
                z = h2[i] @ lp.wup + lp.bup
                u = np.array([_gelu_scalar(zz) for zz in z])
                x[i] = x[i] + u @ lp.wdown + lp.bdown

        for i in range(t_len):
            h = _layer_norm_vec(x[i], model.final_ln_g, model.final_ln_b)
            logits[s, i] = h @ model.head_w + model.head_b
    return logits


def reference_perplexity(model, tokens, targets):
    """exp of the mean token cross-entropy, via the straight-line forward."""
    logits = reference_forward(model, tokens)
    tokens = np.asarray(tokens)
    total = 0.0
    count = 0
    for s in range(tokens.shape[0]):
        for i in range(tokens.shape[1]):
            row = logits[s, i]
            m = float(np.max(row))
            logz = m + math.log(float(np.sum(np.exp(row - m))))
            total += logz - row[targets[s, i]]
            count += 1
    return math.exp(total / count)
