"""Independent reference implementations used to check the production path.

Everything here works on plain float64 numpy arrays with explicit loops and
imports nothing from the autograd core or the attention module, so agreement
between the two paths is evidence rather than tautology.  Only parameter
*names* and config attributes are shared.  These routines are slow by design.
"""

import math
import re
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    op: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    worst_index: tuple

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.op}: max_abs={self.max_abs_err:.3e} "
                f"max_rel={self.max_rel_err:.3e} worst={self.worst_index}")


def compare(op, actual, expected, atol=None, rtol=None, floor=1e-6):
    """Elementwise comparison; relative error uses ``max(|a|, |e|, floor)`` as denominator.

    Passes when every given tolerance holds (``atol`` on abs error, ``rtol`` on rel error).
    """
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"{op}: shape {a.shape} vs {e.shape}")
    if a.size == 0:
        return OracleReport(op, 0.0, 0.0, True, ())
    diff = np.abs(a - e)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(e)), floor)
    diff = np.where(np.isnan(diff), np.inf, diff)
    rel = np.where(np.isnan(rel), np.inf, rel)
    max_abs, max_rel = float(diff.max()), float(rel.max())
    ok = True
    if atol is not None:
        ok = ok and max_abs <= atol
    if rtol is not None:
        ok = ok and max_rel <= rtol
    governing = rel if (rtol is not None and atol is None) else diff
    worst = np.unravel_index(int(np.argmax(governing)), a.shape)
    return OracleReport(op, max_abs, max_rel, bool(ok), tuple(int(i) for i in worst))


def _f64(v):
    """Float64 copy of an ndarray or of anything exposing ``.data`` as one."""
    if not isinstance(v, np.ndarray) and hasattr(v, "data"):
        v = v.data
    return np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitives


def oracle_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def oracle_linear(x, w_in_out, b):
    """Rows of ``x`` times [in, out] weights plus bias, by explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    rows = x.reshape(-1, x.shape[-1])
    n_in, n_out = w_in_out.shape
    out = np.zeros((rows.shape[0], n_out))
    for r in range(rows.shape[0]):
        for o in range(n_out):
            s = float(b[o]) if b is not None else 0.0
            for i in range(n_in):
                s += rows[r, i] * float(w_in_out[i, o])
            out[r, o] = s
    return out.reshape(lead + (n_out,))


def oracle_conv1d(x, w, b):
    """Sliding-window cross-correlation with (k-1)/2 zero padding, by loops."""
    x = np.asarray(x, dtype=np.float64)
    N, C, L = x.shape
    O, _, k = w.shape
    pad = (k - 1) // 2
    out = np.zeros((N, O, L))
    for n in range(N):
        for o in range(O):
            for pos in range(L):
                s = float(b[o]) if b is not None else 0.0
                for c in range(C):
                    for j in range(k):
                        src = pos + j - pad
                        if 0 <= src < L:
                            s += float(w[o, c, j]) * x[n, c, src]
                out[n, o, pos] = s
    return out


def oracle_relu(x):
    return np.where(x > 0, x, 0.0)


def oracle_head_expand(x, w1, b1, w2, b2):
    x1 = oracle_conv1d(x, w1, b1)
    return oracle_conv1d(oracle_relu(x1), w2, b2) + x1


def oracle_head_mlp(x, w1, b1, w2, b2):
    """Head expansion written as an MLP over heads at each feature position (kernel size 1).

    x: [N, H, D]; rows of the reshaped (N*D, H) matrix pass through
    Linear(H -> H') -> ReLU -> Linear(H' -> H') with the residual from the first layer.
    """
    x = np.asarray(x, dtype=np.float64)
    N, H, D = x.shape
    rows = x.transpose(0, 2, 1).reshape(N * D, H)
    a = oracle_linear(rows, w1[:, :, 0].T, b1)
    y = oracle_linear(oracle_relu(a), w2[:, :, 0].T, b2) + a
    return y.reshape(N, D, -1).transpose(0, 2, 1)


def oracle_feature_expand(x, w1, b1, w2, b2):
    """x: [M, D]; weights stored [out, in]."""
    a = oracle_linear(x, np.asarray(w1).T, b1)
    return oracle_linear(oracle_relu(a), np.asarray(w2).T, b2) + a


def oracle_softmax(row):
    row = np.asarray(row, dtype=np.float64)
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return np.array([v / s for v in e])


def oracle_causal_attention(q, k, v, scale):
    """q, k: [B, heads, T, dq]; v: [B, heads, T, dv].  Position t attends to 0..t."""
    B, Hh, T, dq = q.shape
    dv = v.shape[-1]
    out = np.zeros((B, Hh, T, dv))
    for b in range(B):
        for h in range(Hh):
            for t in range(T):
                scores = []
                for s in range(t + 1):
                    dot = 0.0
                    for d in range(dq):
                        dot += float(q[b, h, t, d]) * float(k[b, h, s, d])
                    scores.append(dot * scale)
                wts = oracle_softmax(scores)
                for s in range(t + 1):
                    out[b, h, t] += wts[s] * np.asarray(v[b, h, s], dtype=np.float64)
    return out


def oracle_peaa(h, wo, bo, n_heads, order="project_then_mean"):
    """Group-averaged output projection, either ordering.

    h: [B, sim_heads, T, D]; group g holds heads g*n_heads .. (g+1)*n_heads - 1.
    """
    B, Hs, T, D = h.shape
    G = Hs // n_heads
    concats = []
    for g in range(G):
        heads = [h[:, g * n_heads + i] for i in range(n_heads)]  # each [B, T, D]
        concats.append(np.concatenate(heads, axis=-1))            # [B, T, n_heads*D]
    if order == "project_then_mean":
        return sum(oracle_linear(c, wo, bo) for c in concats) / G
    if order == "mean_then_project":
        return oracle_linear(sum(concats) / G, wo, bo)
    raise ValueError(order)


def oracle_base_qkv(x, cfg, p):
    """Per-head projections; with shared KV, head i reads KV head i // (n_heads // kv_heads)."""
    B, T, _ = x.shape
    H, D, kv = cfg.n_heads, cfg.head_dim, cfg.kv_heads
    per_kv = H // kv
    q_all = oracle_linear(x, p["wq"], p["bq"]).reshape(B, T, H, D)
    k_src = oracle_linear(x, p["wk"], p["bk"]).reshape(B, T, kv, D)
    v_src = oracle_linear(x, p["wv"], p["bv"]).reshape(B, T, kv, D)
    k_all = np.zeros((B, T, H, D))
    v_all = np.zeros((B, T, H, D))
    for i in range(H):
        k_all[:, :, i] = k_src[:, :, i // per_kv]
        v_all[:, :, i] = v_src[:, :, i // per_kv]
    return q_all, k_all, v_all


def oracle_sas_forward(x, cfg, params, peaa_order="project_then_mean"):
    """Attention layer output for [B, T, d_model] input, straight from the equations."""
    p = {k: _f64(v) for k, v in params.items()}
    x = _f64(x)
    B, T, _ = x.shape
    H, D = cfg.n_heads, cfg.head_dim
    q, k, v = oracle_base_qkv(x, cfg, p)
    if not cfg.expand:
        h = oracle_causal_attention(q.transpose(0, 2, 1, 3), k.transpose(0, 2, 1, 3),
                                    v.transpose(0, 2, 1, 3), 1.0 / math.sqrt(D))
        return oracle_peaa(h, p["wo"], p["bo"], H)

    Hs, Ds = cfg.sim_heads, cfg.sim_head_dim

    def heads(t, s):
        return oracle_head_expand(t.reshape(B * T, H, D), p[f"{s}_head1.w"], p[f"{s}_head1.b"],
                                  p[f"{s}_head2.w"], p[f"{s}_head2.b"])

    def feats(t, s):
        return oracle_feature_expand(t.reshape(B * T * Hs, D), p[f"{s}_feat1.w"], p[f"{s}_feat1.b"],
                                     p[f"{s}_feat2.w"], p[f"{s}_feat2.b"])

    qh = feats(heads(q, "q"), "q").reshape(B, T, Hs, Ds).transpose(0, 2, 1, 3)
    kh = feats(heads(k, "k"), "k").reshape(B, T, Hs, Ds).transpose(0, 2, 1, 3)
    vh = heads(v, "v").reshape(B, T, Hs, D).transpose(0, 2, 1, 3)
    scale_dim = Ds if cfg.scale_dim == "expanded" else D
    h = oracle_causal_attention(qh, kh, vh, 1.0 / math.sqrt(scale_dim))
    return oracle_peaa(h, p["wo"], p["bo"], H, order=peaa_order)


def oracle_mha(x, n_heads, p):
    """Textbook causal MHA (concat then project) on [B, T, C]."""
    x = np.asarray(x, dtype=np.float64)
    B, T, C = x.shape
    D = p["wq"].shape[1] // n_heads

    def split(w, b):
        return oracle_linear(x, w, b).reshape(B, T, n_heads, D).transpose(0, 2, 1, 3)

    h = oracle_causal_attention(split(p["wq"], p["bq"]), split(p["wk"], p["bk"]),
                                split(p["wv"], p["bv"]), 1.0 / math.sqrt(D))
    concat = h.transpose(0, 2, 1, 3).reshape(B, T, n_heads * D)
    return oracle_linear(concat, p["wo"], p["bo"])


# ---------------------------------------------------------------------------
# whole model


def _layer_norm(x, w, eps=1e-5):
    out = np.zeros_like(x)
    flat, fo = x.reshape(-1, x.shape[-1]), out.reshape(-1, x.shape[-1])
    for r in range(flat.shape[0]):
        mu = sum(flat[r]) / flat.shape[1]
        var = sum((flat[r] - mu) ** 2) / flat.shape[1]
        fo[r] = (flat[r] - mu) / math.sqrt(var + eps) * w
    return out


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def oracle_model_forward(tokens, params, cfg):
    """Logits of the pre-norm decoder, straight-line float64."""
    p = {k: _f64(v) for k, v in params.items()}
    tokens = np.asarray(tokens)
    B, T = tokens.shape
    x = np.zeros((B, T, cfg.d_model))
    for b in range(B):
        for t in range(T):
            x[b, t] = p["wte"][tokens[b, t]] + p["wpe"][t]
    for i in range(cfg.n_layers):
        pre = f"h.{i}."
        local = {k[len(pre + "attn."):]: v for k, v in p.items() if k.startswith(pre + "attn.")}
        x = x + oracle_sas_forward(_layer_norm(x, p[pre + "ln1.w"]), cfg.attention, local)
        hid = _gelu(oracle_linear(_layer_norm(x, p[pre + "ln2.w"]), p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
        x = x + oracle_linear(hid, p[pre + "mlp.w2"], p[pre + "mlp.b2"])
    x = _layer_norm(x, p["lnf.w"])
    head = p["wte"].T if cfg.tie_embeddings else p["lm_head.w"]
    return oracle_linear(x, head, None)


def oracle_cross_entropy(logits, targets):
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, logits.shape[-1])
    targets = np.asarray(targets).reshape(-1)
    total = 0.0
    for r in range(logits.shape[0]):
        row = logits[r]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[targets[r]]
    return total / logits.shape[0]


# ---------------------------------------------------------------------------
# finite differences and parameter enumeration


def finite_diff(loss_fn, params, h=1e-5, entries=None):
    """Central-difference gradient of ``loss_fn(params) -> float`` in float64.

    ``params`` maps names to float64 arrays that are perturbed in place and
    restored.  ``entries`` optionally maps a name to the flat indices to probe;
    unprobed entries come back as NaN.
    """
    grads = {}
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise TypeError(f"finite_diff needs float64 arrays, {name} is {arr.dtype}")
        g = np.full(arr.shape, np.nan)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        idx = range(flat.size) if entries is None or name not in entries else entries[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


_PATTERNS = {
    "head_conv_w": re.compile(r"(^|\.)[qkv]_head[12]\.w$"),
    "head_conv_b": re.compile(r"(^|\.)[qkv]_head[12]\.b$"),
    "feat_lin_w": re.compile(r"(^|\.)[qk]_feat[12]\.w$"),
    "feat_lin_b": re.compile(r"(^|\.)[qk]_feat[12]\.b$"),
}


def enumerate_params(params):
    """Element counts by name pattern, from the arrays themselves."""
    counts = {key: 0 for key in _PATTERNS}
    counts["total"] = 0
    for name, arr in params.items():
        n = int(_f64(arr).size)
        counts["total"] += n
        for key, pat in _PATTERNS.items():
            if pat.search(name):
                counts[key] += n
    counts["extra_weights"] = counts["head_conv_w"] + counts["feat_lin_w"]
    counts["extra_biases"] = counts["head_conv_b"] + counts["feat_lin_b"]
    counts["base"] = counts["total"] - counts["extra_weights"] - counts["extra_biases"]
    return counts
