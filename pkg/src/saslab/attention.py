"""Causal self-attention: MHA/MQA/GQA projections plus simulated attention heads.

The expanded ("simulated") layer runs, per layer::

    x -> base Q/K/V projections (KV heads repeated up to n_heads)
      -> head expansion of Q, K, V  (conv over the head axis, H -> sim_heads)
      -> feature expansion of Q, K  (MLP over the feature axis, D -> sim_head_dim)
      -> causal scaled dot-product attention per simulated head
      -> group-averaged output projection (sim_heads / H groups share W_O)

With ``expand=False`` the layer is ordinary attention of the base variant.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .numcore import (
    Tensor,
    add,
    contiguous,
    conv1d_heads,
    linear,
    matmul,
    mean_axis,
    relu,
    repeat_axis,
    reshape,
    softmax_lastdim,
    transpose,
)

BASE_VARIANTS = ("mha", "mqa", "gqa")
MASK_VALUE = -1e9


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int
    head_dim: int = None
    sim_heads: int = None
    sim_head_dim: int = None
    kernel_size: int = 1
    base_variant: str = "mha"
    kv_heads: int = None
    expand: bool = False
    # "expanded": logits scaled by 1/sqrt(sim_head_dim); "base": by 1/sqrt(head_dim)
    scale_dim: str = "expanded"
    expansion_init: str = "default"
    freeze_expansion: bool = False

    def __post_init__(self):
        if self.n_heads is None or self.n_heads < 1:
            raise ConfigError(f"n_heads must be positive, got {self.n_heads}", key="n_heads")
        if self.head_dim is None:
            if self.d_model % self.n_heads:
                raise ConfigError(
                    f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}", key="n_heads")
            self.head_dim = self.d_model // self.n_heads
        if self.sim_heads is None:
            self.sim_heads = 3 * self.n_heads if self.expand else self.n_heads
        if self.sim_head_dim is None:
            self.sim_head_dim = self.head_dim * 3 // 2 if self.expand else self.head_dim
        if self.base_variant not in BASE_VARIANTS:
            raise ConfigError(f"unknown base_variant {self.base_variant!r}", key="base_variant")
        if self.kv_heads is None:
            if self.base_variant == "gqa":
                raise ConfigError("gqa needs kv_heads", key="kv_heads")
            self.kv_heads = self.n_heads if self.base_variant == "mha" else 1
        self.validate()

    def validate(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model={self.d_model} != n_heads*head_dim={self.n_heads}*{self.head_dim}", key="head_dim")
        if self.head_dim < 1:
            raise ConfigError("head_dim must be positive", key="head_dim")
        if self.sim_heads < self.n_heads or self.sim_heads % self.n_heads:
            raise ConfigError(
                f"sim_heads={self.sim_heads} must be a positive multiple of n_heads={self.n_heads}",
                key="sim_heads")
        if self.sim_head_dim < self.head_dim:
            raise ConfigError(
                f"sim_head_dim={self.sim_head_dim} must be >= head_dim={self.head_dim}", key="sim_head_dim")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}", key="kernel_size")
        if self.kv_heads < 1 or self.n_heads % self.kv_heads:
            raise ConfigError(
                f"kv_heads={self.kv_heads} must divide n_heads={self.n_heads}", key="kv_heads")
        if self.base_variant == "mha" and self.kv_heads != self.n_heads:
            raise ConfigError("mha requires kv_heads == n_heads", key="kv_heads")
        if self.base_variant == "mqa" and self.kv_heads != 1:
            raise ConfigError("mqa requires kv_heads == 1", key="kv_heads")
        if self.scale_dim not in ("expanded", "base"):
            raise ConfigError(f"scale_dim must be 'expanded' or 'base', got {self.scale_dim!r}",
                              key="scale_dim")
        if self.expansion_init not in ("default", "identity"):
            raise ConfigError(f"unknown expansion_init {self.expansion_init!r}", key="expansion_init")

    @property
    def num_groups(self):
        return self.sim_heads // self.n_heads if self.expand else 1

    @property
    def qk_dim(self):
        return self.sim_head_dim if self.expand else self.head_dim

    @property
    def softmax_scale(self):
        dim = self.qk_dim if self.scale_dim == "expanded" else self.head_dim
        return 1.0 / math.sqrt(dim)


def identity_config(d_model, n_heads, base_variant="mha", kv_heads=None):
    """Expansion switched on but configured to collapse exactly to the base layer."""
    return AttentionConfig(d_model=d_model, n_heads=n_heads, sim_heads=n_heads,
                           sim_head_dim=d_model // n_heads, kernel_size=1,
                           base_variant=base_variant, kv_heads=kv_heads, expand=True,
                           expansion_init="identity", freeze_expansion=True)


# ---------------------------------------------------------------------------
# parameters

EXPANSION_TAGS = ("_head1.", "_head2.", "_feat1.", "_feat2.")


def is_expansion_param(name):
    return any(tag in name for tag in EXPANSION_TAGS)


def param_shapes(cfg):
    """Ordered ``{name: shape}`` for one attention layer."""
    C, H, D, kv = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.kv_heads
    shapes = {
        "wq": (C, H * D), "bq": (H * D,),
        "wk": (C, kv * D), "bk": (kv * D,),
        "wv": (C, kv * D), "bv": (kv * D,),
        "wo": (H * D, H * D), "bo": (H * D,),
    }
    if cfg.expand:
        Hs, Ds, k = cfg.sim_heads, cfg.sim_head_dim, cfg.kernel_size
        for s in "qkv":
            shapes[f"{s}_head1.w"] = (Hs, H, k)
            shapes[f"{s}_head1.b"] = (Hs,)
            shapes[f"{s}_head2.w"] = (Hs, Hs, k)
            shapes[f"{s}_head2.b"] = (Hs,)
        for s in "qk":
            shapes[f"{s}_feat1.w"] = (Ds, D)
            shapes[f"{s}_feat1.b"] = (Ds,)
            shapes[f"{s}_feat2.w"] = (Ds, Ds)
            shapes[f"{s}_feat2.b"] = (Ds,)
    return shapes


def extra_param_count(cfg):
    """Weights added by head/feature expansion for one layer (biases excluded)."""
    if not cfg.expand:
        return 0
    H, Hs, D, Ds, k = cfg.n_heads, cfg.sim_heads, cfg.head_dim, cfg.sim_head_dim, cfg.kernel_size
    return k * (H * Hs + Hs * Hs) * 3 + (D * Ds + Ds * Ds) * 2


def extra_bias_count(cfg):
    if not cfg.expand:
        return 0
    return 2 * cfg.sim_heads * 3 + 2 * cfg.sim_head_dim * 2


def name_rng(seed, name):
    """Independent generator per (seed, parameter name).

    Tensors that share a name and shape get identical values across variants,
    which keeps variant comparisons on matched initializations.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _init_expansion(name, shape, cfg, rng, std):
    identity = cfg.expansion_init == "identity"
    noise = 0.0 if identity else std
    w = np.zeros(shape)
    if name.endswith(".b"):
        return w
    stage = name.split("_", 1)[1][:5]
    if stage == "head1":
        # tiled identity on the centre tap: simulated head o starts as a copy of base head o mod H
        Hs, H, k = shape
        w[np.arange(Hs), np.arange(Hs) % H, (k - 1) // 2] = 1.0
    elif stage == "feat1":
        Ds, D = shape
        w[np.arange(D), np.arange(D)] = 1.0
    else:
        # second stage near zero so each residual block starts close to its first stage
        noise = 0.0 if identity else 0.1 * std
    if noise:
        w = w + rng.normal(0.0, noise, size=shape)
    return w


def init_params(cfg, seed, prefix="", std=0.02, out_std=None, dtype=np.float32):
    """Initialized attention parameters as ``{prefix + name: Tensor}``."""
    out_std = std if out_std is None else out_std
    params = {}
    for name, shape in param_shapes(cfg).items():
        full = prefix + name
        rng = name_rng(seed, full)
        if is_expansion_param(name):
            arr = _init_expansion(name, shape, cfg, rng, std)
            trainable = not cfg.freeze_expansion
        elif name.startswith("b"):
            arr = np.zeros(shape)
            trainable = True
        else:
            arr = rng.normal(0.0, out_std if name == "wo" else std, size=shape)
            trainable = True
        params[full] = Tensor(arr.astype(dtype), requires_grad=trainable, name=full)
    return params


# ---------------------------------------------------------------------------
# forward pieces


def base_qkv(x, cfg, p):
    """Project [B, T, d_model] to Q, K, V of shape [B, T, n_heads, head_dim].

    MQA/GQA produce ``kv_heads`` key/value heads that are repeated so that
    heads ``g*r .. g*r + r - 1`` (r = n_heads / kv_heads) read KV head g.
    """
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ShapeError(f"base_qkv: expected [B, T, {cfg.d_model}], got {x.shape}")
    B, T, _ = x.shape
    H, D, kv = cfg.n_heads, cfg.head_dim, cfg.kv_heads
    q = reshape(linear(x, p["wq"], p["bq"]), (B, T, H, D))
    k = reshape(linear(x, p["wk"], p["bk"]), (B, T, kv, D))
    v = reshape(linear(x, p["wv"], p["bv"]), (B, T, kv, D))
    if kv != H:
        k = repeat_axis(k, 2, H // kv)
        v = repeat_axis(v, 2, H // kv)
    return q, k, v


def head_expand(x, conv1, conv2):
    """[N, H, D] -> [N, sim_heads, D]: ``c1 = conv1(x); return conv2(relu(c1)) + c1``.

    ``conv1``/``conv2`` are (weight, bias) pairs; heads are channels, features the length axis.
    """
    x1 = conv1d_heads(x, *conv1)
    return add(conv1d_heads(relu(x1), *conv2), x1)


def feature_expand(x, lin1, lin2, stream="q"):
    """[M, D] -> [M, sim_head_dim]: ``y1 = lin1(x); return lin2(relu(y1)) + y1``.

    Weights are stored [out, in].  Only the query and key streams are expanded.
    """
    if stream not in ("q", "k"):
        raise UsageError(f"feature expansion applies to query/key streams only, not {stream!r}")
    w1, b1 = lin1
    w2, b2 = lin2
    x1 = add(matmul(x, transpose(w1, 0, 1)), b1)
    return add(add(matmul(relu(x1), transpose(w2, 0, 1)), b2), x1)


def causal_attention(q, k, v, scale=None):
    """softmax(q k^T * scale + causal mask) v per head.

    q, k: [B, heads, T, d_qk]; v: [B, heads, T, d_v] -> [B, heads, T, d_v].
    Strictly-future positions get a -1e9 logit before the softmax.
    """
    if q.shape[:3] != k.shape[:3] or q.shape[:3] != v.shape[:3] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    q, k, v = contiguous(q), contiguous(k), contiguous(v)
    scores = matmul(q, transpose(k, 2, 3)) * scale
    T = scores.shape[-1]
    mask = np.triu(np.full((T, T), MASK_VALUE, dtype=scores.dtype), 1)
    scores = add(scores, mask)
    return matmul(softmax_lastdim(scores), v)


def concat_project(h, wo, bo):
    """Standard head merge: [B, H, T, D] -> concat -> W_O -> [B, T, H*D]."""
    B, H, T, D = h.shape
    return linear(reshape(transpose(h, 1, 2), (B, T, H * D)), wo, bo)


def peaa_aggregate(h, wo, bo, n_heads):
    """Group-averaged projection of simulated head outputs.

    h: [B, sim_heads, T, D].  Heads are split in order into G = sim_heads / n_heads
    groups of ``n_heads`` consecutive heads; each group's concatenation goes
    through the shared ``wo``/``bo`` and the G results are averaged.
    """
    B, Hs, T, D = h.shape
    if Hs % n_heads:
        raise ConfigError(f"{Hs} simulated heads do not split into groups of {n_heads}", key="sim_heads")
    G = Hs // n_heads
    grouped = reshape(transpose(h, 1, 2), (B, T, G, n_heads * D))
    return mean_axis(linear(grouped, wo, bo), axis=2)


def _expand_heads(t, p, stream):
    BT = t.shape[0] * t.shape[1]
    x = reshape(t, (BT,) + t.shape[2:])
    return head_expand(x, (p[f"{stream}_head1.w"], p[f"{stream}_head1.b"]),
                       (p[f"{stream}_head2.w"], p[f"{stream}_head2.b"]))


def _expand_features(t, p, stream):
    N, Hs, D = t.shape
    y = feature_expand(reshape(t, (N * Hs, D)), (p[f"{stream}_feat1.w"], p[f"{stream}_feat1.b"]),
                       (p[f"{stream}_feat2.w"], p[f"{stream}_feat2.b"]), stream=stream)
    return y


def sas_forward(x, cfg, p):
    """Attention layer forward, [B, T, d_model] -> [B, T, d_model].

    ``p`` maps local parameter names (see ``param_shapes``) to tensors.
    """
    q, k, v = base_qkv(x, cfg, p)
    B, T, H, D = q.shape
    if not cfg.expand:
        h = causal_attention(transpose(q, 1, 2), transpose(k, 1, 2), transpose(v, 1, 2),
                             scale=cfg.softmax_scale)
        return concat_project(h, p["wo"], p["bo"])

    Hs, Ds = cfg.sim_heads, cfg.sim_head_dim
    qh = reshape(_expand_features(_expand_heads(q, p, "q"), p, "q"), (B, T, Hs, Ds))
    kh = reshape(_expand_features(_expand_heads(k, p, "k"), p, "k"), (B, T, Hs, Ds))
    vh = reshape(_expand_heads(v, p, "v"), (B, T, Hs, D))
    h = causal_attention(transpose(qh, 1, 2), transpose(kh, 1, 2), transpose(vh, 1, 2),
                         scale=cfg.softmax_scale)
    return peaa_aggregate(h, p["wo"], p["bo"], H)


def mha_forward(x, n_heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Plain causal multi-head attention layer with explicit weights."""
    B, T, C = x.shape
    D = wq.shape[1] // n_heads

    def heads(w, b):
        return transpose(reshape(linear(x, w, b), (B, T, n_heads, D)), 1, 2)

    h = causal_attention(heads(wq, bq), heads(wk, bk), heads(wv, bv))
    return concat_project(h, wo, bo)


def local_params(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def as_tensors(arrays, dtype=np.float32, requires_grad=False):
    return {k: Tensor(np.asarray(v), requires_grad=requires_grad, name=k, dtype=dtype)
            for k, v in arrays.items()}
