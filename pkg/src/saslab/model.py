"""Decoder-only transformer (pre-norm, GELU MLP, learned positions, byte vocabulary)."""

import math
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from .errors import ConfigError, UsageError
from .numcore import (
    Tensor,
    add,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    transpose,
)


@dataclass
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 2
    d_model: int = 64
    context_len: int = 128
    mlp_ratio: float = 4.0
    attention: attn.AttentionConfig = None
    tie_embeddings: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.attention is None:
            self.attention = attn.AttentionConfig(d_model=self.d_model, n_heads=max(1, self.d_model // 32))
        for key in ("vocab_size", "n_layers", "d_model", "context_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigError("mlp_ratio must be positive", key="mlp_ratio")
        if self.attention.d_model != self.d_model:
            raise ConfigError(
                f"attention.d_model={self.attention.d_model} differs from d_model={self.d_model}",
                key="d_model")

    @property
    def mlp_hidden(self):
        return int(round(self.mlp_ratio * self.d_model))


def param_shapes(cfg):
    """Ordered ``{name: shape}`` for the whole model."""
    C, Hm = cfg.d_model, cfg.mlp_hidden
    shapes = {"wte": (cfg.vocab_size, C), "wpe": (cfg.context_len, C)}
    for i in range(cfg.n_layers):
        shapes[f"h.{i}.ln1.w"] = (C,)
        for name, shape in attn.param_shapes(cfg.attention).items():
            shapes[f"h.{i}.attn.{name}"] = shape
        shapes[f"h.{i}.ln2.w"] = (C,)
        shapes[f"h.{i}.mlp.w1"] = (C, Hm)
        shapes[f"h.{i}.mlp.b1"] = (Hm,)
        shapes[f"h.{i}.mlp.w2"] = (Hm, C)
        shapes[f"h.{i}.mlp.b2"] = (C,)
    shapes["lnf.w"] = (C,)
    if not cfg.tie_embeddings:
        shapes["lm_head.w"] = (C, cfg.vocab_size)
    return shapes


def init_params(cfg, seed, dtype=np.float32):
    """Initialize all parameters.

    Linear and embedding weights ~ N(0, 0.02); output projections of each
    residual branch (attention W_O, MLP w2) use 0.02 / sqrt(2 * n_layers).
    Every tensor draws from its own (seed, name) stream.
    """
    std = cfg.init_std
    out_std = std / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if ".attn." in name:
            continue
        if name.endswith("ln1.w"):
            # attention parameters sit between the two norms, in declaration order
            params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)
            prefix = name[: -len("ln1.w")] + "attn."
            params.update(attn.init_params(cfg.attention, seed, prefix=prefix, std=std,
                                           out_std=out_std, dtype=dtype))
            continue
        rng = attn.name_rng(seed, name)
        if name.endswith("ln2.w") or name == "lnf.w":
            arr = np.ones(shape)
        elif name.endswith((".b1", ".b2")):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, out_std if name.endswith("mlp.w2") else std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def zeros_like_params(cfg, dtype=np.float32):
    return {name: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
            for name, shape in param_shapes(cfg).items()}


def cast_params(params, dtype, requires_grad=None):
    """Fresh leaf copies of ``params`` in ``dtype`` (used for 64-bit shadow passes)."""
    out = {}
    for k, v in params.items():
        rg = v.requires_grad if requires_grad is None else requires_grad
        out[k] = Tensor(v.data.astype(dtype), requires_grad=rg, name=k, dtype=dtype)
    return out


def forward(tokens, params, cfg):
    """Logits [B, T, vocab] for integer tokens [B, T]."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise UsageError(f"tokens must be [B, T], got shape {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.context_len:
        raise UsageError(f"sequence length {T} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise UsageError(f"token ids must lie in [0, {cfg.vocab_size})")

    x = add(embedding(params["wte"], tokens), embedding(params["wpe"], np.arange(T)))
    for i in range(cfg.n_layers):
        pre = f"h.{i}."
        local = attn.local_params(params, pre + "attn.")
        x = add(x, attn.sas_forward(layer_norm(x, params[pre + "ln1.w"]), cfg.attention, local))
        h = layer_norm(x, params[pre + "ln2.w"])
        h = linear(gelu(linear(h, params[pre + "mlp.w1"], params[pre + "mlp.b1"])),
                   params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        x = add(x, h)
    x = layer_norm(x, params["lnf.w"])
    if cfg.tie_embeddings:
        return matmul(x, transpose(params["wte"], 0, 1))
    return matmul(x, params["lm_head.w"])


def loss_fn(tokens, targets, params, cfg):
    return cross_entropy(forward(tokens, params, cfg), targets)


def _classify(named_shapes):
    total = extra_w = extra_b = 0
    for name, shape in named_shapes:
        n = int(np.prod(shape)) if len(shape) else 1
        total += n
        if attn.is_expansion_param(name):
            if name.endswith(".w"):
                extra_w += n
            else:
                extra_b += n
    return {"total": total, "attention_extra_weights": extra_w, "attention_extra_biases": extra_b}


def count_params(params):
    """Exact counts over the given arrays; a tied LM head is counted once."""
    return _classify((k, v.shape) for k, v in params.items())


def count_params_for_config(cfg):
    """Same counts as ``count_params(init_params(cfg))`` without allocating anything."""
    return _classify(param_shapes(cfg).items())
