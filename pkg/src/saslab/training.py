"""AdamW + warmup/cosine schedule training loop on a byte-level corpus."""

import csv
import logging
import math
import os
import sysconfig
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import checkpoint
from . import config as cfgmod
from . import model as M
from .errors import ConfigError, NumericError
from .numcore import backward, no_grad

log = logging.getLogger(__name__)

RUN_CSV_HEADER = ["step", "split", "loss", "ppl", "lr", "tokens", "wall_ms"]
BUILTIN_CORPUS = "builtin:stdlib"


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    warmup_steps: int = None  # default: 2% of total_steps
    total_steps: int = 1000
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 8
    eval_seed: int = 0
    val_fraction: float = 0.1
    save_checkpoint: bool = True

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.02 * self.total_steps))
        self.betas = tuple(float(b) for b in self.betas)
        for key in ("total_steps", "batch_size", "seq_len", "eval_interval", "eval_batches"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"warmup_steps={self.warmup_steps} must be below total_steps={self.total_steps}",
                key="warmup_steps")
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max and lr_max > 0", key="lr_max")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}", key="betas")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)", key="val_fraction")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive", key="clip_norm")


@dataclass
class RunRecord:
    step: int
    split: str
    loss: float
    ppl: float
    lr: float
    tokens: int
    wall_ms: float

    @classmethod
    def make(cls, step, split, loss, lr, tokens, wall_ms):
        return cls(step, split, float(loss), math.exp(loss), float(lr), int(tokens), float(wall_ms))

    def row(self):
        return [self.step, self.split, repr(self.loss), f"{self.ppl:.6g}", repr(self.lr),
                self.tokens, f"{self.wall_ms:.3f}"]


def read_run_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [RunRecord(int(r["step"]), r["split"], float(r["loss"]), float(r["ppl"]),
                          float(r["lr"]), int(r["tokens"]), float(r["wall_ms"])) for r in reader]


# ---------------------------------------------------------------------------
# schedule / optimizer


def cosine_lr(step, cfg):
    """Linear warmup to lr_max, then cosine decay to lr_min at total_steps."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= cfg.total_steps:
        return cfg.lr_min
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    w = 0.5 * (1.0 + math.cos(math.pi * frac))
    # convex combination keeps the endpoints and the midpoint exact in floating point
    return cfg.lr_max * w + cfg.lr_min * (1.0 - w)


def clip_grad_norm(grads, max_norm=1.0):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    ``grads`` is a dict or sequence of arrays.  Returns the norm before clipping.
    """
    arrays = list(grads.values()) if isinstance(grads, dict) else list(grads)
    total = 0.0
    for g in arrays:
        g64 = g.astype(np.float64, copy=False)
        total += float(np.dot(g64.ravel(), g64.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm:
        ratio = norm / max_norm
        for g in arrays:
            g /= ratio
    return norm


def decays(name, shape):
    """Weight decay applies to matrix/conv weights, not norms, biases or embedding tables."""
    return len(shape) >= 2 and name not in ("wte", "wpe")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params):
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params, grads, state, lr, cfg):
    """One AdamW update of ``params`` (name -> Tensor) in place.

    Decoupled weight decay ``p *= 1 - lr * wd`` precedes the bias-corrected
    adaptive step.  Any non-finite gradient aborts the step before anything
    is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}", name=name)
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name].data
        if cfg.weight_decay and decays(name, p.shape):
            p *= 1.0 - lr * cfg.weight_decay
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# data


def stdlib_corpus(size=1_000_000):
    """About ``size`` bytes of Python source from the running interpreter's stdlib.

    Files are taken in sorted order, so the corpus is fixed for a given Python build.
    """
    root = sysconfig.get_paths()["stdlib"]
    chunks, total = [], 0
    for name in sorted(os.listdir(root)):
        if not name.endswith(".py"):
            continue
        with open(os.path.join(root, name), "rb") as fh:
            data = fh.read()
        chunks.append(data)
        total += len(data)
        if total >= size:
            break
    return b"".join(chunks)[:size]


def load_corpus(path):
    if path in (None, "", BUILTIN_CORPUS):
        return stdlib_corpus()
    with open(path, "rb") as fh:
        return fh.read()


@dataclass
class DatasetView:
    """Byte corpus split into a leading train region and a trailing validation region."""

    train: np.ndarray
    val: np.ndarray

    @classmethod
    def from_bytes(cls, corpus, val_fraction=0.1):
        data = np.frombuffer(bytes(corpus), dtype=np.uint8)
        cut = int(len(data) * (1.0 - val_fraction))
        return cls(train=data[:cut], val=data[cut:])

    def split(self, name):
        return self.train if name == "train" else self.val


def sample_batch(ds, batch_size, seq_len, rng, split="train"):
    """Uniform random contiguous windows; targets are inputs shifted by one."""
    data = ds.split(split)
    if len(data) < seq_len + 1:
        raise ConfigError(f"{split} split has {len(data)} bytes, need at least seq_len+1={seq_len + 1}",
                          key="seq_len")
    starts = rng.integers(0, len(data) - seq_len, size=batch_size)
    windows = sliding_window_view(data, seq_len + 1)[starts].astype(np.int64)
    return windows[:, :-1], windows[:, 1:]


def fixed_val_batches(ds, cfg):
    rng = np.random.default_rng([cfg.eval_seed, 0x5EED])
    return [sample_batch(ds, cfg.batch_size, cfg.seq_len, rng, split="val") for _ in range(cfg.eval_batches)]


def evaluate(params, model_cfg, batches):
    """Mean loss over ``batches`` (no graph recorded)."""
    with no_grad():
        losses = [float(M.loss_fn(x, y, params, model_cfg).data) for x, y in batches]
    return float(np.mean(np.asarray(losses, dtype=np.float64)))


# ---------------------------------------------------------------------------
# loop


class _CsvLog:
    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(RUN_CSV_HEADER)

    def write(self, rec):
        self.writer.writerow(rec.row())
        self.fh.flush()

    def close(self):
        self.fh.close()


def train(model_cfg, train_cfg, corpus_path, out_dir, step_callback=None, corpus=None):
    """Train from scratch; return the RunRecords also written to ``out_dir/run.csv``.

    Every ``eval_interval`` steps (and at the last step) a validation record is
    computed on a fixed, seed-determined batch set, together with a training
    record holding the mean training loss since the previous evaluation.
    ``step_callback(step, loss)`` is called after every optimizer step.
    """
    if train_cfg.seq_len > model_cfg.context_len:
        raise ConfigError(f"seq_len={train_cfg.seq_len} exceeds context_len={model_cfg.context_len}",
                          key="train.seq_len")
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.write_resolved(out_dir, model_cfg, train_cfg, {"data.corpus": corpus_path or BUILTIN_CORPUS})
    ds = DatasetView.from_bytes(load_corpus(corpus_path) if corpus is None else corpus,
                                train_cfg.val_fraction)
    val_batches = fixed_val_batches(ds, train_cfg)
    data_rng = np.random.default_rng([train_cfg.seed, 0xDA7A])

    params = M.init_params(model_cfg, train_cfg.seed)
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    state = AdamState.zeros(trainable)
    tokens_per_step = train_cfg.batch_size * train_cfg.seq_len

    records = []
    out_csv = os.path.join(out_dir, "run.csv")
    sink = _CsvLog(out_csv + ".part")
    t0 = time.perf_counter()
    recent = []

    def emit(step):
        wall = (time.perf_counter() - t0) * 1000.0
        lr = cosine_lr(step, train_cfg)
        if recent:
            rec = RunRecord.make(step, "train", float(np.mean(recent)), lr, step * tokens_per_step, wall)
            records.append(rec)
            sink.write(rec)
            recent.clear()
        val = evaluate(params, model_cfg, val_batches)
        rec = RunRecord.make(step, "val", val, lr, step * tokens_per_step, wall)
        records.append(rec)
        sink.write(rec)
        log.info("step %d val loss %.4f", step, val)

    def extra_state():
        arrays = {f"opt.m.{k}": a for k, a in state.m.items()}
        arrays.update({f"opt.v.{k}": a for k, a in state.v.items()})
        return arrays

    try:
        for step in range(train_cfg.total_steps + 1):
            if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
                emit(step)
            if step == train_cfg.total_steps:
                break
            x, y = sample_batch(ds, train_cfg.batch_size, train_cfg.seq_len, data_rng)
            for p in trainable.values():
                p.grad = None
            loss = M.loss_fn(x, y, params, model_cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                diag = os.path.join(out_dir, f"diverged_step{step}.ckpt")
                checkpoint.save_model(diag, params, model_cfg, train_cfg, {"step": step})
                raise NumericError(f"loss became {value} at step {step}; state saved to {diag}")
            backward(loss)
            grads = {k: p.grad for k, p in trainable.items()}
            clip_grad_norm(grads, train_cfg.clip_norm)
            adamw_step(trainable, grads, state, cosine_lr(step, train_cfg), train_cfg)
            recent.append(value)
            if step_callback is not None:
                step_callback(step, value)
    finally:
        sink.close()
    os.replace(out_csv + ".part", out_csv)
    if train_cfg.save_checkpoint:
        checkpoint.save_model(os.path.join(out_dir, "final.ckpt"), params, model_cfg, train_cfg,
                              {"step": train_cfg.total_steps, "adam_step": state.step},
                              extra_arrays=extra_state())
    return records
