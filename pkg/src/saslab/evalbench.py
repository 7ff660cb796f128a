"""Experiment drivers: sweeps, variant comparison, timing, gradient check, parameter audit.

Sweep output layout::

    <out_root>/<name>/<axis>=<value>/seed=<s>/run.csv     (+ config.resolved, final.ckpt)
    <out_root>/<name>/summary.csv

A run whose ``run.csv`` already exists is skipped, so interrupted sweeps resume.
The summary is always recomputed from the per-run files on disk.
"""

import csv
import dataclasses
import math
import os
import resource
import statistics
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import config as cfgmod
from . import model as M
from . import training as T
from . import verify
from .errors import ConfigError
from .numcore import backward, no_grad, relu_margin

AXES = ("head_count", "kernel_size", "expansion_ratio", "variant")
SUMMARY_HEADER = ["axis_value", "seed", "final_loss", "final_ppl", "params_total",
                  "params_extra_w", "params_extra_b", "wall_ms_median"]
MAX_LAYERS = 4
MAX_D_MODEL = 128


@dataclass
class SweepSpec:
    axis: str
    values: list
    model: M.ModelConfig
    train: T.TrainConfig
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    name: str = "sweep"


def apply_axis(model_cfg, axis, value):
    """Return a copy of ``model_cfg`` with one sweep value applied."""
    a = model_cfg.attention
    if axis == "head_count":
        n = int(value)
        if n < 1 or model_cfg.d_model % n:
            raise ConfigError(f"head_count {value} does not divide d_model={model_cfg.d_model}", key="sweep.values")
        ratio = a.sim_heads // a.n_heads
        feat = a.sim_head_dim / a.head_dim
        kv = n if a.base_variant == "mha" else (1 if a.base_variant == "mqa" else max(1, n * a.kv_heads // a.n_heads))
        new = dataclasses.replace(a, n_heads=n, head_dim=model_cfg.d_model // n, sim_heads=n * ratio,
                                  sim_head_dim=int(round(model_cfg.d_model // n * feat)), kv_heads=kv)
    elif axis == "kernel_size":
        new = dataclasses.replace(a, kernel_size=int(value))
    elif axis == "expansion_ratio":
        r = int(float(value))
        if r < 1 or float(value) != r:
            raise ConfigError(f"expansion_ratio must be a positive integer, got {value}", key="sweep.values")
        new = dataclasses.replace(a, sim_heads=a.n_heads * r, expand=True)
    elif axis == "variant":
        new = _variant_attention(a, str(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}", key="sweep.axis")
    return dataclasses.replace(model_cfg, attention=new)


def _variant_attention(a, variant):
    implied = cfgmod.variant_fields(variant)
    identity = implied.pop("_identity", False)
    base = implied["base_variant"]
    if base == "mha":
        kv = a.n_heads
    elif base == "mqa":
        kv = 1
    else:
        kv = a.kv_heads if a.base_variant == "gqa" else max(1, a.n_heads // 2)
    kw = dict(base_variant=base, kv_heads=kv, expand=implied["expand"],
              expansion_init="default", freeze_expansion=False)
    if identity:
        kw.update(sim_heads=a.n_heads, sim_head_dim=a.head_dim, kernel_size=1,
                  expansion_init="identity", freeze_expansion=True)
    elif not implied["expand"]:
        kw.update(sim_heads=a.n_heads, sim_head_dim=a.head_dim)
    elif not a.expand or a.expansion_init == "identity":
        kw.update(sim_heads=3 * a.n_heads, sim_head_dim=a.head_dim * 3 // 2)
    return dataclasses.replace(a, **kw)


def validate_spec(spec):
    """Resolve every (value -> config) up front; raises ConfigError before any run starts."""
    if spec.axis not in AXES:
        raise ConfigError(f"unknown sweep axis {spec.axis!r}", key="sweep.axis")
    if not spec.values:
        raise ConfigError("sweep needs at least one value", key="sweep.values")
    if not spec.seeds:
        raise ConfigError("sweep needs at least one seed", key="sweep.seeds")
    resolved = {}
    for v in spec.values:
        try:
            cfg = apply_axis(spec.model, spec.axis, v)
        except ConfigError as exc:
            raise ConfigError(f"invalid sweep value {v!r}: {exc}", key="sweep.values") from None
        _check_desk_scale(cfg)
        resolved[str(v)] = cfg
    return resolved


def _check_desk_scale(cfg):
    if cfg.n_layers > MAX_LAYERS or cfg.d_model > MAX_D_MODEL:
        raise ConfigError(f"sweeps are limited to <= {MAX_LAYERS} layers and d_model <= {MAX_D_MODEL}",
                          key="model.d_model")


def run_dir(out_root, name, axis, value, seed):
    return os.path.join(out_root, name, f"{axis}={value}", f"seed={seed}")


def _run_job(job):
    model_cfg, train_cfg, corpus_path, directory = job
    T.train(model_cfg, train_cfg, corpus_path, directory)
    return directory


def _execute(name, axis, configs, train_cfg, seeds, corpus_path, out_root, workers=1):
    jobs = []
    for value, cfg in configs.items():
        for s in seeds:
            d = run_dir(out_root, name, axis, value, s)
            if os.path.exists(os.path.join(d, "run.csv")):
                continue
            jobs.append((cfg, dataclasses.replace(train_cfg, seed=int(s)), corpus_path, d))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_job, jobs))
    else:
        for job in jobs:
            _run_job(job)
    return summarize(out_root, name, axis, list(configs), seeds)


def run_sweep(spec, out_root, corpus_path=None, workers=1):
    """Train every (value, seed) pair and write ``summary.csv``; returns the summary rows."""
    configs = validate_spec(spec)
    os.makedirs(os.path.join(out_root, spec.name), exist_ok=True)
    return _execute(spec.name, spec.axis, configs, spec.train, spec.seeds, corpus_path, out_root, workers)


def _step_ms(records):
    val = [r for r in records if r.split == "val"]
    rates = [(b.wall_ms - a.wall_ms) / (b.step - a.step) for a, b in zip(val, val[1:]) if b.step > a.step]
    return statistics.median(rates) if rates else 0.0


def summarize_run(directory):
    """One summary row computed from a run directory's run.csv and config.resolved."""
    records = T.read_run_csv(os.path.join(directory, "run.csv"))
    final = [r for r in records if r.split == "val"][-1]
    cfg = cfgmod.model_from_flat(cfgmod.parse_file(os.path.join(directory, "config.resolved")))
    counts = M.count_params_for_config(cfg)
    return {
        "final_loss": final.loss,
        "final_ppl": final.ppl,
        "params_total": counts["total"],
        "params_extra_w": counts["attention_extra_weights"],
        "params_extra_b": counts["attention_extra_biases"],
        "wall_ms_median": _step_ms(records),
    }


def summarize(out_root, name, axis, values, seeds):
    rows = []
    for v in values:
        per_seed = []
        for s in seeds:
            row = {"axis_value": str(v), "seed": str(s)}
            row.update(summarize_run(run_dir(out_root, name, axis, v, s)))
            per_seed.append(row)
        rows.extend(per_seed)
        med = {"axis_value": str(v), "seed": "median"}
        for key in SUMMARY_HEADER[2:]:
            med[key] = statistics.median(r[key] for r in per_seed)
        rows.append(med)
    path = os.path.join(out_root, name, "summary.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in SUMMARY_HEADER])
    return rows


def read_summary(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def compare_variants(configs, train_cfg, corpus_path=None, out_root="out", seeds=(0, 1, 2),
                     name="compare", workers=1):
    """Train each labelled config on identical data order/eval batches; return median rows.

    ``configs`` maps a label to a ModelConfig.  All configs must share vocab and context.
    """
    configs = dict(configs)
    first = next(iter(configs.values()))
    for label, cfg in configs.items():
        if cfg.vocab_size != first.vocab_size or cfg.context_len != first.context_len:
            raise ConfigError(f"config {label!r} differs in vocab_size/context_len", key="model.vocab_size")
    rows = _execute(name, "variant", configs, train_cfg, list(seeds), corpus_path, out_root, workers)
    return [r for r in rows if r["seed"] == "median"], rows


# ---------------------------------------------------------------------------
# timing, gradient check, audit


def timing_report(model_cfg, train_cfg=None, steps=20, warmup=3, seed=0):
    """Median wall time of a full train step (forward, backward, clip, AdamW) on random bytes."""
    train_cfg = train_cfg or T.TrainConfig()
    rng = np.random.default_rng(seed)
    params = M.init_params(model_cfg, seed)
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    state = T.AdamState.zeros(trainable)
    B, L = train_cfg.batch_size, min(train_cfg.seq_len, model_cfg.context_len)
    times = []
    tracemalloc.start()
    try:
        for i in range(warmup + steps):
            tok = rng.integers(0, model_cfg.vocab_size, size=(B, L + 1))
            t0 = time.perf_counter()
            for p in trainable.values():
                p.grad = None
            loss = M.loss_fn(tok[:, :-1], tok[:, 1:], params, model_cfg)
            backward(loss)
            grads = {k: p.grad for k, p in trainable.items()}
            T.clip_grad_norm(grads, train_cfg.clip_norm)
            T.adamw_step(trainable, grads, state, train_cfg.lr_max, train_cfg)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1000.0)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return {
        "median_step_ms": statistics.median(times),
        "steps": steps,
        "warmup": warmup,
        "peak_traced_bytes": peak,
        "max_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        "tokens_per_step": B * L,
    }


# Central differences at h=1e-5 on a loss of order ln(vocab) carry ~1e-10 of
# roundoff; gradients below this floor are judged on abs error <= tol*floor.
GRAD_REL_FLOOR = 1e-5
# A probe of size h moves a relu input by at most ~h * |activation|; inputs
# closer than this to zero would put the kink inside the stencil.
KINK_MARGIN = 1e-4
KINK_ATTEMPTS = 50


def _check_batch(model_cfg, p64, seed, batch, seq_len, margin):
    """Token batch whose relu inputs sit furthest from zero.

    Draws follow a fixed sequence; the search stops early once every input clears ``margin``.
    Returns ``(tokens, attempt, distance)``.
    """
    best = None
    for attempt in range(KINK_ATTEMPTS):
        rng = np.random.default_rng([seed, 17, attempt])
        tok = rng.integers(0, model_cfg.vocab_size, size=(batch, seq_len + 1))
        with no_grad(), relu_margin() as m:
            M.loss_fn(tok[:, :-1], tok[:, 1:], p64, model_cfg)
        if best is None or m[0] > best[2]:
            best = (tok, attempt, m[0])
        if m[0] >= margin:
            break
    return best


def gradient_check(model_cfg, tol=1e-4, seed=0, batch=2, seq_len=None, h=1e-5, max_entries=None,
                   floor=GRAD_REL_FLOOR, margin=KINK_MARGIN, stats=None):
    """Analytic gradients vs central differences, both on a 64-bit copy of the model.

    The expansion layers contain relus.  A central difference straddling a
    relu kink measures an average of two slopes, not the gradient, so the
    check runs on the input batch (out of a fixed sequence of draws) whose
    relu inputs sit furthest from zero.

    Returns ``(passed, reports)`` with one OracleReport per trainable tensor.
    ``stats``, if given, receives ``probed``, ``batch_attempt`` and ``relu_margin``.
    """
    seq_len = seq_len or min(6, model_cfg.context_len)
    p64 = M.cast_params(M.init_params(model_cfg, seed), np.float64)
    trainable = {k: p for k, p in p64.items() if p.requires_grad}
    tok, attempt, kink_dist = _check_batch(model_cfg, p64, seed, batch, seq_len, margin)
    x, y = tok[:, :-1], tok[:, 1:]

    backward(M.loss_fn(x, y, p64, model_cfg))
    analytic = {k: p.grad.copy() for k, p in trainable.items()}

    def loss_of(_arrays):
        with no_grad():
            return float(M.loss_fn(x, y, p64, model_cfg).data)

    entries = None
    if max_entries is not None:
        pick = np.random.default_rng([seed, 23])
        entries = {k: np.sort(pick.choice(p.size, size=min(p.size, max_entries), replace=False))
                   for k, p in trainable.items()}
    numeric = verify.finite_diff(loss_of, {k: p.data for k, p in trainable.items()}, h=h, entries=entries)

    reports = []
    for k in trainable:
        probed = ~np.isnan(numeric[k])
        reports.append(verify.compare(k, analytic[k][probed], numeric[k][probed], rtol=tol, floor=floor))
    if stats is not None:
        stats["probed"] = int(sum((~np.isnan(v)).sum() for v in numeric.values()))
        stats["batch_attempt"] = attempt
        stats["relu_margin"] = kink_dist
    return all(r.passed for r in reports), reports


def grad_check_cli(model_cfg, tolerance=1e-4, seed=0, out=print, **kwargs):
    stats = {}
    passed, reports = gradient_check(model_cfg, tol=tolerance, seed=seed, stats=stats, **kwargs)
    worst = max(reports, key=lambda r: r.max_rel_err)
    for r in reports:
        out(str(r))
    status = "PASS" if passed else "FAIL"
    out(f"{stats['probed']} entries probed; input batch #{stats['batch_attempt']}, "
        f"closest relu input {stats['relu_margin']:.2e} from its kink")
    out(f"grad-check {status}: worst parameter {worst.op} rel err {worst.max_rel_err:.3e} (tol {tolerance:g})")
    return passed, worst


def audit_params(model_cfg):
    counts = M.count_params_for_config(model_cfg)
    total = counts["total"]
    extra_w, extra_b = counts["attention_extra_weights"], counts["attention_extra_biases"]
    per_layer = attn.extra_param_count(model_cfg.attention)
    return {
        "total": total,
        "base": total - extra_w - extra_b,
        "extra_weights": extra_w,
        "extra_biases": extra_b,
        "extra_weights_per_layer": per_layer,
        "extra_weights_pct": 100.0 * extra_w / total,
        "extra_biases_pct": 100.0 * extra_b / total,
    }


def audit_params_cli(model_cfg, out=print):
    a = audit_params(model_cfg)
    att = model_cfg.attention
    out(f"attention: base={att.base_variant} expand={att.expand} heads {att.n_heads}->{att.sim_heads} "
        f"head_dim {att.head_dim}->{att.sim_head_dim} kernel={att.kernel_size} layers={model_cfg.n_layers}")
    out(f"total parameters      {a['total']:>14,}")
    out(f"base parameters       {a['base']:>14,}")
    out(f"expansion weights     {a['extra_weights']:>14,}  ({a['extra_weights_pct']:.4f}%)"
        f"  per layer {a['extra_weights_per_layer']:,}")
    out(f"expansion biases      {a['extra_biases']:>14,}  ({a['extra_biases_pct']:.4f}%)")
    return a


def perplexity(loss):
    return math.exp(loss)
