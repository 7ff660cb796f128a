import csv
import dataclasses
import os

import numpy as np
import pytest

from saslab import attention as A
from saslab import evalbench as EB
from saslab import model as M
from saslab import numcore as nc
from saslab import training as T
from saslab.attention import AttentionConfig
from saslab.errors import ConfigError


def base_model(expand=True, **attn):
    kw = dict(d_model=16, n_heads=2, expand=expand)
    kw.update(attn)
    return M.ModelConfig(vocab_size=256, n_layers=1, d_model=16, context_len=16, attention=AttentionConfig(**kw))


TRAIN = T.TrainConfig(total_steps=8, eval_interval=4, batch_size=2, seq_len=8, eval_batches=2)


def curves(path):
    with open(path) as fh:
        return [(r["step"], r["split"], r["loss"]) for r in csv.DictReader(fh)]


def test_head_count_sweep_bookkeeping(tmp_path, corpus_file):
    spec = EB.SweepSpec("head_count", [1, 2, 4], base_model(), TRAIN, seeds=[0, 1], name="hc")
    rows = EB.run_sweep(spec, str(tmp_path), corpus_file)
    runs = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("run.csv"))
    assert runs == [f"hc/head_count={v}/seed={s}/run.csv" for v in (1, 2, 4) for s in (0, 1)]
    with open(tmp_path / "hc" / "summary.csv") as fh:
        assert fh.readline().strip() == ",".join(EB.SUMMARY_HEADER)
    assert [r["seed"] for r in rows].count("median") == 3
    # head count changes the expanded shape: 3x heads, 1.5x per-head features
    extra = {r["axis_value"]: r["params_extra_w"] for r in rows if r["seed"] == "median"}
    for h in (1, 2, 4):
        a = EB.apply_axis(spec.model, "head_count", h).attention
        assert (a.n_heads, a.sim_heads, a.head_dim, a.sim_head_dim) == (h, 3 * h, 16 // h, 24 // h)
        assert extra[str(h)] == A.extra_param_count(a)


def test_summary_matches_recomputation_from_raw_files(tmp_path, corpus_file):
    spec = EB.SweepSpec("kernel_size", [1, 3], base_model(), TRAIN, seeds=[0, 1, 2], name="k")
    EB.run_sweep(spec, str(tmp_path), corpus_file)
    on_disk = EB.read_summary(str(tmp_path / "k" / "summary.csv"))
    for row in on_disk:
        if row["seed"] == "median":
            continue
        fresh = EB.summarize_run(EB.run_dir(str(tmp_path), "k", "kernel_size", row["axis_value"], row["seed"]))
        for key in EB.SUMMARY_HEADER[2:]:
            assert float(row[key]) == float(fresh[key]), key
    for v in ("1", "3"):
        per_seed = [float(r["final_loss"]) for r in on_disk if r["axis_value"] == v and r["seed"] != "median"]
        median = [float(r["final_loss"]) for r in on_disk if r["axis_value"] == v and r["seed"] == "median"]
        assert median == [sorted(per_seed)[1]]


def test_kernel_sweep_audit_scales_linearly_in_k(tmp_path):
    model = base_model()
    a = model.attention
    counts = [M.count_params_for_config(EB.apply_axis(model, "kernel_size", k))["attention_extra_weights"]
              for k in (1, 3, 5)]
    head_conv_per_k = (a.n_heads * a.sim_heads + a.sim_heads ** 2) * 3 * model.n_layers
    assert counts[1] - counts[0] == counts[2] - counts[1] == 2 * head_conv_per_k


def test_sweep_resumes_and_skips_completed_runs(tmp_path, corpus_file):
    spec = EB.SweepSpec("variant", ["mha", "sas"], base_model(False), TRAIN, seeds=[0, 1], name="v")
    EB.run_sweep(spec, str(tmp_path), corpus_file)
    keep = tmp_path / "v" / "variant=mha" / "seed=0" / "run.csv"
    drop = tmp_path / "v" / "variant=sas" / "seed=1" / "run.csv"
    before = keep.stat().st_mtime_ns
    first = drop.read_text()
    drop.unlink()
    EB.run_sweep(spec, str(tmp_path), corpus_file)
    assert keep.stat().st_mtime_ns == before
    assert [r[2] for r in curves(str(drop))] == [ln.split(",")[2] for ln in first.splitlines()[1:]]


def test_variant_sweep_identity_collapse_is_bitwise(tmp_path, corpus_file):
    spec = EB.SweepSpec("variant", ["mha", "sas-identity"], base_model(False), TRAIN, seeds=[0], name="id")
    EB.run_sweep(spec, str(tmp_path), corpus_file)
    a = curves(EB.run_dir(str(tmp_path), "id", "variant", "mha", 0) + "/run.csv")
    b = curves(EB.run_dir(str(tmp_path), "id", "variant", "sas-identity", 0) + "/run.csv")
    assert a == b


def test_compare_identical_variants_gives_identical_rows(tmp_path, corpus_file):
    cfg = base_model(False)
    medians, rows = EB.compare_variants({"a": cfg, "b": cfg}, TRAIN, corpus_file, str(tmp_path), seeds=[0, 1])
    strip = [{k: v for k, v in r.items() if k not in ("axis_value", "wall_ms_median")} for r in medians]
    assert strip[0] == strip[1]
    per = {}
    for r in rows:
        if r["seed"] != "median":
            per.setdefault(r["seed"], []).append(r["final_loss"])
    assert all(v[0] == v[1] for v in per.values())


def test_compare_rejects_mismatched_vocab(tmp_path):
    a = base_model(False)
    b = dataclasses.replace(a, vocab_size=128)
    with pytest.raises(ConfigError):
        EB.compare_variants({"a": a, "b": b}, TRAIN, None, str(tmp_path))


@pytest.mark.parametrize("axis, values", [("kernel_size", [1, 2]), ("head_count", [3]),
                                          ("expansion_ratio", [1.5]), ("variant", ["mla"]), ("bogus", [1])])
def test_invalid_sweep_rejected_before_any_run(tmp_path, axis, values):
    spec = EB.SweepSpec(axis, values, base_model(), TRAIN, seeds=[0])
    with pytest.raises(ConfigError):
        EB.run_sweep(spec, str(tmp_path))
    assert not list(tmp_path.rglob("run.csv"))


def test_desk_scale_bound_enforced(tmp_path):
    big = M.ModelConfig(vocab_size=256, n_layers=6, d_model=16, context_len=16)
    with pytest.raises(ConfigError):
        EB.validate_spec(EB.SweepSpec("variant", ["mha"], big, TRAIN))


def test_timing_report_fields():
    rep = EB.timing_report(base_model(), TRAIN, steps=3, warmup=1)
    assert rep["steps"] == 3 and rep["median_step_ms"] > 0 and rep["peak_traced_bytes"] > 0


def test_audit_reference_configuration():
    cfg = M.ModelConfig(vocab_size=50257, n_layers=12, d_model=768, context_len=1024,
                        attention=AttentionConfig(d_model=768, n_heads=12, sim_heads=36, sim_head_dim=96,
                                                  expand=True))
    rep = EB.audit_params(cfg)
    assert rep["extra_weights"] == 430_848 and rep["extra_weights_per_layer"] == 35_904
    assert rep["extra_weights_pct"] < 0.4
    assert rep["base"] + rep["extra_weights"] + rep["extra_biases"] == rep["total"]


def _tiny_check_model():
    return M.ModelConfig(vocab_size=16, n_layers=1, d_model=8, context_len=4,
                         attention=AttentionConfig(d_model=8, n_heads=2, expand=True, kernel_size=3))


def test_gradient_check_passes_on_tiny_model():
    stats = {}
    ok, reports = EB.gradient_check(_tiny_check_model(), stats=stats)
    assert ok, [str(r) for r in reports if not r.passed]
    assert stats["probed"] == sum(p.size for p in M.init_params(_tiny_check_model(), 0).values())


def test_gradient_check_catches_a_wrong_backward(monkeypatch):
    def leaky_relu_grad(x):  # forward is relu, backward forgets the mask
        return nc._node(np.maximum(x.data, 0), (x,), lambda g: (g,))

    monkeypatch.setattr(A, "relu", leaky_relu_grad)
    ok, reports = EB.gradient_check(_tiny_check_model())
    assert not ok
    assert any("_head" in r.op or "_feat" in r.op or ".attn.w" in r.op for r in reports if not r.passed)
