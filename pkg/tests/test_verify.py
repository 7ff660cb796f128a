import ast
import inspect

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saslab import attention as A
from saslab import verify
from saslab.attention import AttentionConfig


def test_oracles_share_no_code_with_production():
    tree = ast.parse(inspect.getsource(verify))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
            imported.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not imported & {"numcore", "attention", "model", "training", "saslab.numcore", "saslab.attention"}


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_finite_diff_on_quadratic(n, seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(n, n))
    Q = M @ M.T + np.eye(n)
    b = r.normal(size=n)
    x = r.normal(size=n)

    def f(p):
        v = p["x"]
        return float(0.5 * v @ Q @ v + b @ v)

    num = verify.finite_diff(f, {"x": x.copy()})["x"]
    exact = Q @ x + b
    # central differences are exact on quadratics up to roundoff; measured normwise
    assert np.linalg.norm(num - exact) <= 1e-9 * np.linalg.norm(exact)


def test_finite_diff_restores_params_and_respects_entries():
    x = np.arange(6.0).reshape(2, 3)
    keep = x.copy()
    g = verify.finite_diff(lambda p: float(np.sum(p["x"] ** 2)), {"x": x}, entries={"x": [1, 4]})["x"]
    assert np.array_equal(x, keep)
    assert np.isnan(g.reshape(-1)[[0, 2, 3, 5]]).all()
    np.testing.assert_allclose(g.reshape(-1)[[1, 4]], [2.0, 8.0], rtol=1e-9)


def test_finite_diff_requires_float64():
    with pytest.raises(TypeError):
        verify.finite_diff(lambda p: 0.0, {"x": np.zeros(2, np.float32)})


def test_compare_report_fields():
    r = verify.compare("op", [1.0, 2.0, 3.5], [1.0, 2.0, 3.0], atol=0.6)
    assert r.passed and r.max_abs_err == 0.5 and r.worst_index == (2,)
    assert not verify.compare("op", [1.0, np.nan], [1.0, 1.0], atol=1.0).passed


def test_head_mlp_oracle_equals_conv_oracle_at_k1():
    r = np.random.default_rng(0)
    x = r.normal(size=(3, 2, 4))
    w1, b1, w2, b2 = r.normal(size=(6, 2, 1)), r.normal(size=6), r.normal(size=(6, 6, 1)), r.normal(size=6)
    np.testing.assert_allclose(verify.oracle_head_mlp(x, w1, b1, w2, b2),
                               verify.oracle_head_expand(x, w1, b1, w2, b2), atol=1e-12)


def test_identity_configured_oracle_equals_oracle_mha():
    cfg = A.identity_config(6, 2)
    p = {k: t.data for k, t in A.init_params(cfg, 0).items()}
    r = np.random.default_rng(1)
    for k in ("wq", "wk", "wv", "wo"):
        p[k] = r.normal(size=p[k].shape)
    x = r.normal(size=(2, 4, 6))
    np.testing.assert_allclose(verify.oracle_sas_forward(x, cfg, p), verify.oracle_mha(x, 2, p), atol=1e-12)


def test_enumerate_params_categories():
    cfg = AttentionConfig(d_model=6, n_heads=2, sim_heads=4, sim_head_dim=4, kernel_size=3, expand=True)
    params = {f"h.0.attn.{k}": v for k, v in A.init_params(cfg, 0).items()}
    counts = verify.enumerate_params(params)
    assert counts["head_conv_w"] == 3 * (4 * 2 * 3 + 4 * 4 * 3)
    assert counts["head_conv_b"] == 3 * 8
    assert counts["feat_lin_w"] == 2 * (4 * 3 + 4 * 4)
    assert counts["feat_lin_b"] == 2 * 8
    assert counts["extra_weights"] == A.extra_param_count(cfg)
    assert counts["total"] == counts["base"] + counts["extra_weights"] + counts["extra_biases"]
