"""The expanded layer contains plain attention as a special case.

With one simulated head per base head, unchanged head width, a width-1
convolution, identity first stages and zero second stages, the expanded layer
must reproduce ordinary multi-head attention bit for bit.  After that we move
to a random expanded layer and compare it against the loop-based reference in
``saslab.verify``, which is written independently of the vectorised code.

    python demos/02_identity_and_oracles.py
"""

import numpy as np

from saslab import attention as A
from saslab import verify
from saslab.attention import AttentionConfig
from saslab.numcore import Tensor

rng = np.random.default_rng(0)

ident = A.identity_config(d_model=16, n_heads=4)
p = A.init_params(ident, seed=0)
x = Tensor(rng.normal(size=(2, 7, 16)).astype(np.float32))

expanded = A.sas_forward(x, ident, p).data
plain = A.mha_forward(x, 4, *(p[k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))).data
print("identity-configured layer == plain attention:", np.array_equal(expanded, plain))

# a genuinely expanded layer: 2 heads -> 6, width 4 -> 6, width-3 head convolution
cfg = AttentionConfig(d_model=8, n_heads=2, sim_heads=6, sim_head_dim=6, kernel_size=3, expand=True)
arrays = {k: rng.normal(scale=0.5, size=s).astype(np.float32) for k, s in A.param_shapes(cfg).items()}
xs = rng.normal(size=(2, 5, 8)).astype(np.float32)
out = A.sas_forward(Tensor(xs), cfg, {k: Tensor(v) for k, v in arrays.items()}).data
print(verify.compare("expanded layer vs loop reference", out, verify.oracle_sas_forward(xs, cfg, arrays), atol=1e-5))

# averaging groups before or after the shared output projection gives the same answer
a = verify.oracle_sas_forward(xs, cfg, arrays, peaa_order="project_then_mean")
b = verify.oracle_sas_forward(xs, cfg, arrays, peaa_order="mean_then_project")
print(verify.compare("project-then-mean vs mean-then-project", a, b, atol=1e-12))
