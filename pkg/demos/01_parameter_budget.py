"""How many parameters does head/feature expansion cost?

The expansion maps only touch per-head vectors, so their size depends on the
head count and head width, never on d_model or the vocabulary.  This script
prints the audit for a GPT-2-small sized model and for the desk-scale model
used in the smoke comparison.

    python demos/01_parameter_budget.py
"""

from saslab import evalbench as EB
from saslab import model as M
from saslab.attention import AttentionConfig

# 12 layers, 12 heads of width 64, expanded to 36 heads and query/key width 96
big = M.ModelConfig(vocab_size=50257, n_layers=12, d_model=768, context_len=1024,
                    attention=AttentionConfig(d_model=768, n_heads=12, sim_heads=36,
                                              sim_head_dim=96, kernel_size=1, expand=True))
EB.audit_params_cli(big)
print()

# the same layer with a width-3 head convolution: head weights triple, feature weights do not
wide = M.ModelConfig(vocab_size=50257, n_layers=12, d_model=768, context_len=1024,
                     attention=AttentionConfig(d_model=768, n_heads=12, sim_heads=36,
                                               sim_head_dim=96, kernel_size=3, expand=True))
EB.audit_params_cli(wide)
print()

small = M.ModelConfig(vocab_size=256, n_layers=2, d_model=64, context_len=64,
                      attention=AttentionConfig(d_model=64, n_heads=2, sim_heads=6,
                                                sim_head_dim=48, expand=True))
EB.audit_params_cli(small)
