"""How much encoder compute does pruning save?

Prints the per-layer token count and multiply-accumulates for the default
toy model with and without pruning, then confirms the analytic numbers
against an instrumented forward pass.

    python demos/02_compute_budget.py
"""

from dataclasses import replace

from desktrack.config import ModelConfig
from desktrack.flops import flop_report, measured_report, reduction_closed_form
from desktrack.model import init_params

cfg = ModelConfig()
pruned = flop_report(cfg)
dense = flop_report(replace(cfg, pruning_mode="none"))

print(f"{'layer':>5} {'tokens':>7} {'dense MACs':>12} {'pruned MACs':>12}")
for i, (d, p) in enumerate(zip(dense.per_layer, pruned.per_layer)):
    print(f"{i:>5} {pruned.tokens[i]:>7} {d:>12,} {p:>12,}")
print(f"total {dense.total:,} -> {pruned.total:,}")
print(f"reduction {pruned.reduction_ratio:.4f} (closed form {reduction_closed_form(cfg, cfg.prune_count):.4f})")

# Same count, taken by tallying every multiply-accumulate in a real forward pass.
small = replace(cfg, embed_dim=16, num_heads=2)
counted, n_pruned = measured_report(init_params(small, 0), small)
print("\ninstrumented pass (D=16) matches analytic:", tuple(counted) == flop_report(small, n_pruned).per_layer)
