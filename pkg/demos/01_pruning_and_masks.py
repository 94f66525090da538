"""Walk one hand-made probability map through aggregation, pruning and token partitioning.

The map has a bright target blob and a dimmer look-alike elsewhere. We print
which cells survive pruning, how the survivors split into actual-target,
distractor and background tokens, and what the late-phase mask lets the
template tokens read.

    python demos/01_pruning_and_masks.py
"""

import numpy as np

from desktrack.autodiff import Tensor
from desktrack.catp import apply_pruning, decide_pruning
from desktrack.config import ModelConfig
from desktrack.dsa import EARLY, LATE, build_mask, group_summary, partition_tokens
from desktrack.tokens import ZD, ZI, X, TokenGrid, grid_coords
from desktrack.tpe import TargetProbabilityMap, aggregate, probability_map

cfg = ModelConfig()  # G = 16, CZ 11x11, t = 128, SCZ 7x7
g, ts = cfg.grid_side, cfg.template_size // cfg.patch_size

# A grid of placeholder tokens: two 8x8 templates followed by the 16x16 search region.
nt, nx = ts * ts, g * g
group = np.array([ZI] * nt + [ZD] * nt + [X] * nx, dtype=np.int8)
coord = np.concatenate([grid_coords(ts)] * 2 + [grid_coords(g)])
n = len(group)
grid = TokenGrid(Tensor(np.zeros((1, n, 4))), group, coord[None].copy(), np.arange(n)[None], np.ones((1, n), bool), g)

# Target near (9, 6), a look-alike near (3, 12), low noise everywhere else.
rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:g, 0:g]
p_map = 0.05 * rng.random((g, g))
p_map += 0.9 * np.exp(-((yy - 9) ** 2 + (xx - 6) ** 2) / 3.0)
p_map += 0.7 * np.exp(-((yy - 3) ** 2 + (xx - 12) ** 2) / 2.0)
p_map = np.clip(p_map, 0, 1)
p = p_map.reshape(1, -1)

pm = aggregate(TargetProbabilityMap(p=p, p_map=probability_map(grid, p)))
print("aggregate peak (row, col):", tuple(int(v) for v in pm.center[0]))

decision = decide_pruning(pm, grid, cfg)[0]
print(f"contextual zone cells: {len(decision.cz_cells)}, pruned: {decision.n_pruned}, kept: {len(decision.kept_original_indices)}")

pruned = set(decision.pruned_original_indices)
live = apply_pruning(grid, [decision])
part = partition_tokens(pm, live, cfg)[0]

# Legend: '.' pruned, 'A' actual target, 'd' distractor, '-' background
print("\nsearch grid after pruning and partitioning")
for r in range(g):
    row = []
    for c in range(g):
        idx = 2 * nt + r * g + c
        if idx in pruned:
            row.append(".")
        elif idx in part.xat:
            row.append("A")
        elif idx in part.xd:
            row.append("d")
        else:
            row.append("-")
    print(" ".join(row))

# Early phase: templates see no search tokens at all. Late phase: templates read only actual-target tokens.
for phase, mask in ((EARLY, build_mask(EARLY, live)), (LATE, build_mask(LATE, live, [part]))):
    print(f"\n{phase} mask, fraction of allowed (query group <- key group) pairs")
    for pair, frac in sorted(group_summary(mask, live, part).items()):
        print(f"  {pair:>12}: {frac:.2f}")
