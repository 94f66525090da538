"""Analytic multiply-accumulate model of the encoder stack, checked against a counted forward."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import MacCounter
from .config import ModelConfig


@dataclass(frozen=True)
class FlopReport:
    tokens: tuple[int, ...]  # per layer
    attention: tuple[int, ...]
    feed_forward: tuple[int, ...]
    total: int
    total_unpruned: int

    @property
    def per_layer(self) -> tuple[int, ...]:
        return tuple(a + f for a, f in zip(self.attention, self.feed_forward))

    @property
    def reduction_ratio(self) -> float:
        return 1.0 - self.total / self.total_unpruned if self.total_unpruned else 0.0

    def rows(self) -> list[dict]:
        return [
            {"layer": i, "tokens": n, "attention_macs": a, "ffn_macs": f, "total_macs": a + f}
            for i, (n, a, f) in enumerate(zip(self.tokens, self.attention, self.feed_forward))
        ]


def attention_macs(n: int, d: int) -> int:
    # Q, K, V, output projections + scores + weighted sum
    return 4 * n * d * d + 2 * n * n * d


def ffn_macs(n: int, d: int, ratio: int = 4) -> int:
    return 2 * ratio * n * d * d


def default_pruned(cfg: ModelConfig) -> int:
    """Tokens removed for a peak whose contextual zone lies fully inside the grid."""
    if not cfg.prunes:
        return 0
    protected = cfg.cz_size**2 if cfg.pruning_mode == "context_aware" else 0
    return min(cfg.prune_count, cfg.n_search - protected)


def _layers(cfg: ModelConfig, pruned: int):
    n0 = cfg.n_total
    tokens = [n0 if i < cfg.tpe_layer else n0 - pruned for i in range(cfg.num_layers)]
    d = cfg.embed_dim
    return tokens, [attention_macs(n, d) for n in tokens], [ffn_macs(n, d, cfg.mlp_ratio) for n in tokens]


def flop_report(cfg: ModelConfig, pruned: int | None = None) -> FlopReport:
    """Per-layer MACs; layers after the TPE layer see ``pruned`` fewer tokens."""
    pruned = default_pruned(cfg) if pruned is None else pruned
    tokens, att, ffn = _layers(cfg, pruned)
    _, att0, ffn0 = _layers(cfg, 0)
    return FlopReport(tuple(tokens), tuple(att), tuple(ffn), sum(att) + sum(ffn), sum(att0) + sum(ffn0))


def measured_report(params, cfg: ModelConfig, seed: int = 0):
    """Run one counted forward on random inputs; returns (per-layer MACs, pruned count)."""
    from .model import forward
    from .tokens import BoundingBox

    rng = np.random.default_rng(seed)
    t, s = cfg.template_size, cfg.search_size
    zi = rng.random((1, t, t, 3))
    zd = rng.random((1, t, t, 3))
    x = rng.random((1, s, s, 3))
    box = [BoundingBox(0.5, 0.5, 0.5, 0.5)]
    counter = MacCounter()
    res = forward(params, cfg, zi, zd, x, box, box, counter=counter)
    per_layer = [counter.per_scope.get(f"layer{i}", 0) for i in range(cfg.num_layers)]
    return per_layer, res.decisions[0].n_pruned


def reduction_closed_form(cfg: ModelConfig, pruned: int) -> float:
    """1 - after/before written out directly from the per-layer formula."""
    n, d, r, l, L = cfg.n_total, cfg.embed_dim, cfg.mlp_ratio, cfg.tpe_layer, cfg.num_layers
    m = n - pruned
    per = lambda k: (4 + 2 * r) * k * d * d + 2 * k * k * d
    return 1.0 - (l * per(n) + (L - l) * per(m)) / (L * per(n))
