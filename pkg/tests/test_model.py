import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from desktrack.autodiff import Tensor, finite_difference, relative_error
from desktrack.config import ModelConfig
from desktrack.dsa import EARLY, build_mask
from desktrack.losses import (
    clamp_gt,
    focal_loss,
    focal_loss_reference,
    gaussian_heatmap,
    giou_np,
    iou_np,
    regression_losses,
)
from desktrack.model import (
    decode_box,
    encoder_layer,
    forward,
    head_forward,
    init_params,
    reconstruct_map,
    total_loss,
    tpe_active,
)
from desktrack.tokens import ZD, ZI, X, BoundingBox

from conftest import random_inputs, tiny_config
from oracles import bare_grid, focal_oracle, giou_oracle


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


# -- encoder layer ----------------------------------------------------------------

def test_residual_fixed_point(tiny, tiny_params):
    for name in ("layer0.attn.o.w", "layer0.attn.o.b", "layer0.mlp.w2", "layer0.mlp.b2"):
        tiny_params[name].data[...] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(1, 5, tiny.embed_dim)))
    out = encoder_layer(x, np.ones((1, 5, 5), bool), tiny_params, 0, tiny)
    np.testing.assert_array_equal(out.data, x.data)


def _hand_layer(x, p, allow, eps):
    """Single-head pre-norm block evaluated with Python scalars."""
    n, d = len(x), len(x[0])

    def ln(v, g, b):
        mu = sum(v) / d
        var = sum((a - mu) ** 2 for a in v) / d
        return [(a - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, a in enumerate(v)]

    def lin(v, w, b):
        return [sum(v[k] * w[k][j] for k in range(len(v))) + b[j] for j in range(len(b))]

    y = [ln(v, p["ln1.g"], p["ln1.b"]) for v in x]
    q = [lin(v, p["q.w"], p["q.b"]) for v in y]
    k = [lin(v, p["k.w"], p["k.b"]) for v in y]
    val = [lin(v, p["v.w"], p["v.b"]) for v in y]
    out = []
    for i in range(n):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) if allow[i][j] else None for j in range(n)]
        m = max(v for v in s if v is not None)
        e = [math.exp(v - m) if v is not None else 0.0 for v in s]
        a = [v / sum(e) for v in e]
        ctx = [sum(a[j] * val[j][c] for j in range(n)) for c in range(d)]
        h = [x[i][c] + o for c, o in enumerate(lin(ctx, p["o.w"], p["o.b"]))]
        z = ln(h, p["ln2.g"], p["ln2.b"])
        hid = [_gelu(v) for v in lin(z, p["w1"], p["b1"])]
        out.append([h[c] + o for c, o in enumerate(lin(hid, p["w2"], p["b2"]))])
    return out


def test_two_token_hand_oracle():
    cfg = replace(ModelConfig(), embed_dim=2, num_heads=1, mlp_ratio=2)
    rng = np.random.default_rng(1)
    params = {}
    hand = {}
    for src, dst, shape in [
        ("ln1.g", "ln1.g", (2,)), ("ln1.b", "ln1.b", (2,)), ("ln2.g", "ln2.g", (2,)), ("ln2.b", "ln2.b", (2,)),
        ("attn.q.w", "q.w", (2, 2)), ("attn.q.b", "q.b", (2,)), ("attn.k.w", "k.w", (2, 2)), ("attn.k.b", "k.b", (2,)),
        ("attn.v.w", "v.w", (2, 2)), ("attn.v.b", "v.b", (2,)), ("attn.o.w", "o.w", (2, 2)), ("attn.o.b", "o.b", (2,)),
        ("mlp.w1", "w1", (2, 4)), ("mlp.b1", "b1", (4,)), ("mlp.w2", "w2", (4, 2)), ("mlp.b2", "b2", (2,)),
    ]:
        v = rng.uniform(-1, 1, size=shape)
        params["layer0." + src] = Tensor(v)
        hand[dst] = v.tolist()
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    for allow in ([[True, True], [True, True]], [[True, False], [True, True]]):
        got = encoder_layer(Tensor(x[None]), np.array([allow]), params, 0, cfg).data[0]
        want = np.array(_hand_layer(x.tolist(), hand, allow, cfg.ln_eps))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_mask_shape_checked(tiny, tiny_params):
    x = Tensor(np.zeros((1, 4, tiny.embed_dim)))
    with pytest.raises(ValueError):
        encoder_layer(x, np.ones((1, 3, 3), bool), tiny_params, 0, tiny)


def test_early_layer_template_isolation(tiny, tiny_params):
    grid = bare_grid(4, 8, d=tiny.embed_dim)
    allow = build_mask(EARLY, grid)
    x = grid.tokens.data.copy()
    out = encoder_layer(Tensor(x), allow, tiny_params, 0, tiny).data
    xs = grid.rows_of(X)
    x2 = x.copy()
    x2[:, xs] = np.random.default_rng(2).normal(size=x2[:, xs].shape) * 5
    out2 = encoder_layer(Tensor(x2), allow, tiny_params, 0, tiny).data
    t = grid.rows_of(ZI).tolist() + grid.rows_of(ZD).tolist()
    assert out[:, t].tobytes() == out2[:, t].tobytes()
    assert not np.array_equal(out[:, xs], out2[:, xs])


# -- head and decode --------------------------------------------------------------

def _zero_head(params):
    for k, v in params.items():
        if k.startswith("head."):
            v.data[...] = 0.0


def test_zero_head_weights(tiny, tiny_params):
    _zero_head(tiny_params)
    out = head_forward(tiny_params, Tensor(np.random.default_rng(3).normal(size=(1, 64, tiny.embed_dim))))
    assert np.all(out.cls.data == 0.5)


def test_head_is_per_cell(tiny, tiny_params):
    f = np.random.default_rng(4).normal(size=(1, 64, tiny.embed_dim))
    a = head_forward(tiny_params, Tensor(f))
    f2 = f.copy()
    f2[0, 10] += 1.0
    b = head_forward(tiny_params, Tensor(f2))
    changed = np.flatnonzero(a.cls.data[0] != b.cls.data[0])
    assert changed.tolist() == [10]
    assert np.flatnonzero((a.size.data[0] != b.size.data[0]).any(-1)).tolist() == [10]


def test_head_hand_weights_2x2():
    d = 2
    rng = np.random.default_rng(5)
    params = {}
    for name, k in (("cls", 1), ("offset", 2), ("size", 2)):
        params[f"head.{name}.w1"] = Tensor(rng.uniform(-1, 1, (d, d)))
        params[f"head.{name}.b1"] = Tensor(rng.uniform(-1, 1, d))
        params[f"head.{name}.w2"] = Tensor(rng.uniform(-1, 1, (d, k)))
        params[f"head.{name}.b2"] = Tensor(rng.uniform(-1, 1, k))
    f = rng.normal(size=(1, 4, d))
    out = head_forward(params, Tensor(f))

    def mlp(name, v):
        w1, b1 = params[f"head.{name}.w1"].data, params[f"head.{name}.b1"].data
        w2, b2 = params[f"head.{name}.w2"].data, params[f"head.{name}.b2"].data
        h = [_gelu(sum(v[i] * w1[i, j] for i in range(d)) + b1[j]) for j in range(d)]
        return [1 / (1 + math.exp(-(sum(h[j] * w2[j, o] for j in range(d)) + b2[o]))) for o in range(w2.shape[1])]

    for c in range(4):
        assert out.cls.data[0, c] == pytest.approx(mlp("cls", f[0, c])[0], abs=1e-14)
        np.testing.assert_allclose(out.offset.data[0, c], mlp("offset", f[0, c]), atol=1e-14)
        np.testing.assert_allclose(out.size.data[0, c], mlp("size", f[0, c]), atol=1e-14)


def test_head_zero_fills_dead_cells(tiny, tiny_params):
    live = np.ones((1, 64), bool)
    live[0, [3, 9]] = False
    out = head_forward(tiny_params, Tensor(np.random.default_rng(6).normal(size=(1, 64, tiny.embed_dim))), live)
    assert np.all(out.cls.data[0, [3, 9]] == 0) and np.all(out.size.data[0, [3, 9]] == 0)


def _outputs(cls, off, size, side):
    from desktrack.model import HeadOutputs

    c = side * side
    return HeadOutputs(Tensor(np.zeros((1, c))), Tensor(cls.reshape(1, c)), Tensor(off.reshape(1, c, 2)),
                       Tensor(size.reshape(1, c, 2)), np.ones((1, c), bool), side)


def test_decode_single_cell():
    cls = np.zeros((4, 4))
    cls[2, 1] = 0.9
    box = decode_box(_outputs(cls, np.zeros((4, 4, 2)), np.full((4, 4, 2), 0.25), 4))
    assert (box.cx, box.cy, box.w, box.h) == (0.25, 0.5, 0.25, 0.25)


def test_decode_uniform_picks_origin():
    box = decode_box(_outputs(np.full((4, 4), 0.3), np.full((4, 4, 2), 0.5), np.full((4, 4, 2), 0.1), 4))
    assert (box.cx, box.cy) == (0.125, 0.125)


def test_decode_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        side = 6
        cls, off, size = rng.random((side, side)), rng.random((side, side, 2)), rng.random((side, side, 2))
        best, bu, bv = -1.0, 0, 0
        for u in range(side):
            for v in range(side):
                if cls[u, v] > best:
                    best, bu, bv = cls[u, v], u, v
        box = decode_box(_outputs(cls, off, size, side))
        assert box.cx == (bv + off[bu, bv, 0]) / side and box.cy == (bu + off[bu, bv, 1]) / side
        assert (box.w, box.h) == tuple(size[bu, bv])


# -- reconstruct ------------------------------------------------------------------

def test_reconstruct_unpruned_is_reshape():
    v = np.random.default_rng(8).normal(size=(1, 16, 3))
    out = reconstruct_map(Tensor(v), np.arange(16)[None], 4)
    np.testing.assert_array_equal(out.data, v)


def test_reconstruct_one_live_cell():
    out = reconstruct_map(Tensor(np.ones((1, 1, 3))), np.array([[7]]), 4).data
    assert np.count_nonzero(out.any(-1)) == 1 and out[0, 7].tolist() == [1, 1, 1]


def test_reconstruct_collision():
    with pytest.raises(ValueError):
        reconstruct_map(Tensor(np.ones((1, 2, 3))), np.array([[5, 5]]), 4)


# -- losses -----------------------------------------------------------------------

def test_loss_weight_defaults():
    cfg = ModelConfig()
    assert cfg.lambda_iou == 2.0 and cfg.lambda_l1 == 5.0
    assert cfg.focal_alpha == 2.0 and cfg.focal_beta == 4.0


def test_giou_matches_oracle():
    rng = np.random.default_rng(9)
    a = np.column_stack([rng.uniform(0, 1, (1000, 2)), rng.uniform(0.01, 0.6, (1000, 2))])
    b = np.column_stack([rng.uniform(0, 1, (1000, 2)), rng.uniform(0.01, 0.6, (1000, 2))])
    got = giou_np(a, b)
    want = np.array([giou_oracle(x, y) for x, y in zip(a, b)])
    assert np.max(np.abs(got - want)) <= 1e-12


def test_giou_disjoint_unit_separated():
    # [0,1]x[0,1] and [2,3]x[0,1]: IoU 0, hull 3, union 2 -> GIoU = -1/3
    got = giou_np(np.array([0.5, 0.5, 1.0, 1.0]), np.array([2.5, 0.5, 1.0, 1.0]))
    assert got == pytest.approx(-1.0 / 3.0, abs=1e-15)


def test_giou_properties():
    rng = np.random.default_rng(10)
    a = np.column_stack([rng.uniform(0, 1, (500, 2)), rng.uniform(0.01, 0.6, (500, 2))])
    b = np.column_stack([rng.uniform(0, 1, (500, 2)), rng.uniform(0.01, 0.6, (500, 2))])
    g = giou_np(a, b)
    assert np.all(g > -1) and np.all(g <= 1)
    np.testing.assert_allclose(g, giou_np(b, a), atol=1e-15)
    inner = a.copy()
    inner[:, 2:] *= 0.5
    np.testing.assert_allclose(giou_np(a, inner), iou_np(a, inner), atol=1e-15)


def test_perfect_regression_is_zero():
    side = 8
    gt = BoundingBox(0.4, 0.6, 0.3, 0.2)
    u, v = int(0.6 * side), int(0.4 * side)
    off = np.zeros((1, 64, 2))
    size = np.zeros((1, 64, 2))
    off[0, u * side + v] = (0.4 * side - v, 0.6 * side - u)
    size[0, u * side + v] = (0.3, 0.2)
    giou, l1 = regression_losses(Tensor(off), Tensor(size), [gt], side)
    assert abs(giou.data) < 1e-15 and abs(l1.data) < 1e-15


def test_focal_matches_reference_and_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        logits = rng.normal(size=(1, 64)) * 2
        heat = gaussian_heatmap(8, BoundingBox(*rng.uniform(0, 1, 2), 0.2, 0.2)).reshape(1, -1)
        got = focal_loss(Tensor(logits), heat).data
        prob = 1 / (1 + np.exp(-logits))
        assert got == pytest.approx(focal_oracle(prob, heat), rel=1e-10)
        assert got == pytest.approx(focal_loss_reference(prob, heat), rel=1e-10)
        assert got >= 0


def test_focal_zero_at_hard_match():
    heat = np.zeros((1, 16))
    heat[0, 5] = 1.0
    assert focal_loss_reference(heat[0], heat[0]) == 0.0
    logits = np.where(heat == 1.0, 50.0, -50.0)
    assert focal_loss(Tensor(logits), heat).data < 1e-30


def test_focal_ignores_invalid_cells():
    rng = np.random.default_rng(12)
    logits = rng.normal(size=(1, 16))
    heat = gaussian_heatmap(4, BoundingBox(0.4, 0.4, 0.2, 0.2)).reshape(1, -1)
    valid = np.ones((1, 16), bool)
    valid[0, [0, 15]] = False
    a = focal_loss(Tensor(logits), heat, valid).data
    logits2 = logits.copy()
    logits2[0, [0, 15]] = 99.0
    assert focal_loss(Tensor(logits2), heat, valid).data == a


def test_heatmap_peak():
    h = gaussian_heatmap(8, BoundingBox(0.3, 0.7, 0.2, 0.2))
    assert h[5, 2] == 1.0 and (h == 1.0).sum() == 1
    assert h[5, 3] == pytest.approx(math.exp(-0.5))


def test_degenerate_gt_clamped():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        box = clamp_gt(BoundingBox(0.5, 0.5, 0.0, 0.2), 16)
    assert box.w == 1 / 16 and box.h == 0.2 and w


# -- forward ----------------------------------------------------------------------

def test_alive_count_after_pruning_default():
    cfg = ModelConfig()
    params = init_params(cfg, seed=0)
    zi, zd, x, bzi, bzd, _ = random_inputs(cfg, np.random.default_rng(13))
    res = forward(params, cfg, zi, zd, x, bzi, bzd)
    _, final = res.late_grids[0]
    assert final.n_rows == 64 + 64 + 256 - 128
    assert res.decisions[0].n_pruned == 128


def test_degenerate_pipeline_equals_blocked_baseline(tiny, tiny_params):
    inputs = random_inputs(tiny, np.random.default_rng(14), batch=2)
    a = forward(tiny_params, replace(tiny, prune_count=0, target_threshold=1.1), *inputs[:5])
    b = forward(tiny_params, replace(tiny, pruning_mode="none", dsa_mode="all_blocked"), *inputs[:5])
    assert a.outputs.cls.data.tobytes() == b.outputs.cls.data.tobytes()
    assert a.outputs.size.data.tobytes() == b.outputs.size.data.tobytes()


def test_forward_deterministic(tiny, tiny_params):
    inputs = random_inputs(tiny, np.random.default_rng(15), batch=2)
    a = forward(tiny_params, tiny, *inputs[:5])
    b = forward(tiny_params, tiny, *inputs[:5])
    assert a.outputs.cls.data.tobytes() == b.outputs.cls.data.tobytes()
    assert a.decisions == b.decisions and a.partitions == b.partitions


def test_forward_search_order_invariant(tiny, tiny_params):
    inputs = random_inputs(tiny, np.random.default_rng(16), batch=2)
    perm = np.stack([np.random.default_rng(s).permutation(tiny.n_search) for s in range(2)])
    a = forward(tiny_params, tiny, *inputs[:5])
    b = forward(tiny_params, tiny, *inputs[:5], search_permutation=perm)
    np.testing.assert_allclose(b.outputs.cls.data, a.outputs.cls.data, rtol=1e-12, atol=1e-14)
    assert a.decisions == b.decisions and a.partitions == b.partitions


def test_mixed_prune_counts_in_batch(tiny, tiny_params):
    # a corner centre shrinks the zone; with t near the limit the batch splits
    cfg = replace(tiny, prune_count=63 - 24)
    inputs = random_inputs(cfg, np.random.default_rng(17), batch=3)
    res = forward(tiny_params, cfg, *inputs[:5])
    for b in range(3):
        single = forward(tiny_params, cfg, *(v[b : b + 1] for v in inputs[:5]))
        np.testing.assert_allclose(res.outputs.cls.data[b], single.outputs.cls.data[0], rtol=1e-12, atol=1e-14)


def test_tpe_term_only_when_active(tiny, tiny_params):
    inputs = random_inputs(tiny, np.random.default_rng(18))
    base = replace(tiny, pruning_mode="none", dsa_mode="all_allowed")
    assert not tpe_active(base) and tpe_active(tiny)
    _, parts = total_loss(forward(tiny_params, base, *inputs[:5]), inputs[5], base)
    assert parts["tpe"] == 0.0
    _, parts = total_loss(forward(tiny_params, tiny, *inputs[:5]), inputs[5], tiny)
    assert parts["tpe"] > 0.0
    assert parts["total"] == pytest.approx(
        parts["cls"] + 2 * parts["giou"] + 5 * parts["l1"] + parts["tpe"], rel=1e-12
    )


def test_dead_cells_give_no_head_gradient(tiny, tiny_params):
    rng = np.random.default_rng(19)
    live = rng.random((1, 64)) < 0.6
    heat = gaussian_heatmap(8, BoundingBox(0.5, 0.5, 0.3, 0.3)).reshape(1, -1)
    f = rng.normal(size=(1, 64, tiny.embed_dim))
    grads = []
    for dead_value in (0.0, 3.0):
        g = f.copy()
        g[0, ~live[0]] = dead_value
        for v in tiny_params.values():
            v.zero_grad()
        out = head_forward(tiny_params, Tensor(g), live)
        loss = focal_loss(out.cls_logits, heat, live) + out.size.sum() * 0.1 + out.offset.sum()
        loss.backward()
        grads.append({k: v.grad.copy() for k, v in tiny_params.items() if k.startswith("head.")})
    for k in grads[0]:
        np.testing.assert_array_equal(grads[0][k], grads[1][k])


def test_gradient_spot_check(tiny):
    params = init_params(tiny, seed=5)
    inputs = random_inputs(tiny, np.random.default_rng(20), batch=2)

    def loss():
        return float(total_loss(forward(params, tiny, *inputs[:5]), inputs[5], tiny)[0].data)

    for v in params.values():
        v.zero_grad()
    total_loss(forward(params, tiny, *inputs[:5]), inputs[5], tiny)[0].backward()
    rng = np.random.default_rng(21)
    for name in ("embed.w", "layer0.attn.q.w", "layer2.mlp.w1", "tpe.w1", "head.size.w2", "final_ln.g"):
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        # step-1e-5 central differences carry ~1e-11 absolute round-off, hence the 1e-6 floor
        assert relative_error(p.grad[idx], finite_difference(loss, p, idx), floor=1e-6) < 1e-4, name
