"""Acceptance suite: one recorded pass/fail line per criterion (see the terminal summary)."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from desktrack.autodiff import Tensor, finite_difference, relative_error
from desktrack.catp import decide_pruning
from desktrack.config import ModelConfig, apply_ablation, load_config
from desktrack.flops import flop_report, measured_report, reduction_closed_form
from desktrack.losses import focal_loss, gaussian_heatmap, giou_np
from desktrack.metrics import evaluate
from desktrack.model import encoder_layer, forward, init_params, total_loss
from desktrack.synthetic import suite
from desktrack.tokens import ZD, ZI, X, BoundingBox
from desktrack.tracking import model_predictor, track_sequence
from desktrack.train import train
from desktrack.tpe import TargetProbabilityMap, aggregate, box_sum3, probability_map, tpe_loss

from conftest import random_inputs
from oracles import bare_grid, bce_oracle, box_sum_oracle, focal_oracle, giou_oracle, prune_oracle


# -- 1. attention-mask semantics ----------------------------------------------------

def random_model_config(rng) -> ModelConfig:
    g = int(rng.integers(4, 9))
    ts = int(rng.integers(2, 5))
    n = int(rng.choice([k for k in (3, 5, 7) if k <= g]))
    m = int(rng.choice([k for k in (1, 3, 5) if k <= n]))
    heads = int(rng.choice([1, 2]))
    layers = int(rng.integers(2, 5))
    return ModelConfig(
        patch_size=4,
        template_size=4 * ts,
        search_size=4 * g,
        embed_dim=4 * heads * int(rng.integers(1, 3)),
        num_heads=heads,
        num_layers=layers,
        tpe_layer=int(rng.integers(1, layers)),
        cz_size=n,
        scz_size=m,
        prune_count=int(rng.integers(0, g * g - n * n + 1)),
        init_std=0.3,
    ).validate()


def template_rows(grid):
    return np.flatnonzero((grid.group == ZI) | (grid.group == ZD))


def test_criterion_1_mask_semantics(record):
    start = time.process_time()
    rng = np.random.default_rng(101)
    failures, with_xat, late_checks = [], 0, 0
    for trial in range(100):
        cfg = random_model_config(rng)
        params = init_params(cfg, seed=trial)
        params["tpe.b2"].data[:] = rng.uniform(-0.3, 0.6)
        zi, zd, x, bzi, bzd, _ = random_inputs(cfg, rng)
        a = forward(params, cfg, zi, zd, x, bzi, bzd, trace=True)
        b = forward(params, cfg, zi, zd, rng.random(x.shape), bzi, bzd, trace=True)
        for ra, rb in zip(a.trace[: cfg.tpe_layer], b.trace[: cfg.tpe_layer]):
            rows = template_rows(ra["output"])
            if ra["output"].tokens.data[:, rows].tobytes() != rb["output"].tokens.data[:, rows].tobytes():
                failures.append((trial, "early", ra["layer"]))
        part = a.partitions[0]
        for rec in a.trace[cfg.tpe_layer :]:
            g, allow, i = rec["input"], rec["allow"], rec["layer"]
            rows = template_rows(g)
            base = rec["output"].tokens.data[:, rows]
            orig = g.original_index[0]
            is_x = g.group == X
            xnt_rows = np.flatnonzero(is_x & np.isin(orig, list(part.xnt)))
            xat_rows = np.flatnonzero(is_x & np.isin(orig, list(part.xat)))
            probes = [xnt_rows] + [xnt_rows[[k]] for k in rng.permutation(len(xnt_rows))[:3]]
            for sel in probes:
                if not len(sel):
                    continue
                data = g.tokens.data.copy()
                data[:, sel] += rng.normal(size=data[:, sel].shape)
                out = encoder_layer(Tensor(data), allow, params, i, cfg).data[:, rows]
                late_checks += 1
                if out.tobytes() != base.tobytes():
                    failures.append((trial, "xnt", i))
            if len(xat_rows):
                with_xat += 1
                moved = False
                for r in xat_rows:
                    data = g.tokens.data.copy()
                    data[:, r] += rng.normal(size=data.shape[-1])  # a constant shift would vanish in layernorm
                    if encoder_layer(Tensor(data), allow, params, i, cfg).data[:, rows].tobytes() != base.tobytes():
                        moved = True
                        break
                if not moved:
                    failures.append((trial, "xat", i))
    elapsed = time.process_time() - start
    ok = not failures and with_xat >= 20 and elapsed < 30
    record(1, "mask semantics", ok,
           f"(100 configs, {late_checks} xnt probes, {with_xat} late layers with xat, {elapsed:.1f}s CPU, failures={failures[:3]})")
    assert ok


# -- 2. pruning oracle ---------------------------------------------------------------

def test_criterion_2_pruning_oracle(record):
    start = time.process_time()
    cfg = ModelConfig()
    rng = np.random.default_rng(202)
    grid = bare_grid(8, 16)
    nt2 = 2 * cfg.n_template
    seen, mismatches = set(), 0
    for k in range(1000):
        p = rng.random((1, 256))
        if k % 4 == 0:
            p = np.round(p, 1)  # heavy ties
        pm = aggregate(TargetProbabilityMap(p=p, p_map=probability_map(grid, p)))
        if k >= 512 or k % 2:
            natural = tuple(pm.center[0])
        else:
            # cells on the last row or column never win a zero-padded 3x3 argmax of a
            # non-negative map, so half of the first 512 maps are given every centre directly
            natural = divmod((k // 2) % 256, 16)
            pm.center = np.array([natural])
        seen.add(tuple(int(v) for v in natural))
        d = decide_pruning(pm, grid, cfg)[0]
        cz, want = prune_oracle(p[0].reshape(16, 16), natural, 11, 128)
        pruned_cells = {divmod(i - nt2, 16) for i in d.pruned_original_indices}
        kept_x = 256 - d.n_pruned
        if (
            list(d.pruned_original_indices) != [nt2 + i for i in want]
            or set(d.cz_cells) != cz
            or pruned_cells & cz
            or kept_x != 256 - min(128, 256 - len(cz))
        ):
            mismatches += 1
    elapsed = time.process_time() - start
    ok = mismatches == 0 and len(seen) == 256 and elapsed < 10
    record(2, "pruning oracle", ok, f"(1000 maps, {len(seen)} centres, {mismatches} mismatches, {elapsed:.1f}s CPU)")
    assert ok


# -- 3. 3x3 aggregation --------------------------------------------------------------

def test_criterion_3_aggregation(record):
    rng = np.random.default_rng(303)
    bad = 0
    for k in range(1000):
        side = 16 if k < 500 else int(rng.integers(1, 17))
        p = rng.random((side, side))
        if k % 5 == 0:
            p[rng.random((side, side)) < 0.5] = 0.0
        if not np.array_equal(box_sum3(p), box_sum_oracle(p)):
            bad += 1
    ok = bad == 0
    record(3, "3x3 aggregation exact", ok, f"(1000 maps, {bad} mismatches)")
    assert ok


# -- 4. gradient audit ---------------------------------------------------------------

AUDIT_GROUPS = ("embed.", "pos.", "early", "late", "final_ln.", "tpe.", "head.cls.", "head.offset.", "head.size.")


def _audit_group(name, cfg):
    if name.startswith("layer"):
        return "early" if int(name[5:].split(".")[0]) < cfg.tpe_layer else "late"
    return next(g for g in AUDIT_GROUPS if name.startswith(g))


def test_criterion_4_gradient_audit(record):
    start = time.process_time()
    cfg = ModelConfig(template_size=16, search_size=32, embed_dim=16, num_heads=2, num_layers=3, tpe_layer=1,
                      cz_size=5, scz_size=3, prune_count=12, init_std=0.2).validate()
    worst, coords, covered = 0.0, 0, set()
    details = []
    for seed in range(5):
        rng = np.random.default_rng(400 + seed)
        params = init_params(cfg, seed=seed)
        params["tpe.b2"].data[:] = 0.1  # mix of target and background tokens
        inputs = random_inputs(cfg, rng, batch=2)

        def loss_value():
            return float(total_loss(forward(params, cfg, *inputs[:5]), inputs[5], cfg)[0].data)

        for v in params.values():
            v.zero_grad()
        total_loss(forward(params, cfg, *inputs[:5]), inputs[5], cfg)[0].backward()
        names = sorted(params)
        by_group = {g: [n for n in names if _audit_group(n, cfg) == g] for g in AUDIT_GROUPS}
        picks = [by_group[g][int(rng.integers(len(by_group[g])))] for g in AUDIT_GROUPS]  # every module
        picks += [names[int(rng.integers(len(names)))] for _ in range(64 - len(picks))]
        for name in picks:
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            # central differences at step 1e-5 have ~1e-11 absolute round-off; gradients below 1e-6 are
            # compared on that absolute scale
            err = relative_error(float(p.grad[idx]), finite_difference(loss_value, p, idx, 1e-5), floor=1e-6)
            covered.add(_audit_group(name, cfg))
            coords += 1
            if err > worst:
                worst = err
                details = [name, idx, float(p.grad[idx])]
    elapsed = time.process_time() - start
    ok = worst < 1e-4 and coords >= 64 and covered == set(AUDIT_GROUPS) and elapsed < 120
    record(4, "gradient audit", ok, f"({coords} coords, 5 seeds, worst rel err {worst:.2e} at {details}, {elapsed:.1f}s CPU)")
    assert ok


# -- 5. loss formulas ----------------------------------------------------------------

def test_criterion_5_losses(record):
    rng = np.random.default_rng(505)
    a = np.column_stack([rng.uniform(0, 1, (1000, 2)), rng.uniform(0.01, 0.7, (1000, 2))])
    b = np.column_stack([rng.uniform(0, 1, (1000, 2)), rng.uniform(0.01, 0.7, (1000, 2))])
    giou_err = float(np.max(np.abs(giou_np(a, b) - np.array([giou_oracle(x, y) for x, y in zip(a, b)]))))
    focal_err = 0.0
    bce_err = 0.0
    for _ in range(200):
        logits = rng.normal(size=(1, 64)) * 3
        heat = gaussian_heatmap(8, BoundingBox(*rng.uniform(0, 1, 2), 0.2, 0.2)).reshape(1, -1)
        prob = 1 / (1 + np.exp(-logits))
        want = focal_oracle(prob, heat)
        focal_err = max(focal_err, abs(float(focal_loss(Tensor(logits), heat).data) - want) / want)
        y = rng.integers(0, 2, (2, 20)).astype(float)
        z = rng.normal(size=(2, 20)) * 3
        got = float(tpe_loss(TargetProbabilityMap(p=None, p_map=None, logits=Tensor(z)), y).data)
        want = bce_oracle(1 / (1 + np.exp(-z)), y)
        bce_err = max(bce_err, abs(got - want) / want)
    cfg = ModelConfig()
    weights_ok = cfg.lambda_iou == 2.0 and cfg.lambda_l1 == 5.0
    ok = giou_err <= 1e-12 and focal_err < 1e-10 and bce_err < 1e-10 and weights_ok
    record(5, "loss formulas", ok,
           f"(GIoU max err {giou_err:.1e}, focal rel {focal_err:.1e}, BCE rel {bce_err:.1e}, lambda_iou={cfg.lambda_iou}, lambda_l1={cfg.lambda_l1})")
    assert ok


# -- 6. FLOP accounting --------------------------------------------------------------

def test_criterion_6_flops(record):
    base = ModelConfig()
    configs = [
        base,
        replace(base, prune_count=0),
        replace(base, num_layers=6, tpe_layer=3, prune_count=64),
        replace(base, embed_dim=32, num_heads=2, num_layers=4, tpe_layer=2, pruning_mode="conventional"),
        ModelConfig(template_size=16, search_size=32, embed_dim=8, num_heads=2, num_layers=3, tpe_layer=1,
                    cz_size=5, scz_size=3, prune_count=10),
        replace(base, pruning_mode="none"),
    ]
    mismatches = []
    for k, cfg in enumerate(configs):
        per_layer, pruned = measured_report(init_params(cfg, k), cfg, seed=k)
        if tuple(per_layer) != flop_report(cfg, pruned).per_layer:
            mismatches.append(k)
    r = flop_report(base)
    closed = reduction_closed_form(base, 128)
    ok = not mismatches and r.reduction_ratio > 0 and abs(r.reduction_ratio - closed) < 1e-15 and r.tokens[-1] == 256
    record(6, "FLOP accounting", ok,
           f"({len(configs)} configs measured==analytic, mismatches={mismatches}, t=128 reduction {r.reduction_ratio:.6f} vs closed form {closed:.6f})")
    assert ok


# -- 7. learnability -----------------------------------------------------------------

LEARN_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "learnability.cfg"
TRAIN_SUITE, HELD_SUITE, CROSS_SUITE = (1, 96), (2, 8), (3, 8)
VARIANTS = {"full": "table3.D", "no_scz": "table3.C", "baseline": "table3.A"}


def _mean_iou(params, mcfg, tcfg, sequences):
    pred = model_predictor(params, mcfg)
    scores = []
    for s in sequences:
        boxes, _ = track_sequence(s.float_frames(), s.gt[0], mcfg, tcfg, pred)
        scores.append(evaluate(boxes[1:], s.gt[1:]).ao)
    return float(np.mean(scores))


@pytest.mark.slow
def test_criterion_7_learnability(record):
    run = load_config(LEARN_CONFIG)
    train_seqs = suite(*TRAIN_SUITE)
    held = suite(*HELD_SUITE)
    crossing = suite(*CROSS_SUITE, kinds=("crossing",))
    held_iou, cross_iou, cpu = {}, {}, {}
    for name, ablation in VARIANTS.items():
        mcfg = apply_ablation(run.model, ablation)
        start = time.process_time()
        params = train(train_seqs, mcfg, run.track, run.train).params
        cpu[name] = time.process_time() - start
        held_iou[name] = _mean_iou(params, mcfg, run.track, held)
        cross_iou[name] = _mean_iou(params, mcfg, run.track, crossing)
    reaches = held_iou["full"] >= 0.5
    ordered = cross_iou["full"] >= cross_iou["no_scz"] >= cross_iou["baseline"]
    budget = max(cpu.values()) <= 600
    fmt = lambda d: ", ".join(f"{k} {v:.3f}" for k, v in d.items())
    record(7, "learnability", reaches and ordered and budget,
           f"(held-out mean IoU: {fmt(held_iou)}; crossing mean IoU: {fmt(cross_iou)}; "
           f"train CPU s: {', '.join(f'{k} {v:.0f}' for k, v in cpu.items())})")
    assert reaches, f"held-out mean IoU {held_iou['full']:.3f} < 0.5"
    assert ordered, f"crossing ordering violated: {cross_iou}"
    assert budget, f"training exceeded 10 min CPU: {cpu}"


# -- 8. determinism -----------------------------------------------------------------

def test_criterion_8_determinism(record, tmp_path):
    from desktrack.cli import main

    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("template_size = 16\nsearch_size = 32\nembed_dim = 8\nnum_heads = 2\nnum_layers = 3\n"
                   "tpe_layer = 1\ncz_size = 5\nscz_size = 3\nprune_count = 10\nsteps = 20\nbatch_size = 2\n")
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--seed", "8", "--count", "3", "--frames", "10"]) == 0
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(d)]) == 0
        assert main(["track", "--checkpoint", str(d / "model.ckpt"), "--sequence", str(data / "crossing_8002"),
                     "--out", str(d / "boxes.csv")]) == 0
        outputs.append({n: (d / n).read_bytes() for n in ("loss.csv", "model.ckpt", "boxes.csv")})
    same = {n: outputs[0][n] == outputs[1][n] for n in outputs[0]}
    ok = all(same.values())
    record(8, "determinism", ok, f"(byte-identical: {same})")
    assert ok
