"""Command-line entry point: ``desktrack <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dsa
from .autodiff import Tensor, load_checkpoint, save_checkpoint
from .catp import window_cells
from .config import ConfigError, RunConfig, dump_config, load_config
from .flops import flop_report, measured_report
from .io import DataError, load_sequence, read_boxes, write_boxes, write_grid_csv, write_heat_ppm
from .metrics import evaluate
from .model import ForwardResult, init_params
from .synthetic import Sequence, save_sequence, suite
from .tokens import GROUP_NAMES, X
from .tracking import model_predictor, track_sequence
from .train import NumericalError, train, write_curve

log = logging.getLogger("desktrack")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MASK_MAGIC = b"MASK"


# -- helpers ---------------------------------------------------------------------

def _run_config(path: str | None, checkpoint: str | None = None) -> RunConfig:
    """Explicit --config wins; otherwise look for config.txt next to the checkpoint."""
    if path is None and checkpoint is not None:
        sibling = Path(checkpoint).with_name("config.txt")
        if sibling.exists():
            path = str(sibling)
    return load_config(path)


def _load_params(path: str, run: RunConfig) -> dict[str, Tensor]:
    try:
        arrays = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    expected = init_params(run.model, 0)
    if set(arrays) != set(expected):
        raise ConfigError(f"{path}: parameter names do not match the model config")
    for k, v in expected.items():
        if arrays[k].shape != v.shape:
            raise ConfigError(f"{path}: {k} has shape {arrays[k].shape}, config expects {v.shape}")
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def _sequence_dirs(root: str) -> list[Path]:
    d = Path(root)
    if (d / "gt.csv").exists():
        return [d]
    dirs = sorted(p for p in d.iterdir() if (p / "gt.csv").exists()) if d.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no sequence directories (expected gt.csv)")
    return dirs


def _load_for_training(root: str) -> list[Sequence]:
    out = []
    for d in _sequence_dirs(root):
        frames, gt = load_sequence(d)
        if not gt:
            raise DataError(f"{d}: ground truth required for training")
        out.append(Sequence([np.round(f * 255).astype(np.uint8) for f in frames], gt, name=d.name))
    return out


def _frame_list(spec: str | None, n: int) -> list[int]:
    if spec is None:
        return list(range(1, n))
    try:
        frames = sorted({int(s) for s in spec.split(",") if s.strip()})
    except ValueError as exc:
        raise ConfigError(f"bad frame list {spec!r}") from exc
    if not frames or frames[0] < 1 or frames[-1] >= n:
        raise ConfigError(f"frames must lie in 1..{n - 1}")
    return frames


def _diagnose(args, run: RunConfig):
    """Track a sequence, keeping the forward result of each requested frame."""
    params = _load_params(args.checkpoint, run)
    frames, gt = load_sequence(args.sequence)
    init = gt[0] if gt else None
    if init is None:
        raise DataError(f"{args.sequence}: gt.csv needed for the initial box")
    wanted = set(_frame_list(args.frames, len(frames)))
    last = max(wanted)
    kept: dict[int, ForwardResult] = {}
    predictor = model_predictor(params, run.model, keep_diagnostics=True)

    def on_frame(i, pred, mapping):
        if i in wanted:
            kept[i] = pred.diagnostics

    track_sequence(frames[: last + 1], init, run.model, run.track, predictor, run.train.seed, on_frame)
    return kept


def _partition_label(oi: int, part, pruned: set[int]) -> str:
    if oi in pruned:
        return "pruned"
    if part is None:
        return ""
    return "xat" if oi in part.xat else "xd" if oi in part.xd else "xb"


def write_mask_bits(path: Path, allow: np.ndarray) -> None:
    """``MASK``, u32 rows, u32 cols, then row-major bits packed MSB-first."""
    rows, cols = allow.shape
    header = MASK_MAGIC + np.array([rows, cols], dtype="<u4").tobytes()
    path.write_bytes(header + np.packbits(allow.astype(np.uint8), axis=None).tobytes())


def read_mask_bits(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise DataError(f"{path}: not a mask file")
    rows, cols = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=12), count=int(rows) * int(cols))
    return bits.reshape(int(rows), int(cols)).astype(bool)


# -- commands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(","))
    try:
        seqs = suite(args.seed, args.count, kinds=kinds, num_frames=args.frames)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    for s in seqs:
        save_sequence(s, out / s.name)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args.config)
    if args.steps is not None:
        run = RunConfig(run.model, run.track, replace(run.train, steps=args.steps)).validate()
    if args.data:
        seqs = _load_for_training(args.data)
    else:
        seqs = suite(args.suite_seed, args.suite_count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(run))
    result = train(seqs, run.model, run.track, run.train, checkpoint_dir=out)
    save_checkpoint(out / "model.ckpt", result.params)
    write_curve(out / "loss.csv", result.curve)
    print(f"trained {run.train.steps} steps; final loss {result.curve[-1]['total']:.6f}" if result.curve else "no steps")
    return EXIT_OK


def cmd_track(args) -> int:
    run = _run_config(args.config, args.checkpoint)
    params = _load_params(args.checkpoint, run)
    frames, gt = load_sequence(args.sequence)
    if args.init_box:
        init = read_boxes(args.init_box)[0]
    elif gt:
        init = gt[0]
    else:
        raise DataError("no initial box: give --init-box or provide gt.csv")
    diag_fh = open(args.diagnostics, "w") if args.diagnostics else None

    def on_frame(i, pred, mapping):
        if diag_fh is None:
            return
        res = pred.diagnostics
        row = {"frame": i, "score": pred.score, "box": pred.box.as_array().tolist()}
        if res is not None:
            row["center"] = res.pmap.center[0].tolist()
            row["pruned"] = res.decisions[0].n_pruned
            if res.partitions is not None:
                p = res.partitions[0]
                row.update(xat=len(p.xat), xd=len(p.xd), xb=len(p.xb))
        diag_fh.write(json.dumps(row) + "\n")

    predictor = model_predictor(params, run.model, keep_diagnostics=diag_fh is not None)
    try:
        boxes, state = track_sequence(frames, init, run.model, run.track, predictor, run.train.seed, on_frame)
    finally:
        if diag_fh is not None:
            diag_fh.close()
    write_boxes(args.out, boxes)
    print(f"tracked {len(boxes)} frames; dynamic-template updates at {state.updates}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = read_boxes(args.pred), read_boxes(args.gt)
    if len(pred) != len(gt):
        raise DataError(f"{len(pred)} predicted boxes vs {len(gt)} ground-truth boxes")
    if args.skip_first:
        pred, gt = pred[1:], gt[1:]
    m = evaluate(pred, gt)
    row = {"ao": m.ao, "sr50": m.sr50, "sr75": m.sr75, "mean_iou": m.mean_iou, "frames": m.frames}
    print(json.dumps(row))
    if args.out:
        Path(args.out).write_text(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    run = _run_config(args.config)
    report = flop_report(run.model, args.pruned)
    measured = None
    if args.measure:
        measured, n_pruned = measured_report(init_params(run.model, run.train.seed), run.model, run.train.seed)
        report = flop_report(run.model, n_pruned)
    fields = ["layer", "tokens", "attention_macs", "ffn_macs", "total_macs"] + (["measured_macs"] if measured else [])
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for r in report.rows():
            wr.writerow([r[k] for k in fields[:5]] + ([measured[r["layer"]]] if measured else []))
    print(f"total {report.total} MACs, unpruned {report.total_unpruned}, reduction {report.reduction_ratio:.6f}")
    if measured is not None and tuple(measured) != report.per_layer:
        log.error("measured MACs differ from the analytic model")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_dump_masks(args) -> int:
    run = _run_config(args.config, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, res in sorted(_diagnose(args, run).items()):
        tpe_grid = res.tpe_grid
        dec = res.decisions[0]
        part = res.partitions[0] if res.partitions is not None else None
        cz = dec.cz_cells
        pruned = set(dec.pruned_original_indices)
        pm = res.pmap.p_map[0]
        with open(out / f"frame_{i:04d}_tokens.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["original_index", "group", "row", "col", "p", "pruned", "cz", "partition"])
            for row in range(tpe_grid.n_rows):
                oi = int(tpe_grid.original_index[0, row])
                g = int(tpe_grid.group[row])
                r, c = (int(v) for v in tpe_grid.coord[0, row])
                if g == X:
                    wr.writerow([oi, GROUP_NAMES[g], r, c, repr(float(pm[r, c])), int(oi in pruned),
                                 int((r, c) in cz), _partition_label(oi, part, pruned)])
                else:
                    wr.writerow([oi, GROUP_NAMES[g], r, c, "", 0, 0, ""])
        early = dsa.ablation_mask(run.model.dsa_mode, dsa.EARLY, tpe_grid, arrow_reading=run.model.arrow_reading)
        (_, late_grid), = [(idx, g) for idx, g in res.late_grids]
        late = dsa.ablation_mask(run.model.dsa_mode, dsa.LATE, late_grid, [part] if part else None,
                                 run.model.arrow_reading)
        write_mask_bits(out / f"frame_{i:04d}_early.mask", early[0])
        write_mask_bits(out / f"frame_{i:04d}_late.mask", late[0])
        np.savetxt(out / f"frame_{i:04d}_late_rows.csv", late_grid.original_index[0], fmt="%d")
        summary = {
            "frame": i,
            "center": res.pmap.center[0].tolist(),
            "pruned": dec.n_pruned,
            "cz_cells": len(cz),
            "scz_cells": len(window_cells(res.pmap.center[0], run.model.scz_size, run.model.grid_side)),
            "partition": None if part is None else {"xat": len(part.xat), "xd": len(part.xd), "xb": len(part.xb)},
            "early": dsa.group_summary(early, tpe_grid, None),
            "late": dsa.group_summary(late, late_grid, part),
        }
        (out / f"frame_{i:04d}_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"wrote mask dumps to {out}")
    return EXIT_OK


def cmd_dump_heatmap(args) -> int:
    run = _run_config(args.config, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, res in sorted(_diagnose(args, run).items()):
        for name, grid in (("p_map", res.pmap.p_map[0]), ("s_map", res.pmap.s_map[0]),
                           ("cls_map", res.outputs.cls_map(0))):
            write_grid_csv(out / f"frame_{i:04d}_{name}.csv", grid)
            write_heat_ppm(out / f"frame_{i:04d}_{name}.ppm", grid, cell=args.cell)
    print(f"wrote heatmaps to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="desktrack", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a seeded synthetic suite as PPM frames + gt.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--kinds", default="plain,distractor,crossing")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train and write model.ckpt, loss.csv, config.txt")
    p.add_argument("--config")
    p.add_argument("--data", help="sequence directory or a directory of them")
    p.add_argument("--suite-seed", type=int, default=1, help="generate the training suite in memory (no --data)")
    p.add_argument("--suite-count", type=int, default=24)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="track one sequence and write per-frame boxes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--sequence", required=True)
    p.add_argument("--init-box", help="CSV whose first row is the initial box (default: gt.csv row 0)")
    p.add_argument("--diagnostics", help="write one JSON line per frame")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="AO / SR metrics of predicted boxes against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--skip-first", action="store_true", help="exclude the initialisation frame")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="per-layer multiply-accumulate table as CSV")
    p.add_argument("--config")
    p.add_argument("--pruned", type=int, help="override the number of pruned tokens")
    p.add_argument("--measure", action="store_true", help="also count MACs in a real forward pass")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    for name, fn, helptext in (
        ("dump-masks", cmd_dump_masks, "token tables, attention allowance bitsets and group summaries"),
        ("dump-heatmap", cmd_dump_heatmap, "probability, aggregate and score maps as CSV and PPM"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config")
        p.add_argument("--sequence", required=True)
        p.add_argument("--frames", help="comma-separated frame indices (default: all after the first)")
        p.add_argument("--out", required=True)
        if name == "dump-heatmap":
            p.add_argument("--cell", type=int, default=8, help="PPM pixels per grid cell")
        p.set_defaults(fn=fn)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
