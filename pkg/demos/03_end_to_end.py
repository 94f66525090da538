"""Generate scenarios, train a tiny tracker, track, score and dump diagnostics.

Everything goes through the command-line entry point, so each step here is
also a shell command (``desktrack <subcommand> ...``). Takes a few seconds.

    python demos/03_end_to_end.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from desktrack.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="desktrack_"))
work.mkdir(parents=True, exist_ok=True)
cfg = work / "tiny.cfg"
cfg.write_text(
    "# a small model so the demo runs quickly\n"
    "template_size = 16\nsearch_size = 32\nembed_dim = 16\nnum_heads = 2\nnum_layers = 3\n"
    "tpe_layer = 1\ncz_size = 5\nscz_size = 3\nprune_count = 20\n"
    "steps = 150\nbatch_size = 4\nlr = 1e-3\ndynamic_update = false\n"
)


def run(*args):
    print("$ desktrack", " ".join(str(a) for a in args))
    code = main([str(a) for a in args])
    if code:
        sys.exit(code)


data = work / "data"
run("gen", "--out", data, "--seed", 5, "--count", 6, "--frames", 20)
run("train", "--config", cfg, "--data", data, "--out", work / "run")

seq = sorted(p for p in data.iterdir() if p.name.startswith("crossing"))[0]
run("track", "--checkpoint", work / "run" / "model.ckpt", "--sequence", seq, "--out", work / "boxes.csv",
    "--diagnostics", work / "diag.jsonl")
run("eval", "--pred", work / "boxes.csv", "--gt", seq / "gt.csv", "--out", work / "metrics.json")

run("dump-masks", "--checkpoint", work / "run" / "model.ckpt", "--sequence", seq, "--frames", "5",
    "--out", work / "masks")
run("dump-heatmap", "--checkpoint", work / "run" / "model.ckpt", "--sequence", seq, "--frames", "5",
    "--out", work / "heat")
run("bench", "--config", cfg, "--measure", "--out", work / "bench.csv")
print("\noutputs in", work)
