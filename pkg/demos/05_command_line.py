"""The idfree command line, end to end, in a temporary directory.

Run:  python demos/05_command_line.py
"""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

from idfree import synthetic


def idfree(*args):
    cmd = [sys.executable, "-m", "idfree.cli", *map(str, args)]
    print("$ idfree", " ".join(map(str, args)))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(proc.stdout.strip()[:400])
    if proc.returncode:
        print(proc.stderr, file=sys.stderr)
        raise SystemExit(proc.returncode)
    return proc.stdout


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    # Raw inputs: a user<TAB>item log plus one feature row per item.
    syn = synthetic.two_community(n_users=100, n_items=100, seed=2)
    rows = []
    for split in ("train", "val", "test"):
        m = syn.data.split(split)
        rows += [f"user{u}\t{i}\n" for u, i in zip(m.row_ids(), m.col_idx)]
    (tmp / "log.tsv").write_text("".join(rows))
    syn.item_text.save(tmp / "text.idfv")
    syn.item_visual.save(tmp / "visual.idfv")

    idfree("prepare", "--interactions", tmp / "log.tsv", "--text", tmp / "text.idfv",
           "--visual", tmp / "visual.idfv", "--out", tmp / "prep", "--k", 5)
    idfree("train", "--data", tmp / "prep", "--out", tmp / "run", "--batch-size", 128,
           "--lr", 0.01, "--max-epochs", 10, "--k", 5)
    idfree("evaluate", "--data", tmp / "prep", "--checkpoint", tmp / "run" / "checkpoint.idfc")
    (tmp / "rows.json").write_text(json.dumps(["all", "-PE"]))
    idfree("ablate", "--data", tmp / "prep", "--rows", tmp / "rows.json", "--batch-size", 128,
           "--lr", 0.01, "--max-epochs", 5, "--k", 5)
    idfree("export-embeddings", "--checkpoint", tmp / "run" / "checkpoint.idfc",
           "--out", tmp / "emb")
    idfree("gradcheck", "--seed", 0)
