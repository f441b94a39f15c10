"""Offline end-to-end demo: synthetic data, scripted replies, every paradigm, one report.

    python3 scripts/replay_demo.py --out /tmp/visreason-demo
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path

from visreason.cli import main as cli

HERE = Path(__file__).resolve().parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="demo")
    ap.add_argument("--sources", type=int, default=20)
    args = ap.parse_args()
    out = Path(args.out)
    subprocess.run(
        [sys.executable, str(HERE / "make_synthetic.py"), "--out", str(out), "--sources", str(args.sources)],
        check=True,
    )
    runs = str(out / "runs")
    common = ["--dataset", "openworld", "--manifest", str(out / "openworld.jsonl"), "--subset-k", str(args.sources)]
    common += ["--runs-dir", runs]
    model = f"scripted:{out / 'replies.jsonl'}#demo-vlm"
    for paradigm in ("dvrl", "drl", "ca"):
        cli(["run", "--paradigm", paradigm, "--model", model, *common])
    cli(["run", "--paradigm", "rule-apply", "--rules", str(out / "rules.jsonl"), "--model", model, *common])
    # a single-image model cannot take the 13-image DVRL request
    cli(["run", "--paradigm", "dvrl", "--model", f"scripted:{out / 'replies.jsonl'}#demo-1img", "--max-images", "1", *common])
    run_ids = sorted(p.name for p in Path(runs).iterdir() if p.is_dir())
    print()
    cli(["report", "--runs-dir", runs, *[a for r in run_ids for a in ("--run", r)]])


if __name__ == "__main__":
    main()
