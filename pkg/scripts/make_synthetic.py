"""Write a synthetic OpenWorld-style dataset plus a scripted reply fixture.

The fixture answers every DVRL, DRL and CA request the CLI will make for the
subset, with the conclusion correct at roughly ``--accuracy``. Use it with
``--model scripted:<out>/replies.jsonl#demo-vlm``.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from visreason.backends import ScriptedBackend
from visreason.datasets import build_openworld_subset, load_openworld_manifest
from visreason.synthetic import script_ca, script_drl, script_dvrl, structured_reply, write_openworld_manifest

MODEL = "demo-vlm"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo")
    ap.add_argument("--sources", type=int, default=20)
    ap.add_argument("--accuracy", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = write_openworld_manifest(out, args.sources, seed=args.seed)
    episodes = build_openworld_subset(load_openworld_manifest(manifest), args.sources)
    rng = random.Random(args.seed)
    backend = ScriptedBackend()
    rules = []
    for i, ep in enumerate(episodes):
        verdicts = [ep.query_label if rng.random() < args.accuracy else ep.query_label.opposite for _ in range(3)]
        rule = ep.rule_caption or "a shared theme"
        stage1 = f"Cat_2 images all show it.\n\n**Summary**: {rule}"
        script_dvrl(backend, ep, MODEL, structured_reply(verdicts[0], rule, style=i))
        script_drl(backend, ep, MODEL, stage1, rule, structured_reply(verdicts[1], rule, style=i + 1))
        script_ca(backend, ep, MODEL, MODEL, structured_reply(verdicts[2], rule, style=i + 2))
        rules.append({"episode_id": ep.episode_id, "rule": rule})
    backend.save(out / "replies.jsonl")
    (out / "rules.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rules), encoding="utf-8")
    print(f"wrote {manifest} ({len(episodes)} episodes) and {out / 'replies.jsonl'} ({len(backend)} replies)")


if __name__ == "__main__":
    main()
