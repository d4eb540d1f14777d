"""Regenerate the seeded world shipped in ``src/dualpilot/data``.

    python scripts/build_data.py [--seed 0]
"""
import argparse
import json
from pathlib import Path

from dualpilot.corpus import Transcript, Turn, emit_textgrid
from dualpilot.simulation import World
from dualpilot.synth import synthesize_corpus, synthetic_judge_scores

DATA = Path(__file__).resolve().parents[1] / "src" / "dualpilot" / "data"


def sample_textgrid():
    t = Transcript("sample", speakers=("Alice", "Bob"), domain_tag="tech", duration_s=60.0)
    lines = [
        ("Alice", 0.0, 6.5, "Morning all, let's go over the release checklist."),
        ("Bob", 7.0, 14.0, "The deployment target for Juniper is 53 percent of users."),
        ("Alice", 15.0, 22.5, "Good. Who owns the rollback plan?"),
        ("Bob", 23.0, 31.0, "I will draft it and share it by Friday."),
        ("Alice", 32.0, 40.0, "Then \"phase two\" starts next Monday."),
    ]
    for spk, a, b, text in lines:
        t.turns.append(Turn(spk, a, b, text))
    return emit_textgrid(t)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    world = World.from_corpus(synthesize_corpus(seed=args.seed))
    world.save(args.out)
    (args.out / "sample.TextGrid").write_text(sample_textgrid(), "utf-8")
    with open(args.out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for rec in synthetic_judge_scores(seed=args.seed):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for p in sorted(args.out.iterdir()):
        print(f"{p.name}\t{p.stat().st_size}")


if __name__ == "__main__":
    main()
