"""
CSV workflow demo
=================

Writes a synthetic corpus to CSV with ``windensemble synth``, trains on it,
and scores the frozen checkpoints, all through the command-line entry point.
Outputs go under ``runs/demo_csv`` (or the directory given as argument).
"""
import sys
from pathlib import Path

from windensemble import cli

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def main(out="runs/demo_csv"):
    out = Path(out)
    steps = [
        ["synth", "--config", str(SMOKE), "--out", str(out / "corpus")],
        ["train", "--config", str(out / "corpus" / "corpus.config.json"), "--out", str(out / "train")],
        ["evaluate", "--checkpoint", str(out / "train" / "checkpoint"), "--out", str(out / "eval")],
    ]
    for argv in steps:
        print("$ windensemble", " ".join(argv))
        code = cli.run(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
