"""
Regime-switching demo
=====================

Runs the two-regime synthetic experiment for one seed and prints the report
together with the agent's weights per regime. Usage::

    python3 demos/regime_switch.py [seed]
"""
import sys
from pathlib import Path

from windensemble import evaluation as ev
from windensemble.config import load_config

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "regime_switch.json"


def main(seed=0):
    cfg = load_config(CONFIG)
    report, runs = ev.run_experiment(cfg, seed=seed, return_runs=True)
    print(report.to_text())
    att = report.regimes[0]
    for kind, d in att["regimes"].items():
        weights = "  ".join(f"{m}={w:.2f}" for m, w in d["mean_weight"].items())
        print(f"{kind:<8} best={d['correct_model']:<16} {weights}")
    print("segments:", ", ".join(f"{s['regime']}@{s['start']}:{s['weight_on_correct']:.2f}"
                                 for s in att["segments"]))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
