"""Generate a synthetic cohort, cross-validate every flavor and measure SpO2-lag sensitivity.

    python3 scripts/synthetic_benchmark.py --out /tmp/bench --subjects 10 --hours 2 --folds 5

With no size flags this reproduces the acceptance cohort (20 subjects x 2 nights x 8 h).
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from apnea_kit.cli import main as cli
from apnea_kit.config import Flavor, RunConfig
from apnea_kit.pipeline import lag_evaluation, load_cohort

REPO = Path(__file__).resolve().parents[1]


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=REPO / "configs" / "acceptance.json")
    p.add_argument("--subjects", type=int)
    p.add_argument("--nights", type=int)
    p.add_argument("--hours", type=float)
    p.add_argument("--folds", type=int, help="override k_folds (needs at least this many subjects)")
    p.add_argument("--shift", type=float, default=25.0, help="SpO2 delay in seconds for the lag check")
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def main() -> None:
    args = parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    data, runs = args.out / "data", args.out / "runs"
    config = args.config
    if args.folds is not None:
        doc = json.loads(config.read_text(encoding="utf-8"))
        doc["k_folds"] = args.folds
        args.out.mkdir(parents=True, exist_ok=True)
        config = args.out / "config.json"
        config.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    t0 = time.perf_counter()
    synth = ["--seed", str(args.seed), "synth", "--out", str(data)]
    for flag, value in (("--subjects", args.subjects), ("--nights", args.nights), ("--hours", args.hours)):
        if value is not None:
            synth += [flag, str(value)]
    if cli(synth) != 0:
        raise SystemExit("synth failed")
    if cli(["--config", str(config), "--seed", str(args.seed), "run", "--data", str(data), "--out", str(runs)]) != 0:
        raise SystemExit("run failed")
    cfg = RunConfig.load(config, data_dir=str(data), output_dir=str(runs), seed=args.seed)
    lagged = [f for f in (Flavor.RESP_SPO2, Flavor.RESP_SPO2_ROBUST) if f in cfg.flavor_list]
    if lagged:
        out = lag_evaluation(cfg, cfg.run_dir, load_cohort(cfg), args.shift, lagged)
        print(json.dumps(out, indent=1, sort_keys=True))
    print(f"total time {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
