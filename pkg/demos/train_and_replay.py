"""Train a small clutter-removal agent, evaluate it and re-verify its log.

    python3 demos/train_and_replay.py [--steps 1500] [--out /tmp/gridmanip-demo]
"""
import argparse
import json
from dataclasses import replace

from gridmanip import harness


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--out", default="/tmp/gridmanip-demo")
    args = ap.parse_args()
    cfg = replace(harness.clutter_desk(), train_steps=args.steps, eval_interval=max(1, args.steps // 3),
                  eval_runs=10, name="demo")
    summary = harness.run_experiment(cfg, args.out)
    print(json.dumps(summary["mean"], indent=2))
    print(open(f"{args.out}/seed_0/metrics.csv").read())
    ok, msg = harness.replay_log(f"{args.out}/seed_0/train_log.jsonl")
    print("replay:", "OK" if ok else "MISMATCH", msg)


if __name__ == "__main__":
    main()
