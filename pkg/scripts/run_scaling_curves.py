"""Produce verifier-guided scaling curves (greedy / self-consistency /
best-of-N / beam) for a partially covered policy, as plot-ready JSON."""

import argparse
import json

from treealign import policy as P
from treealign import prm as R
from treealign import toy_env
from treealign import tts as T
from treealign.seeds import derive


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sft-tasks", type=int, default=100)
    ap.add_argument("--sft-steps", type=int, default=800)
    ap.add_argument("--eval-tasks", type=int, default=200)
    ap.add_argument("--budgets", default="1,2,4,8,16,32")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="scaling_curves.json")
    args = ap.parse_args()

    train = toy_env.generate_tasks(42, 250)
    vocab = toy_env.GenConfig().vocabulary()
    policy = P.ToySoftmaxPolicy.init(vocab)
    pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in train[: args.sft_tasks]]
    P.train_sft(policy, pairs, P.SftConfig(lr=0.5, steps=args.sft_steps, batch=8))
    eval_tasks = toy_env.generate_tasks(991, args.eval_tasks)
    oracle = R.OraclePrm()
    budgets = [int(x) for x in args.budgets.split(",")]
    seeds = [derive(3, "tts", s) for s in range(args.seeds)]
    curves = {
        "greedy": T.scaling_curve(policy, None, eval_tasks, "greedy", [1], seeds),
        "sc": T.scaling_curve(policy, None, eval_tasks, "sc", budgets, seeds),
        "bon": T.scaling_curve(policy, oracle, eval_tasks, "bon", budgets, seeds),
        "beam": T.scaling_curve(policy, oracle, eval_tasks, "beam",
                                [n for n in budgets if n % 2 == 0 and n >= 2], seeds),
    }
    with open(args.out, "w") as f:
        json.dump(curves, f, indent=2, sort_keys=True)
    for name, curve in curves.items():
        rows = "  ".join(f"n={r['n']}:{r['mean']:.3f}" for r in curve["budgets"])
        print(f"{name:8s} {rows}")
    print(f"-> {args.out}")


if __name__ == "__main__":
    main()
