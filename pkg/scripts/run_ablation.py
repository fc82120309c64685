"""Run the five alignment modes at the calibrated defaults and print the
ablation table (the per-mode sampled evaluation, drop trends, and lengths).
"""

import argparse
import time

import numpy as np

from treealign import alignment as A
from treealign import policy as P
from treealign import prm as R
from treealign import toy_env
from treealign import tree_engine as TE
from treealign.seeds import derive


def evaluate(pol, tasks, samples=2, temperature=1.0, eval_seed=9):
    outs = []
    for i, t in enumerate(tasks):
        for s in range(samples):
            cfg = P.SamplingConfig(seed=derive(eval_seed, "eval", i, s), temperature=temperature)
            outs.append(P.rollout_tokens(pol, t, [], cfg).outcome_score)
    return float(np.mean(outs))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tasks", type=int, default=200)
    ap.add_argument("--task-seed", type=int, default=42)
    ap.add_argument("--sft-steps", type=int, default=250)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.22)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    tasks = toy_env.generate_tasks(args.task_seed, args.tasks)
    vocab = toy_env.GenConfig().vocabulary()
    base = P.ToySoftmaxPolicy.init(vocab)
    pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks]
    P.train_sft(base, pairs, P.SftConfig(lr=0.5, steps=args.sft_steps, batch=8))
    init_eval = evaluate(base, tasks)
    print(f"init sampled-eval {init_eval:.4f}")
    print(f"{'mode':16s} {'eval':>8s} {'drop0':>7s} {'dropF':>7s} {'lenF':>7s} {'secs':>6s}")
    oracle = R.OraclePrm()
    for mode in A.MODES:
        t0 = time.time()
        grpo = A.GrpoConfig(steps=args.steps, lr=args.lr, seed=args.seed)
        trained, log = A.align(base, tasks, oracle, grpo,
                               TE.TreeConfig(seed=0, temperature=1.0), A.ShapingConfig(), mode=mode)
        drs = [m["drop_rate"] for m in log]
        lens = [m["mean_len"] for m in log]
        print(f"{mode:16s} {evaluate(trained, tasks):8.4f} {np.mean(drs[:30]):7.3f} "
              f"{np.mean(drs[-30:]):7.3f} {np.mean(lens[-30:]):7.1f} {time.time()-t0:6.0f}")


if __name__ == "__main__":
    main()
