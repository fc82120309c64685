"""Calibration harness for the alignment gates.

Sweeps init strength / learning rate / verifier choice and prints the gate
quantities: sampled-eval improvement per mode, cross-mode ordering, drop-rate
trend, and the avg-score length-collapse ratio.
"""

import argparse
import json
import sys
import time

import numpy as np

from treealign import alignment as A
from treealign import injector as I
from treealign import mc_labeler as M
from treealign import policy as P
from treealign import prm as R
from treealign import toy_env
from treealign import tree_engine as TE
from treealign.seeds import derive


def make_policy(tasks, vocab, sft_steps, sft_lr=0.5, batch=8):
    base = P.ToySoftmaxPolicy.init(vocab)
    pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks]
    P.train_sft(base, pairs, P.SftConfig(lr=sft_lr, steps=sft_steps, batch=batch))
    return base


def evaluate(pol, tasks, temperature=1.0, eval_seed=9, samples=2):
    outs = []
    for i, t in enumerate(tasks):
        for s in range(samples):
            cfg = P.SamplingConfig(seed=derive(eval_seed, "eval", i, s), temperature=temperature)
            outs.append(P.rollout_tokens(pol, t, [], cfg).outcome_score)
    return float(np.mean(outs))


def build_tiny_prm(pol, tasks, vocab, seed=3):
    corpus = []
    groups = {}
    per_task = {}
    for i, task in enumerate(tasks):
        tree = TE.build_tree(pol, task, TE.TreeConfig(seed=derive(seed, "tree", i)))
        vals = M.mc_values(tree)
        samples = M.subsample_per_tree(M.label_tokens(tree, vals, 0.5), 16)
        groups[task.task_id] = [float(tree.nodes[l].successes) for l in sorted(tree.leaf_ids())]
        per_task[task.task_id] = samples
    retained, _ = M.variance_filter(groups, 1e-6)
    for task in tasks:
        if task.task_id in retained:
            corpus.extend((task, s) for s in per_task[task.task_id])
    golds = [toy_env.gold_trajectory(t, vocab) for t in tasks]
    tmap = {t.task_id: t for t in tasks}
    inj, _ = I.build_injection_set(golds, tmap, I.PerturbationSpec(seed=seed, repeats=16))
    corpus.extend((tmap[s.trajectory.task_id], s) for s in inj)
    prm, rep = R.train_prm(corpus, R.PrmTrainConfig(seed=seed))
    print("tinyprm aucs:", {k: round(x, 4) for k, x in rep.items() if k.startswith("auc")})
    return prm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sft-steps", type=int, default=150)
    ap.add_argument("--lr", type=float, default=0.5)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--temp", type=float, default=1.0)
    ap.add_argument("--modes", default="vanilla,tree,tree+process,chain+process,tree+avg-score")
    ap.add_argument("--prm", default="oracle", choices=["oracle", "tiny"])
    ap.add_argument("--tasks", type=int, default=200)
    args = ap.parse_args()

    tasks = toy_env.generate_tasks(42, args.tasks)
    vocab = toy_env.GenConfig().vocabulary()
    base = make_policy(tasks, vocab, args.sft_steps)
    init_eval = evaluate(base, tasks, args.temp)
    print(f"init sampled-eval {init_eval:.4f}  greedy {evaluate(base, tasks, 1e-4):.4f}")

    if args.prm == "oracle":
        verifier = R.OraclePrm()
    else:
        verifier = build_tiny_prm(base, tasks[: min(len(tasks), 120)], vocab)

    finals = {}
    for mode in args.modes.split(","):
        t0 = time.time()
        grpo = A.GrpoConfig(steps=args.steps, lr=args.lr, seed=7)
        trained, log = A.align(
            base, tasks, verifier, grpo,
            TE.TreeConfig(seed=0, temperature=args.temp), A.ShapingConfig(), mode=mode,
        )
        fin = evaluate(trained, tasks, args.temp)
        lens = [m["mean_len"] for m in log]
        drs = [m["drop_rate"] for m in log]
        finals[mode] = {"eval": fin, "len_last": float(np.mean(lens[-30:])), "log": log}
        print(
            f"{mode:15s}: {time.time()-t0:4.0f}s eval {init_eval:.3f}->{fin:.4f} "
            f"len {np.mean(lens[:30]):.1f}->{np.mean(lens[-30:]):.1f} "
            f"drop {np.mean(drs[:30]):.3f}->{np.mean(drs[-30:]):.3f}"
        )
    if all(m in finals for m in ("vanilla", "tree", "tree+process")):
        print(
            "ordering tree+process >= tree >= vanilla:",
            finals["tree+process"]["eval"] >= finals["tree"]["eval"] >= finals["vanilla"]["eval"],
        )
    if all(m in finals for m in ("tree+process", "tree+avg-score")):
        ratio = finals["tree+avg-score"]["len_last"] / finals["tree+process"]["len_last"]
        print(f"len ratio avg/process: {ratio:.3f} (gate <= 0.7)")


if __name__ == "__main__":
    main()
