"""Command-line interface.

Subcommands: synth, tree, label, inject, train-prm, align, tts, eval,
verify, plus pipeline (runs every stage end to end).  Global flags:
--config, --seed, --out, --resume, --jobs.  Exit codes: 0 success, 2 config
error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import alignment as A
from . import injector as I
from . import mc_labeler as M
from . import policy as P
from . import prm as R
from . import toy_env
from . import tree_engine as TE
from . import tts as T
from .config import Config, ConfigError
from .core import Trajectory, read_jsonl, write_jsonl
from .pipeline import StageError, eval_report, render_report, run_pipeline, verify_run
from .remote import RemotePolicy, RemotePrm, run_conformance
from .seeds import derive

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _load_tasks(path, cfg: Config):
    return [toy_env.Task.from_json(o) for o in read_jsonl(path)]


def _load_policy(spec: str, cfg: Config, tasks):
    """file path | 'sft' (train on gold now) | 'fresh' | http(s) URL."""
    if spec == "fresh":
        return P.ToySoftmaxPolicy.init(cfg.vocabulary())
    if spec == "sft":
        vocab = cfg.vocabulary()
        pol = P.ToySoftmaxPolicy.init(vocab)
        pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks[: cfg.pipeline.sft_tasks]]
        P.train_sft(pol, pairs, P.SftConfig(lr=cfg.sft.lr, steps=cfg.sft.steps,
                                            batch=cfg.sft.batch, seed=derive(cfg.seed, "sft")))
        return pol
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemotePolicy(spec, cfg.vocabulary())
    return P.ToySoftmaxPolicy.load(spec)


def _load_prm(spec: str, cfg: Config):
    if spec == "oracle":
        return R.OraclePrm(cfg.prm.pooling)
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemotePrm(spec, cfg.prm.pooling)
    return R.TinyPrm.load(spec)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    tasks = toy_env.generate_tasks(args.seed if args.seed is not None else cfg.seed,
                                   args.count, cfg.gen_config())
    write_jsonl(args.out, [t.to_json() for t in tasks])
    if args.gold:
        vocab = cfg.vocabulary()
        write_jsonl(args.gold, [toy_env.gold_trajectory(t, vocab).to_json() for t in tasks])
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return EXIT_OK


def cmd_tree(args) -> int:
    cfg = _load_config(args)
    tasks = _load_tasks(args.tasks, cfg)
    policy = _load_policy(args.policy, cfg, tasks)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "trees.jsonl"
    base = TE.TreeConfig(
        branch_n=args.n, rollouts_t=args.t, rounds_k=args.k,
        temperature=args.temp, seed=0, top_p=cfg.tree.top_p,
        min_prefix_tokens=cfg.tree.min_prefix_tokens,
        rescore_each_round=cfg.tree.rescore_each_round, entropy_unit=cfg.tree.entropy_unit,
    )

    def build(item):
        i, task = item
        tree_cfg = TE.TreeConfig(**{**base.to_json(), "seed": derive(seed, "tree", i)})
        return TE.build_tree(policy, task, tree_cfg)

    items = list(enumerate(tasks))
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            trees = list(ex.map(build, items, chunksize=4))
    else:
        trees = [build(it) for it in items]
    TE.save_trees(out, trees)
    print(f"wrote {len(trees)} trees to {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _load_config(args)
    trees_path = Path(args.trees)
    if trees_path.is_dir():
        trees_path = trees_path / "trees.jsonl"
    trees = TE.load_trees(trees_path)
    groups = {}
    per_tree = {}
    for tree in trees:
        values = M.mc_values(tree)
        samples = M.label_tokens(tree, values, args.threshold)
        samples = M.subsample_per_tree(samples, cfg.label.per_tree_cap)
        groups[tree.task_id] = [float(tree.nodes[l].successes) for l in sorted(tree.leaf_ids())]
        per_tree[tree.task_id] = samples
    retained, report = M.variance_filter(groups, args.min_std)
    records = []
    for tree in trees:
        if tree.task_id in retained:
            records.extend(s.to_json() for s in per_tree[tree.task_id])
    write_jsonl(args.out, records)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
    print(f"wrote {len(records)} samples to {args.out} "
          f"(retained {report.retained} of {len(groups)} problems)")
    return EXIT_OK


def _parse_mix(spec: str) -> dict:
    out = {}
    for part in spec.split(","):
        key, _, val = part.partition("=")
        out[key.strip()] = float(val)
    return out


def cmd_inject(args) -> int:
    cfg = _load_config(args)
    golds = [Trajectory.from_json(o) for o in read_jsonl(args.gold)]
    tasks = _load_tasks(args.tasks, cfg)
    tmap = {t.task_id: t for t in tasks}
    spec = I.PerturbationSpec(
        small_iou_range=(cfg.inject.small_iou_lo, cfg.inject.small_iou_hi),
        seed=args.seed if args.seed is not None else cfg.seed,
        ratio=_parse_mix(args.mix),
        repeats=args.repeats,
    )
    samples, report = I.build_injection_set(golds, tmap, spec)
    write_jsonl(args.out, [s.to_json() for s in samples])
    print(f"wrote {len(samples)} samples to {args.out}; counts {report['counts']}, "
          f"skipped {len(report['skipped'])}")
    return EXIT_OK


def cmd_train_prm(args) -> int:
    cfg = _load_config(args)
    tasks = _load_tasks(args.tasks, cfg)
    tmap = {t.task_id: t for t in tasks}
    data = []
    for path in args.data:
        for rec in read_jsonl(path):
            sample = M.LabeledSample.from_json(rec)
            data.append((tmap[sample.trajectory.task_id], sample))
    prm, report = R.train_prm(
        data,
        R.PrmTrainConfig(lr=cfg.prm.lr, epochs=args.epochs, batch=cfg.prm.batch,
                         seed=args.seed if args.seed is not None else cfg.seed,
                         holdout_fraction=cfg.prm.holdout_fraction, normalize=cfg.prm.normalize),
    )
    prm.save(args.out, trained_on=",".join(map(str, args.data)), seed=args.seed)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    aucs = {k: round(v, 4) for k, v in report.items() if k.startswith("auc") and v == v}
    print(f"wrote scorer to {args.out}; held-out AUCs {aucs}")
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _load_config(args)
    tasks = _load_tasks(args.tasks, cfg)
    policy = _load_policy(args.policy, cfg, tasks)
    verifier = _load_prm(args.prm, cfg) if args.prm else None
    seed = args.seed if args.seed is not None else cfg.seed
    grpo = A.GrpoConfig(epsilon=args.eps, group_size=args.g, steps=args.steps,
                        lr=args.lr, seed=seed, optimizer=cfg.align.optimizer,
                        inner_epochs=cfg.align.inner_epochs)
    shaping = A.ShapingConfig(rho=args.rho, gamma=args.gamma,
                              strict_boundary=cfg.shaping.strict_boundary)
    tree_cfg = cfg.tree_config(0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    entries = []

    def on_iter(entry):
        entries.append(entry)

    trained, metrics = A.align(policy, tasks, verifier, grpo, tree_cfg, shaping,
                               mode=args.mode, on_iteration=on_iter)
    write_jsonl(metrics_path, metrics)
    trained.save(out / "policy.json")
    final = metrics[-1] if metrics else {}
    print(f"mode={args.mode} final mean_outcome={final.get('mean_outcome'):.4f} "
          f"drop_rate={final.get('drop_rate'):.3f} -> {out}")
    return EXIT_OK


def cmd_tts(args) -> int:
    cfg = _load_config(args)
    tasks = _load_tasks(args.tasks, cfg)
    policy = _load_policy(args.policy, cfg, tasks)
    verifier = _load_prm(args.prm, cfg) if args.prm else None
    seed = args.seed if args.seed is not None else cfg.seed
    seeds = [derive(seed, "tts", s) for s in range(args.seeds)]
    budgets = [int(x) for x in args.n.split(",")]
    curve = T.scaling_curve(policy, verifier, tasks, args.strategy, budgets, seeds,
                            temperature=cfg.tts.temperature, top_p=cfg.tts.top_p)
    with open(args.out, "w") as f:
        json.dump(curve, f, indent=2, sort_keys=True)
    rows = ", ".join(f"n={r['n']}: {r['mean']:.4f}±{r['stderr']:.4f}" for r in curve["budgets"])
    print(f"{args.strategy}: {rows} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = eval_report(args.run)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print(render_report(report))
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.endpoint:
        cfg = _load_config(args)
        tasks = toy_env.generate_tasks(derive(cfg.seed, "conformance"), args.count, cfg.gen_config())
        report = run_conformance(args.endpoint, tasks, cfg.vocabulary())
        print(json.dumps(report.to_json(), indent=2))
        return EXIT_OK if report.passed else EXIT_STAGE
    result = verify_run(args.run)
    print(json.dumps(result, indent=2))
    return EXIT_OK if result["ok"] else EXIT_STAGE


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    manifest = run_pipeline(cfg, args.out, resume=args.resume, jobs=args.jobs,
                            log=lambda s: print(s, flush=True))
    print(f"pipeline complete in {manifest['wall_clock_seconds']}s -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treealign",
                                 description="process-supervised reasoning alignment toolkit")
    ap.add_argument("--config", help="JSON config file")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        if out_required:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate tasks (and optionally gold trajectories)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--gold", help="also write oracle trajectories here")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("tree", help="build entropy-guided reasoning trees")
    p.add_argument("--tasks", required=True)
    p.add_argument("--policy", required=True, help="policy file, URL, 'sft', or 'fresh'")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--t", type=int, default=9)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--temp", type=float, default=1.2)
    common(p)
    p.set_defaults(fn=cmd_tree)

    p = sub.add_parser("label", help="value and label trees into verifier training data")
    p.add_argument("--trees", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-std", type=float, default=1e-6)
    p.add_argument("--report")
    common(p)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("inject", help="synthesize perturbed negatives from gold trajectories")
    p.add_argument("--gold", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--mix", default="anchor=1,small=1,large=1,tamper=1")
    p.add_argument("--repeats", type=int, default=1)
    common(p)
    p.set_defaults(fn=cmd_inject)

    p = sub.add_parser("train-prm", help="train the token-level verifier")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--report")
    common(p)
    p.set_defaults(fn=cmd_train_prm)

    p = sub.add_parser("align", help="reinforcement-learning alignment")
    p.add_argument("--tasks", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--prm", help="scorer file, URL, or 'oracle'")
    p.add_argument("--mode", default="tree+process", choices=A.MODES)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--g", type=int, default=8)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.22)
    common(p)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("tts", help="test-time scaling curves")
    p.add_argument("--tasks", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--prm")
    p.add_argument("--strategy", default="bon", choices=list(T.STRATEGIES))
    p.add_argument("--n", default="1,8,32", help="comma-separated budgets")
    p.add_argument("--seeds", type=int, default=3)
    common(p)
    p.set_defaults(fn=cmd_tts)

    p = sub.add_parser("eval", help="aggregate a run directory into a report")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="recompute and diff a run, or check a server")
    p.add_argument("--run")
    p.add_argument("--endpoint", help="wire-protocol conformance against this base URL")
    p.add_argument("--count", type=int, default=8, help="conformance task count")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--resume", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
