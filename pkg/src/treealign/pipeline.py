"""Staged end-to-end pipeline with run manifests and digest-based resume.

Stages: synth (tasks + gold) -> sft (policy) -> tree -> label -> inject ->
train-prm -> align (all configured modes) -> tts -> eval report.  Every
stage's outputs are addressable files; the manifest records input/output
digests so a re-run reproduces identical artifacts and --resume can skip
stages whose outputs already match.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import alignment as A
from . import injector as I
from . import mc_labeler as M
from . import policy as P
from . import prm as R
from . import toy_env
from . import tree_engine as TE
from . import tts as T
from .config import Config
from .core import Trajectory, read_jsonl, write_jsonl
from .remote import RemotePrm
from .seeds import derive


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_map(paths) -> dict:
    return {str(Path(p).name): sha256_file(p) for p in paths if Path(p).exists()}


STAGES = ("synth", "sft", "tree", "label", "inject", "train-prm", "align", "tts", "eval")


@dataclass
class StageResult:
    name: str
    outputs: list
    skipped: bool
    seconds: float


def _stage_config_digest(cfg: Config, stage: str) -> str:
    relevant = {
        "seed": cfg.seed,
        "gen": cfg.to_dict()["gen"],
        "pipeline": cfg.to_dict()["pipeline"],
        stage: cfg.to_dict().get({"train-prm": "prm"}.get(stage, stage), {}),
    }
    if stage in ("tree", "align", "tts"):
        relevant["sft"] = cfg.to_dict()["sft"]
        relevant["tree_cfg"] = cfg.to_dict()["tree"]
    if stage == "align":
        relevant["shaping"] = cfg.to_dict()["shaping"]
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def run_pipeline(cfg: Config, out_dir, resume: bool = False, jobs: int = 1,
                 log: Optional[Callable[[str], None]] = None) -> dict:
    """Execute the staged pipeline into out_dir; returns the manifest dict.

    Stage failures raise StageError with the failed stage named; partial
    outputs are preserved on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda s: None)
    manifest_path = out / "manifest.json"
    old_manifest = {}
    if resume and manifest_path.exists():
        with open(manifest_path) as f:
            old_manifest = json.load(f)

    vocab = cfg.vocabulary()
    gen = cfg.gen_config()
    stage_records: dict = {}
    t_start = time.time()

    def run_stage(name: str, outputs: list, fn: Callable[[], None]) -> None:
        t0 = time.time()
        digest = _stage_config_digest(cfg, name)
        paths = [out / o for o in outputs]
        prior = old_manifest.get("stages", {}).get(name)
        if (
            resume
            and prior
            and prior.get("config_digest") == digest
            and all(p.exists() for p in paths)
            and prior.get("outputs") == _digest_map(paths)
        ):
            say(f"[{name}] resumed (digests match)")
            stage_records[name] = dict(prior, skipped=True)
            return
        say(f"[{name}] running")
        try:
            fn()
        except Exception as e:  # noqa: BLE001 - named stage failure is the contract
            raise StageError(name, e) from e
        stage_records[name] = {
            "config_digest": digest,
            "outputs": _digest_map(paths),
            "seconds": round(time.time() - t0, 3),
            "skipped": False,
        }

    # -- synth ------------------------------------------------------------
    tasks_path = out / "tasks.jsonl"
    gold_path = out / "gold.jsonl"

    def do_synth():
        tasks = toy_env.generate_tasks(derive(cfg.seed, "synth"), cfg.pipeline.tasks, gen)
        write_jsonl(tasks_path, [t.to_json() for t in tasks])
        golds = [toy_env.gold_trajectory(t, vocab) for t in tasks]
        write_jsonl(gold_path, [g.to_json() for g in golds])

    run_stage("synth", ["tasks.jsonl", "gold.jsonl"], do_synth)
    tasks = [toy_env.Task.from_json(o) for o in read_jsonl(tasks_path)]
    tmap = {t.task_id: t for t in tasks}

    # -- sft ----------------------------------------------------------------
    policy_path = out / "policy.json"

    def do_sft():
        pol = P.ToySoftmaxPolicy.init(vocab)
        sft_tasks = tasks[: cfg.pipeline.sft_tasks]
        pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in sft_tasks]
        P.train_sft(pol, pairs, P.SftConfig(lr=cfg.sft.lr, steps=cfg.sft.steps,
                                            batch=cfg.sft.batch, seed=derive(cfg.seed, "sft")))
        pol.save(policy_path)

    run_stage("sft", ["policy.json"], do_sft)
    policy = P.ToySoftmaxPolicy.load(policy_path)

    # -- tree ---------------------------------------------------------------
    trees_path = out / "trees.jsonl"

    def do_tree():
        items = list(enumerate(tasks))

        def build(item):
            i, task = item
            return TE.build_tree(policy, task, cfg.tree_config(derive(cfg.seed, "tree", i)))

        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as ex:
                trees = list(ex.map(build, items, chunksize=8))
        else:
            trees = [build(it) for it in items]
        TE.save_trees(trees_path, trees)

    run_stage("tree", ["trees.jsonl"], do_tree)

    # -- label ----------------------------------------------------------------
    prm_data_path = out / "prm_data.jsonl"
    label_report_path = out / "label_report.json"

    def do_label():
        trees = TE.load_trees(trees_path)
        groups = {}
        per_tree: dict = {}
        for tree in trees:
            values = M.mc_values(tree)
            samples = M.label_tokens(tree, values, cfg.label.threshold)
            samples = M.subsample_per_tree(samples, cfg.label.per_tree_cap)
            groups[tree.task_id] = [
                float(tree.nodes[l].successes) for l in sorted(tree.leaf_ids())
            ]
            per_tree[tree.task_id] = samples
        retained, report = M.variance_filter(groups, cfg.label.min_std)
        records = []
        for tree in trees:
            if tree.task_id in retained:
                records.extend(s.to_json() for s in per_tree[tree.task_id])
        write_jsonl(prm_data_path, records)
        with open(str(label_report_path) + ".tmp", "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
        os.replace(str(label_report_path) + ".tmp", label_report_path)

    run_stage("label", ["prm_data.jsonl", "label_report.json"], do_label)

    # -- inject ---------------------------------------------------------------
    inject_path = out / "inject.jsonl"
    inject_report_path = out / "inject_report.json"

    def do_inject():
        golds = [Trajectory.from_json(o) for o in read_jsonl(gold_path)]
        spec = I.PerturbationSpec(
            small_iou_range=(cfg.inject.small_iou_lo, cfg.inject.small_iou_hi),
            seed=derive(cfg.seed, "inject"),
            ratio={"anchor": cfg.inject.anchor, "small": cfg.inject.small,
                   "large": cfg.inject.large, "tamper": cfg.inject.tamper},
            repeats=cfg.inject.repeats,
        )
        samples, report = I.build_injection_set(golds, tmap, spec)
        write_jsonl(inject_path, [s.to_json() for s in samples])
        with open(str(inject_report_path) + ".tmp", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        os.replace(str(inject_report_path) + ".tmp", inject_report_path)

    run_stage("inject", ["inject.jsonl", "inject_report.json"], do_inject)

    # -- train-prm -------------------------------------------------------------
    prm_path = out / "prm.json"
    prm_report_path = out / "prm_report.json"

    def do_train_prm():
        data = []
        for rec in read_jsonl(prm_data_path) + read_jsonl(inject_path):
            sample = M.LabeledSample.from_json(rec)
            data.append((tmap[sample.trajectory.task_id], sample))
        prm, report = R.train_prm(
            data,
            R.PrmTrainConfig(lr=cfg.prm.lr, epochs=cfg.prm.epochs, batch=cfg.prm.batch,
                             seed=derive(cfg.seed, "prm"),
                             holdout_fraction=cfg.prm.holdout_fraction,
                             normalize=cfg.prm.normalize),
        )
        prm.pooling = cfg.prm.pooling
        prm.save(prm_path, trained_on="prm_data.jsonl+inject.jsonl", seed=cfg.seed)
        with open(str(prm_report_path) + ".tmp", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        os.replace(str(prm_report_path) + ".tmp", prm_report_path)

    run_stage("train-prm", ["prm.json", "prm_report.json"], do_train_prm)

    # -- align ------------------------------------------------------------------
    align_outputs = []
    for mode in cfg.align.modes:
        slug = mode.replace("+", "_")
        align_outputs += [f"align_{slug}_metrics.jsonl", f"align_{slug}_policy.json"]

    def make_prm():
        choice = cfg.align.prm
        if choice == "oracle":
            return R.OraclePrm(cfg.prm.pooling)
        if choice == "tiny":
            return R.TinyPrm.load(prm_path)
        return RemotePrm(choice, cfg.prm.pooling)

    def do_align():
        verifier = make_prm()
        grpo = A.GrpoConfig(
            epsilon=cfg.align.epsilon, group_size=cfg.align.group_size,
            steps=cfg.align.steps, lr=cfg.align.lr, seed=derive(cfg.seed, "align"),
            inner_epochs=cfg.align.inner_epochs, optimizer=cfg.align.optimizer,
        )
        shaping = A.ShapingConfig(rho=cfg.shaping.rho, gamma=cfg.shaping.gamma,
                                  strict_boundary=cfg.shaping.strict_boundary)
        base_tree = cfg.tree_config(0)
        tree_cfg = TE.TreeConfig(**{**base_tree.to_json(), "temperature": cfg.align.temperature})
        for mode in cfg.align.modes:
            slug = mode.replace("+", "_")
            trained, metrics = A.align(policy, tasks, verifier, grpo, tree_cfg, shaping, mode=mode)
            write_jsonl(out / f"align_{slug}_metrics.jsonl", metrics)
            trained.save(out / f"align_{slug}_policy.json")

    run_stage("align", align_outputs, do_align)

    # -- tts --------------------------------------------------------------------
    tts_path = out / "tts_curves.json"

    def do_tts():
        verifier = R.OraclePrm(cfg.prm.pooling) if cfg.tts.prm == "oracle" else (
            R.TinyPrm.load(prm_path) if cfg.tts.prm == "tiny" else RemotePrm(cfg.tts.prm))
        eval_tasks = toy_env.generate_tasks(derive(cfg.seed, "tts_tasks"), cfg.tts.eval_tasks, gen)
        seeds = [derive(cfg.seed, "tts_seed", s) for s in range(cfg.tts.seeds)]
        curves = {}
        for strategy in cfg.tts.strategies:
            budgets = [n for n in cfg.tts.budgets if strategy != "beam" or (n >= 2 and n % 2 == 0)]
            if strategy == "greedy":
                budgets = [1]
            curves[strategy] = T.scaling_curve(
                policy, verifier, eval_tasks, strategy, budgets, seeds,
                temperature=cfg.tts.temperature, top_p=cfg.tts.top_p,
            )
        with open(str(tts_path) + ".tmp", "w") as f:
            json.dump(curves, f, indent=2, sort_keys=True)
        os.replace(str(tts_path) + ".tmp", tts_path)

    run_stage("tts", ["tts_curves.json"], do_tts)

    # -- eval ---------------------------------------------------------------------
    report_path = out / "eval_report.json"

    def do_eval():
        report = eval_report(out)
        with open(str(report_path) + ".tmp", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        os.replace(str(report_path) + ".tmp", report_path)

    run_stage("eval", ["eval_report.json"], do_eval)

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "stages": stage_records,
        "inputs": {},
        "outputs": {
            name: rec["outputs"] for name, rec in stage_records.items()
        },
        "wall_clock_seconds": round(time.time() - t_start, 3),
    }
    with open(str(manifest_path) + ".tmp", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(str(manifest_path) + ".tmp", manifest_path)
    return manifest


def eval_report(run_dir) -> dict:
    """Aggregate a run directory into one metrics document.

    Missing stage outputs are reported as named omissions rather than errors.
    """
    run = Path(run_dir)
    report: dict = {"missing": []}

    def need(name: str) -> Optional[Path]:
        p = run / name
        if not p.exists():
            report["missing"].append(name)
            return None
        return p

    prm_rep = need("prm_report.json")
    if prm_rep:
        with open(prm_rep) as f:
            obj = json.load(f)
        report["prm"] = {k: obj.get(k) for k in
                         ("auc_overall", "auc_small_jitter", "auc_large_jitter", "auc_tamper",
                          "epoch_losses", "n_train", "n_holdout")}
    label_rep = need("label_report.json")
    if label_rep:
        with open(label_rep) as f:
            obj = json.load(f)
        report["label"] = {k: obj.get(k) for k in ("retained", "dropped_low_variance", "dropped_too_few")}

    align_modes = {}
    for mode in ("vanilla", "tree", "tree+process", "chain+process", "tree+avg-score"):
        slug = mode.replace("+", "_")
        p = need(f"align_{slug}_metrics.jsonl")
        if not p:
            continue
        metrics = read_jsonl(p)
        if not metrics:
            continue
        k = max(1, min(20, len(metrics) // 4))
        align_modes[mode] = {
            "iterations": len(metrics),
            "first_mean_outcome": float(np.mean([m["mean_outcome"] for m in metrics[:k]])),
            "final_mean_outcome": float(np.mean([m["mean_outcome"] for m in metrics[-k:]])),
            "first_drop_rate": float(np.mean([m["drop_rate"] for m in metrics[:k]])),
            "final_drop_rate": float(np.mean([m["drop_rate"] for m in metrics[-k:]])),
            "final_mean_len": float(np.mean([m["mean_len"] for m in metrics[-k:]])),
        }
    report["align"] = align_modes

    tts = need("tts_curves.json")
    if tts:
        with open(tts) as f:
            report["tts"] = json.load(f)
    return report


def render_report(report: dict) -> str:
    """Human-readable table view of an eval report."""
    lines = []
    if report.get("missing"):
        lines.append("missing artifacts: " + ", ".join(report["missing"]))
    prm = report.get("prm")
    if prm:
        lines.append("")
        lines.append("verifier AUCs (held-out tokens)")
        for k in ("auc_overall", "auc_large_jitter", "auc_small_jitter", "auc_tamper"):
            v = prm.get(k)
            lines.append(f"  {k:18s} {v if v is None else round(v, 4)}")
    align = report.get("align") or {}
    if align:
        lines.append("")
        lines.append(f"{'mode':16s} {'outcome0':>9s} {'outcomeF':>9s} {'drop0':>7s} {'dropF':>7s} {'lenF':>7s}")
        for mode, row in align.items():
            lines.append(
                f"{mode:16s} {row['first_mean_outcome']:9.4f} {row['final_mean_outcome']:9.4f} "
                f"{row['first_drop_rate']:7.3f} {row['final_drop_rate']:7.3f} {row['final_mean_len']:7.1f}"
            )
    tts = report.get("tts") or {}
    if tts:
        lines.append("")
        lines.append(f"{'strategy':10s} {'budget':>7s} {'mean':>8s} {'stderr':>8s}")
        for strategy, curve in tts.items():
            for row in curve.get("budgets", []):
                lines.append(f"{strategy:10s} {row['n']:7d} {row['mean']:8.4f} {row['stderr']:8.4f}")
    return "\n".join(lines)


def verify_run(run_dir) -> dict:
    """Recompute the eval report from raw artifacts and diff against the stored
    one; also re-hash every stage output against the manifest."""
    run = Path(run_dir)
    result: dict = {"ok": True, "mismatches": []}
    manifest_path = run / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
        for stage, rec in manifest.get("stages", {}).items():
            for fname, digest in rec.get("outputs", {}).items():
                p = run / fname
                if not p.exists():
                    result["mismatches"].append({"file": fname, "reason": "missing"})
                elif fname != "manifest.json" and sha256_file(p) != digest:
                    result["mismatches"].append({"file": fname, "reason": "digest"})
    else:
        result["mismatches"].append({"file": "manifest.json", "reason": "missing"})
    stored = run / "eval_report.json"
    if stored.exists():
        with open(stored) as f:
            old = json.load(f)
        fresh = eval_report(run)
        if json.dumps(old, sort_keys=True) != json.dumps(fresh, sort_keys=True):
            result["mismatches"].append({"file": "eval_report.json", "reason": "recompute-diff"})
    result["ok"] = not result["mismatches"]
    return result
