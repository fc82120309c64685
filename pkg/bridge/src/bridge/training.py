"""Pretraining on rendered trajectories and scorer-head fine-tuning.

Pretraining is next-symbol prediction over the trajectory segment (the
prompt is never a target).  The scorer head is then trained with a masked
per-token binary cross-entropy on exported labelled samples, averaged over
the full trajectory length.
"""

from __future__ import annotations

import json
import random

import numpy as np
import torch
import torch.nn.functional as F

from .model import BridgeModel, ModelConfig
from .tokens import TokenMap, VocabSpec


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def traj_tokens(traj: dict) -> list[str]:
    out = []
    for step in traj["steps"]:
        out.extend(step["tokens"])
    return out


def encode_pair(token_map: TokenMap, task: dict, tokens: list[str], max_len: int):
    prompt = token_map.render_prompt(task)
    body = token_map.render_trajectory_tokens(tokens)
    seq = prompt + body + [token_map.ids["[eos]"]]
    seq = seq[:max_len]
    prompt_len = min(len(prompt), len(seq))
    return seq, prompt_len


def _batches(items, batch_size, rng):
    order = list(range(len(items)))
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start : start + batch_size]]


def _pad_stack(seqs, pad_id):
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def pretrain(
    tasks_path,
    trajectories_paths,
    out_path,
    epochs: int = 12,
    batch_size: int = 32,
    lr: float = 3e-4,
    seed: int = 0,
    model_cfg: ModelConfig = ModelConfig(),
    vocab_spec: VocabSpec | None = None,
    model_scene: bool = True,
    log=print,
) -> dict:
    """Train the LM from scratch on (task, trajectory) pairs; returns a report."""
    torch.manual_seed(seed)
    tasks = {t["task_id"]: t for t in read_jsonl(tasks_path)}
    trajs = []
    for path in trajectories_paths:
        for rec in read_jsonl(path):
            traj = rec.get("traj", rec)  # accept bare trajectories or labelled samples
            if traj["task_id"] in tasks:
                trajs.append(traj)
    if not trajs:
        raise ValueError("no trajectories to pretrain on")
    spec = vocab_spec or _infer_spec(tasks, trajs)
    token_map = TokenMap(spec)
    from .model import numeric_values_for

    model = BridgeModel(len(token_map), model_cfg, numeric_values_for(token_map))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    pad = token_map.ids["[pad]"]
    encoded = []
    for traj in trajs:
        seq, prompt_len = encode_pair(token_map, tasks[traj["task_id"]], traj_tokens(traj), model_cfg.max_len)
        encoded.append((seq, prompt_len))
    rng = random.Random(seed)
    losses = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in _batches(encoded, batch_size, rng):
            idx = _pad_stack([seq for seq, _ in batch], pad)
            logits = model(idx[:, :-1])
            targets = idx[:, 1:].clone()
            for row, (seq, prompt_len) in enumerate(batch):
                if not model_scene:  # only predict the trajectory segment
                    targets[row, : max(prompt_len - 1, 0)] = pad
                targets[row, len(seq) - 1 :] = pad
            loss = F.cross_entropy(
                logits.reshape(-1, logits.size(-1)), targets.reshape(-1), ignore_index=pad
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        losses.append(total / count)
        log(f"pretrain epoch {epoch}: loss {losses[-1]:.4f}")
    from .model import save_checkpoint

    model.eval()
    save_checkpoint(out_path, model, token_map, {"pretrain_losses": losses, "seed": seed})
    return {"losses": losses, "n_trajectories": len(encoded)}


def _infer_spec(tasks: dict, trajs) -> VocabSpec:
    """Derive vocabulary parameters from the data files themselves."""
    classes = sorted({o["class"] for t in tasks.values() for o in t["scene"]["objects"]}
                     | {t["query"]["class"] for t in tasks.values()})
    attr_values = sorted({v for t in tasks.values() for o in t["scene"]["objects"]
                          for v in o.get("attrs", {}).values()})
    attr_keys = {k for t in tasks.values() for o in t["scene"]["objects"]
                 for k in o.get("attrs", {})}
    width = max(t["scene"]["w"] for t in tasks.values())
    height = max(t["scene"]["h"] for t in tasks.values())
    max_steps = max(len(tr["steps"]) for tr in trajs)
    return VocabSpec(
        classes=tuple(classes),
        attr_key=next(iter(attr_keys)) if attr_keys else "color",
        attr_values=tuple(attr_values) if attr_values else ("red", "blue", "green", "yellow"),
        width=width,
        height=height,
        count_max=12,
        max_steps=max(max_steps, 12),
    )


def finetune_score_head(
    checkpoint_path,
    tasks_path,
    samples_paths,
    out_path,
    epochs: int = 2,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    holdout_fraction: float = 0.2,
    log=print,
) -> dict:
    """Fine-tune the scoring head (and backbone) with masked token BCE.

    Returns a report with per-epoch loss and held-out AUC against large-jitter
    negatives (plus small jitter and tamper when present).
    """
    from .model import load_checkpoint, save_checkpoint

    torch.manual_seed(seed)
    model, token_map, meta = load_checkpoint(checkpoint_path)
    model.train()
    tasks = {t["task_id"]: t for t in read_jsonl(tasks_path)}
    samples = []
    for path in samples_paths:
        samples.extend(read_jsonl(path))
    if not samples:
        raise ValueError("no labelled samples")
    task_ids = sorted({s["traj"]["task_id"] for s in samples})
    random.Random(seed).shuffle(task_ids)
    hold_ids = set(task_ids[: int(len(task_ids) * holdout_fraction)])
    train = [s for s in samples if s["traj"]["task_id"] not in hold_ids]
    hold = [s for s in samples if s["traj"]["task_id"] in hold_ids]

    def encode_sample(s):
        task = tasks[s["traj"]["task_id"]]
        tokens = traj_tokens(s["traj"])
        prompt = token_map.render_prompt(task)
        body = token_map.render_trajectory_tokens(tokens)
        seq = (prompt + body)[: model.cfg.max_len]
        n_body = len(seq) - len(prompt)
        labels = s["labels"][:n_body]
        mask = s["mask"][:n_body]
        return seq, len(prompt), labels, mask

    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    pad = token_map.ids["[pad]"]
    rng = random.Random(seed + 1)
    encoded = [encode_sample(s) for s in train]
    losses = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in _batches(encoded, batch_size, rng):
            idx = _pad_stack([seq for seq, _, _, _ in batch], pad)
            scores = model.token_scores(idx)
            loss = 0.0
            for row, (seq, prompt_len, labels, mask) in enumerate(batch):
                if not labels:
                    continue
                pos = torch.arange(prompt_len, prompt_len + len(labels))
                y_hat = scores[row, pos].clamp(1e-7, 1 - 1e-7)
                y = torch.tensor(labels, dtype=torch.float32)
                m = torch.tensor(mask, dtype=torch.float32)
                bce = -(y * torch.log(y_hat) + (1 - y) * torch.log(1 - y_hat))
                loss = loss + (m * bce).sum() / max(len(labels), 1)
            loss = loss / len(batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        losses.append(total / count)
        log(f"score-head epoch {epoch}: loss {losses[-1]:.4f}")

    model.eval()
    report = {"losses": losses, "n_train": len(train), "n_holdout": len(hold)}
    for kind in ("large_jitter", "small_jitter", "tamper", None):
        auc = _holdout_auc(model, token_map, tasks, hold, kind)
        report[f"auc_{kind or 'overall'}"] = auc
    save_checkpoint(out_path, model, token_map, {**meta, "score_report": report})
    return report


@torch.no_grad()
def _holdout_auc(model, token_map, tasks, hold, kind) -> float:
    pos, neg = [], []
    for s in hold:
        if kind is not None and s.get("kind") not in (kind, "anchor"):
            continue
        task = tasks[s["traj"]["task_id"]]
        tokens = traj_tokens(s["traj"])
        prompt = token_map.render_prompt(task)
        body = token_map.render_trajectory_tokens(tokens)
        seq = (prompt + body)[: model.cfg.max_len]
        n_body = len(seq) - len(prompt)
        idx = torch.tensor([seq], dtype=torch.long)
        scores = model.token_scores(idx)[0]
        for j in range(n_body):
            if not s["mask"][j]:
                continue
            val = float(scores[len(prompt) + j])
            (pos if s["labels"][j] else neg).append(val)
    if not pos or not neg:
        return float("nan")
    xs = np.concatenate([pos, neg])
    order = np.argsort(xs, kind="mergesort")
    ranks = np.empty(len(xs))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos, n_neg = len(pos), len(neg)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
