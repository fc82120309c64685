"""Bridge gates: protocol conformance, scorer quality, and verifier-guided
selection through the live server."""

import json

import numpy as np
import pytest
import requests

from treealign import policy as P
from treealign import prm as R
from treealign import toy_env
from treealign import tts as T
from treealign.core import Trajectory, token_count, validate_trajectory
from treealign.remote import RemotePolicy, RemotePrm, health, run_conformance
from treealign.seeds import derive

from bridge.tokens import TokenMap, VocabSpec


@pytest.fixture(scope="module")
def eval_tasks():
    return toy_env.generate_tasks(991, 100)


class TestTokenMap:
    def test_bijection_on_toolkit_vocabulary(self, vocab):
        spec = VocabSpec.from_json(vocab.to_json())
        token_map = TokenMap(spec)
        toolkit = vocab.tokens()
        assert token_map.toolkit_tokens == toolkit
        ids = [token_map.ids[t] for t in toolkit]
        assert len(set(ids)) == len(toolkit)
        for tok, i in zip(toolkit, token_map.toolkit_ids):
            assert token_map.symbols[i] == tok

    def test_prompt_rendering_deterministic(self, vocab, eval_tasks):
        spec = VocabSpec.from_json(vocab.to_json())
        token_map = TokenMap(spec)
        a = token_map.render_prompt(eval_tasks[0].to_json())
        b = token_map.render_prompt(eval_tasks[0].to_json())
        assert a == b


class TestProtocol:
    def test_health(self, live_server):
        out = health(live_server)
        assert out["status"] == "ok"
        assert out["model"]

    def test_conformance_suite(self, live_server, vocab, eval_tasks):
        report = run_conformance(live_server, eval_tasks[:5], vocab)
        failures = [c for c in report.checks if not c["ok"]]
        assert report.passed, failures
        print(f"\nSECONDARY PASS: protocol conformance, {len(report.checks)} checks green")

    def test_distribution_normalization(self, live_server, vocab, eval_tasks):
        pol = RemotePolicy(live_server, vocab)
        for task in eval_tasks[:5]:
            probs = pol.next_distribution(task, [])
            assert abs(float(np.sum(probs)) - 1.0) <= 1e-6
            assert (probs >= 0).all()

    def test_score_length_and_range(self, live_server, vocab, eval_tasks):
        prm = RemotePrm(live_server)
        for task in eval_tasks[:5]:
            traj = toy_env.gold_trajectory(task, vocab)
            seq = prm.score(task, traj)
            assert len(seq.token_scores) == token_count(traj)
            assert all(0.0 <= s <= 1.0 for s in seq.token_scores)

    def test_rollouts_are_valid_trajectories(self, live_server, vocab, eval_tasks):
        pol = RemotePolicy(live_server, vocab)
        for i, task in enumerate(eval_tasks[:5]):
            traj = pol.remote_rollout(task, [], temperature=1.0, top_p=0.9, seed=100 + i)
            assert validate_trajectory(traj, vocab) == []

    def test_deterministic_decoding_at_temperature_zero(self, live_server, vocab, eval_tasks):
        pol = RemotePolicy(live_server, vocab)
        task = eval_tasks[0]
        a = pol.remote_rollout(task, [], temperature=0.0, seed=1)
        b = pol.remote_rollout(task, [], temperature=0.0, seed=2)
        assert a.tokens() == b.tokens()


class TestScorerQuality:
    def test_separates_anchors_from_large_jitter(self, bridge_checkpoint):
        """Held-out token AUC against large-jitter negatives."""
        _, report = bridge_checkpoint
        auc = report["auc_large_jitter"]
        assert auc >= 0.9, report
        print(f"\nSECONDARY PASS: scorer AUC large-jitter {auc:.4f} >= 0.9")

    def test_all_positive_data_predicts_high(self, data_dir, tmp_path):
        from bridge.training import finetune_score_head, read_jsonl

        anchors = [rec for rec in read_jsonl(data_dir / "inject.jsonl")
                   if rec.get("kind") == "anchor"][:200]
        path = tmp_path / "anchors.jsonl"
        with open(path, "w") as f:
            for rec in anchors:
                f.write(json.dumps(rec) + "\n")
        out = tmp_path / "head_pos.pt"
        finetune_score_head(data_dir / "lm.pt", data_dir / "tasks.jsonl", [path], out,
                            epochs=2, seed=0, holdout_fraction=0.0, log=lambda s: None)
        from bridge.model import load_checkpoint
        import torch

        model, token_map, _ = load_checkpoint(out)
        tasks = {t["task_id"]: t for t in read_jsonl(data_dir / "tasks.jsonl")}
        above = total = 0
        for rec in anchors[:20]:
            task = tasks[rec["traj"]["task_id"]]
            tokens = [tok for s in rec["traj"]["steps"] for tok in s["tokens"]]
            seq = token_map.render_prompt(task) + token_map.render_trajectory_tokens(tokens)
            scores = model.token_scores(torch.tensor([seq]))[0]
            body = scores[len(token_map.render_prompt(task)):]
            for m, s in zip(rec["mask"], body.tolist()):
                if m:
                    total += 1
                    above += int(s >= 0.5)
        assert above / total >= 0.95

    def test_score_length_contract_server_side(self, live_server, vocab, eval_tasks):
        prm = RemotePrm(live_server)
        task = eval_tasks[1]
        traj = toy_env.gold_trajectory(task, vocab)
        seq = prm.score(task, traj)
        assert len(seq.step_scores) == len(traj.steps)


class TestVerifierGuidedSelection:
    def test_best_of_eight_beats_greedy(self, live_server, data_dir, eval_tasks):
        """Best-of-8 ranked by the bridge scorer beats greedy decoding."""
        policy = P.ToySoftmaxPolicy.load(data_dir / "policy.json")
        bridge_prm = RemotePrm(live_server)
        seeds = [derive(3, "b", s) for s in range(3)]
        bon = T.scaling_curve(policy, bridge_prm, eval_tasks, "bon", [8], seeds)
        greedy = T.scaling_curve(policy, None, eval_tasks, "greedy", [1], seeds)
        b8 = bon["budgets"][0]["mean"]
        g = greedy["budgets"][0]["mean"]
        assert b8 > g, (b8, g)
        print(f"\nSECONDARY PASS: best-of-8 via bridge scorer {b8:.3f} > greedy {g:.3f}")
