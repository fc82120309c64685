"""Shared fixtures: a synthetic data directory, a trained bridge checkpoint,
and a live server.  The primary toolkit is used here purely as the test
harness (data generation and the wire-protocol client); the bridge package
itself never imports it.
"""

import threading
import time
from pathlib import Path

import pytest
import uvicorn

from treealign import injector as I
from treealign import policy as P
from treealign import toy_env
from treealign.core import write_jsonl
from treealign.seeds import derive

from bridge.model import ModelConfig
from bridge.server import BridgeConfig, BridgeService, create_app
from bridge.training import finetune_score_head, pretrain

N_TASKS = 1200
PRETRAIN_EPOCHS = 12
HEAD_EPOCHS = 6


@pytest.fixture(scope="session")
def vocab():
    return toy_env.GenConfig().vocabulary()


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bridge_data")
    vocab = toy_env.GenConfig().vocabulary()
    tasks = toy_env.generate_tasks(4242, N_TASKS)
    write_jsonl(out / "tasks.jsonl", [t.to_json() for t in tasks])
    golds = [toy_env.gold_trajectory(t, vocab) for t in tasks]
    write_jsonl(out / "gold.jsonl", [g.to_json() for g in golds])
    # weak policy used for the best-of-N gate, plus its rollouts for pretraining
    pol = P.ToySoftmaxPolicy.init(vocab)
    pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks[:40]]
    P.train_sft(pol, pairs, P.SftConfig(lr=0.5, steps=800, batch=8, seed=0))
    pol.save(out / "policy.json")
    rolls = []
    for i, t in enumerate(tasks[:250]):
        for s in range(2):
            cfg = P.SamplingConfig(seed=derive(5, "r", i, s), temperature=1.0)
            rolls.append(P.rollout_tokens(pol, t, [], cfg).to_json())
    write_jsonl(out / "rollouts.jsonl", rolls)
    tmap = {t.task_id: t for t in tasks}
    inj, _ = I.build_injection_set(golds, tmap, I.PerturbationSpec(seed=9, repeats=3))
    write_jsonl(out / "inject.jsonl", [s.to_json() for s in inj])
    return out


@pytest.fixture(scope="session")
def bridge_checkpoint(data_dir):
    lm_path = data_dir / "lm.pt"
    prm_path = data_dir / "lm_prm.pt"
    pretrain(
        data_dir / "tasks.jsonl",
        [data_dir / "gold.jsonl", data_dir / "rollouts.jsonl"],
        lm_path,
        epochs=PRETRAIN_EPOCHS,
        seed=0,
        model_cfg=ModelConfig(n_layer=4),
        log=lambda s: None,
    )
    report = finetune_score_head(
        lm_path,
        data_dir / "tasks.jsonl",
        [data_dir / "inject.jsonl"],
        prm_path,
        epochs=HEAD_EPOCHS,
        lr=2e-4,
        batch_size=24,
        seed=0,
        log=lambda s: None,
    )
    return prm_path, report


@pytest.fixture(scope="session")
def live_server(bridge_checkpoint):
    prm_path, _ = bridge_checkpoint
    service = BridgeService(BridgeConfig(model_path=str(prm_path)))
    app = create_app(service)
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    while not server.started:
        time.sleep(0.05)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
