"""HTTP server exposing the bridge model behind the shared wire protocol.

Endpoints: GET /v1/health, POST /v1/policy/next, POST /v1/policy/rollout,
POST /v1/prm/score.  Next-token distributions are renormalized onto the
toolkit vocabulary via the token map; rollouts are legality-masked so every
served trajectory is well-formed; temperature 0 selects deterministic argmax
decoding.  Model inference is serialized behind a lock with a bounded
admission semaphore.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .grammar import StepDecoder
from .model import BridgeModel, load_checkpoint
from .tokens import TokenMap


@dataclass
class BridgeConfig:
    model_path: str
    device: str = "cpu"
    max_concurrent: int = 8
    model_name: Optional[str] = None


class NextRequest(BaseModel):
    task: dict
    prefix_tokens: list[str] = []


class RolloutRequest(BaseModel):
    task: dict
    prefix_tokens: list[str] = []
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0


class ScoreRequest(BaseModel):
    task: dict
    trajectory: dict


class BridgeService:
    def __init__(self, cfg: BridgeConfig):
        self.cfg = cfg
        model, token_map, meta = load_checkpoint(cfg.model_path)
        self.model: BridgeModel = model.to(cfg.device)
        self.token_map: TokenMap = token_map
        self.meta = meta
        self.name = cfg.model_name or f"bridge-transformer-{sum(p.numel() for p in model.parameters())}p"
        self._lock = threading.Lock()
        self._gate = threading.BoundedSemaphore(cfg.max_concurrent)

    # -- model ops ---------------------------------------------------------

    @torch.no_grad()
    def _toolkit_distribution(self, task: dict, prefix_tokens: list[str]) -> np.ndarray:
        prompt = self.token_map.render_prompt(task)
        body = self.token_map.render_trajectory_tokens(prefix_tokens)
        seq = (prompt + body)[-self.model.cfg.max_len :]
        idx = torch.tensor([seq], dtype=torch.long, device=self.cfg.device)
        logits = self.model(idx)[0, -1]
        tk = logits[torch.tensor(self.token_map.toolkit_ids, device=self.cfg.device)]
        tk = tk.double()
        tk = tk - tk.max()
        w = torch.exp(tk)
        w = w / w.sum()
        probs = w.cpu().numpy()
        return probs / probs.sum()

    @torch.no_grad()
    def rollout(self, task: dict, prefix_tokens: list[str], temperature: float,
                top_p: float, seed: int) -> dict:
        spec = self.token_map.spec
        dec = StepDecoder(spec, task)
        logprobs: list[float] = []
        for tok in prefix_tokens:
            dec.advance(tok)
            logprobs.append(0.0)
        rng = np.random.Generator(np.random.PCG64(seed))
        tokens = list(prefix_tokens)
        name_to_pos = {t: i for i, t in enumerate(self.token_map.toolkit_tokens)}
        while not dec.done():
            probs = self._toolkit_distribution(task, tokens)
            legal = dec.legal()
            legal_pos = [name_to_pos[t] for t in legal]
            masked = probs[legal_pos]
            total = masked.sum()
            if total <= 0:
                masked = np.full(len(legal_pos), 1.0 / len(legal_pos))
            else:
                masked = masked / total
            if temperature == 0.0:
                k = int(np.argmax(masked))
            else:
                if temperature != 1.0:
                    logs = np.log(np.clip(masked, 1e-300, None)) / temperature
                    logs -= logs.max()
                    masked = np.exp(logs)
                    masked /= masked.sum()
                if top_p < 1.0:
                    order = np.lexsort((np.arange(len(masked)), -masked))
                    keep, cum = [], 0.0
                    for j in order:
                        keep.append(j)
                        cum += masked[j]
                        if cum >= top_p:
                            break
                    trimmed = np.zeros_like(masked)
                    trimmed[keep] = masked[keep]
                    masked = trimmed / trimmed.sum()
                k = int(rng.choice(len(masked), p=masked))
            tok = legal[k]
            p_raw = float(probs[legal_pos[k]])
            logprobs.append(math.log(p_raw) if p_raw > 0 else -745.0)
            tokens.append(tok)
            dec.advance(tok)
        return dec.trajectory_json(task.get("task_id", "task"), logprobs)

    @torch.no_grad()
    def score(self, task: dict, trajectory: dict) -> list[float]:
        tokens = []
        for step in trajectory["steps"]:
            tokens.extend(step["tokens"])
        prompt = self.token_map.render_prompt(task)
        body = self.token_map.render_trajectory_tokens(tokens)
        seq = prompt + body
        if len(seq) > self.model.cfg.max_len:
            raise HTTPException(status_code=422, detail="trajectory too long for model context")
        idx = torch.tensor([seq], dtype=torch.long, device=self.cfg.device)
        scores = self.model.token_scores(idx)[0]
        out = [float(min(max(scores[len(prompt) + j].item(), 0.0), 1.0)) for j in range(len(body))]
        return out


def create_app(service: BridgeService) -> FastAPI:
    app = FastAPI(title="treealign bridge", version="0.1.0")

    def admitted(fn):
        if not service._gate.acquire(timeout=30):
            raise HTTPException(status_code=503, detail="request queue full")
        try:
            with service._lock:
                return fn()
        finally:
            service._gate.release()

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": service.name}

    @app.post("/v1/policy/next")
    def policy_next(req: NextRequest):
        try:
            probs = admitted(lambda: service._toolkit_distribution(req.task, req.prefix_tokens))
        except HTTPException:
            raise
        except Exception as e:  # noqa: BLE001 - structured 5xx body per protocol
            raise HTTPException(status_code=500, detail=f"inference failure: {e}")
        return {"probs": [float(x) for x in probs]}

    @app.post("/v1/policy/rollout")
    def policy_rollout(req: RolloutRequest):
        try:
            return admitted(
                lambda: service.rollout(req.task, req.prefix_tokens, req.temperature, req.top_p, req.seed)
            )
        except HTTPException:
            raise
        except Exception as e:  # noqa: BLE001
            raise HTTPException(status_code=500, detail=f"rollout failure: {e}")

    @app.post("/v1/prm/score")
    def prm_score(req: ScoreRequest):
        try:
            scores = admitted(lambda: service.score(req.task, req.trajectory))
        except HTTPException:
            raise
        except Exception as e:  # noqa: BLE001
            raise HTTPException(status_code=500, detail=f"scoring failure: {e}")
        return {"token_scores": scores}

    return app


def serve(cfg: BridgeConfig, host: str = "127.0.0.1", port: int = 8731):
    import uvicorn

    app = create_app(BridgeService(cfg))
    uvicorn.run(app, host=host, port=port, log_level="warning")
