"""Bridge command line: pretrain, train-prm-head, serve."""

from __future__ import annotations

import argparse
import sys

from .model import ModelConfig
from .server import BridgeConfig, serve
from .training import finetune_score_head, pretrain


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bridge", description="neural model bridge server")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the language model on rendered trajectories")
    p.add_argument("--tasks", required=True)
    p.add_argument("--trajectories", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--dim", type=int, default=128)

    p = sub.add_parser("train-prm-head", help="fine-tune the token scoring head")
    p.add_argument("--model", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="serve the wire protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-concurrent", type=int, default=8)

    args = ap.parse_args(argv)
    if args.command == "pretrain":
        cfg = ModelConfig(d_model=args.dim, n_layer=args.layers)
        report = pretrain(args.tasks, args.trajectories, args.out, epochs=args.epochs,
                          batch_size=args.batch, lr=args.lr, seed=args.seed, model_cfg=cfg)
        print(f"pretrained on {report['n_trajectories']} trajectories; "
              f"final loss {report['losses'][-1]:.4f} -> {args.out}")
        return 0
    if args.command == "train-prm-head":
        report = finetune_score_head(args.model, args.tasks, args.data, args.out,
                                     epochs=args.epochs, batch_size=args.batch,
                                     lr=args.lr, seed=args.seed)
        aucs = {k: round(v, 4) for k, v in report.items() if k.startswith("auc") and v == v}
        print(f"scorer fine-tuned; held-out AUCs {aucs} -> {args.out}")
        return 0
    if args.command == "serve":
        serve(BridgeConfig(model_path=args.model, device=args.device,
                           max_concurrent=args.max_concurrent),
              host=args.host, port=args.port)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
