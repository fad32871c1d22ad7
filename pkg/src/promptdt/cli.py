"""Command-line surface.

Subcommands: gen-data, pretrain-lm, train, eval, ablate.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as dp
from . import envs
from . import transformer as tf
from .errors import PromptDTError
from .model import PromptDTModel
from .pretrain import CharCorpus, bundled_corpus_path, lm_pretrain
from .training import ExperimentConfig, ablate, evaluate, train
from .transformer import TransformerConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    p = _Parser(prog="promptdt", description="Prompt decision-transformer training on synthetic control tasks")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--out", type=str, default=None, help="output directory or file")
    p.add_argument("--deterministic", action="store_true", help="fully serial, seed-reproducible execution")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate an offline dataset")
    g.add_argument("--family", choices=envs.FAMILIES, required=True)
    g.add_argument("--n-traj-per-noise", type=int, default=10)
    g.add_argument("--sigmas", type=float, nargs="+", default=list(envs.DEFAULT_SIGMAS))

    l = sub.add_parser("pretrain-lm", help="pretrain transformer body on the character corpus")
    l.add_argument("--corpus", type=str, default=None, help="plain-text corpus path (default: bundled)")
    l.add_argument("--steps", type=int, default=2000)
    l.add_argument("--n-layers", type=int, default=2)
    l.add_argument("--n-heads", type=int, default=1)
    l.add_argument("--d-model", type=int, default=128)
    l.add_argument("--max-seq-len", type=int, default=128)

    def add_config_args(sp):
        sp.add_argument("--config", type=str, default=None, help="JSON experiment config")
        for f, typ in (("dataset", str), ("train-steps", int), ("eval-every", int),
                       ("eval-episodes", int), ("batch-per-task", int), ("lr", float),
                       ("warmup-steps", int), ("reg-mode", str), ("reg-weight", float),
                       ("ratio", float), ("init", str), ("n-layers", int), ("dropout", float)):
            sp.add_argument(f"--{f}", type=typ, default=None)
        sp.add_argument("--seeds", type=int, nargs="+", default=None)

    t = sub.add_parser("train", help="train on an offline dataset")
    add_config_args(t)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint on held-out tasks")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--dataset", type=str, required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--tasks", type=int, nargs="+", default=None)

    a = sub.add_parser("ablate", help="run the regularization/init/ratio ablation grid")
    add_config_args(a)
    a.add_argument("--lm-weights", type=str, required=True, help="pretrained body weights for lm_pretrained cells")
    return p


def _experiment_config(args) -> ExperimentConfig:
    overrides = {}
    for flag, key in (
        ("dataset", "dataset"), ("train_steps", "train_steps"), ("eval_every", "eval_every"),
        ("eval_episodes", "eval_episodes"), ("batch_per_task", "batch_per_task"), ("lr", "lr"),
        ("warmup_steps", "warmup_steps"), ("reg_mode", "reg_mode"), ("reg_weight", "reg_weight"),
        ("ratio", "ratio"), ("init", "init"), ("n_layers", "n_layers"), ("dropout", "dropout"),
        ("seeds", "seeds"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.out:
        overrides["out_dir"] = args.out
    if args.deterministic:
        overrides["deterministic"] = True
    if args.config:
        cfg = ExperimentConfig.from_json(args.config, overrides)
    else:
        if "dataset" not in overrides:
            raise SystemExit2("--dataset (or --config) is required")
        cfg = ExperimentConfig.from_dict(overrides)
    if not Path(cfg.dataset).exists():
        print(f"error: dataset path does not exist: {cfg.dataset}", file=sys.stderr)
        raise SystemExit(1)
    return cfg


class SystemExit2(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "gen-data":
            out = args.out or f"data/{args.family}"
            envs.generate_dataset(args.family, out, n_traj_per_noise=args.n_traj_per_noise,
                                  sigmas=tuple(args.sigmas), seed=args.seed)
            print(f"wrote dataset to {out}")
        elif args.command == "pretrain-lm":
            corpus_path = args.corpus or bundled_corpus_path()
            corpus = CharCorpus.from_file(corpus_path)
            cfg = TransformerConfig(n_layers=args.n_layers, n_heads=args.n_heads,
                                    d_model=args.d_model, max_seq_len=args.max_seq_len)
            result = lm_pretrain(cfg, corpus, steps=args.steps, seed=args.seed,
                                 log=lambda s, tl, vl: print(f"step {s}: train {tl:.4f} val {vl:.4f}"))
            out = args.out or "lm_body.nt"
            tf.save_weights(result.weights, out)
            print(f"val loss {result.initial_val_loss:.4f} -> {result.final_val_loss:.4f}; body saved to {out}")
        elif args.command == "train":
            cfg = _experiment_config(args)
            summary = train(cfg)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "eval":
            model = PromptDTModel.load(args.checkpoint)
            dataset, _ = dp.normalize(dp.load_dataset(args.dataset))
            tasks = args.tasks if args.tasks else dataset.test_task_ids
            results = evaluate(model, dataset, tasks, episodes=args.episodes, seed=args.seed)
            print(json.dumps({str(k): {"mean": m, "std": s} for k, (m, s) in results.items()}, indent=2))
        elif args.command == "ablate":
            cfg = _experiment_config(args)
            rows = ablate(cfg, args.lm_weights, log=print)
            print(f"{sum(r['status'] == 'ok' for r in rows)}/{len(rows)} cells completed")
        return 0
    except SystemExit as e:
        return int(e.code or 0)
    except SystemExit2 as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PromptDTError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
