"""Command-line entry point: ``fcvp <subcommand> --config FILE --out DIR ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .controllers import MultimodalPolicy, ResidualPolicy
from .force_model import ForceModel
from .neural import CheckpointError
from .policy import GaussianPolicy
from .records import RecordFormatError, load_dataset, save_dataset

log = logging.getLogger("fcvp")

COMMANDS = ("train-policy", "collect", "train-force-model", "eval", "ablate-history", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcvp", description="Force-constrained visual policy experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", required=True, help="INI experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed(s)")
        sp.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH",
                        help="named input artifact (repeatable)")
        sp.add_argument("--method", action="append", default=[],
                        help="restrict to these methods (repeatable)")
        return sp

    add("train-policy", "train the vision policy in sim A (or, with --method multimodal / "
        "force_residual and a policy checkpoint, fine-tune a variant in sim B)")
    sp = add("collect", "collect a mixture-sampled force dataset in sim B")
    sp.add_argument("--scripted", action="store_true",
                    help="propose with the scripted straight-line policy instead of a checkpoint")
    sp = add("train-force-model", "fit the force model on a collected dataset")
    sp.add_argument("--N", type=int, help="history length (default: config N)")
    add("eval", "run every configured controller over the sim B grid")
    add("ablate-history", "train one force model per history length and evaluate FCVP")
    sp = add("report", "summarise a results.csv and export post-skip forces", config=False)
    sp.add_argument("--results", help="results CSV (default: <out>/results.csv)")
    return p


def parse_checkpoints(items) -> dict[str, Path]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--checkpoint expects NAME=PATH, got {item!r}")
        out[name] = Path(path)
    return out


def _need(ckpts, name) -> Path:
    if name not in ckpts:
        raise UsageError(f"missing --checkpoint {name}=PATH")
    path = ckpts[name]
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {name!r} not found: {path}")
    return path


def load_models(ckpts, methods, N) -> dict:
    models = {}
    needs_policy = {"fcvp", "vision_only", "vision_random", "force_residual"}
    if needs_policy & set(methods):
        models["policy"] = GaussianPolicy.load(_need(ckpts, "policy"))
    if {"fcvp", "force_only"} & set(methods):
        fm = ForceModel.load(_need(ckpts, "force_model"))
        if fm.N != N:
            raise ValueError(f"force model was trained with N={fm.N} but the config uses N={N}")
        models["force_model"] = fm
    if "multimodal" in methods:
        models["multimodal"] = MultimodalPolicy.load(_need(ckpts, "multimodal"))
    if "force_residual" in methods:
        models["force_residual"] = ResidualPolicy.load(_need(ckpts, "force_residual"),
                                                       models["policy"])
    return models


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = parse_checkpoints(args.checkpoint)

    if args.command == "report":
        results = Path(args.results) if args.results else out / "results.csv"
        summaries = pipeline.report(results, out)
        print(pipeline.format_summary(summaries))
        return 0

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
        cfg.base_seed = args.seed
    if args.method:
        cfg.methods = list(dict.fromkeys(args.method))
    cfg.validate()
    cfg.write_resolved(out)
    seed = cfg.base_seed

    if args.command == "train-policy":
        tuned = [m for m in args.method if m in ("multimodal", "force_residual")]
        if tuned:
            base = GaussianPolicy.load(_need(ckpts, "policy"))
            for m in tuned:
                policy, cem_log = pipeline.finetune_policy(cfg, base, m, seed)
                policy.save(out / f"{m}.ckpt")
                _write_json(out / f"{m}_training.json", asdict(cem_log))
                print(f"wrote {out / f'{m}.ckpt'}")
        else:
            policy, cem_log = pipeline.train_vision_policy(cfg, seed)
            policy.save(out / "policy.ckpt")
            _write_json(out / "policy_training.json", asdict(cem_log))
            print(f"wrote {out / 'policy.ckpt'}")
        return 0

    if args.command == "collect":
        policy = None if args.scripted else GaussianPolicy.load(_need(ckpts, "policy"))
        samples, logs = pipeline.collect(cfg, policy, seed)
        if not samples:
            raise RuntimeError("every collection episode diverged; no samples")
        save_dataset(samples, out / "dataset.jsonl",
                     {"trajectories": len(logs), "seed": seed, "p": cfg.p})
        print(f"wrote {len(samples)} samples from {len(logs)} trajectories to "
              f"{out / 'dataset.jsonl'}")
        return 0

    if args.command == "train-force-model":
        samples, _ = load_dataset(_need(ckpts, "dataset"))
        N = args.N or cfg.N
        model, rep = pipeline.fit_force_model(cfg, samples, N, seed)
        model.save(out / f"force_model_N{N}.ckpt")
        _write_json(out / f"force_model_N{N}.json", asdict(rep))
        print(f"N={N}: held-out MSE {rep.heldout_mse:.3f}, persistence MSE "
              f"{rep.persistence_mse:.3f}; wrote {out / f'force_model_N{N}.ckpt'}")
        return 0

    if args.command == "eval":
        models = load_models(ckpts, cfg.methods, cfg.N)
        rows = pipeline.run_eval(cfg, cfg.methods, models, out)
        pipeline.write_results(rows, out / "results.csv")
        summaries = pipeline.report(out / "results.csv", out)
        print(pipeline.format_summary(summaries))
        return 0

    if args.command == "ablate-history":
        samples, _ = load_dataset(_need(ckpts, "dataset"))
        policy = GaussianPolicy.load(_need(ckpts, "policy"))
        rows, summaries, reports = pipeline.ablate_history(cfg, samples, policy, seed,
                                                           out_dir=out)
        pipeline.write_results(rows, out / "results.csv")
        pipeline.write_summary(summaries, out / "ablation.csv")
        _write_json(out / "force_models.json", {str(n): asdict(r) for n, r in reports.items()})
        pipeline.report(out / "results.csv", out)
        print(pipeline.format_summary(summaries))
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fcvp: usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError) as exc:
        print(f"fcvp: usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, RecordFormatError, CheckpointError, pipeline.PipelineError,
            ValueError, RuntimeError) as exc:
        print(f"fcvp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
