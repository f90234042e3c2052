"""Command line entry point: ``riveral <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else
raised by the package.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .agent import Agent, AgentConfig, load_agent, save_agent
from .data import TARGET_KINDS
from .errors import ConfigError, DataError, RiveralError, UnknownSegmentError
from .experiment import (POLICIES, ExperimentConfig, ingest, prepare, pretrain_simulated, run_experiment,
                         sweep, test_stage, train_decision_model)
from .graph import VARIANTS

log = logging.getLogger("riveral")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--budget", type=int)
    p.add_argument("--graph-variant", choices=VARIANTS)
    p.add_argument("--target", choices=TARGET_KINDS)
    p.add_argument("--pretrained", help="decision-model checkpoint to start from")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riveral", description="Budgeted real-time labeling on river networks")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest-validate", help="check the CSV inputs and print a coverage report")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--observations")
    p.add_argument("--edges")

    _common(sub.add_parser("pretrain", help="pretrain the decision model on simulated data"))
    _common(sub.add_parser("train", help="train the decision model and save a checkpoint"))
    _common(sub.add_parser("test", help="collect labels over the test period and score the final model"))

    p = sub.add_parser("sweep", help="grid of runs with mean and std per cell")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--budgets", type=int, nargs="+")
    p.add_argument("--policies", nargs="+", choices=POLICIES)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="summarise a run or sweep directory")
    p.add_argument("path")
    return ap


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {"seed": args.seed, "policy": args.policy, "budget": args.budget,
            "graph_variant": args.graph_variant, "target": args.target, "pretrained": args.pretrained,
            "output_dir": args.out}
    cfg = replace(cfg, **{k: v for k, v in over.items() if v is not None})
    cfg.validate()
    return cfg


def _out(cfg: ExperimentConfig, default: str) -> Path:
    d = Path(cfg.output_dir or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_ingest(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    f = args.features or cfg.features_csv
    o = args.observations or cfg.observations_csv
    e = args.edges or cfg.edges_csv
    if not (f and o and e):
        raise ConfigError("ingest-validate needs features, observations and edges CSV paths")
    _, _, report = ingest(f, o, e)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ingest_report.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    if cfg.pretrain_passes <= 0:
        cfg = replace(cfg, pretrain_passes=cfg.passes)
    setup = prepare(cfg)
    agent = Agent(cfg.hidden + 3, AgentConfig(**cfg.agent_kwargs()), cfg.seed)
    info = pretrain_simulated(setup, agent)
    out = _out(cfg, "riveral-pretrain")
    save_agent(out / "agent.json", agent)
    print(json.dumps({"checkpoint": str(out / "agent.json"), **info}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    setup = prepare(cfg)
    agent, info = train_decision_model(setup)
    out = _out(cfg, "riveral-train")
    save_agent(out / "agent.json", agent)
    print(json.dumps({"checkpoint": str(out / "agent.json"), **info}, sort_keys=True))
    return 0


def cmd_test(args) -> int:
    cfg = load_config(args)
    if cfg.policy == "grreal" and not cfg.pretrained:
        raise ConfigError("test with the grreal policy needs --pretrained <checkpoint from train>")
    out = _out(cfg, "riveral-test")
    if cfg.policy == "grreal":
        setup = prepare(cfg)
        agent = load_agent(cfg.pretrained, AgentConfig(**cfg.agent_kwargs()), cfg.seed)
        bundle = test_stage(setup, agent, {"checkpoint": cfg.pretrained})
        bundle.write(out, setup.data)
    else:
        bundle = run_experiment(cfg, out)
    print(json.dumps(bundle.summary(), sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    out = cfg.output_dir or "riveral-sweep"
    table = sweep(replace(cfg, output_dir=None), args.seeds, args.budgets, args.policies, args.variants,
                  output_dir=out, workers=args.workers)
    print(format_summary(table["summary"]))
    return 0 if all(r["status"] == "ok" for r in table["runs"]) else 1


def format_summary(rows) -> str:
    lines = [f"{'policy':<12}{'budget':>8}  {'variant':<11}{'n':>3}{'fail':>5}{'mean':>10}{'std':>9}"]
    for r in rows:
        lines.append(f"{r['policy']:<12}{str(r['budget_arg']):>8}  {r['graph_variant']:<11}{r['n']:>3}"
                     f"{r['failed']:>5}{r['mean']:>10.4f}{r['std']:>9.4f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    p = Path(args.path)
    if (p / "sweep.json").exists():
        print(format_summary(json.loads((p / "sweep.json").read_text())["summary"]))
    elif (p / "result.json").exists():
        res = json.loads((p / "result.json").read_text())
        print(f"policy {res['policy']}  variant {res['graph_variant']}  target {res['target']}  seed {res['seed']}")
        print(f"evaluation RMSE {res['rmse_eval']:.4f}  labels {res['n_labeled']} of budget {res['budget']}")
        hist = p / "hist_week.csv"
        if hist.exists():
            counts = [int(line.split(",")[1]) for line in hist.read_text().splitlines()[1:]]
            print("labels per week:", " ".join(str(c) for c in counts))
    else:
        raise ConfigError(f"{p} holds neither result.json nor sweep.json")
    return 0


VERBS = {"ingest-validate": cmd_ingest, "pretrain": cmd_pretrain, "train": cmd_train, "test": cmd_test,
         "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, UnknownSegmentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except RiveralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
