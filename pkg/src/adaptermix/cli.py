"""Command-line entry point: ``adaptermix <command> [options]``.

Commands
    gen-data   write the synthetic corpus
    pretrain   train the backbone on the pretraining speakers
    adapt      insert adapters (or not, for finetune) and adapt to the new speakers
    eval       held-out metrics for one checkpoint
    compare    the strategy-by-budget grid, as JSONL and text tables
    params     parameter counts and trainable fraction for a strategy

Exit codes: 0 success, 1 other package error, 2 bad config or arguments,
3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import generate_corpus, read_corpus, write_corpus
from .errors import AdapterMixError, BudgetError, DivergenceError
from .evaluation import adapt_config_for, adapt_model, compare, evaluate, split_speakers, train_embedder
from .experiment import ConfigError, ExperimentConfig, load_config
from .model import (
    PAPER_CONFIG,
    AdaptationStrategy,
    BackboneModel,
    STRATEGY_KINDS,
    count_parameters,
    fraction_sweep,
    load_checkpoint,
    parameter_digests,
    parameter_report,
    save_checkpoint,
)
from .training import train, write_history

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("adaptermix")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _out(cfg: ExperimentConfig, given: str | None, default: str) -> Path:
    path = Path(given) if given else Path(cfg.output_dir) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _existing(flag: str, path: str | None, fallback: Path | None = None) -> Path:
    chosen = Path(path) if path else fallback
    if chosen is None:
        raise ConfigError(flag, "is required")
    if not chosen.is_file():
        raise ConfigError(flag, f"no such file {str(chosen)!r}")
    return chosen


def _corpus(cfg: ExperimentConfig, args):
    corpus = read_corpus(_existing("--corpus", args.corpus, Path(cfg.output_dir) / "corpus.jsonl"))
    if corpus.config != cfg.corpus:
        raise ConfigError("--corpus", "corpus file was generated from a different corpus config")
    return corpus


def _checkpoint(args):
    return load_checkpoint(_existing("--checkpoint", args.checkpoint))


def _strategy(cfg: ExperimentConfig, kind: str | None) -> AdaptationStrategy:
    """The config's ``strategy`` section, with its kind optionally replaced."""
    base = cfg.strategy
    if kind is None or kind == base.kind:
        return base
    return AdaptationStrategy(kind, base.decoder_r, base.variance_r, base.n_adapters, base.capacity)


def _minutes(cfg: ExperimentConfig, minutes: float | None) -> float:
    return cfg.budgets[0] if minutes is None else minutes


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    path = _out(cfg, args.out, "corpus.jsonl")
    write_corpus(generate_corpus(cfg.corpus), path)
    print(f"wrote {path}")


def cmd_pretrain(cfg: ExperimentConfig, args) -> None:
    corpus = _corpus(cfg, args)
    ckpt = _out(cfg, args.out, "pretrained.json")
    hist = _out(cfg, args.history, "pretrain_history.jsonl")
    model = BackboneModel(cfg.model)
    history = train(model, corpus.pretraining(), cfg.pretrain, log_every=args.log_every)
    write_history(history, hist)
    save_checkpoint(model, ckpt, {"phase": "pretrain", "train_seed": cfg.pretrain.seed, "corpus_seed": cfg.corpus.seed})
    print(f"final loss {history[-1]['loss']:.6f}" if history else "no steps run")
    print(f"wrote {ckpt}")
    print(f"wrote {hist}")


def cmd_adapt(cfg: ExperimentConfig, args) -> None:
    pretrained, _ = _checkpoint(args)
    corpus = _corpus(cfg, args)
    strategy = _strategy(cfg, args.strategy)
    minutes = _minutes(cfg, args.minutes)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    label = f"{strategy.kind}_{minutes:g}min"
    ckpt = _out(cfg, args.out, f"adapted_{label}.json")
    hist = _out(cfg, args.history, f"adapt_history_{label}.jsonl")

    adapt_set, _ = split_speakers(corpus, minutes)
    before = parameter_digests(pretrained)
    train_cfg = adapt_config_for(cfg.adapt, minutes, seed)
    model, mask, history = adapt_model(pretrained, strategy, adapt_set, corpus.config.new_speaker_ids, train_cfg, seed)
    after = parameter_digests(model)
    frozen = [name for name, on in mask.items() if not on]
    changed = [name for name in frozen if after[name] != before[name]]
    if changed:
        raise AdapterMixError(f"frozen tensor {changed[0]!r} changed during adaptation")
    write_history(history, hist)
    save_checkpoint(model, ckpt, {
        "phase": "adapt", "strategy": strategy.kind, "minutes": minutes, "seed": seed,
        "pretrained_digests": {name: before[name] for name in frozen},
    })
    counts = count_parameters(model, mask)
    print(f"{strategy.kind}: trained {counts['trainable']} of {counts['total']} parameters "
          f"({100 * counts['fraction']:.2f}%) on {len(adapt_set)} utterances")
    print(f"frozen tensors unchanged: {len(frozen)}/{len(frozen)}")
    print(f"wrote {ckpt}")
    print(f"wrote {hist}")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    model, provenance = _checkpoint(args)
    corpus = _corpus(cfg, args)
    minutes = float(provenance.get("minutes", _minutes(cfg, None))) if args.minutes is None else args.minutes
    path = _out(cfg, args.out, "metrics.json")
    _, heldout = split_speakers(corpus, minutes)
    embedder = train_embedder(corpus.pretraining(), seed=cfg.corpus.seed)
    metrics = {"minutes": minutes, "n_heldout": len(heldout), **evaluate(model, heldout, embedder),
               **count_parameters(model)}
    path.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    print(f"wrote {path}")


def cmd_compare(cfg: ExperimentConfig, args) -> None:
    pretrained, _ = _checkpoint(args)
    corpus = _corpus(cfg, args)
    out_dir = Path(args.out_dir) if args.out_dir else Path(cfg.output_dir)
    report = compare(pretrained, corpus, cfg.strategies, cfg.budgets, cfg.adapt, seeds=cfg.seeds)
    jsonl, text = report.write(out_dir)
    sys.stdout.write(report.to_text())
    print(f"wrote {jsonl}")
    print(f"wrote {text}")


def cmd_params(cfg: ExperimentConfig, args) -> None:
    model_cfg = PAPER_CONFIG if args.paper else cfg.model
    strategy = _strategy(cfg, args.strategy)
    if args.sweep:
        print(f"adapter_mix, r={strategy.decoder_r}/{strategy.variance_r}, c={strategy.capacity:g}")
        print(f"{'N':>3}{'trainable':>12}{'total':>12}{'fraction':>10}")
        for n, counts in fraction_sweep(model_cfg, strategy.decoder_r, strategy.variance_r, capacity=strategy.capacity):
            print(f"{n:>3}{counts['trainable']:>12}{counts['total']:>12}{100 * counts['fraction']:>9.2f}%")
        return
    counts = parameter_report(model_cfg, strategy)
    print(f"strategy {strategy.kind}")
    print(f"total {counts['total']}")
    print(f"trainable {counts['trainable']}")
    print(f"fraction {100 * counts['fraction']:.2f}%")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptermix", description="Mixtures of residual adapters for speaker adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment JSON file (defaults: the reference experiment)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. adapt.base_lr=0.005 (repeatable)")
        return p

    p = command("gen-data", "write the synthetic corpus")
    p.add_argument("--out", help="corpus file (default OUTPUT_DIR/corpus.jsonl)")

    p = command("pretrain", "train the backbone on the pretraining speakers")
    p.add_argument("--corpus")
    p.add_argument("--out", help="checkpoint (default OUTPUT_DIR/pretrained.json)")
    p.add_argument("--history", help="loss history JSONL")
    p.add_argument("--log-every", type=int, default=0)

    p = command("adapt", "adapt a pretrained checkpoint to the new speakers")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", required=True, help="pretrained backbone checkpoint")
    p.add_argument("--strategy", choices=STRATEGY_KINDS)
    p.add_argument("--minutes", type=float, help="data budget (default: first config budget)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--history")

    p = command("eval", "held-out metrics for one checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--minutes", type=float, help="budget whose held-out split to score")
    p.add_argument("--out", help="metrics JSON (default OUTPUT_DIR/metrics.json)")

    p = command("compare", "run the strategy-by-budget grid")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", required=True, help="pretrained backbone checkpoint")
    p.add_argument("--out-dir", help="report directory (default OUTPUT_DIR)")

    p = command("params", "parameter counts for a strategy")
    p.add_argument("--strategy", choices=STRATEGY_KINDS)
    p.add_argument("--paper", action="store_true", help="use the full-size backbone dimensions")
    p.add_argument("--sweep", action="store_true", help="tabulate adapter_mix fractions for N = 1..8")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"adaptermix: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetError as exc:
        print(f"adaptermix: error: config field 'budgets': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"adaptermix: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (AdapterMixError, ValueError, OSError) as exc:
        print(f"adaptermix: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
