"""
Command-line entry point: dict, forge, synth, train, eval, ablate and plot.

Configuration layers as documented defaults <- --config file <- --set key=value <-
subcommand flags. Every subcommand writes into <runs-root>/<subcommand>-<fingerprint>/.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import evalkit, plots
from .config import RunConfig, load_config, to_flat
from .corpus import Filler, Split, load_annotations
from .errors import ConfigError, IoFailure, NegrankError, UnknownSubcommand, UsageError
from .negforge import forge
from .synthgen import TEST_SPLITS, gen_corpus, load_corpus, write_corpus
from .tagger import PrimitiveDictionary, TagLexicon, build_dictionary, tag_query
from .toymodel import load_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_RUNS_ROOT = "runs"


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit status."""

    def error(self, message):
        if "invalid choice" in message and "command" in message:
            raise UnknownSubcommand(message)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="negrank", description="Hierarchical negative ranking lab")
    parser.add_argument("--config", help="Flat key = value config file")
    parser.add_argument("--runs-root", default=DEFAULT_RUNS_ROOT, help=f"Run directory root (default: {DEFAULT_RUNS_ROOT})")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key; repeatable")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("dict", help="Build the primitive dictionary from annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--split", default="train", help="Split whose queries feed the dictionary")

    p = commands.add_parser("forge", help="Forge hierarchical negatives for annotated queries")
    p.add_argument("--annotations", required=True)
    p.add_argument("--dictionary", help="Dictionary JSON; built from the train split (or all queries) when omitted")
    p.add_argument("--split", help="Only forge queries of this split")
    p.add_argument("--ratios", help="Three comma-separated masking ratios")
    p.add_argument("--filler", choices=["lexicon", "llm"])
    p.add_argument("--seed", type=int)

    p = commands.add_parser("synth", help="Generate a synthetic corpus")
    p.add_argument("--seed", type=int)

    p = commands.add_parser("train", help="Train and evaluate the toy scorer on a synthetic corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = commands.add_parser("eval", help="Evaluate a checkpoint on the test splits")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)

    p = commands.add_parser("ablate", help="Run an ablation grid over seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", default="coarse", help=f"Comma-separated presets from {sorted(evalkit.PRESETS)}")
    p.add_argument("--seeds", help="Comma-separated seeds")
    p.add_argument("--workers", type=int)

    p = commands.add_parser("plot", help="Emit saliency plot data and SVG for one sample")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--seed", type=int)
    return parser


def _parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "expected KEY=VALUE")
        key, value = (part.strip() for part in pair.split("=", 1))
        overrides[key] = value
    return overrides


def _flag_overrides(args: argparse.Namespace) -> Dict[str, str]:
    mapping = {
        "ratios": "forge.ratios",
        "filler": "forge.filler",
        "seed": "seeds",
        "seeds": "seeds",
        "epochs": "train.epochs",
        "workers": "eval.workers",
    }
    return {key: str(getattr(args, flag)) for flag, key in mapping.items() if getattr(args, flag, None) is not None}


def _run_dir(cfg: RunConfig, args: argparse.Namespace) -> Path:
    inputs = [getattr(args, name, None) for name in ("annotations", "dictionary", "corpus", "checkpoint")]
    try:
        run_dir = cfg.run_dir(args.runs_root, args.command, inputs)
        run_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"{key} = {value}" for key, value in sorted(to_flat(cfg).items())]
        (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot prepare a {args.command} run directory under {args.runs_root}: {e}") from e
    return run_dir


def _cache_path(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.forge.cache) if cfg.forge.cache else run_dir / "negatives.jsonl"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dict(args, cfg: RunConfig, run_dir: Path) -> int:
    lexicon = TagLexicon.bundled()
    annotations = [a for a in load_annotations(args.annotations) if a.split.value == args.split]
    dictionary = build_dictionary([tag_query(a.query_text, lexicon, a.query_id) for a in annotations], args.split)
    path = run_dir / "dictionary.json"
    dictionary.save(path)
    print(f"✅ Dictionary of {dictionary.total()} primitive tokens: {path}")
    return 0


def cmd_forge(args, cfg: RunConfig, run_dir: Path) -> int:
    lexicon = TagLexicon.bundled()
    annotations = load_annotations(args.annotations)
    if args.split:
        annotations = [a for a in annotations if a.split.value == args.split]
    queries = [tag_query(a.query_text, lexicon, a.query_id) for a in annotations]

    if args.dictionary:
        dictionary = PrimitiveDictionary.load(args.dictionary)
    else:
        train = [q for q, a in zip(queries, annotations) if a.split is Split.TRAIN]
        if not train:
            logger.warning("No train-split queries; building the dictionary from every query")
        dictionary = build_dictionary(train or queries, "train" if train else "all")

    cache = _cache_path(cfg, run_dir)
    seed = cfg.seeds[0]

    async def _forge():
        if cfg.forge.filler is not Filler.LLM:
            filler = evalkit.make_filler(cfg, dictionary)
            return await forge(queries, filler, cfg.forge.ratios, seed, cache, cfg.forge.excluded_classes, cfg.forge.max_in_flight)
        async with evalkit.open_endpoint(cfg) as endpoint:
            filler = evalkit.make_filler(cfg, dictionary, endpoint)
            return await forge(queries, filler, cfg.forge.ratios, seed, cache, cfg.forge.excluded_classes, cfg.forge.max_in_flight)

    hierarchies = asyncio.run(_forge())
    print(f"✅ Forged {len(hierarchies)} hierarchies ({3 * len(hierarchies)} negatives): {cache}")
    return 0


def cmd_synth(args, cfg: RunConfig, run_dir: Path) -> int:
    corpus = gen_corpus(cfg.synth, cfg.seeds[0])
    out = write_corpus(corpus, run_dir / "corpus")
    print(f"✅ Synthetic corpus: {out}")
    return 0


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    corpus = load_corpus(args.corpus)
    for seed in cfg.seeds:
        out_dir = run_dir / f"seed{seed}"
        report, result = evalkit.run_pipeline(cfg, corpus, seed, out_dir)
        print(f"✅ Seed {seed}: checkpoint {result.checkpoint}, report {out_dir / 'report.json'}")
    return 0


def _load_for_eval(args, cfg: RunConfig, run_dir: Path, splits: Sequence[Split]):
    corpus = load_corpus(args.corpus)
    params, vocab, _ = load_checkpoint(args.checkpoint)
    hierarchies = evalkit.prepare_hierarchies(corpus, cfg, cfg.seeds[0], _cache_path(cfg, run_dir), splits)
    return corpus, params, vocab, hierarchies


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    corpus, params, vocab, hierarchies = _load_for_eval(args, cfg, run_dir, TEST_SPLITS)
    report = evalkit.evaluate(params, corpus, hierarchies, vocab, cfg, cfg.seeds[0])
    path = run_dir / "report.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for split, metrics in report.splits.items():
        print(f"{split:>18}: " + "  ".join(f"{name} {value:.4f}" for name, value in metrics.items()))
    print(f"✅ Report: {path}")
    return 0


def cmd_ablate(args, cfg: RunConfig, run_dir: Path) -> int:
    table = evalkit.ablate(args.grid, args.corpus, cfg.seeds, cfg, run_dir, workers=cfg.eval.workers)
    print(table.render(), end="")
    failed = [row["label"] for row in table.rows if "failed" in row]
    if failed:
        logger.warning(f"Failed cells: {', '.join(failed)}")
    print(f"✅ Ablation table: {run_dir / 'ablation.txt'}")
    return 0


def cmd_plot(args, cfg: RunConfig, run_dir: Path) -> int:
    corpus = load_corpus(args.corpus)
    samples = {s.sample_id: s for s in corpus.all_samples()}
    if args.sample not in samples:
        raise ConfigError("--sample", f"no sample {args.sample!r} in {args.corpus}")
    split = samples[args.sample].split

    params, vocab, _ = load_checkpoint(args.checkpoint)
    hierarchies = evalkit.prepare_hierarchies(corpus, cfg, cfg.seeds[0], _cache_path(cfg, run_dir), [split])[split]
    examples = evalkit.build_examples(corpus.samples[split], hierarchies, vocab)
    example = next(e for e in evalkit.attach_easy(examples, hierarchies) if e.sample_id == args.sample)
    hierarchy = next(h for h in hierarchies if h.query_id == args.sample)
    texts = hierarchy.texts() + (samples[hierarchy.easy].query.text,)

    data = evalkit.plot_data(params, example, texts)
    json_path = plots.write_plot_data(data, run_dir / "plots" / f"{args.sample}.json")
    svg_path = plots.render_svg(data, run_dir / "plots" / f"{args.sample}.svg")
    print(f"✅ Plot data: {json_path}\n✅ Plot: {svg_path}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, Path], int]] = {
    "dict": cmd_dict,
    "forge": cmd_forge,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return the process exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args)
        overrides = _parse_overrides(args.overrides)
        overrides.update(_flag_overrides(args))
        cfg = load_config(args.config, overrides)
        run_dir = _run_dir(cfg, args)
        logger.info(f"Running {args.command} in {run_dir}")
        return COMMANDS[args.command](args, cfg, run_dir)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except NegrankError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"{e.category} error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
