"""
Command-line entry point: ``python -m src.cli <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from src.config import RunConfig, read_config_file
from src.corpus import read_corpora, read_hypotheses, read_utterances, write_utterances
from src.errors import ConfigurationError, FusionLmError, UsageError
from src.eval_harness import (
    LangReport,
    aggregate,
    emit_report,
    load_report,
    plot_report,
    score_utterances,
    werr,
)
from src.fusion_decoder import FusionConfig, decode_utterances, read_lattice, read_lattice_index, write_decodes
from src.moe_lm import PRESETS, MoeLmConfig, count_params_flops, load_checkpoint, save_checkpoint
from src.synthetic import SyntheticConfig, generate
from src.tokenizer import load_vocab, save_vocab, train_wordpiece
from src.trainer import AdafactorHyper, TrainConfig, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# flag dest -> MoeLmConfig field
MODEL_FLAGS = {
    "layers": "num_layers",
    "dim": "model_dim",
    "heads": "num_heads",
    "head_dim": "head_dim",
    "ffn_multiplier": "ffn_multiplier",
    "experts": "num_experts",
    "experts_per_token": "experts_per_token",
    "max_seq_len": "max_seq_len",
    "moe_stride": "moe_layer_stride",
    "aux_weight": "aux_loss_weight",
    "routing": "routing",
}


class CliParser(argparse.ArgumentParser):
    """argparse parser that reports usage problems as ``UsageError``."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value file; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker processes for utterance-level parallelism")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_model(p: argparse.ArgumentParser):
    p.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)
    p.add_argument("--ffn-multiplier", type=int)
    p.add_argument("--experts", type=int, help="experts per MoE layer")
    p.add_argument("--experts-per-token", type=int, help="experts activated per token (default 2)")
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--moe-stride", type=int, help="every n-th layer is an MoE layer")
    p.add_argument("--aux-weight", type=float, help="load-balancing loss weight")
    p.add_argument("--routing", choices=["topk", "dense"])


def _add_fusion(p: argparse.ArgumentParser):
    p.add_argument("--lattices", type=Path, help="directory holding index.tsv and lattice files")
    p.add_argument("--vocab", type=Path)
    p.add_argument("--lm", type=Path, help="LM checkpoint directory; omit to decode without an LM")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--n-best", type=int, default=1)
    p.add_argument("--length-norm", action="store_true")


def build_parser() -> CliParser:
    parser = CliParser(prog="fusionlm", description="Multilingual MoE language model shallow fusion.")
    sub = parser.add_subparsers(dest="subcommand", parser_class=CliParser)

    p = sub.add_parser("train-tokenizer", help="train the shared wordpiece vocabulary")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--vocab-size", type=int, default=16384)
    p.add_argument("--max-sentences", type=int, help="per-corpus subsample size")

    p = sub.add_parser("train-lm", help="train the MoE language model")
    _add_common(p)
    _add_model(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--vocab", type=Path)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--packing-factor", type=int, default=4)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--precision", default="float32", choices=["float32", "float64"])
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--schedule", default="inverse_sqrt", choices=["inverse_sqrt", "constant"])
    p.add_argument("--beta1", type=float, default=0.0)
    p.add_argument("--beta2", type=float, default=0.99)
    p.add_argument("--clip", type=float, default=1.0)

    p = sub.add_parser("decode", help="beam search with shallow fusion")
    _add_common(p)
    _add_fusion(p)
    p.add_argument("--lambda", dest="lam", type=float, help="LM weight (required)")

    p = sub.add_parser("evaluate", help="WER / WERR report")
    _add_common(p)
    p.add_argument("--refs", type=Path)
    p.add_argument("--hyps", type=Path)
    p.add_argument("--baseline", action="append", default=[], metavar="NAME=PATH",
                   help="baseline hypotheses (TSV) or report.json; repeatable")
    p.add_argument("--locales", help="comma-separated locales to report")
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("flops", help="parameter and per-token FLOP accounting")
    _add_common(p)
    _add_model(p)
    p.set_defaults(preset="glam-64e")
    p.add_argument("--vocab-size", "--vocab", dest="vocab_size", type=int)
    p.add_argument("--context", type=int, help="attention context length (default max_seq_len)")
    p.add_argument("--compare", action="store_true", help="table over every preset")

    p = sub.add_parser("sweep-lambda", help="decode + evaluate over a list of LM weights")
    _add_common(p)
    _add_fusion(p)
    p.add_argument("--values", default="0,0.1,...,0.5", help="comma list; '...' continues the step")
    p.add_argument("--refs", type=Path)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic rare-entity test set")
    _add_common(p)
    p.add_argument("--utterances", type=int, default=12, help="test utterances per locale")
    p.add_argument("--text-sentences", type=int, default=400)
    p.add_argument("--transcript-sentences", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--binary", action="store_true", help="write lat1b lattices")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise UsageError(f"unknown subcommand {name}")


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    argv = list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_help(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config is not None:
        # file values go in front of the explicit flags, so argparse types them and flags win
        pos = argv.index(args.subcommand)
        file_argv = config_argv(_subparser(parser, args.subcommand), read_config_file(args.config), args)
        args = parser.parse_args([*argv[: pos + 1], *file_argv, *argv[pos + 1 :]])
    return args


def config_argv(sub: argparse.ArgumentParser, values: Dict[str, object], args) -> List[str]:
    """Config-file ``key = value`` pairs as option tokens for ``sub``."""
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    unknown = sorted(set(values) - set(actions) - {"config"})
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s) for {args.subcommand}: {unknown}")
    tokens: List[str] = []
    for key, value in values.items():
        if key == "config":
            continue
        action = actions[key]
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value is True:
                tokens.append(flag)
            elif value is not False:
                raise UsageError(f"{args.config}: {key} expects true or false, got {value!r}")
        else:
            tokens.append(f"{flag}={value}")
    return tokens


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            flag = "lambda" if name == "lam" else name.replace("_", "-")
            raise UsageError(f"--{flag} is required for {args.subcommand}")


def _run_config(args, path_names: Sequence[str]) -> RunConfig:
    paths = {n: getattr(args, n) for n in path_names if getattr(args, n, None) is not None}
    cfg = RunConfig(args.subcommand, args.seed, args.threads, args.output_dir, paths)
    cfg.check_inputs()
    return cfg


def _output_dir(args) -> Path:
    out = args.output_dir if args.output_dir is not None else Path("reports")
    out.mkdir(parents=True, exist_ok=True)
    return out


def model_config(args, vocab_size: Optional[int] = None) -> MoeLmConfig:
    config = PRESETS[args.preset]
    overrides = {field: getattr(args, flag) for flag, field in MODEL_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    if vocab_size is not None:
        overrides["vocab_size"] = vocab_size
    return replace(config, **overrides)


# --- subcommands ------------------------------------------------------------

def cmd_train_tokenizer(args) -> int:
    _require(args, "manifest")
    _run_config(args, ["manifest"])
    out = _output_dir(args)
    vocab = train_wordpiece(read_corpora(args.manifest), args.vocab_size, seed=args.seed,
                            max_sentences_per_corpus=args.max_sentences)
    path = save_vocab(vocab, out / "vocab.txt")
    print(f"vocab: {vocab.size} pieces -> {path}")
    return EXIT_OK


def cmd_train_lm(args) -> int:
    _require(args, "manifest", "vocab")
    _run_config(args, ["manifest", "vocab"])
    out = _output_dir(args)
    vocab = load_vocab(args.vocab)
    config = model_config(args, vocab.size)
    hyper = AdafactorHyper(beta1=args.beta1, beta2=args.beta2, clip_threshold=args.clip,
                           learning_rate=args.lr, warmup_steps=args.warmup, schedule=args.schedule)
    train_cfg = TrainConfig(steps=args.steps, seed=args.seed, batch_size=args.batch_size,
                            packing_factor=args.packing_factor, seq_len=args.seq_len,
                            precision=args.precision, checkpoint_every=args.checkpoint_every)
    checkpoint, log = train(args.manifest, vocab, config, hyper, train_cfg, output_dir=out / "checkpoints")
    save_checkpoint(checkpoint, out / "checkpoint")
    log.save_csv(out / "train_log.csv")
    print(f"checkpoint: step {checkpoint.training_step} -> {out / 'checkpoint'}")
    print(f"final loss: {log.rows[-1]['loss']:.4f}")
    return EXIT_OK


def _fusion_inputs(args):
    _require(args, "lattices", "vocab")
    _run_config(args, ["lattices", "vocab", "lm"])
    vocab = load_vocab(args.vocab)
    index = read_lattice_index(args.lattices)
    jobs = [(row.utt_id, read_lattice(args.lattices / row.file, vocab)) for row in index.itertuples(index=False)]
    lm = load_checkpoint(args.lm) if args.lm is not None else None
    return vocab, index, jobs, lm


def _decode(args, lam, vocab, index, jobs, lm) -> pd.DataFrame:
    cfg = FusionConfig(lam=lam, beam_size=args.beam, max_len=args.max_len, n_best=args.n_best,
                       length_normalization=args.length_norm)
    decodes = decode_utterances(jobs, lm, cfg, vocab, n_jobs=args.threads)
    return decodes


def _as_hyps(decodes: pd.DataFrame, index: pd.DataFrame) -> pd.DataFrame:
    locales = dict(zip(index["utt_id"], index["locale"]))
    return pd.DataFrame({"utt_id": decodes["utt_id"], "locale": decodes["utt_id"].map(locales),
                         "text": decodes["hyp_text"]})


def cmd_decode(args) -> int:
    _require(args, "lam")
    vocab, index, jobs, lm = _fusion_inputs(args)
    out = _output_dir(args)
    decodes = _decode(args, args.lam, vocab, index, jobs, lm)
    write_decodes(decodes, out / "decodes.tsv")
    write_utterances(_as_hyps(decodes, index), out / "hyps.tsv")
    print(f"decoded {len(decodes)} utterances -> {out / 'decodes.tsv'}")
    return EXIT_OK


def _load_baseline(entry: str, refs: pd.DataFrame):
    if "=" not in entry:
        raise UsageError(f"--baseline expects NAME=PATH, got {entry!r}")
    name, path = entry.split("=", 1)
    path = Path(path)
    if not path.exists():
        raise UsageError(f"--baseline {name}: no such file: {path}")
    if path.suffix == ".json":
        return name, load_report(path)
    return name, aggregate(score_utterances(refs, read_hypotheses(path, refs)))


def cmd_evaluate(args) -> int:
    _require(args, "refs", "hyps")
    _run_config(args, ["refs", "hyps"])
    out = _output_dir(args)
    refs = read_utterances(args.refs)
    baselines = dict(_load_baseline(b, refs) for b in args.baseline)
    locales = args.locales.split(",") if args.locales else None
    report = aggregate(score_utterances(refs, read_hypotheses(args.hyps, refs)), baselines, locales)
    emit_report(report, out / "report.csv")
    emit_report(report, out / "report.json", fmt="json")
    if args.plots:
        plot_report(report, out / "figures")
    _print_summary(report)
    return EXIT_OK


def _print_summary(report: LangReport):
    if report.macro_wer is None:
        print("no scored utterances")
        return
    print(f"languages: {len(report.locales)}  macro WER: {100 * report.macro_wer:.2f}%  "
          f"micro WER: {100 * report.micro_wer:.2f}%")
    for name in sorted(report.baselines):
        c = report.compare(name)
        mean = f"{100 * c.mean_werr_improved:.2f}%" if c.mean_werr_improved is not None else "n/a"
        print(f"vs {name}: improved {c.improved}, tied {c.tied}, regressed {c.regressed}; "
              f"mean WERR over improved: {mean}")


def cmd_flops(args) -> int:
    if args.compare:
        rows = []
        for name in sorted(PRESETS):
            r = count_params_flops(PRESETS[name], args.context)
            rows.append({"preset": name, "total_params": r.total_params,
                         "active_params": r.active_params_per_token,
                         "active_fraction": round(r.active_fraction, 4),
                         "flops_per_token": r.total_flops, "gating_flops": r.flops_per_token["gating"]})
        table = pd.DataFrame(rows)
        print(table.to_string(index=False))
        if args.output_dir is not None:
            table.to_csv(_output_dir(args) / "flops_compare.csv", index=False)
        return EXIT_OK

    config = model_config(args, args.vocab_size)
    r = count_params_flops(config, args.context)
    print(f"total params:   {r.total_params:,} ({r.total_params / 1e9:.2f}B)")
    print(f"active params:  {r.active_params_per_token:,} ({r.active_params_per_token / 1e6:.0f}M, "
          f"{100 * r.active_fraction:.1f}% of total)")
    print(f"flops/token:    {r.total_flops:,}")
    for part, n in r.flops_per_token.items():
        print(f"  {part:<18} {n:,}")
    if args.output_dir is not None:
        pd.DataFrame([{"part": k, "flops": v} for k, v in r.flops_per_token.items()]).to_csv(
            _output_dir(args) / "flops.csv", index=False)
    return EXIT_OK


def parse_lambda_values(text: str) -> List[float]:
    """``0,0.1,...,0.5`` -> [0, 0.1, 0.2, 0.3, 0.4, 0.5]."""
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    values: List[float] = []
    i = 0
    while i < len(tokens):
        if tokens[i] == "...":
            if len(values) < 2 or i + 1 >= len(tokens):
                raise UsageError("'...' needs two values before it and one after")
            step = values[-1] - values[-2]
            stop = float(tokens[i + 1])
            if step <= 0 or stop < values[-1]:
                raise UsageError(f"cannot expand {values[-2]},{values[-1]},...,{stop}")
            n = int(round((stop - values[-1]) / step))
            values.extend(round(values[-1] + step * k, 10) for k in range(1, n))
            i += 1
            continue
        try:
            values.append(float(tokens[i]))
        except ValueError:
            raise UsageError(f"not a number: {tokens[i]!r}") from None
        i += 1
    if not values:
        raise UsageError("no lambda values given")
    if any(v < 0 for v in values):
        raise ConfigurationError("lambda values must be >= 0")
    return values


def cmd_sweep_lambda(args) -> int:
    _require(args, "refs")
    _run_config(args, ["refs"])
    values = parse_lambda_values(args.values)
    vocab, index, jobs, lm = _fusion_inputs(args)
    refs = read_utterances(args.refs)
    out = _output_dir(args)

    def evaluate(lam, model):
        hyps = _as_hyps(_decode(args, lam, vocab, index, jobs, model), index)
        return aggregate(score_utterances(refs, hyps))

    no_lm = evaluate(0.0, None)
    rows = [{"lambda": "no-lm", "macro_wer": no_lm.macro_wer, "micro_wer": no_lm.micro_wer}]
    reports: Dict[float, LangReport] = {}
    for lam in values:
        reports[lam] = evaluate(lam, lm)
        rows.append({"lambda": lam, "macro_wer": reports[lam].macro_wer, "micro_wer": reports[lam].micro_wer})
    zero = reports[0.0] if 0.0 in reports else no_lm
    for row in rows:
        row["werr"] = werr(zero.macro_wer, row["macro_wer"]) if zero.macro_wer else None
    table = pd.DataFrame(rows, columns=["lambda", "macro_wer", "micro_wer", "werr"])
    table.to_csv(out / "sweep.csv", index=False, float_format="%.6f")
    best = min(reports, key=lambda lam: (reports[lam].macro_wer, lam))
    best_report = _with_baseline(reports[best], no_lm)
    emit_report(best_report, out / "report.csv")
    emit_report(best_report, out / "report.json", fmt="json")
    print(table.to_string(index=False))
    print(f"best lambda: {best}")
    return EXIT_OK


def _with_baseline(report: LangReport, baseline: LangReport) -> LangReport:
    return LangReport(report.per_language, {"no-lm": baseline.wer_by_locale()})


def cmd_gen_synthetic(args) -> int:
    _require(args, "output_dir")
    cfg = SyntheticConfig(seed=args.seed, text_sentences=args.text_sentences,
                          transcript_sentences=args.transcript_sentences, test_utterances=args.utterances,
                          vocab_size=args.vocab_size, binary_lattices=args.binary)
    paths = generate(args.output_dir, cfg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer,
    "train-lm": cmd_train_lm,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "flops": cmd_flops,
    "sweep-lambda": cmd_sweep_lambda,
    "gen-synthetic": cmd_gen_synthetic,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except UsageError as e:
        logger.error(f"usage: {e}")
        return EXIT_USAGE
    except FusionLmError as e:
        logger.error(str(e))
        return EXIT_RUNTIME

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
    try:
        return COMMANDS[args.subcommand](args)
    except UsageError as e:
        logger.error(f"usage: {e}")
        return EXIT_USAGE
    except (FusionLmError, OSError) as e:
        logger.error(f"{args.subcommand} failed: {e}")
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
