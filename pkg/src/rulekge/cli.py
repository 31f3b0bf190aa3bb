"""Command-line interface: generate, train, evaluate, ground, diagnose.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training
divergence.  Errors go to stderr with stable prefixes ``error[usage]:``,
``error[data]:`` and ``error[train]:``.

Heavy imports happen after argument parsing so that ``--threads`` can pin the
BLAS thread pools before numpy loads; ``--threads 1`` is the bitwise
deterministic mode.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAIN = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2; usage errors here are 1
        raise UsageError(message)


def _add_common(parser):
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count; 1 guarantees bitwise determinism")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="rulekge",
        description="Knowledge-graph embeddings with logical-rule penalties",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("generate", help="write a synthetic family KG and its rules", **fmt)
    p.add_argument("--families", type=int, required=True, help="number of families (>= 1)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--holdout", type=float, default=0.3,
                   help="fraction of rule conclusions held out into valid/test")
    p.add_argument("--entailment-pairs", action="store_true",
                   help="also emit caresFor/wedTo relations with implication and equivalence rules")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write checkpoint + trace", **fmt)
    p.add_argument("--train", required=True, help="train triple file")
    p.add_argument("--valid", default=None, help="validation triple file (enables early stopping)")
    p.add_argument("--test", default=None,
                   help="optional test triple file, interned now so evaluation covers its entities")
    p.add_argument("--rules", default=None, help="rule file")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--no-rules", action="store_true", help="ignore the rule file (rule weight 0)")
    p.add_argument("--grounding-free", action=argparse.BooleanOptionalAction, default=None,
                   help="use relation-row penalties for implication/equivalence")
    p.add_argument("--preset", choices=("desk", "fb15k-full", "wn18-full"), default="desk",
                   help="base hyperparameter preset")
    p.add_argument("--min-confidence", type=float, default=0.8,
                   help="drop rules below this confidence")
    p.add_argument("--dim", type=int, default=None, help="embedding dimension")
    p.add_argument("--hidden", default=None, help="hidden widths, comma separated")
    p.add_argument("--activation", choices=("relu", "sigmoid"), default=None,
                   help="activation plan (sigmoid keeps ReLU on the last hidden layer)")
    p.add_argument("--learning-rate", type=float, default=None, help="Adam learning rate")
    p.add_argument("--negatives", type=int, default=None, help="negatives per positive")
    p.add_argument("--temperature", type=float, default=None,
                   help="self-adversarial softmax temperature")
    p.add_argument("--rule-weight", type=float, default=None, help="rule regularizer weight")
    p.add_argument("--slack", action="append", default=[], metavar="KIND=VALUE",
                   help="per-kind slack margin, repeatable")
    p.add_argument("--batches", type=int, default=None, help="mini-batches per epoch")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs")
    p.add_argument("--validate-every", type=int, default=None, help="validation period in epochs")
    p.add_argument("--patience", type=int, default=None,
                   help="validations without improvement before stopping")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--groundings-per-rule", type=int, default=None,
                   help="per-epoch cap on groundings per rule")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank a test split and print metrics", **fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--test", required=True, help="triple file to rank")
    p.add_argument("--filter-with", default=None,
                   help="comma-separated triple files (train,valid,test order) for the filtered protocol")
    p.add_argument("--hits", default="1,3,10", help="comma-separated Hits@k cutoffs")
    p.add_argument("--vocab", default=None, help="vocabulary sidecar (default: <ckpt>.vocab.tsv)")
    p.add_argument("--tie-break", choices=("average", "pessimistic"), default="average",
                   help="rank assigned within score ties")
    p.add_argument("--dump", default=None, help="optional per-query rank dump path")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ground", help="dump rule groundings over a train split", **fmt)
    p.add_argument("--train", required=True, help="train triple file")
    p.add_argument("--rules", required=True, help="rule file")
    p.add_argument("--out", required=True, help="groundings TSV output path")
    p.add_argument("--min-confidence", type=float, default=0.8,
                   help="drop rules below this confidence")
    p.add_argument("--grounding-free", action=argparse.BooleanOptionalAction, default=True,
                   help="skip groundings for implication/equivalence (their penalties are relation-row based)")
    _add_common(p)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("diagnose", help="rule-satisfaction report, delta table and figure", **fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--rules", required=True, help="rule file")
    p.add_argument("--out", required=True, help="penalty report TSV path")
    p.add_argument("--train", default=None,
                   help="train triple file; enables grounded penalty evaluation")
    p.add_argument("--vocab", default=None, help="vocabulary sidecar (default: <ckpt>.vocab.tsv)")
    p.add_argument("--min-confidence", type=float, default=0.8,
                   help="drop rules below this confidence")
    p.add_argument("--max-groundings", type=int, default=None,
                   help="sample cap per rule for large graphs")
    _add_common(p)
    p.set_defaults(func=cmd_diagnose)

    return parser


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_slacks(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--slack expects KIND=VALUE, got {item!r}")
        kind, _, value = item.partition("=")
        try:
            out["slack_" + kind.strip()] = str(float(value))
        except ValueError:
            raise UsageError(f"bad slack value in {item!r}") from None
    return out


def parse_config_file(path) -> dict:
    """Plain ``key = value`` lines with ``#`` comments."""
    values = {}
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _vocab_path(args) -> str:
    return args.vocab if args.vocab else args.ckpt + ".vocab.tsv"


def _write_vocab(graph, path) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for name in graph.entities.names:
            out.write(f"entity\t{name}\n")
        for name in graph.relations.names:
            out.write(f"relation\t{name}\n")


def _read_vocab(graph, path):
    from .data import DataError

    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(
            f"cannot read vocabulary sidecar {path}: {exc} "
            "(pass --vocab or keep the file written next to the checkpoint)"
        ) from exc
    with handle:
        for lineno, line in enumerate(handle, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            kind, _, name = line.partition("\t")
            if kind == "entity":
                graph.entities.intern(name)
            elif kind == "relation":
                graph.relations.intern(name)
            else:
                raise DataError(f"{path}:{lineno}: unknown vocabulary row kind {kind!r}")


def cmd_generate(args) -> int:
    from .data import generate_family_kg, write_rules, write_triples

    if args.families < 1:
        raise UsageError("--families must be >= 1")
    graph, rules = generate_family_kg(
        args.families, args.seed,
        holdout_fraction=args.holdout, entailment_pairs=args.entailment_pairs,
    )
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "valid", "test"):
        write_triples(os.path.join(args.out, f"{split}.txt"), graph, split)
    write_rules(os.path.join(args.out, "rules.txt"), graph, rules)
    print(
        f"wrote {len(graph.triples('train'))} train / {len(graph.triples('valid'))} valid / "
        f"{len(graph.triples('test'))} test triples, {len(rules)} rules to {args.out}"
    )
    return EXIT_OK


def _build_training_config(args):
    from .training import PRESETS, config_from_mapping

    config = PRESETS[args.preset]()
    overrides = {}
    if args.config:
        overrides.update(parse_config_file(args.config))
    flag_map = {
        "embedding_dim": args.dim,
        "hidden_widths": args.hidden,
        "activation": args.activation,
        "learning_rate": args.learning_rate,
        "negatives_per_positive": args.negatives,
        "adversarial_temperature": args.temperature,
        "rule_weight": args.rule_weight,
        "batches_per_epoch": args.batches,
        "max_epochs": args.epochs,
        "validation_period": args.validate_every,
        "patience": args.patience,
        "seed": args.seed,
        "groundings_per_rule": args.groundings_per_rule,
    }
    overrides.update({k: str(v) for k, v in flag_map.items() if v is not None})
    if args.grounding_free is not None:
        overrides["grounding_free"] = str(args.grounding_free).lower()
    overrides.update(_parse_slacks(args.slack))
    try:
        return config_from_mapping(config, overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    from .data import KnowledgeGraph, load_rules, load_triples
    from .model import save_checkpoint
    from .plots import plot_training_trace
    from .training import train

    config = _build_training_config(args)
    graph = KnowledgeGraph()
    load_triples(args.train, graph, "train")
    if args.valid:
        load_triples(args.valid, graph, "valid")
    if args.test:
        load_triples(args.test, graph, "test")
    rules = []
    if args.rules and not args.no_rules:
        rules, skipped = load_rules(args.rules, graph, args.min_confidence)
        if skipped:
            print(f"skipped {skipped} rule(s) with unknown relations", file=sys.stderr)
    if args.no_rules:
        from dataclasses import replace

        config = replace(config, rule_weight=0.0)

    params, trace = train(graph, rules, config)
    save_checkpoint(params, args.out)
    _write_vocab(graph, args.out + ".vocab.tsv")
    trace_path = args.out + ".trace.tsv"
    trace.write_tsv(trace_path)
    plot_training_trace(trace, args.out + ".trace.png")
    best = f", best epoch {trace.best_epoch}" if trace.validation_epochs else ""
    print(f"trained {trace.epochs_run} epoch(s){best}; wrote {args.out} and {trace_path}")
    return EXIT_OK


def _load_eval_graph(args):
    from .data import KnowledgeGraph, load_triples

    graph = KnowledgeGraph()
    _read_vocab(graph, _vocab_path(args))
    filter_files = []
    if getattr(args, "filter_with", None):
        filter_files = [f for f in args.filter_with.split(",") if f]
    for path, split in zip(filter_files, ("train", "valid", "test")):
        load_triples(path, graph, split)
    if args.test not in filter_files:
        load_triples(args.test, graph, "test")
    return graph


def cmd_evaluate(args) -> int:
    from .data import DataError
    from .evaluation import evaluate_split, format_metrics, write_query_dump
    from .model import load_checkpoint

    params = load_checkpoint(args.ckpt)
    graph = _load_eval_graph(args)
    if graph.num_entities > params.num_entities or graph.num_relations > params.num_relations:
        raise DataError(
            "evaluation files contain entities or relations unknown to the checkpoint"
        )
    try:
        hits = tuple(int(k) for k in args.hits.split(","))
    except ValueError:
        raise UsageError(f"bad --hits list {args.hits!r}") from None
    if not graph.triples("test"):
        raise DataError(f"no triples to evaluate in {args.test}")
    report = evaluate_split(params, graph, "test", hits_at=hits, tie_break=args.tie_break)
    sys.stdout.write(format_metrics(report.aggregates()))
    if args.dump:
        write_query_dump(report, graph, args.dump)
    return EXIT_OK


def cmd_ground(args) -> int:
    from .data import KnowledgeGraph, load_rules, load_triples
    from .rules import ground_rule

    graph = KnowledgeGraph()
    load_triples(args.train, graph, "train")
    rules, skipped = load_rules(args.rules, graph, args.min_confidence)
    if skipped:
        print(f"skipped {skipped} rule(s) with unknown relations", file=sys.stderr)
    ent = graph.entities.name
    rel = graph.relations.name
    total = 0
    with open(args.out, "w", encoding="utf-8") as out:
        out.write("kind\trelations\tbindings\tpremises\tconclusion\n")
        for rule in rules:
            groundings = ground_rule(rule, graph, grounding_free=args.grounding_free)
            total += len(groundings)
            names = ",".join(rel(r) for r in rule.relations)
            for g in groundings:
                bindings = ",".join(ent(e) for e in g.bindings)
                premises = ";".join(
                    f"{ent(p.head)},{rel(p.relation)},{ent(p.tail)}" for p in g.premises
                )
                conclusion = f"{ent(g.conclusion.head)},{rel(g.conclusion.relation)},{ent(g.conclusion.tail)}"
                out.write(f"{rule.kind}\t{names}\t{bindings}\t{premises}\t{conclusion}\n")
            print(f"{rule.kind}({names}): {len(groundings)} grounding(s)")
    print(f"wrote {total} grounding(s) to {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .data import KnowledgeGraph, load_rules, load_triples
    from .evaluation import rule_satisfaction_report, write_delta_table, write_penalty_report
    from .model import load_checkpoint
    from .plots import plot_delta_statistics

    params = load_checkpoint(args.ckpt)
    graph = KnowledgeGraph()
    _read_vocab(graph, _vocab_path(args))
    if args.train:
        load_triples(args.train, graph, "train")
    rules, skipped = load_rules(args.rules, graph, args.min_confidence)
    if skipped:
        print(f"skipped {skipped} rule(s) with unknown relations", file=sys.stderr)
    report = rule_satisfaction_report(
        params, graph, rules, max_groundings=args.max_groundings
    )
    write_penalty_report(report, graph, args.out)
    stem = args.out[:-4] if args.out.endswith(".tsv") else args.out
    delta_path = stem + ".delta.tsv"
    fig_path = stem + ".delta.png"
    write_delta_table(report.delta_stats, graph, delta_path)
    plot_delta_statistics(report.delta_stats, graph, fig_path)
    for kind in sorted(report.penalties):
        print(
            f"{kind}: raw penalty {report.penalties[kind]:.6g} over "
            f"{report.evaluated_counts[kind]}/{report.grounding_counts[kind]} grounding(s)"
        )
    print(f"wrote {args.out}, {delta_path} and {fig_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        _set_threads(args.threads)
        if args.verbose:
            import logging

            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        from .data import DataError
        from .model import CheckpointError
        from .rules import ConfigurationError
        from .training import TrainingError

        try:
            return args.func(args)
        except UsageError as exc:
            print(f"error[usage]: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (ValueError, ConfigurationError) as exc:
            print(f"error[usage]: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (DataError, CheckpointError) as exc:
            print(f"error[data]: {exc}", file=sys.stderr)
            return EXIT_DATA
        except OSError as exc:
            print(f"error[data]: {exc}", file=sys.stderr)
            return EXIT_DATA
        except TrainingError as exc:
            print(f"error[train]: {exc}", file=sys.stderr)
            return EXIT_TRAIN
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
