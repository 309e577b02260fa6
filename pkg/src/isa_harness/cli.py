"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data validation failure,
3 more than 10% of an experiment's instances failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backend import BackendError, ResponseCache
from .chains import ChainKind, TemplateError
from .corpus import PUBLISHED_SUMMARIES, CorpusError, DatasetName, load_dataset, summarize, validate_expected
from .runner import RunnerError, load_config, report, resume, run_grid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILURES = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "output_dir": getattr(args, "out", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "concurrency": getattr(args, "concurrency", None),
    }


def cmd_validate_data(args: argparse.Namespace) -> int:
    if args.data_file:
        name = DatasetName(args.name)
        targets = [(name.value, load_dataset(args.data_file, name, args.flags), PUBLISHED_SUMMARIES[name])]
    else:
        if not args.config:
            raise RunnerError("validate-data needs --config or --data-file")
        config = load_config(args.config)
        names = [args.dataset] if args.dataset else list(config.datasets)
        targets = []
        for name in names:
            if name not in config.datasets:
                raise RunnerError(f"unknown dataset {name!r}")
            spec = config.datasets[name]
            targets.append((name, spec.load(), spec.expected))
    ok = True
    for name, instances, expected in targets:
        s = summarize(instances)
        if expected is None:
            verdict = "no expected summary configured"
        else:
            check = validate_expected(s, expected)
            ok &= check.passed
            verdict = check.describe()
        print(
            f"{name}: negative={s.negative} positive={s.positive} neutral={s.neutral} "
            f"total={s.total} isa={s.isa_count} isa%={s.isa_percent} -> {verdict}"
        )
    return EXIT_OK if ok else EXIT_DATA


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    chains = [ChainKind(args.chain)] if args.chain else None
    results = run_grid(
        config,
        datasets=[args.dataset] if args.dataset else None,
        backends=[args.backend] if args.backend else None,
        chains=chains,
        skip_validate=args.skip_validate,
    )
    for result in results:
        print(result.summary())
    return max((r.exit_code for r in results), default=EXIT_OK)


def cmd_resume(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    result = resume(args.experiment_id, config, skip_validate=args.skip_validate)
    print(result.summary())
    return result.exit_code


def cmd_report(args: argparse.Namespace) -> int:
    reference = "BERT_Asp+SCAPT"
    if args.config:
        config = load_config(args.config, _overrides(args))
        out_dir, reference = config.output_dir, config.reference_baseline
    elif args.out:
        out_dir = Path(args.out)
    else:
        raise RunnerError("report needs --config or --out")
    rendered = report(args.experiment_ids, out_dir, allow_partial=args.allow_partial, reference=reference)
    sys.stdout.write(getattr(rendered, args.format))
    return EXIT_OK


def cmd_cache_stats(args: argparse.Namespace) -> int:
    if args.cache_dir:
        root = Path(args.cache_dir)
    elif args.config:
        root = load_config(args.config).cache_dir
        if root is None:
            raise RunnerError("config has no cache_dir")
    else:
        raise RunnerError("cache-stats needs --cache-dir or --config")
    stats = ResponseCache(root).stats()
    print(f"cache {root}: {stats.entries} entries, {stats.bytes} bytes")
    for model, count in sorted(stats.models.items()):
        print(f"  {model}: {count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isa-harness", description="Chain-of-thought implicit sentiment evaluation harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-data", help="check dataset label/implicit counts against expectations")
    p.add_argument("--config")
    p.add_argument("--dataset", help="dataset name from the config")
    p.add_argument("--data-file", help="validate a single XML/JSONL file against the published counts")
    p.add_argument("--name", choices=[d.value for d in DatasetName], default="restaurant")
    p.add_argument("--flags", help="implicit-flag overlay for --data-file")
    p.set_defaults(func=cmd_validate_data)

    for name, func in (("run", cmd_run), ("resume", cmd_resume)):
        p = sub.add_parser(name)
        if name == "resume":
            p.add_argument("experiment_id")
        p.add_argument("--config", required=True)
        if name == "run":
            p.add_argument("--dataset")
            p.add_argument("--chain", choices=[k.value for k in ChainKind])
            p.add_argument("--backend")
        p.add_argument("--concurrency", type=int)
        p.add_argument("--out")
        p.add_argument("--cache-dir")
        p.add_argument("--skip-validate", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report")
    p.add_argument("experiment_ids", nargs="*")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--format", choices=["text", "csv", "json"], default="text")
    p.add_argument("--allow-partial", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cache-stats")
    p.add_argument("--config")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_cache_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BackendError, TemplateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
