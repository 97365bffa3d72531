"""Command-line harness.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort, 3 failed check.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import ablation, checks
from .checkpoint import CheckpointError, atomic_write, load_module, save_module
from .config import PRESETS, PROTOCOLS, RunConfig, load_config, with_overrides
from .datasynth import generate, read_csv, write_csv
from .errors import ConfigError, DataError
from .projection import power_iteration_pca, scatter_svg
from .training import NumericalAbort, build_model, evaluate, make_split, predict, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

RECORD_FILE = "run_record.json"
CHECKPOINT_FILE = "model.ckpt"
CONFIG_FILE = "config.ini"


class UsageError(Exception):
    pass


def _overrides_from_args(args) -> dict:
    ov: dict = {}
    if getattr(args, "preset", None):
        ov.setdefault("optim", {})["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        ov.setdefault("optim", {})["seed"] = args.seed
    if getattr(args, "protocol", None):
        ov.setdefault("data", {})["protocol"] = args.protocol
    if getattr(args, "held_type", None) is not None:
        ov.setdefault("data", {})["held_type"] = args.held_type
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not (sep and dot):
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        ov.setdefault(section, {})[name] = val
    return ov


def resolve_config(args) -> RunConfig:
    base = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return with_overrides(base, _overrides_from_args(args))


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_model(cfg: RunConfig, checkpoint: str):
    model = build_model(cfg)
    load_module(checkpoint, model)
    return model


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)

    def progress(it, bundle):
        if args.verbose and (it % 100 == 0 or it == cfg.optim.iterations - 1):
            print(f"iter {it:5d}  total {bundle.l_total:.4f}  ce {bundle.l_ce:.4f}  "
                  f"dm {bundle.l_dm:.4f}  cdm {bundle.l_cdm:.4f}", file=sys.stderr)

    try:
        result = train(cfg, progress=progress)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    atomic_write(os.path.join(out, CONFIG_FILE), cfg.to_text())
    save_module(os.path.join(out, CHECKPOINT_FILE), result.model)
    atomic_write(os.path.join(out, RECORD_FILE), result.record.to_json())
    print(result.report.to_json())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    model = _load_model(cfg, args.checkpoint)
    report = evaluate(model, make_split(cfg))
    text = report.to_json()
    if args.out:
        atomic_write(os.path.join(_out_dir(args), "report.json"), text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    cells = ablation.GRIDS[args.grid]()
    rows = ablation.ablate(cfg, cells, repeats=args.repeats, out_dir=_out_dir(args))
    sys.stdout.write(ablation.table_csv(rows))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = resolve_config(args)
    model = _load_model(cfg, args.checkpoint)
    split = getattr(make_split(cfg), args.split)
    _, feats = predict(model, split.images())
    path = args.out_file or os.path.join(_out_dir(args), f"embeddings_{args.split}.csv")
    write_csv(split, path, features=feats)
    print(path)
    return EXIT_OK


def cmd_project(args) -> int:
    ds = read_csv(args.embeddings)
    if len(ds) < 2:
        raise UsageError("projection needs at least 2 samples")
    comps, _, mean = power_iteration_pca(ds.features, k=2, seed=args.seed or 0)
    proj = (ds.features - mean) @ comps.T
    out = _out_dir(args)
    stem = os.path.splitext(os.path.basename(args.embeddings))[0]
    csv_path = os.path.join(out, f"{stem}_pca.csv")
    svg_path = os.path.join(out, f"{stem}_pca.svg")
    write_csv(ds, csv_path, features=proj)
    atomic_write(svg_path, scatter_svg(proj, ds.labels, ds.attack_type, title=stem))
    print(csv_path)
    print(svg_path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = checks.run_suite(cases=args.cases, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    for r in report.results:
        for failure in r.failures[:3]:
            print(f"  {r.group}.{r.name}: {failure}")
    print(f"{'all checks passed' if report.ok else 'gradcheck FAILED'} in {report.seconds:.1f}s")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    ds = generate(cfg.synthetic_spec())
    path = args.out_file or os.path.join(_out_dir(args), "dataset.csv")
    write_csv(ds, path)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--out", help="output directory")
    common.add_argument("--held-type", type=int, dest="held_type")
    common.add_argument("--protocol", choices=PROTOCOLS)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    parser = argparse.ArgumentParser(prog="moaecr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one model and evaluate it")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", choices=sorted(ablation.GRIDS), default="components")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", parents=[common], help="write pooled features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out-file", dest="out_file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("project", parents=[common], help="2-D PCA of an embedding CSV")
    p.add_argument("embeddings")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", parents=[common], help="run every registered gradient check")
    p.add_argument("--cases", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate-data", parents=[common], help="write the synthetic dataset as CSV")
    p.add_argument("--out-file", dest="out_file")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
