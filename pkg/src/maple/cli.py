"""``maple`` command line: gen, train, eval, ablate, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .dataio import generate_mixture, load_mixture_spec, save_dataset
from .errors import ConfigError, MapleError

log = logging.getLogger("maple")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def _resolve(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.out:
        overrides.append(f"out_dir = {args.out}")
    return load_config(args.config, overrides)


def _echo(cfg: RunConfig, out: Path, name: str = pipeline.CONFIG_ECHO) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(cfg.to_text())


def cmd_gen(args) -> int:
    if args.benchmark:
        out = Path(args.out or "benchmark")
        cfg_path = pipeline.write_benchmark(out, seed=args.seed or 0)
        print(f"benchmark written; config: {cfg_path}")
        return 0
    if not args.spec or not args.out:
        raise ConfigError("gen needs --spec and --out (or --benchmark)")
    spec = load_mixture_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate_mixture(spec)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} samples (D={ds.dim}, k={ds.k}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    ds, split = pipeline.load_training_data(cfg)
    art = pipeline.train(cfg, ds, split)
    pipeline.save_artifacts(out, art, cfg)
    print(f"trained: K={art.state.K} d'={art.head.dof} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = Path(args.checkpoint or cfg.out_dir)
    out = Path(args.out or ckpt / "eval")
    art = pipeline.load_artifacts(ckpt)
    test = pipeline.test_dataset(cfg)
    report = pipeline.evaluate(cfg, art, test, pipeline.load_ood_sets(cfg, test.dim))
    report.write(out)
    _echo(cfg, out)
    summary = {"accuracy_softmax": report.accuracy_softmax, "accuracy_md": report.accuracy_md,
               "ece": report.ece, "nll": report.nll, "qq_error": report.qq_error,
               "ood": {o.name: {"auroc": o.auroc, "aupr": o.aupr} for o in report.ood}}
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _print_table(rows: list[dict], first: list[str]) -> None:
    cols = first + ["status", "K", "eig", "accuracy_softmax", "accuracy_md", "ece", "auroc", "aupr", "qq_error"]
    print("\t".join(cols))
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        print("\t".join(cells))


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    rows = pipeline.run_ablation(cfg, out)
    _print_table(rows, ["row", "name"])
    return 0 if all(r["status"] == "ok" for r in rows) else 3


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    _echo(cfg, out)
    key = pipeline.SWEEP_PARAMS.get(args.param)
    if key is None:
        raise ConfigError(f"--param must be one of {sorted(pipeline.SWEEP_PARAMS)}")
    cast = float if key == "fnr_threshold" else int
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values list {args.values!r}") from None
    rows = pipeline.run_sweep(cfg, args.param, values, out)
    _print_table(rows, ["param", "value"])
    return 0 if all(r["status"] == "ok" for r in rows) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maple", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset from a mixture spec")
    p.add_argument("--spec", help="JSON mixture spec")
    p.add_argument("--out", help="output dataset path (.bin for binary)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--benchmark", action="store_true",
                   help="write the built-in synthetic benchmark (data + config) into --out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train, fit PCA and the Gaussian head, save checkpoints")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on test and OOD data")
    _common(p)
    p.add_argument("--checkpoint", help="directory with model.ckpt, head.bin, pca.bin (default: out_dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six ablation rows")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep t, p or max_clusters")
    _common(p)
    p.add_argument("--param", required=True, choices=sorted(pipeline.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage problems are exit code 1 here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MapleError as exc:
        print(f"maple: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"maple: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
