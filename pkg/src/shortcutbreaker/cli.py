"""Command-line entry point: ``shortcutbreaker {gen,train,eval,probe,ablate}``.

Exit codes: 0 success, 1 usage, 2 validation or contract failure,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from .bottleneck import check_divisible
from .evaluation import TABLE_COLUMNS, evaluate, per_class_rows
from .exceptions import NumericError, ShortcutBreakerError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, TokenBatch, make_splits, read_dataset, write_dataset
from .training import TrainConfig, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    raw = os.environ.get("SBK_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"SBK_SEED must be an integer, got {raw!r}") from exc


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists() or p.is_dir():
        raise FileNotFoundError(f"no such file: {p}")
    with open(p) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ShortcutBreakerError(f"{p}: expected a JSON object")
    return data


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _data_file(path: str, default_name: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _resolve_train_seed(args) -> int:
    # --seed beats SBK_SEED, which beats the seed in the train config file
    if args.seed is not None or "SBK_SEED" in os.environ:
        return _seed(args)
    return int(_load_json(args.train_config).get("seed", 0))


def _train_config(args, seed: int) -> TrainConfig:
    data = _load_json(args.train_config)
    data["seed"] = seed
    if getattr(args, "steps", None) is not None:
        data["total_steps"] = args.steps
        data.setdefault("warmup_steps", min(TrainConfig.warmup_steps, args.steps))
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    data = _load_json(args.spec)
    data["seed"] = _seed(args)
    spec = SyntheticSpec.from_dict(data)
    depth_i = args.depth_i
    if args.model_config:
        depth_i = ModelConfig.from_dict(_load_json(args.model_config)).lrnb.depth_i
    try:
        check_divisible(spec.n_tokens, depth_i)
    except ShortcutBreakerError:
        print(f"warning: grid {spec.grid[0]}x{spec.grid[1]} ({spec.n_tokens} tokens) is not divisible "
              f"by 2^{depth_i}; an LRNB model with depth_i={depth_i} cannot train on it",
              file=sys.stderr)
    train_set, test_set = make_splits(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset([train_set], out / "train.sbk", spec)
    write_dataset([test_set], out / "test.sbk", spec)
    _dump_json(spec.to_dict(), out / "spec.json")
    print(f"train: {len(train_set)} records (0 anomalous)")
    print(f"test: {len(test_set)} records ({int(test_set.image_label.sum())} anomalous)")
    return EXIT_OK


def cmd_train(args) -> int:
    batches, spec = read_dataset(_data_file(args.data, "train.sbk"))
    tcfg = _train_config(args, _resolve_train_seed(args))
    mdata = _load_json(args.model_config)
    if batches:
        mdata.setdefault("d_model", batches[0].d_model)
    mcfg = ModelConfig.from_dict(mdata)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json({"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                "data": str(args.data), "spec": spec.to_dict() if spec else None},
               out / "resolved_config.json")
    params, records = train(mcfg, batches, tcfg,
                            checkpoint_dir=out if tcfg.checkpoint_interval else None)
    save_checkpoint(out / "model.sbm", params, mcfg, {"train": tcfg.to_dict()})
    write_log(records, out / "train_log.csv")
    if records:
        print(f"final loss {records[-1].loss:.6f} after {records[-1].step} steps")
    print(f"checkpoint: {out / 'model.sbm'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    batches, _ = read_dataset(_data_file(args.data, "test.sbk"))
    test_set = TokenBatch.concatenate(batches)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"no such file: {ckpt}")
    params, mcfg, _ = load_checkpoint(ckpt)
    report, results = evaluate(params, mcfg, test_set, fpr_limit=args.fpr_limit,
                               smooth_sigma=args.smooth_sigma, oracle=args.oracle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "metrics.json", out / "metrics.csv")
    with open(out / "per_class.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", *TABLE_COLUMNS])
        for cid, rep in per_class_rows(results, test_set, args.fpr_limit):
            writer.writerow([cid, *(repr(v) for v in rep.row())] if rep else
                            [cid, *([""] * len(TABLE_COLUMNS))])
    _dump_json({"data": str(args.data), "checkpoint": str(ckpt), "oracle": args.oracle,
                "fpr_limit": args.fpr_limit, "smooth_sigma": args.smooth_sigma,
                "model": mcfg.to_dict()}, out / "resolved_config.json")
    print(",".join(TABLE_COLUMNS))
    print(",".join(f"{v:.4f}" for v in report.row()))
    return EXIT_OK


def cmd_probe_rank(args) -> int:
    from .probes import rank_probe
    rep = rank_probe(args.module, args.n, args.d, args.depth_i, args.inputs, args.draws,
                     k=args.k, seed=_seed(args), out_dir=args.out)
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} module={rep.module} D={rep.dim} bound={rep.bound} max_rank={rep.max_rank} "
          f"sigma_ratio={rep.max_tail_ratio:.3e} fd_reverse_gap={rep.max_fd_reverse_gap:.3e}")
    return EXIT_OK


def cmd_probe_attention(args) -> int:
    from .probes import attention_spread_probe
    rep = attention_spread_probe(tuple(args.grid), args.peak, args.sigma, args.trials,
                                 seed=_seed(args), out_dir=args.out)
    print(f"sigmoid entropy > softmax entropy: {rep.entropy_wins}/{args.trials}")
    print(f"softmax max_row_mass > sigmoid max_row_mass: {rep.mass_wins}/{args.trials}")
    return EXIT_OK


def _seed_list(args) -> list[int]:
    base = _seed(args)
    return list(range(base, base + args.seeds))


def cmd_probe_identity(args) -> int:
    from .probes import identity_probe
    spec = SyntheticSpec.from_dict(_load_json(args.spec))
    tcfg = _train_config(args, 0)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    results = identity_probe(variants, spec, tcfg, _load_json(args.model_config) or None,
                             seeds=_seed_list(args), n_jobs=args.jobs, out_dir=args.out)
    for r in results:
        print(f"{r.variant:14s} seed={r.seed} final_loss={r.final_loss:.5f} "
              f"normal={r.mean_normal_score:.5f} abnormal={r.mean_abnormal_score:.5f} "
              f"gap_ratio={r.gap_ratio:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .probes import ablation_grid
    spec = SyntheticSpec.from_dict(_load_json(args.spec))
    tcfg = _train_config(args, 0)
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    rep = ablation_grid(spec, tcfg, _seed_list(args), _load_json(args.model_config) or None,
                        tables, n_jobs=args.jobs, out_dir=args.out)
    for table in tables:
        print(f"[{table}]")
        print("config," + ",".join(TABLE_COLUMNS))
        for name, mean, std in rep.table(table):
            print(name + "," + ",".join(f"{mean[c]:.4f}±{std[c]:.4f}" for c in TABLE_COLUMNS))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shortcutbreaker", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="SyntheticSpec JSON (defaults if omitted)")
    g.add_argument("--out", required=True, help="output directory for train.sbk/test.sbk")
    g.add_argument("--seed", type=int)
    g.add_argument("--model-config", help="model JSON used for the divisibility check")
    g.add_argument("--depth-i", type=int, default=2)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on normal data")
    t.add_argument("--data", required=True, help="train.sbk or a directory holding it")
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True, help="test.sbk or a directory holding it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score with the true masks (self-test)")
    e.add_argument("--fpr-limit", type=float, default=0.3)
    e.add_argument("--smooth-sigma", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="theory-verification probes")
    psub = pr.add_subparsers(dest="probe", required=True, parser_class=_Parser)

    r = psub.add_parser("rank", help="Jacobian rank of the bottleneck")
    r.add_argument("--module", choices=("lrnb", "identity", "lowrank"), default="lrnb")
    r.add_argument("--n", type=int, default=16, help="tokens")
    r.add_argument("--d", type=int, default=32, help="feature dim")
    r.add_argument("--depth-i", type=int, default=2)
    r.add_argument("--k", type=int, help="rank of the lowrank control")
    r.add_argument("--inputs", type=int, default=5)
    r.add_argument("--draws", type=int, default=3)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_probe_rank)

    a = psub.add_parser("attention", help="softmax vs sigmoid spread")
    a.add_argument("--grid", type=int, nargs=2, default=(16, 16))
    a.add_argument("--peak", type=float, default=5.0)
    a.add_argument("--sigma", type=float, default=2.0)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_probe_attention)

    i = psub.add_parser("identity", help="identity-shortcut probe")
    i.add_argument("--variants", default="none,lrnb")
    _add_grid_args(i)
    i.set_defaults(func=cmd_probe_identity)

    ab = sub.add_parser("ablate", help="component / bottleneck / decoder ablation grid")
    ab.add_argument("--tables", default="components,bottlenecks,decoders")
    _add_grid_args(ab)
    ab.set_defaults(func=cmd_ablate)
    return p


def _add_grid_args(p) -> None:
    p.add_argument("--spec")
    p.add_argument("--model-config", help="base model JSON (decoder flags are overridden)")
    p.add_argument("--train-config")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShortcutBreakerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
