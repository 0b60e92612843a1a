"""Command line: ``subnetens {train,eval,sweep,verify,report}``.

Every failure prints one line ``subnetens: error[<class>]: <message>`` to
stderr and exits with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import data as dt
from . import masks as mk
from .evaluation import EvalReport, evaluate, read_sweep_table, sweep_k, sweep_table
from .nn import init_network
from .trainer import (
    EnsembleTrainingError,
    TrainConfig,
    TrainingDivergedError,
    train_deep_ensemble,
    train_mc_dropout,
    train_orthogonal,
)

EXIT_CODES = {
    "usage": 2,
    "data": 3,
    "checksum": 4,
    "version": 5,
    "truncated": 6,
    "checkpoint": 7,
    "mask": 8,
    "diverged": 9,
    "io": 10,
    "config": 11,
    "audit": 12,
}


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class AuditError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subnetens", description="Orthogonal subnetwork ensembles.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value training config file")
        sp.add_argument("--dataset", help="key = value dataset spec file (default: synthetic blobs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--log", help="append JSON-lines training log here")

    t = sub.add_parser("train")
    t.add_argument("--method", choices=("orthogonal", "mc-dropout", "deep-ensemble"), default="orthogonal")
    t.add_argument("--k", type=_positive_int)
    t.add_argument("--out", required=True)
    common(t)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--mc-passes", type=_positive_int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--bins", type=_positive_int, default=15)
    e.add_argument("--out")

    s = sub.add_parser("sweep")
    s.add_argument("--k-list", type=_k_list, required=True)
    s.add_argument("--out")
    common(s)

    v = sub.add_parser("verify")
    v.add_argument("--checkpoint", required=True)

    r = sub.add_parser("report")
    r.add_argument("paths", nargs="+", help="eval report (key = value) or sweep table (CSV)")
    return p


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        try:
            dt.apply_kv(cfg, dt.parse_kv(Path(args.config).read_text()))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "k", None) is not None:
        cfg.k = args.k
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _load_dataset(path) -> dt.Dataset:
    spec = dt.read_dataset_spec(path) if path else dt.DatasetSpec()
    return dt.load_dataset(spec)


def _attach_log(path):
    if not path:
        return None
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger = logging.getLogger("subnetens.train")
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    return handler


def cmd_train(args, out) -> int:
    cfg = _load_config(args)
    ds = _load_dataset(args.dataset)
    handler = _attach_log(args.log)
    try:
        if args.method == "orthogonal":
            result = train_orthogonal(cfg, ds)
        elif args.method == "mc-dropout":
            result = train_mc_dropout(cfg, ds)
        else:
            result = train_deep_ensemble(cfg, ds)
    finally:
        if handler:
            logging.getLogger("subnetens.train").removeHandler(handler)
            handler.close()
    ckpt.save_checkpoint(result, args.out)
    print(f"wrote {args.out}", file=out)
    return 0


def cmd_eval(args, out) -> int:
    members = ckpt.load_members(args.checkpoint)
    ds = _load_dataset(args.dataset)
    target = members[0] if len(members) == 1 else members
    rep = evaluate(target, ds, mc_passes=args.mc_passes, seed=args.seed, bins=args.bins)
    text = rep.to_text()
    if args.out:
        Path(args.out).write_text(text)
    out.write(text)
    return 0


def cmd_sweep(args, out) -> int:
    cfg = _load_config(args)
    ds = _load_dataset(args.dataset)
    rows = sweep_k(cfg, ds, args.k_list)
    table = sweep_table(rows)
    if args.out:
        Path(args.out).write_text(table)
    out.write(table)
    return 0


def audit_lines(members) -> list[tuple[str, bool]]:
    """(line, passed) pairs for the verify command."""
    lines: list[tuple[str, bool]] = []
    for j, b in enumerate(members):
        prefix = f"member {j} " if len(members) > 1 else ""
        if b.masks is not None:
            report = mk.verify(b.masks)
            for line in report.lines():
                lines.append((prefix + line, True))
            lines.append((prefix + f"constraints: {'pass' if report.ok else 'fail'}", report.ok))
        if b.store.classifier_frozen:
            seed = members[0].config.seed
            ref = init_network(
                b.store.arch, seed, variants=b.store.variants, heads=b.store.heads, frozen_classifier=True
            )
            ok = all(
                ref.params[n].tobytes() == b.store.params[n].tobytes() for n in b.store.classifier_names
            )
            lines.append((prefix + f"frozen_classifier: {'pass' if ok else 'fail'}", ok))
    rt = ckpt.dumps(members)
    again = ckpt.loads(rt)
    ok = ckpt.dumps(again) == rt and all(a.equals(b) for a, b in zip(members, again))
    lines.append((f"round_trip: {'pass' if ok else 'fail'}", ok))
    return lines


def cmd_verify(args, out) -> int:
    members = ckpt.load_members(args.checkpoint)
    raw = Path(args.checkpoint).read_bytes()
    lines = audit_lines(members)
    ok = all(passed for _, passed in lines) and ckpt.dumps(members) == raw
    for line, _ in lines:
        print(line, file=out)
    if not ok:
        raise AuditError("checkpoint failed verification")
    return 0


def _render(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def _fmt(v: str) -> str:
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v


def cmd_report(args, out) -> int:
    reports = []
    for path in args.paths:
        text = Path(path).read_text()
        if text.startswith("k,"):
            table = read_sweep_table(text)
            cols = ["k", "param_count", "accuracy", "mean_member_accuracy", "nll", "ece", "ia", "error"]
            rows = [cols] + [[r["k"], r["param_count"]] + [_fmt(r[c]) for c in cols[2:-1]] + [r["error"]] for r in table]
            out.write(_render(rows))
        else:
            reports.append((path, EvalReport.from_text(text)))
    if reports:
        rows = [["source", "method", "members", "accuracy", "mean_member_acc", "nll", "ece", "ia"]]
        for path, r in reports:
            rows.append(
                [
                    Path(path).name,
                    r.method,
                    str(r.members),
                    f"{r.accuracy:.4f}",
                    f"{r.mean_member_accuracy:.4f}",
                    f"{r.nll:.4f}",
                    f"{r.ece:.4f}",
                    "" if r.ia is None else f"{r.ia:.4f}",
                ]
            )
        out.write(_render(rows))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "verify": cmd_verify, "report": cmd_report}


def _classify(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ckpt.ChecksumError):
        return "checksum"
    if isinstance(exc, ckpt.VersionMismatchError):
        return "version"
    if isinstance(exc, ckpt.TruncatedCheckpointError):
        return "truncated"
    if isinstance(exc, ckpt.CheckpointError):
        return "checkpoint"
    if isinstance(exc, dt.DatasetError):
        return "data"
    if isinstance(exc, mk.MaskError):
        return "mask"
    if isinstance(exc, (TrainingDivergedError, EnsembleTrainingError)):
        return "diverged"
    if isinstance(exc, AuditError):
        return "audit"
    if isinstance(exc, OSError):
        return "io"
    return ""


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        kind = _classify(exc)
        if not kind:
            raise
        msg = " ".join(str(exc).split())
        print(f"subnetens: error[{kind}]: {msg}", file=err)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
