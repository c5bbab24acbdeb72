"""Command-line entry point: ``csagn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from . import corpus, gradcheck, synthetic
from .graph import build_graph, dump_graph
from .harness import TrainConfig, TrainingDiverged, run_ablation, score, train
from .model import CSAGN, SWITCHES, Switches
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration

_CONFIG_KEYS = {f.name: f for f in fields(TrainConfig)}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse_weights(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError(f"loss weights need three comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _coerce(key: str, value: str):
    default = _CONFIG_KEYS[key].default
    if key == "loss_weights":
        return _parse_weights(value)
    if key == "window":
        return None if value.lower() in ("none", "all") else int(value)
    if isinstance(default, bool):
        if value.lower() not in _BOOL:
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return _BOOL[value.lower()]
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def read_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


_FLAG_KEYS = ("seed", "epochs", "batch_size", "lr", "window", "d_graph", "loss_weights")


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    values = read_config(args.config) if args.config else {}
    for key in _FLAG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# output helpers


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


def _splits(data: corpus.Corpus, seed: int):
    tr, dev, te = corpus.split(data.instances, seed=seed)
    if not tr:
        raise corpus.CorpusError("training split is empty; the corpus has too few dialogues")
    return tr, dev, te


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args) -> int:
    _require(args, "data")
    data = corpus.load_corpus(args.data)
    _emit(args, _dumps(corpus.stats(data.instances).to_dict()))
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data")
    config = resolve_config(args)
    data = corpus.load_corpus(args.data)
    if args.dev:
        tr, dev = data.instances, corpus.load_corpus(args.dev).instances
    else:
        tr, dev, _ = _splits(data, config.seed)
    lines: list[str] = []
    result = train(tr, config, data.roles, dev_set=dev or None, on_epoch=lambda e: lines.append(json.dumps(e)))
    if args.checkpoint:
        result.model.save(args.checkpoint, {"train_config": config.to_dict(), "best_epoch": result.best_epoch})
    _emit(args, "".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "data", "checkpoint")
    model = CSAGN.load(args.checkpoint)
    data = corpus.load_corpus(args.data)
    switches = Switches.only(args.switch)
    preds = model.predict(data.instances, switches)
    metrics = score(data.instances, preds)
    if args.predictions:
        with Path(args.predictions).open("w", encoding="utf-8") as fh:
            for (conv, frame), spans in zip(data.instances, preds):
                fh.write(json.dumps(corpus.instance_to_record(conv, frame, spans), ensure_ascii=False) + "\n")
    _emit(args, _dumps(metrics.to_dict()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require(args, "data", "switch")
    if args.switch not in SWITCHES:
        raise UsageError(f"ablate: unknown switch {args.switch!r}; choose from {', '.join(SWITCHES)}")
    config = resolve_config(args)
    data = corpus.load_corpus(args.data)
    tr, dev, te = _splits(data, config.seed)
    table = run_ablation(tr, te or dev or tr, config, args.switch, data.roles, dev_set=dev or None)
    _emit(args, _dumps({name: m.to_dict() for name, m in table.items()}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = args.seed or 0
    report: dict = {"ops": {}, "pipeline": {}, "tol": args.tol}
    passed = True
    for name in gradcheck.OP_CASES:
        worst = 0.0
        for s in range(seed, seed + args.seeds):
            r = gradcheck.check_op(name, s, args.tol)
            worst = max(worst, r["worst"])
            passed &= r["passed"]
        report["ops"][name] = worst
    worst = 0.0
    for s in range(seed, seed + args.seeds):
        r = gradcheck.check_pipeline(s, args.tol)
        worst = max(worst, r["worst"])
        passed &= r["passed"]
    report["pipeline"]["max_rel_error"] = worst
    report["passed"] = bool(passed)
    _emit(args, _dumps(report))
    return EXIT_OK if passed else EXIT_DATA


def cmd_dump_graph(args) -> int:
    _require(args, "data")
    data = corpus.load_corpus(args.data)
    if not 0 <= args.index < len(data):
        raise corpus.CorpusError(f"--index {args.index} outside [0, {len(data)})")
    conv, frame = data[args.index]
    if args.checkpoint:
        model = CSAGN.load(args.checkpoint)
        switches = Switches.only(args.switch)
        feats = model.features(conv, frame, switches)
        graph = feats.graph
        out = model.forward(model.batch([feats]), switches)
        alpha = None if out.alpha is None else out.alpha.data.reshape(len(conv), len(conv))
    else:
        window = 4 if args.window is None else args.window
        graph, alpha = build_graph(conv, frame.predicate_utt, window), None
    _emit(args, _dumps({"id": conv.id, **dump_graph(graph, alpha)}))
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    data = synthetic.generate(args.num_dialogs, seed=args.seed or 0, max_utts=args.max_utts)
    if args.out:
        corpus.write_corpus(args.out, data)
    else:
        sys.stdout.write(json.dumps({"roles": list(data.roles)}) + "\n")
        for conv, frame in data:
            sys.stdout.write(json.dumps(corpus.instance_to_record(conv, frame)) + "\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "dump-graph": cmd_dump_graph,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data", help="JSON-lines corpus")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--checkpoint", help="model checkpoint to write (train) or read")
    common.add_argument("--switch", help=f"ablation switch: {', '.join(SWITCHES)}")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--window", type=int)
    common.add_argument("--d-graph", type=int)
    common.add_argument("--loss-weights", type=_parse_weights, metavar="A,B,C")

    parser = _Parser(prog="csagn", description="Conversational SRL with a speaker-aware utterance graph.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a model").add_argument("--dev", help="dev corpus")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--predictions", help="write predicted arguments as JSON lines")
    sub.add_parser("stats", parents=[common], help="corpus statistics")
    sub.add_parser("ablate", parents=[common], help="full model vs one ablation switch")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("dump-graph", parents=[common], help="utterance graph of one instance as JSON")
    p.add_argument("--index", type=int, default=0)
    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic corpus")
    p.add_argument("--num-dialogs", type=int, default=50)
    p.add_argument("--max-utts", type=int, default=6)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (corpus.CorpusError, ShapeError, TrainingDiverged, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
