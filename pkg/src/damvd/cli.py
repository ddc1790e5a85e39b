"""Command-line interface: gen-data, train, eval, decode, gate-trace, grad-check.

Settings resolve as command-line flags over a JSON ``--config`` file over
built-in defaults; ``DAM_SEED`` sits just above the defaults for the seed.
Every artifact records the resolved settings and their hash.

Exit codes: 0 success, 1 usage error, 2 IO or parse error, 3 gradient
check above tolerance.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import evaluation as ev
from .data import SCHEMA as DATASET_SCHEMA
from .data import DatasetError, generate_dataset, load_dataset, save_dataset
from .gradcheck import pipeline_check
from .model import UNIT_NAMES, VARIANTS
from .training import CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("damvd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3

LOSS_SCHEMA = "dam-losslog/1"
METRICS_SCHEMA = "dam-metrics/1"
DECODE_SCHEMA = "dam-decode/1"
TRACE_SCHEMA = "dam-gatetrace/1"
GRADCHECK_SCHEMA = "dam-gradcheck/1"

TRACE_COLUMNS = (
    "dialogue", "round", "step", "token", "ratio_rsl", "ratio_wdl", "gate_q_mean", "gate_a_mean", "gate_m_mean",
)


class UsageError(Exception):
    pass


class InputError(Exception):
    """Unreadable or malformed input (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
        return v.lower() in ("true", "1", "yes")
    raise ValueError(f"expected a boolean, got {v!r}")


def _choice(options: Sequence[str]) -> Callable[[Any], str]:
    def parse(v):
        v = str(v).lower()
        if v not in options:
            raise ValueError(f"expected one of {list(options)}, got {v!r}")
        return v

    return parse


def _positive(kind: Callable) -> Callable[[Any], Any]:
    def parse(v):
        if isinstance(v, bool):
            raise ValueError(f"expected a number, got {v!r}")
        x = kind(v)
        if x <= 0:
            raise ValueError(f"must be positive, got {v!r}")
        return x

    return parse


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[Any], Any]
    default: Any
    help: str
    required: bool = False


_TRAIN_DEFAULTS = TrainConfig()

OPTIONS = {
    o.key: o
    for o in (
        Option("seed", int, 1, "random seed"),
        Option("out", str, None, "output path", required=True),
        Option("data", str, None, "dataset file", required=True),
        Option("checkpoint", str, None, "checkpoint file", required=True),
        Option("log", str, None, "loss-log path (default: <out>.losses.json)"),
        Option("images", _positive(int), 64, "number of images (one dialogue each)"),
        Option("rounds", _positive(int), 3, "rounds per dialogue"),
        Option("candidates", _positive(int), 20, "candidate answers per round"),
        Option("encoder", _choice(VARIANTS), _TRAIN_DEFAULTS.variant, "encoder variant"),
        Option("units", _choice(UNIT_NAMES), _TRAIN_DEFAULTS.units, "decoder unit configuration"),
        Option("epochs", _positive(int), _TRAIN_DEFAULTS.epochs, "training epochs"),
        Option("batch_size", _positive(int), _TRAIN_DEFAULTS.batch_size, "examples per batch"),
        Option("lr_init", _positive(float), _TRAIN_DEFAULTS.lr_init, "initial learning rate"),
        Option("lr_final", _positive(float), _TRAIN_DEFAULTS.lr_final, "final learning rate"),
        Option("grad_clip_norm", _positive(float), _TRAIN_DEFAULTS.grad_clip_norm, "global gradient-norm clip"),
        Option("hidden", _positive(int), _TRAIN_DEFAULTS.hidden, "hidden size"),
        Option("embed_dim", _positive(int), _TRAIN_DEFAULTS.embed_dim, "word-embedding size"),
        Option("min_freq", int, _TRAIN_DEFAULTS.min_freq, "keep tokens seen more than this many times"),
        Option("share_embedding", _bool, _TRAIN_DEFAULTS.share_embedding, "share encoder/decoder embeddings"),
        Option("max_len", _positive(int), 20, "greedy decoding length limit"),
        Option("length_normalize", _bool, False, "rank by per-token rather than total log-likelihood"),
        Option("steps", _positive(int), 3, "teacher-forced decode steps in the gradient check"),
        Option("tolerance", _positive(float), 1e-4, "maximum relative gradient error"),
        Option("step", _positive(float), 1e-5, "central-difference step"),
        Option("max_entries", int, 24, "entries sampled per tensor (0 checks every entry)"),
        Option("check_encoder", _choice(("all",) + VARIANTS), "all", "encoder variant to check"),
        Option("check_units", _choice(("all",) + UNIT_NAMES), "all", "unit configuration to check"),
    )
}

_TRAIN_KEYS = (
    "data", "out", "log", "encoder", "units", "seed", "epochs", "batch_size", "lr_init", "lr_final",
    "grad_clip_norm", "hidden", "embed_dim", "min_freq", "share_embedding",
)
COMMANDS: dict[str, tuple[str, tuple[str, ...]]] = {
    "gen-data": ("generate a synthetic dialogue dataset", ("out", "seed", "images", "rounds", "candidates")),
    "train": ("train a model on a dataset", _TRAIN_KEYS),
    "eval": ("rank candidates and write a metrics report", ("data", "checkpoint", "out", "max_len", "length_normalize")),
    "decode": ("greedy-decode every round", ("data", "checkpoint", "out", "max_len")),
    "gate-trace": ("write per-step Memory Unit gate statistics as CSV", ("data", "checkpoint", "out", "max_len")),
    "grad-check": (
        "finite-difference check of every parameter tensor",
        ("seed", "hidden", "steps", "tolerance", "step", "max_entries", "check_encoder", "check_units", "out"),
    ),
}
_OPTIONAL_OUT = ("grad-check",)

# flag spellings that differ from the option key
_FLAG_NAMES = {"check_encoder": "--encoder", "check_units": "--units"}


def _flag(key: str) -> str:
    return _FLAG_NAMES.get(key, "--" + key.replace("_", "-"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dam-vd", description="DAM visual-dialogue decoder on synthetic grid-world dialogues.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of settings (flags take precedence)")
        for key in keys:
            opt = OPTIONS[key]
            default = "" if opt.default is None else f" (default: {opt.default})"
            if opt.parse is _bool:
                p.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, default=None,
                               help=opt.help + default)
            else:
                p.add_argument(_flag(key), dest=key, default=None, help=opt.help + default)
    return parser


def _read_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"config {path}: {e.strerror or e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"config {path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(obj, dict):
        raise InputError(f"config {path}: top level must be an object")
    return obj


def resolve_config(command: str, flags: dict[str, Any], env: dict[str, str] | None = None) -> dict[str, Any]:
    """Merge flags over the config file over DAM_SEED over defaults for ``command``."""
    env = os.environ if env is None else env
    keys = COMMANDS[command][1]
    file_cfg = _read_config(flags["config"]) if flags.get("config") else {}
    file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    unknown = sorted(k for k in file_cfg if k not in OPTIONS and k not in ("schema", "command"))
    if unknown:
        raise InputError(f"config {flags['config']}: unknown setting(s) {unknown}")
    resolved: dict[str, Any] = {}
    for key in keys:
        opt = OPTIONS[key]
        value, source = opt.default, "default"
        if key == "seed" and env.get("DAM_SEED", "") != "":
            value, source = env["DAM_SEED"], "DAM_SEED"
        if key in file_cfg:
            value, source = file_cfg[key], "config"
        if flags.get(key) is not None:
            value, source = flags[key], "flag"
        if value is None:
            if opt.required and not (key == "out" and command in _OPTIONAL_OUT):
                raise UsageError(f"dam-vd {command}: {_flag(key)} is required")
            resolved[key] = None
            continue
        try:
            resolved[key] = opt.parse(value)
        except (TypeError, ValueError) as e:
            err = InputError if source in ("config", "DAM_SEED") else UsageError
            raise err(f"{source} setting {key!r}: {e}") from None
    resolved["command"] = command
    return resolved


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _stamp(schema: str, cfg: dict, **body) -> dict:
    return {"schema": schema, "config": cfg, "config_hash": config_hash(cfg), **body}


def _load_model(cfg: dict):
    dataset = load_dataset(cfg["data"])
    model, vocab, stored = load_checkpoint(cfg["checkpoint"])
    return dataset, model, vocab, stored


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    try:
        ds = generate_dataset(cfg["seed"], cfg["images"], cfg["rounds"], cfg["candidates"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_dataset(ds, cfg["out"], config={**cfg, "config_hash": config_hash(cfg)})
    print(f"wrote {len(ds.dialogues)} dialogues ({DATASET_SCHEMA}) to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    dataset = load_dataset(cfg["data"])
    try:
        tcfg = TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_init=cfg["lr_init"], lr_final=cfg["lr_final"],
            grad_clip_norm=cfg["grad_clip_norm"], seed=cfg["seed"], hidden=cfg["hidden"],
            embed_dim=cfg["embed_dim"], variant=cfg["encoder"], units=cfg["units"], min_freq=cfg["min_freq"],
            share_embedding=cfg["share_embedding"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    start = time.perf_counter()

    def progress(epoch, loss):
        if epoch % 25 == 0 or epoch == tcfg.epochs - 1:
            log.info("epoch %d/%d loss %.5f (%.1fs)", epoch + 1, tcfg.epochs, loss, time.perf_counter() - start)

    model, losses, vocab = train(dataset, tcfg, on_epoch=progress)
    save_checkpoint(cfg["out"], model, vocab, tcfg, extra={"run": cfg, "run_hash": config_hash(cfg)})
    log_path = cfg["log"] or cfg["out"] + ".losses.json"
    _write_json(log_path, _stamp(LOSS_SCHEMA, cfg, seed=cfg["seed"], losses=losses))
    print(f"final loss {losses[-1]:.6f}; checkpoint {cfg['out']}; loss log {log_path}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    dataset, model, vocab, stored = _load_model(cfg)
    examples = dataset.examples()
    rankings = ev.rank_examples(model, examples, vocab, cfg["length_normalize"])
    responses, _ = ev.decode_examples(model, examples, vocab, cfg["max_len"])
    report = ev.build_report(rankings, responses)
    seed = (stored.get("train") or {}).get("seed")
    _write_json(
        cfg["out"],
        _stamp(
            METRICS_SCHEMA, cfg, seed=seed, model_config=stored.get("model"),
            metrics=report.to_json(),
            token_accuracy=ev.token_accuracy(model, examples, vocab),
            exact_match=ev.exact_match(responses, examples, vocab),
        ),
    )
    print(" ".join(f"{k}={v:.4f}" for k, v in report.to_json().items()))
    return EXIT_OK


def cmd_decode(cfg: dict) -> int:
    dataset, model, vocab, _ = _load_model(cfg)
    examples = dataset.examples()
    responses, _ = ev.decode_examples(model, examples, vocab, cfg["max_len"])
    rows = [
        {
            "dialogue": ex.dialogue,
            "round": ex.round,
            "question": " ".join(ex.question),
            "response": " ".join(vocab.decode(r)),
            "answer": " ".join(ex.answer),
        }
        for ex, r in zip(examples, responses)
    ]
    _write_json(cfg["out"], _stamp(DECODE_SCHEMA, cfg, responses=rows))
    print(f"decoded {len(rows)} rounds to {cfg['out']}")
    return EXIT_OK


def _mean(a) -> str | float:
    return "" if a is None else float(np.mean(a))


def gate_trace_rows(model, dataset, vocab, max_len: int = 20) -> list[tuple]:
    """One row per greedy decode step (end step included), columns as ``TRACE_COLUMNS``."""
    if not model.units.enable_memory:
        raise UsageError(
            f"gate-trace: the checkpoint uses units={model.units.name}, which has no Memory Unit gate to trace"
        )
    examples = dataset.examples()
    _, traces = ev.decode_examples(model, examples, vocab, max_len)
    rows = []
    for ex, steps in zip(examples, traces):
        for t, tr in enumerate(steps):
            rows.append((
                ex.dialogue, ex.round, t, vocab.itos[int(tr.token)],
                float(tr.ratio_rsl), float(tr.ratio_wdl), _mean(tr.gate_q), _mean(tr.gate_a), _mean(tr.gate_m),
            ))
    return rows


def cmd_gate_trace(cfg: dict) -> int:
    dataset, model, vocab, _ = _load_model(cfg)
    rows = gate_trace_rows(model, dataset, vocab, cfg["max_len"])
    with open(cfg["out"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(rows)
    # the CSV keeps its fixed columns; the resolved settings go in a sidecar
    _write_json(cfg["out"] + ".meta.json", _stamp(TRACE_SCHEMA, cfg, columns=list(TRACE_COLUMNS), rows=len(rows)))
    print(f"wrote {len(rows)} steps to {cfg['out']}")
    return EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    variants = VARIANTS if cfg["check_encoder"] == "all" else (cfg["check_encoder"],)
    units = UNIT_NAMES if cfg["check_units"] == "all" else (cfg["check_units"],)
    max_entries = cfg["max_entries"] if cfg["max_entries"] > 0 else None
    failed = False
    results = {}
    for v in variants:
        for u in units:
            report = pipeline_check(
                v, u, hidden=cfg["hidden"], steps=cfg["steps"], seed=cfg["seed"], max_entries=max_entries,
                step=cfg["step"], tolerance=cfg["tolerance"],
            )
            status = "ok" if report.passed else "FAIL"
            print(f"[{status}] encoder={v} units={u} max relative error {report.max_error:.3e}")
            for line in report.lines():
                print("    " + line)
            failed |= not report.passed
            results[f"{v}/{u}"] = {"passed": report.passed, "errors": report.errors}
    if cfg.get("out"):
        _write_json(cfg["out"], _stamp(GRADCHECK_SCHEMA, cfg, passed=not failed, results=results))
    if failed:
        print(f"gradient check failed: tolerance {cfg['tolerance']:g} exceeded", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "gate-trace": cmd_gate_trace,
    "grad-check": cmd_grad_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args.command, vars(args))
        return HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        name = f" {e.filename}" if e.filename else ""
        print(f"error:{name}: {e.strerror or e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
