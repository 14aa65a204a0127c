"""Command-line entry point: ``sparsemax-sae <command> ...``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .activations import sparsemax
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import (
    ArraySource,
    DataExhausted,
    FormatError,
    gen_superposition,
    load_activations,
    read_activations,
    write_activations,
)
from .metrics import MetricsReport, estimate_k_star, evaluate, parse_report
from .models import OvercompletenessWarning, build_model
from .numeric import NumericError
from .training import read_history, train, write_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
OUTPUT_ROOT_ENV = "SAE_OUTPUT_ROOT"
EVAL_BATCH = 1024

log = logging.getLogger("sparsemax_sae")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def output_dir(cfg: dict | None, command: str, override: str | None = None) -> Path:
    chosen = override or (cfg or {}).get("output_dir")
    if chosen:
        path = Path(chosen)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _batches(x: np.ndarray, size: int = EVAL_BATCH):
    for i in range(0, x.shape[0], size):
        yield x[i:i + size]


def _check_report(report: MetricsReport) -> None:
    for key, value in report.items():
        if value in ("nan", "inf", "-inf"):
            raise NumericError(f"report value {key} is {value}")


def _write_report(out: Path, report: MetricsReport) -> None:
    (out / "report.txt").write_text(report.to_text())
    (out / "histogram.tsv").write_text(report.histogram.tsv())


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("data.source: gen-data needs a synthetic source")
    out = output_dir(cfg, "gen-data", args.out)
    spec = cfgmod.superposition_spec(cfg)
    train_stream = gen_superposition(spec, stream=0)
    eval_stream = gen_superposition(spec, stream=1)
    write_activations(out / "activations.bin", train_stream.next_batch(cfg["data"]["n_samples"]))
    write_activations(out / "eval.bin", eval_stream.next_batch(cfg["data"]["eval_samples"]))
    # one row per ground-truth direction
    write_activations(out / "ground_truth.bin", train_stream.ground_truth.T)
    (out / "config.used").write_text(cfgmod.dumps(cfg))
    print(f"wrote {out / 'activations.bin'}, {out / 'eval.bin'}, {out / 'ground_truth.bin'}")
    return EXIT_OK


def _model_from_config(cfg: dict):
    m = cfg["model"]
    return build_model(
        m["architecture"], m["d"], m["M"], m["activation"],
        k=m["k"], bandwidth=float(m["bandwidth"]), output_gain=m["output_gain"],
        qk_init_scale=float(m["qk_init_scale"]), seed=cfg["seed"],
    )


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    try:
        model = _model_from_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    tc = cfgmod.train_config(cfg)
    out = output_dir(cfg, "train", args.out)
    data = cfg["data"]

    truth = None
    if data["source"] == "synthetic":
        spec = cfgmod.superposition_spec(cfg)
        source = gen_superposition(spec, stream=0)
        eval_x = gen_superposition(spec, stream=1).next_batch(data["eval_samples"])
        truth = source.ground_truth
    else:
        train_x = load_activations(_require_file(data["path"]))
        if train_x.shape[1] != model.d:
            raise ConfigError(f"model.d: {model.d} does not match data dimension {train_x.shape[1]}")
        source = ArraySource(train_x)
        if data["eval_path"]:
            eval_x = load_activations(_require_file(data["eval_path"]))
        else:
            eval_x = train_x[: data["eval_samples"]]
        if data["truth_path"]:
            truth = load_activations(_require_file(data["truth_path"])).T

    (out / "config.used").write_text(cfgmod.dumps(cfg))
    result = train(model, source, tc)
    write_history(out / "history.tsv", result.history)
    save_checkpoint(out / "checkpoint.bin", model)
    # score the stored (float32) weights so that `eval` on the checkpoint reproduces the report
    report = evaluate(load_checkpoint(out / "checkpoint.bin"), _batches(eval_x), truth)
    _check_report(report)
    _write_report(out, report)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"step {last.step} loss {last.loss:.6g} mean_L0 {last.mean_l0:.4g} dead {last.dead_count}")
    print(f"nmse {report.nmse:.6g} mean_l0 {report.mean_l0:.4g} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(_require_file(args.checkpoint))
    x = load_activations(_require_file(args.data))
    truth = load_activations(_require_file(args.truth)).T if args.truth else None
    report = evaluate(model, _batches(x), truth)
    _check_report(report)
    out = output_dir(None, "eval", args.out)
    _write_report(out, report)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _read_vector(args) -> np.ndarray:
    text = Path(args.input).read_text() if args.input else sys.stdin.read()
    try:
        z = np.array([float(tok) for tok in text.replace(",", " ").split()], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"could not parse input vector: {exc}") from None
    if z.size == 0:
        raise ConfigError("input vector is empty")
    return z


def cmd_project(args) -> int:
    z = _read_vector(args)
    code = sparsemax(z)
    print(" ".join(_fmt(v) for v in code.values))
    print(f"tau {_fmt(code.threshold)}")
    print(f"k {code.support_size}")
    print("support " + " ".join(str(i) for i in code.support))
    return EXIT_OK


def cmd_suggest_k(args) -> int:
    model = load_checkpoint(_require_file(args.checkpoint))
    info = read_activations(_require_file(args.data))
    ks = estimate_k_star(model.forward(x).codes for x in info.batches(EVAL_BATCH))
    text = (
        f"format=suggest_k_v1\n"
        f"source_architecture={model.arch}\n"
        f"source_activation={model.activation}\n"
        f"n_samples={info.count}\n"
        f"k_star_mean={ks.mean:.9g}\n"
        f"k_star={ks.rounded}\n"
    )
    out = output_dir(None, "suggest-k", args.out)
    (out / "suggest_k.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    out = output_dir(None, "report", args.out)
    curves = ["run\tstep\tloss\tmean_L0\tdead_count"]
    hists = ["run\tl0_lo\tl0_hi\tcount"]
    metric_rows = []
    keys: list[str] = []
    for run in args.run:
        run_dir = Path(run)
        name = run_dir.name
        hist_path = run_dir / "history.tsv"
        if hist_path.is_file():
            for row in read_history(hist_path):
                curves.append(f"{name}\t{row.step}\t{row.loss:.9g}\t{row.mean_l0:.6g}\t{row.dead_count}")
        report_path = _require_file(run_dir / "report.txt")
        values, rows = parse_report(report_path.read_text())
        for lo, hi, count in rows:
            hists.append(f"{name}\t{lo}\t{hi}\t{count}")
        for key in values:
            if key not in keys:
                keys.append(key)
        metric_rows.append((name, values))
    metrics = ["run\t" + "\t".join(keys)]
    for name, values in metric_rows:
        metrics.append(name + "\t" + "\t".join(values.get(k, "") for k in keys))
    (out / "loss_curves.tsv").write_text("\n".join(curves) + "\n")
    (out / "histograms.tsv").write_text("\n".join(hists) + "\n")
    (out / "metrics.tsv").write_text("\n".join(metrics) + "\n")
    print(f"wrote loss_curves.tsv, histograms.tsv, metrics.tsv to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsemax-sae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.batch_size=8")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("gen-data", help="write synthetic activations and ground truth")
    with_config(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an SAE and write checkpoint, history and report")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an activation file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="ground-truth directions (SAEACT1, one row per direction)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="sparsemax of a vector read from a file or stdin")
    p.add_argument("input", nargs="?", help="file with whitespace-separated numbers (default: stdin)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("suggest-k", help="recommend K for TopK SAEs from a checkpoint's mean support size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_suggest_k)

    p = sub.add_parser("report", help="merge run directories into plot-ready tables")
    p.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("ignore", OvercompletenessWarning)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DataExhausted) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
