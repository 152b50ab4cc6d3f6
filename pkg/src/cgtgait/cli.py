"""Command-line entry point: ``cgtgait <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import plotting
from .checks import SUITES, run_gradcheck
from .network import ModelConfig, count_complexity, load_checkpoint, save_checkpoint
from .skeleton import EMOTIONS, GeneratorConfig, generate_dataset, load_dataset, save_dataset
from .trainer import ABLATION_AXES, EvalReport, TrainConfig, ablate, evaluate, train

log = logging.getLogger("cgtgait")


# ------------------------------------------------------------------ output helpers

def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Plain aligned table; numbers right-aligned, text left-aligned."""
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    numeric = [all(r[i] is None or isinstance(r[i], (int, float, np.integer, np.floating)) for r in rows)
               for i in range(len(headers))]

    def line(vals):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)).rstrip()

    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.4f}"
    if v is None:
        return "-"
    return str(v)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def write_confusion_csv(path: Path, confusion) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *EMOTIONS])
        for name, row in zip(EMOTIONS, confusion):
            w.writerow([name, *row])
    return path


def eval_table(report: EvalReport) -> str:
    rows = [[EMOTIONS[c], report.per_class_accuracy[c], report.per_class_f1[c], int(sum(report.confusion[c]))]
            for c in range(len(EMOTIONS))]
    text = format_table(["class", "accuracy", "f1", "support"], rows)
    text += f"\noverall accuracy {report.accuracy:.4f}   macro F1 {report.macro_f1:.4f}   n={report.num_samples}\n"
    if report.complexity:
        text += f"parameters {report.complexity['parameters']:,}   FLOPs {report.complexity['flops']:,}\n"
    for w in report.warnings:
        text += f"warning: {w}\n"
    return text


def write_eval_report(report: EvalReport, out_dir: Path, extra: Optional[dict] = None) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["classes"] = list(EMOTIONS)
    if extra:
        payload.update(extra)
    files = [_write_json(out_dir / "report.json", payload)]
    text = eval_table(report)
    (out_dir / "report.txt").write_text(text)
    files.append(out_dir / "report.txt")
    files.append(write_confusion_csv(out_dir / "confusion.csv", report.confusion))
    files.append(plotting.plot_confusion(report.confusion, out_dir / "confusion.png"))
    print(text, end="")
    return files


def _parse_counts(text: str):
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    parts = [int(p) for p in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


# ------------------------------------------------------------------ subcommands

def cmd_generate(args) -> int:
    gen = GeneratorConfig.from_json(args.generator_config) if args.generator_config else GeneratorConfig()
    seqs = generate_dataset(_parse_counts(args.class_counts), seed=args.seed, config=gen)
    save_dataset(seqs, args.out)
    counts = {e: sum(s.label == i for s in seqs) for i, e in enumerate(EMOTIONS)}
    print(format_table(["class", "sequences"], list(counts.items())), end="")
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


def _load_train_config(path: Optional[str]) -> TrainConfig:
    return TrainConfig.from_json(path) if path else TrainConfig()


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    data = load_dataset(args.data) if args.data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, data, progress=True)
    save_checkpoint(out / "checkpoint.npz", res.model,
                    extra={"best_epoch": res.best_epoch, "best_accuracy": res.best_accuracy,
                           "affective_mean": res.affective_mean.tolist(),
                           "affective_std": res.affective_std.tolist(), "train": cfg.to_dict()})
    _write_json(out / "train_log.json", {**res.log_dict(), "config": cfg.to_dict()})
    hist_cols = ["epoch", "lr", "total", "ce", "mse", "fr", "test_accuracy", "seconds"]
    (out / "train_log.txt").write_text(format_table(hist_cols, [[h.get(c) for c in hist_cols] for h in res.history]))
    plotting.plot_training_curves(res.history, out / "training_curves.png")
    write_eval_report(res.final_report, out, {"best_epoch": res.best_epoch})
    print(f"best test accuracy {res.best_accuracy:.4f} at epoch {res.best_epoch}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    seqs = load_dataset(args.data)
    report = evaluate(model, seqs, with_complexity=True)
    write_eval_report(report, Path(args.report), {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    data = load_dataset(args.data) if args.data else None
    out = Path(args.out or f"ablation_{args.axis}")
    report = ablate(cfg, args.axis, data, progress=True)
    _write_json(out / "ablation.json", report)
    cols = ["variant", "accuracy", "macro_f1", "parameters", "flops", "full_scale_flops"]
    text = format_table(cols, [[r[c] for c in cols] for r in report["variants"]])
    (out / "ablation.txt").write_text(text)
    plotting.plot_ablation(report, out / "ablation.png")
    print(text, end="")
    return 0


def cmd_complexity(args) -> int:
    if args.config:
        obj = json.loads(Path(args.config).read_text())
        mcfg = TrainConfig.from_dict(obj).model if "model" in obj else ModelConfig.from_dict(obj)
    else:
        mcfg = ModelConfig()
    rep = count_complexity(mcfg)
    rows = [[r["layer"], r["params"], r["macs"], r["elementwise"], r["flops"]] for r in rep.breakdown]
    rows.append(["total", rep.parameters, rep.macs, rep.elementwise, rep.flops])
    text = format_table(["layer", "params", "macs", "elementwise", "flops"], rows)
    text += f"\nconvention: {rep.convention}\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _write_json(out / "complexity.json", rep.to_dict())
        (out / "complexity.txt").write_text(text)
        plotting.plot_complexity({r["layer"]: r["flops"] for r in rep.breakdown}, out / "complexity.png")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.module, seed=args.seed)
    rows = [[r.module, r.name, f"{r.max_rel_error:.2e}", f"{r.tolerance:.0e}", "ok" if r.passed else "FAIL"]
            for r in results]
    print(format_table(["module", "check", "max_rel_error", "tolerance", "status"], rows), end="")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgtgait", description="Dual-stream skeleton gait emotion recognition.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic gait dataset (JSON lines)")
    g.add_argument("--class-counts", default="120",
                   help="per-class count: N, or four comma-separated counts, or a JSON object")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--generator-config", help="JSON file with generator presets")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write checkpoint, logs and figures")
    t.add_argument("--config", help="JSON training config (defaults apply when omitted)")
    t.add_argument("--data", help="JSON-lines dataset; defaults to the config's synthetic preset")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output directory for report files")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every variant along one ablation axis")
    a.add_argument("--config")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("complexity", help="parameter and FLOP count per layer")
    c.add_argument("--config", help="model or training config JSON; default is the full-size model")
    c.add_argument("--out", help="directory for JSON, text and figure output")
    c.set_defaults(func=cmd_complexity)

    k = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    k.add_argument("--module", choices=sorted(SUITES))
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
