"""Command line: ``predalign <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Subcommands
    gen-data    write the four synthetic datasets under ``<out>/data``
    pretrain    train on source scenes, save ``<out>/pretrained.ckpt``
    adapt       adapt a checkpoint with ``--mode``, save ``<out>/<mode>.ckpt``
    eval        score a checkpoint on the target test set (``metrics.csv``)
    experiment  every configured mode times R seeds, ``metrics.csv`` with AVR/STDERR
    plot        precision/recall curve of a checkpoint as CSV and SVG

Exit status is 0 on success, 1 on usage or configuration errors and 2 when
a stage fails at run time.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import config as cfgmod
from . import synthdomains as sd
from . import trainloop as tl
from .evalmetrics import METRIC_NAMES, pool_matches, pr_curve

logger = logging.getLogger("predalign")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CSV_HEADER = ("mode", "stat", *METRIC_NAMES)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config JSON (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides data and training seeds from the config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")

    parser = _Parser(prog="predalign", description="Adversarial prediction alignment for vehicle detection.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate synthetic datasets")
    sub.add_parser("pretrain", parents=[common], help="source-only pretraining")
    p = sub.add_parser("adapt", parents=[common], help="adapt a pretrained checkpoint")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--mode", choices=tl.MODES, help="adaptation mode (default: first configured mode)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the target test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="eval", help="label for the metrics row")
    sub.add_parser("experiment", parents=[common], help="all configured modes over R seeds")
    p = sub.add_parser("plot", parents=[common], help="precision/recall curve of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def metrics_csv_text(results, stats) -> str:
    """Run rows in result order, then an AVR and a STDERR row per mode."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow([r.mode, r.seed, *(_fmt(getattr(r.metrics, m)) for m in METRIC_NAMES)])
    for s in stats:
        w.writerow([s.mode, "AVR", *(_fmt(s.avr[m]) for m in METRIC_NAMES)])
        w.writerow([s.mode, "STDERR", *(_fmt(s.stderr[m]) for m in METRIC_NAMES)])
    return buf.getvalue()


def emit_metrics_csv(results, stats, path) -> Path:
    if not results:
        raise ValueError("no results to write")
    path = Path(path)
    path.write_text(metrics_csv_text(results, stats))
    return path


def _svg(precision, recall, title: str) -> str:
    size, pad = 320, 40
    span = size - 2 * pad
    pts = [(0.0, float(precision[0]))] if len(precision) else []
    pts += [(float(r), float(p)) for p, r in zip(precision, recall)]
    coords = " ".join(f"{pad + r * span:.2f},{pad + (1 - p) * span:.2f}" for r, p in pts)
    ticks = "".join(
        f'<text x="{pad + t * span:.1f}" y="{size - pad + 14}" font-size="10" text-anchor="middle">{t:.1f}</text>'
        f'<text x="{pad - 6}" y="{pad + (1 - t) * span + 3:.1f}" font-size="10" text-anchor="end">{t:.1f}</text>'
        for t in (0.0, 0.5, 1.0))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>'
        f"{ticks}"
        f'<text x="{size / 2}" y="{size - 8}" font-size="11" text-anchor="middle">recall</text>'
        f'<text x="12" y="{size / 2}" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 12 {size / 2})">precision</text>'
        f'<text x="{size / 2}" y="20" font-size="12" text-anchor="middle">{escape(title)}</text>'
        f'<polyline points="{coords}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>'
        "</svg>\n"
    )


def emit_pr_curve(detections_per_image, gts_per_image, path, iou_threshold: float = 0.5,
                  title: str = "precision / recall") -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per distinct score) and ``<path>.svg``."""
    scores, flags, n_gt = pool_matches(detections_per_image, gts_per_image, iou_threshold)
    if len(scores) == 0:
        raise ValueError("PR curve needs at least one detection")
    thresholds, precision, recall = pr_curve(scores, flags, n_gt)
    base = Path(path)
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "precision", "recall"))
        for row in zip(thresholds, precision, recall):
            w.writerow([repr(float(v)) for v in row])
    svg_path.write_text(_svg(precision, recall, title))
    return csv_path, svg_path


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def _out_dir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def generate_datasets(cfg) -> dict[str, list[sd.Scene]]:
    source, target = cfgmod.domain_params(cfg)
    seed, counts = cfg["data"]["seed"], cfg["data"]["counts"]
    out = {}
    for role in sd.ROLES:
        params = source if sd.ROLE_DOMAIN[role] == "source" else target
        n = counts[role]
        out[role] = sd.generate_dataset(sd.DatasetSpec(role, n, seed + sd.ROLE_SEED_OFFSET[role]), params) if n else []
    return out


def load_datasets(cfg) -> tl.Datasets:
    """From ``data.dir`` when it holds saved datasets, otherwise generated in memory."""
    d = cfg["data"]["dir"]
    if d is not None:
        roles = {role: sd.load_dataset(Path(d) / role) for role in sd.ROLES}
    else:
        roles = generate_datasets(cfg)
    if not roles["source_train"] or not roles["target_test"]:
        raise RuntimeError("source_train and target_test must be non-empty")
    return tl.Datasets(roles["source_train"], roles["target_train_unlabeled"], roles["target_test"],
                       roles["target_labels"])


def cmd_gen_data(cfg, args) -> None:
    root = _out_dir(cfg) / "data"
    for role, scenes in generate_datasets(cfg).items():
        sd.save_dataset(scenes, root / role)
        logger.info("wrote %d %s scenes", len(scenes), role)
    print(root)


def cmd_pretrain(cfg, args) -> None:
    data = load_datasets(cfg)
    tc = cfgmod.train_config(cfg)
    model = tl.pretrain_source(tc, data.source_train, tl.new_model(tc))
    path = _out_dir(cfg) / "pretrained.ckpt"
    tl.save_checkpoint(model, path)
    print(path)


def _load_model(cfg, path):
    model = tl.new_model(cfgmod.train_config(cfg))
    try:
        return tl.load_checkpoint(model, path)
    except OSError as exc:
        raise RuntimeError(f"cannot read checkpoint: {exc}") from None


def cmd_adapt(cfg, args) -> None:
    data = load_datasets(cfg)
    tc = cfgmod.train_config(cfg, args.mode)
    model = tl.adapt(_load_model(cfg, args.checkpoint), tc, data)
    path = _out_dir(cfg) / f"{tc.mode}.ckpt"
    tl.save_checkpoint(model, path)
    print(path)


def _evaluate(cfg, model, scenes):
    ev = cfg["eval"]
    return tl.evaluate(model, scenes, ev["conf_threshold"], ev["nms_threshold"], ev["iou_threshold"])


def cmd_eval(cfg, args) -> None:
    data = load_datasets(cfg)
    model = _load_model(cfg, args.checkpoint)
    report, dets = _evaluate(cfg, model, data.target_test)
    run = tl.RunResult(args.mode, cfg["train"]["seed"], report)
    out = _out_dir(cfg)
    emit_metrics_csv([run], tl.summarize([run], [args.mode]), out / "metrics.csv")
    if cfg["eval"]["pr_curves"] and any(dets):
        emit_pr_curve(dets, [sc.boxes for sc in data.target_test], out / "pr_curve", cfg["eval"]["iou_threshold"])
    print(metrics_csv_text([run], []), end="")


def cmd_plot(cfg, args) -> None:
    data = load_datasets(cfg)
    model = _load_model(cfg, args.checkpoint)
    _, dets = _evaluate(cfg, model, data.target_test)
    name = Path(args.checkpoint).stem
    paths = emit_pr_curve(dets, [sc.boxes for sc in data.target_test], _out_dir(cfg) / f"pr_{name}",
                          cfg["eval"]["iou_threshold"], title=f"{name}: precision / recall")
    for p in paths:
        print(p)


def cmd_experiment(cfg, args) -> None:
    data = load_datasets(cfg)
    out = _out_dir(cfg)
    t, ev = cfg["train"], cfg["eval"]
    ckpt_dir = None
    if cfg["output"]["checkpoints"]:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    stats, results = tl.run_experiment(
        cfgmod.train_config(cfg), data, t["repetitions"], cfgmod.mode_overrides(cfg),
        iou_threshold=ev["iou_threshold"], workers=t["workers"], checkpoint_dir=ckpt_dir,
        conf_threshold=ev["conf_threshold"], nms_threshold=ev["nms_threshold"])
    path = emit_metrics_csv(results, stats, out / "metrics.csv")
    for s in stats:
        print(f"{s.mode:>13}  AP {s.avr['AP']:.4f} +- {s.stderr['AP']:.4f}  F1 {s.avr['F1']:.4f}")
    print(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.seed, args.out)
    except cfgmod.ConfigError as exc:
        print(f"predalign: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"predalign: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfgmod.write_resolved(cfg)
        COMMANDS[args.command](cfg, args)
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"predalign: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
