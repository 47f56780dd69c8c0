"""Command-line entry points: render, train, predict, evaluate, synth.

Exit codes: 0 on success, 1 for user/input errors (bad flags, malformed or
missing files, shape mismatches), 2 for internal invariant violations. Error
messages are single lines on standard error.

All CSV outputs use comma separators, ``.`` decimals, LF line endings, UTF-8
and a header row. Floats are written with 17 significant digits so derived
files can be recomputed exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentConfig, BinningScheme, assign_bin, load_manifest, synth_dataset
from .geometry import attach_features, read_features_csv, read_obj
from .model import LossConfig
from .render import camera_rig, render_views, save_mvr, save_view_pngs
from .train import TrainConfig, fit, load_checkpoint_for_predict, predict_ga

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

PREDICTION_COLUMNS = ("subject_id", "space", "ga_pred")


def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _write_csv(path: Path, header, rows) -> Path:
    """Write a CSV with LF endings; fields containing commas get quoted."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def cmd_render(args) -> int:
    """Render one subject's per-vertex features into a ``.mvr`` view stack."""
    mesh = read_obj(args.mesh)
    features = read_features_csv(args.features)
    mesh = attach_features(mesh, features)
    rig = camera_rig(radius_multiplier=args.distance, fov_y_deg=args.fov, resolution=args.resolution)
    stack = render_views(mesh, rig)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_mvr(out, stack)
    if args.png:
        save_view_pngs(stack, args.png, out.stem)
    print(f"wrote {out}: {stack.view_count} views x {stack.channel_count} channels @ {stack.resolution}px")
    return EXIT_OK


def _parse_stages(text: str) -> tuple[int, ...]:
    try:
        stages = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"--stage-channels must be comma-separated integers, got {text!r}") from None
    if not stages:
        raise ValueError("--stage-channels must name at least one stage")
    return stages


def cmd_train(args) -> int:
    """Train from a manifest; all randomness flows from ``--seed``."""
    config = TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        max_epochs=args.max_epochs,
        early_stop_patience=args.patience,
        early_stop_min_delta=args.min_delta,
        seed=args.seed,
        augment=AugmentConfig(input_dropout_p=args.input_dropout, noise_sigma=args.noise_sigma, seed=args.seed),
        loss=LossConfig(ce_lambda=args.ce_lambda),
    )
    result = fit(
        args.manifest,
        args.run_dir,
        config,
        resolution=args.resolution,
        radius_multiplier=args.distance,
        fov_y_deg=args.fov,
        use_cache=not args.no_cache,
        stage_channels=_parse_stages(args.stage_channels),
        internal_dropout_p=args.internal_dropout,
    )
    print(
        f"trained {result.epochs_run} epochs; best epoch {result.best_epoch} "
        f"(val MSE {result.best_val_mse:.6g}); checkpoint {result.best_checkpoint}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    """Eval-mode predictions for one split, written as CSV."""
    params, metadata = load_checkpoint_for_predict(args.checkpoint)
    records = [r for r in load_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise ValueError(f"manifest has no records in split {args.split!r}")
    preds = predict_ga(records, params, metadata)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, PREDICTION_COLUMNS, [(r.subject_id, r.space, _fmt(p)) for r, p in zip(records, preds)])
    print(f"wrote {out}: {len(records)} predictions")
    return EXIT_OK


def read_predictions_csv(path: str | Path):
    """Rows of a predictions CSV as (subject_id, space, ga_pred) tuples."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"predictions file not found: {path}")
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PREDICTION_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(PREDICTION_COLUMNS)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                rows.append((row[0].strip(), row[1].strip(), float(row[2])))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: ga_pred is not a number: {row[2]!r}") from None
    if not rows:
        raise ValueError(f"{path}: no prediction rows")
    return rows


@dataclass(frozen=True)
class EvalRow:
    """One scored subject."""

    subject_id: str
    space: str
    ga_true: float
    ga_pred: float
    abs_error: float
    bin_index: int


@dataclass(frozen=True)
class EvalReport:
    """Per-subject rows plus the aggregates derived from them."""

    rows: tuple[EvalRow, ...]
    scheme: BinningScheme

    @property
    def abs_errors(self) -> np.ndarray:
        return np.array([r.abs_error for r in self.rows])

    @property
    def mae(self) -> float:
        return float(self.abs_errors.mean())

    @property
    def stdev(self) -> float:
        return _stdev(self.abs_errors)

    def space_stats(self) -> dict[str, tuple[int, float, float]]:
        """(count, MAE, STDEV) per space, for the spaces present."""
        stats = {}
        for space in ("native", "template"):
            errors = np.array([r.abs_error for r in self.rows if r.space == space])
            if len(errors):
                stats[space] = (len(errors), float(errors.mean()), _stdev(errors))
        return stats

    def bin_stats(self) -> dict[int, tuple[int, float, float]]:
        """(count, MAE, STDEV) per class bin, for the bins present."""
        stats = {}
        for index in range(self.scheme.class_count):
            errors = np.array([r.abs_error for r in self.rows if r.bin_index == index])
            if len(errors):
                stats[index] = (len(errors), float(errors.mean()), _stdev(errors))
        return stats


def _stdev(values: np.ndarray) -> float:
    """Sample standard deviation (N-1); defined as 0.0 for a single value."""
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def evaluate_predictions(pred_rows, records, scheme: BinningScheme = BinningScheme()) -> EvalReport:
    """Join predictions to manifest records and score them.

    Every prediction row must join to a (subject_id, space) manifest record;
    unjoinable rows are all reported in one error.
    """
    by_key = {(r.subject_id, r.space): r for r in records}
    unjoinable = [f"{sid}/{space}" for sid, space, _ in pred_rows if (sid, space) not in by_key]
    if unjoinable:
        raise ValueError(f"predictions do not join to the manifest: {', '.join(unjoinable)}")
    rows = []
    for sid, space, ga_pred in pred_rows:
        record = by_key[(sid, space)]
        rows.append(
            EvalRow(
                subject_id=sid,
                space=space,
                ga_true=record.ga_weeks,
                ga_pred=ga_pred,
                abs_error=abs(ga_pred - record.ga_weeks),
                bin_index=assign_bin(record.ga_weeks, scheme),
            )
        )
    return EvalReport(rows=tuple(rows), scheme=scheme)


def write_report_files(report: EvalReport, out_dir: str | Path, svg: bool = False) -> list[Path]:
    """Write report.csv, summary.csv, bins.csv, scatter.csv (and SVGs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    written.append(
        _write_csv(
            out_dir / "report.csv",
            ("subject_id", "space", "ga_true", "ga_pred", "abs_error", "bin"),
            [
                (r.subject_id, r.space, _fmt(r.ga_true), _fmt(r.ga_pred), _fmt(r.abs_error), r.bin_index)
                for r in report.rows
            ],
        )
    )

    summary_rows = [("All", len(report.rows), _fmt(report.mae), _fmt(report.stdev))]
    for space, (count, mae, stdev) in report.space_stats().items():
        summary_rows.append((space.capitalize(), count, _fmt(mae), _fmt(stdev)))
    written.append(_write_csv(out_dir / "summary.csv", ("group", "count", "mae", "stdev"), summary_rows))

    stats = report.bin_stats()
    bin_rows = []
    for index in sorted(stats):
        count, mae, _ = stats[index]
        label = report.scheme.label(index)
        bin_rows += [
            (index, label, r.subject_id, r.space, _fmt(r.abs_error), count, _fmt(mae))
            for r in report.rows
            if r.bin_index == index
        ]
    written.append(
        _write_csv(
            out_dir / "bins.csv",
            ("bin_index", "bin_label", "subject_id", "space", "abs_error", "bin_count", "bin_mae"),
            bin_rows,
        )
    )

    written.append(
        _write_csv(
            out_dir / "scatter.csv",
            ("subject_id", "space", "ga_true", "ga_pred"),
            [(r.subject_id, r.space, _fmt(r.ga_true), _fmt(r.ga_pred)) for r in report.rows],
        )
    )

    if svg:
        written.append(_write_scatter_svg(out_dir / "scatter.svg", report))
        written.append(_write_bins_svg(out_dir / "bins.svg", report))
    return written


def _write_scatter_svg(path: Path, report: EvalReport) -> Path:
    """Static true-vs-predicted scatter with the identity diagonal."""
    size, margin = 480, 50
    truths = [r.ga_true for r in report.rows]
    preds = [r.ga_pred for r in report.rows]
    lo = min(truths + preds) - 1.0
    hi = max(truths + preds) + 1.0

    def x(v):
        return margin + (v - lo) / (hi - lo) * (size - 2 * margin)

    def y(v):
        return size - margin - (v - lo) / (hi - lo) * (size - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect x="{margin}" y="{margin}" width="{size - 2 * margin}" height="{size - 2 * margin}" '
        'fill="none" stroke="black"/>',
        f'<line x1="{x(lo):.1f}" y1="{y(lo):.1f}" x2="{x(hi):.1f}" y2="{y(hi):.1f}" '
        'stroke="gray" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2:.0f}" y="{size - 12}" text-anchor="middle" font-size="13">true age (weeks)</text>',
        f'<text x="14" y="{size / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {size / 2:.0f})">predicted age (weeks)</text>',
    ]
    for r in report.rows:
        fill = "steelblue" if r.space == "native" else "darkorange"
        parts.append(f'<circle cx="{x(r.ga_true):.1f}" cy="{y(r.ga_pred):.1f}" r="3.5" fill="{fill}" opacity="0.8"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def _write_bins_svg(path: Path, report: EvalReport) -> Path:
    """Per-bin absolute-error box summaries (min, median, max)."""
    width, height, margin = 520, 360, 50
    stats = report.bin_stats()
    max_err = max((r.abs_error for r in report.rows), default=1.0) or 1.0
    top = max_err * 1.1

    def y(v):
        return height - margin - v / top * (height - 2 * margin)

    slot = (width - 2 * margin) / max(len(stats), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{margin}" y1="{y(0):.1f}" x2="{width - margin}" y2="{y(0):.1f}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" font-size="13">age bin</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height / 2:.0f})">absolute error (weeks)</text>',
    ]
    for pos, index in enumerate(sorted(stats)):
        errors = np.array([r.abs_error for r in report.rows if r.bin_index == index])
        cx = margin + slot * (pos + 0.5)
        lo_e, med, hi_e = float(errors.min()), float(np.median(errors)), float(errors.max())
        parts.append(f'<line x1="{cx:.1f}" y1="{y(lo_e):.1f}" x2="{cx:.1f}" y2="{y(hi_e):.1f}" stroke="black"/>')
        parts.append(
            f'<rect x="{cx - 14:.1f}" y="{min(y(med) - 2, y(hi_e)):.1f}" width="28" height="4" fill="steelblue"/>'
        )
        parts.append(
            f'<text x="{cx:.1f}" y="{height - margin + 18}" text-anchor="middle" font-size="11">'
            f"{report.scheme.label(index)}</text>"
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def cmd_evaluate(args) -> int:
    """Score a predictions CSV against manifest labels and write report files."""
    pred_rows = read_predictions_csv(args.predictions)
    records = load_manifest(args.manifest)
    report = evaluate_predictions(pred_rows, records)
    written = write_report_files(report, args.out_dir, svg=args.svg)
    print(f"evaluated {len(report.rows)} predictions: MAE {report.mae:.4f}, STDEV {report.stdev:.4f}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Generate a synthetic dataset (thin wrapper over data.synth_dataset)."""
    manifest = synth_dataset(args.out_dir, args.subjects, icosphere_level=args.level, seed=args.seed)
    sidecar = Path(args.out_dir) / "synth_config.json"
    sidecar.write_text(
        json.dumps(
            {"subjects": args.subjects, "icosphere_level": args.level, "seed": args.seed},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {manifest} ({args.subjects} subjects, level {args.level})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icoview",
        description="Multi-view rendering of per-vertex sphere features with an "
        "attention-pooled CNN for joint age regression and binned classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render per-vertex features into a .mvr view stack")
    p.add_argument("mesh", help="OBJ mesh path")
    p.add_argument("features", help="per-vertex feature CSV path")
    p.add_argument("out", help="output .mvr path")
    p.add_argument("--resolution", type=int, default=224, help="image size in pixels (default 224)")
    p.add_argument("--fov", type=float, default=60.0, help="vertical field of view in degrees (default 60)")
    p.add_argument("--distance", type=float, default=2.5, help="camera distance in sphere radii (default 2.5)")
    p.add_argument("--png", metavar="DIR", help="also dump per-view grayscale PNGs to DIR")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("manifest", help="dataset manifest CSV")
    p.add_argument("run_dir", help="output directory for logs and checkpoints")
    p.add_argument("--batch-size", type=int, default=18)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-epochs", type=int, default=400)
    p.add_argument("--patience", type=int, default=30, help="early-stop patience in epochs")
    p.add_argument("--min-delta", type=float, default=0.0, help="minimum validation MSE improvement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ce-lambda", type=float, default=1.0, help="cross-entropy term weight")
    p.add_argument("--input-dropout", type=float, default=0.2, help="input dropout probability")
    p.add_argument("--noise-sigma", type=float, default=0.01, help="additive Gaussian noise std dev")
    p.add_argument("--internal-dropout", type=float, default=0.0, help="encoder dropout probability")
    p.add_argument("--stage-channels", default="16,32,64,128", help="encoder stage widths, comma-separated")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--distance", type=float, default=2.5)
    p.add_argument("--no-cache", action="store_true", help="re-render every epoch instead of caching .mvr files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write eval-mode predictions for a split")
    p.add_argument("checkpoint", help="checkpoint file from training")
    p.add_argument("manifest", help="dataset manifest CSV")
    p.add_argument("out", help="output predictions CSV")
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against manifest labels")
    p.add_argument("predictions", help="predictions CSV from the predict command")
    p.add_argument("manifest", help="dataset manifest CSV")
    p.add_argument("out_dir", help="output directory for report files")
    p.add_argument("--svg", action="store_true", help="also write scatter.svg and bins.svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--subjects", type=int, required=True, help="number of subjects (>= 2)")
    p.add_argument("--level", type=int, default=3, help="icosphere subdivision level (default 3)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are user errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_USER_ERROR
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR
    except (RuntimeError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
