"""Command-line entry point: train-source, run, and report.

Exit codes are a stable contract: 0 success, 1 configuration error, 2 I/O or
missing artifact, 3 malformed data.  All behaviour derives from the config
file plus flags; no environment variables are consulted.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import LabeledDataset, load_idx, split
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .nets import (NetworkSpec, Output, PlainModel, build_params, layer_count,
                   lenet_spec, load_checkpoint, rnn_spec, save_checkpoint,
                   tiny_cnn_spec)
from .train import (TransferTask, compare_methods, format_lr, holdout_select,
                    report_filename, run_methods, write_report_csv,
                    write_summary_csv)
from .unit import read_gate_stats_csv, write_gate_stats_csv


def _load_dataset(cfg: ExperimentConfig, name: str) -> LabeledDataset:
    if not name:
        raise ConfigError("no dataset name configured for this command")
    ref = cfg.ref(name)
    return load_idx(ref.images, ref.labels, name=name, class_count=ref.classes)


def _arch_spec(cfg: ExperimentConfig, ds: LabeledDataset) -> NetworkSpec:
    n, c, h, w = ds.images.shape
    if cfg.arch == "rnn":
        if c != 1:
            raise ConfigError(f"rnn consumes single-channel images, got {c} channels")
        return rnn_spec(h, w, cfg.rnn_hidden, ds.class_count)
    if h != w:
        raise ConfigError(f"cnn presets need square images, got {h}x{w}")
    if cfg.cnn_preset == "lenet":
        return lenet_spec(ds.class_count, input_hw=h, channels=c)
    return tiny_cnn_spec(ds.class_count, input_hw=h, channels=c)


def _with_classes(spec: NetworkSpec, classes: int) -> NetworkSpec:
    return NetworkSpec(spec.input_shape, spec.layers[:-1] + (Output(classes),))


def _print_plan(cfg: ExperimentConfig, command: str, extra: dict) -> None:
    print(f"plan: {command}")
    for key, value in ({"setting": cfg.setting, "arch": cfg.arch,
                        "out": cfg.out_dir} | extra).items():
        print(f"  {key}: {value}")
    print("  (dry run: nothing written)")


def cmd_train_source(cfg: ExperimentConfig, dry_run: bool = False) -> None:
    """Train the source network on its own domain and write the checkpoint."""
    ds = _load_dataset(cfg, cfg.source_dataset)
    spec = _arch_spec(cfg, ds)
    splits = split(ds, cfg.split)
    if dry_run:
        _print_plan(cfg, "train-source", {
            "dataset": f"{cfg.source_dataset} ({len(ds)} samples, {ds.class_count} classes)",
            "lr_candidates": cfg.train.lr_candidates,
            "max_steps": cfg.train.max_steps,
            "checkpoint": cfg.source_checkpoint})
        return
    factory = lambda: PlainModel(spec, build_params(spec, cfg.train.seed))
    rep, model = holdout_select(factory, splits, cfg.train, method="source")
    path = Path(cfg.source_checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, path)
    print(f"checkpoint: {path}")
    print(f"source accuracy: {rep.test_accuracy:.4f} (lr={format_lr(rep.selected_lr)})")


def cmd_run(cfg: ExperimentConfig, dry_run: bool = False) -> None:
    """Run every requested method on the target domain and write the CSVs."""
    tgt = _load_dataset(cfg, cfg.target_dataset)
    tspec = _arch_spec(cfg, tgt)
    splits = split(tgt, cfg.split)
    needs_source = any(m in ("ft", "ptu") for m in cfg.methods)
    if dry_run:
        files = [report_filename(cfg.setting, m) for m in cfg.methods]
        _print_plan(cfg, "run", {
            "dataset": f"{cfg.target_dataset} ({len(tgt)} samples, {tgt.class_count} classes)",
            "methods": ",".join(cfg.methods),
            "source_checkpoint": cfg.source_checkpoint if needs_source else "(not needed)",
            "outputs": ", ".join(files + [f"{cfg.setting}_summary.csv"])})
        return

    source_model = None
    if needs_source:
        ckpt = Path(cfg.source_checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(f"missing source checkpoint {ckpt}; run train-source first")
        params = load_checkpoint(ckpt)
        head = f"layer{layer_count(tspec) - 1}.w"
        if head not in params:
            raise ParseError(f"checkpoint {ckpt} lacks an output layer ({head})")
        source_model = PlainModel(_with_classes(tspec, params[head].shape[1]), params)

    task = TransferTask(source=source_model, target_spec=tspec, splits=splits)
    reports = run_methods(task, cfg.train, cfg.methods, cfg.lr_overrides, cfg.knn_k)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        write_report_csv(rep, out / report_filename(cfg.setting, rep.method))
    write_summary_csv(reports, out / f"{cfg.setting}_summary.csv")
    for rep in reports:
        if rep.method == "ptu" and rep.gate_stats:
            write_gate_stats_csv(rep.gate_stats, out / f"{cfg.setting}_ptu_gates.csv")

    print(f"{'method':<10} {'lr':>8} {'test_acc':>9}")
    for rep in reports:
        print(f"{rep.method:<10} {format_lr(rep.selected_lr):>8} {rep.test_accuracy:>9.4f}")
    try:
        cmp = compare_methods(reports)
        print(f"delta vs best ft ({cmp.best_ft_method}): {cmp.delta_pct:+.2f}%")
    except ContractError:
        pass


# ---------------------------------------------------------------------------
# reporting

_CURVE_HEADER = ["step", "train_loss", "val_acc"]


def _read_curve(path: Path) -> list[tuple[int, float | None, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _CURVE_HEADER:
        raise ParseError(f"{path}:1: expected header {','.join(_CURVE_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            step = int(row[0])
            loss = float(row[1]) if row[1] else None
            acc = float(row[2])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
        out.append((step, loss, acc))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _curves_svg(series: dict[str, list[tuple[int, float]]],
                width: int = 640, height: int = 400) -> str:
    """Validation-accuracy lines, one per method, as a standalone SVG."""
    ml, mr, mt, mb = 55, 15, 15, 35
    pw, ph = width - ml - mr, height - mt - mb
    steps = [s for pts in series.values() for s, _ in pts]
    smin, smax = (min(steps), max(steps)) if steps else (0, 1)
    span = max(smax - smin, 1)

    def sx(s):
        return ml + pw * (s - smin) / span

    def sy(a):
        return mt + ph * (1.0 - a)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        y = sy(frac)
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">{frac:g}</text>')
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
    for s in (smin, smax):
        parts.append(f'<text x="{sx(s):.1f}" y="{mt + ph + 18}" text-anchor="middle">{s}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" '
                 f'text-anchor="middle">training step</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        if pts:
            coords = " ".join(f"{sx(s):.1f},{sy(a):.1f}" for s, a in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"/>')
        parts.append(f'<text x="{ml + pw - 5}" y="{mt + 16 + 16 * i}" text-anchor="end" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_report(run_dir, out_dir=None) -> None:
    """Merge per-method curves and the gate table for every setting in a directory."""
    rd = Path(run_dir)
    if not rd.is_dir():
        raise FileNotFoundError(f"{run_dir} is not a directory")
    summaries = sorted(rd.glob("*_summary.csv"))
    if not summaries:
        raise FileNotFoundError(f"no *_summary.csv files in {run_dir}")
    out = Path(out_dir) if out_dir else rd
    out.mkdir(parents=True, exist_ok=True)

    for sp in summaries:
        setting = sp.name[: -len("_summary.csv")]
        with open(sp, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:1] != ["method"]:
            raise ParseError(f"{sp}:1: expected a summary header starting with 'method'")
        methods = [row[0] for row in rows[1:] if row]

        curves = {}
        for m in methods:
            f = rd / report_filename(setting, m)
            if f.exists():
                curves[m] = _read_curve(f)

        steps = sorted({s for pts in curves.values() for s, _, _ in pts})
        merged_path = out / f"{setting}_curves.csv"
        with open(merged_path, "w", newline="") as fh:
            w = csv.writer(fh)
            names = sorted(curves)
            w.writerow(["step"] + [f"{m}_{col}" for m in names
                                   for col in ("train_loss", "val_acc")])
            by_step = {m: {s: (l, a) for s, l, a in pts} for m, pts in curves.items()}
            for s in steps:
                row = [s]
                for m in names:
                    l, a = by_step[m].get(s, (None, None))
                    row.append("" if l is None else f"{l:.6f}")
                    row.append("" if a is None else f"{a:.6f}")
                w.writerow(row)
        acc_series = {m: [(s, a) for s, _, a in pts] for m, pts in curves.items()}
        (out / f"{setting}_curves.svg").write_text(_curves_svg(acc_series))
        print(f"{setting}: merged {len(curves)} curve files over {len(steps)} checkpoints")

        gates = rd / f"{setting}_ptu_gates.csv"
        if gates.exists():
            try:
                stats = read_gate_stats_csv(gates)
            except (ValueError, IndexError) as e:
                raise ParseError(f"{gates}: {e}") from None
            table = out / f"{setting}_gate_table.csv"
            with open(table, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["layer", "mean_r", "mean_z"])
                for s in stats:
                    w.writerow([s.layer_index, f"{s.mean_r:.4f}", f"{s.mean_z:.4f}"])
            print(f"  gate means per junction -> {table.name}")
            for s in stats:
                print(f"    layer {s.layer_index}: r={s.mean_r:.3f} z={s.mean_z:.3f}")


# ---------------------------------------------------------------------------
# argument wiring

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptu", description="Gated parameter-transfer experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("train-source", "train the source network and save a checkpoint"),
                        ("run", "run transfer methods on the target domain")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="key=value experiment file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved plan and write nothing")

    p = sub.add_parser("report", help="merge curves and gate tables from a run directory")
    p.add_argument("run_dir", help="directory containing run CSVs")
    p.add_argument("--out", default=None, help="write merged outputs here instead")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        if args.command == "report":
            cmd_report(args.run_dir, args.out)
        else:
            cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
            if args.command == "train-source":
                cmd_train_source(cfg, dry_run=args.dry_run)
            else:
                cmd_run(cfg, dry_run=args.dry_run)
        return 0
    except ParseError as e:
        print(f"ptu: malformed data: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, ShapeError) as e:
        print(f"ptu: config error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"ptu: i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
