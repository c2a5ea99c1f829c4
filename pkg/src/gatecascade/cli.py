"""Command-line pipeline: data -> backbone -> tap features -> gates -> thresholds -> reports.

Every subcommand reads a run config (``--config``), applies flag overrides,
and writes its artifacts into the run's output directory. Failures print a
single ``error: <code>: <message>`` line and exit non-zero.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .backbone import forward_partial, load_backbone, save_backbone, train_backbone
from .calibration import (
    CalibrationSpec,
    calibrate_sequential,
    default_grid,
    report_rows,
    with_sentinel,
)
from .cascade import (
    CascadeModel,
    cascade_evaluate,
    exit_class_stats,
    metrics_header,
    metrics_row,
    score_table,
    stats_rows,
    threshold_sweep,
)
from .data import (
    HierarchyConfig,
    LabeledDataset,
    atomic_write_text,
    generate_hierarchical_blobs,
    load_dataset_csv,
    save_dataset_csv,
    split_dataset,
)
from .dgate import (
    CROSS_ENTROPY,
    HINGE,
    HingeTrainConfig,
    load_gate,
    save_gate,
    train_gate_crossentropy,
    train_gate_hinge,
)
from .errors import DataError, GateCascadeError, UsageError

CONFIG_HEADER = "gatecascade-config v1"
SPLITS = ("train", "val", "test")

DEFAULTS = {
    "run": {"out": "run"},
    "data": {
        "coarse_count": "4",
        "fine_per_coarse": "3",
        "samples_per_class": "100",
        "coarse_separation": "10",
        "fine_separation": "2",
        "noise_sigma": "1",
        "feature_dim": "8",
        "split": "0.6,0.2,0.2",
    },
    "backbone": {
        "layer_dims": "8,32,64,64",
        "epochs": "100",
        "learning_rate": "0.05",
        "batch_size": "32",
    },
    "gates": {
        "loss": HINGE,
        "lam": "1e-4",
        "epochs": "50",
        "learning_rate": "0.01",
        "batch_size": "32",
    },
    "calibration": {"margin": "0.02", "grid_points": "21", "product_cap": "200000"},
    "sweep": {"grid_points": "11"},
}


# --- config ----------------------------------------------------------------------


def _parse_list(text, cast=float, what="list"):
    text = text.strip()
    if not text:
        return []
    try:
        return [cast(tok.strip()) for tok in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None


def parse_thresholds(text: str) -> List[float]:
    """``"1.0,inf,-inf"`` -> floats; ``inf``/``-inf`` are accepted literals."""
    values = _parse_list(text, float, "thresholds")
    if any(math.isnan(v) for v in values):
        raise UsageError("thresholds must not be NaN")
    return values


@dataclass
class RunConfig:
    """Resolved run description: config file sections with flag overrides applied."""

    sections: configparser.ConfigParser
    seed: int
    out: Path

    def get(self, section, key, fallback=None):
        return self.sections.get(section, key, fallback=fallback)

    def getint(self, section, key):
        try:
            return self.sections.getint(section, key)
        except (ValueError, configparser.Error) as exc:
            raise UsageError(f"[{section}] {key}: {exc}") from None

    def getfloat(self, section, key):
        try:
            return self.sections.getfloat(section, key)
        except (ValueError, configparser.Error) as exc:
            raise UsageError(f"[{section}] {key}: {exc}") from None

    def digest(self) -> str:
        """Hash of every setting except the output directory."""
        h = hashlib.sha256()
        h.update(f"seed={self.seed}\n".encode())
        for section in sorted(self.sections.sections()):
            for key, value in sorted(self.sections.items(section)):
                if (section, key) == ("run", "out"):
                    continue
                h.update(f"{section}.{key}={value}\n".encode())
        return h.hexdigest()[:16]

    def comment(self) -> str:
        return f"# gatecascade {__version__} config={self.digest()}"


def load_config(path: Optional[str], overrides: List[str], seed=None, out=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        lines = text.splitlines()
        first = next((ln.strip() for ln in lines if ln.strip()), "")
        if first != CONFIG_HEADER:
            raise UsageError(f"config {path} must start with {CONFIG_HEADER!r}")
        body = "\n".join(lines[[ln.strip() for ln in lines].index(first) + 1:])
        try:
            parser.read_string(body, source=str(path))
        except configparser.Error as exc:
            raise UsageError(f"config {path}: {exc}".replace("\n", " ")) from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())
    if seed is not None:
        parser.set("run", "seed", str(seed))
    if out is not None:
        parser.set("run", "out", str(out))
    if not parser.has_option("run", "seed"):
        raise UsageError("a seed is required ([run] seed or --seed)")
    try:
        seed_value = parser.getint("run", "seed")
    except ValueError:
        raise UsageError("seed must be an integer") from None
    return RunConfig(parser, seed_value, Path(parser.get("run", "out")))


# --- artifacts ----------------------------------------------------------------------


def _path(cfg, name):
    return cfg.out / name


def _require(path: Path, hint: str):
    if not path.exists():
        raise DataError(f"missing {path}; run {hint} first")
    return path


def _load_split(cfg, split) -> LabeledDataset:
    data = load_dataset_csv(_require(_path(cfg, f"{split}.csv"), "gen-data"))
    return data


def _load_splits(cfg):
    splits = [_load_split(cfg, s) for s in SPLITS]
    c = max(d.class_count for d in splits)
    return [
        d if d.class_count == c else LabeledDataset(d.features, d.labels, c, d.coarse_labels, d.coarse_count)
        for d in splits
    ]


def _load_backbone(cfg):
    return load_backbone(_require(_path(cfg, "backbone.txt"), "train-backbone"))


def _gate_taps(cfg, bb) -> List[int]:
    text = cfg.get("gates", "taps")
    taps = list(bb.tap_points) if text is None else _parse_list(text, int, "gate taps")
    for t in taps:
        if t not in bb.tap_points:
            raise UsageError(f"gate tap {t} is not a backbone tap {list(bb.tap_points)}")
    return taps


def _gate_file(loss, k):
    return f"gate_{loss}_{k}.txt"


def _load_model(cfg, loss=None) -> CascadeModel:
    bb = _load_backbone(cfg)
    loss = loss or cfg.get("gates", "loss")
    gates = []
    for k, tap in enumerate(_gate_taps(cfg, bb)):
        gates.append((tap, load_gate(_require(_path(cfg, _gate_file(loss, k)), "train-gates"))))
    return CascadeModel(bb, tuple(gates))


def _write_lines(cfg, name, lines):
    atomic_write_text(_path(cfg, name), "\n".join([cfg.comment(), *lines]) + "\n")


def _hinge_config(cfg) -> HingeTrainConfig:
    return HingeTrainConfig(
        lam=cfg.getfloat("gates", "lam"),
        epochs=cfg.getint("gates", "epochs"),
        learning_rate=cfg.getfloat("gates", "learning_rate"),
        batch_size=cfg.getint("gates", "batch_size"),
        seed=cfg.seed,
    )


def _tap_features(bb, data, tap):
    return np.array([forward_partial(bb, x, tap)[0] for x in data.features])


def _train_gates(cfg, bb, train, loss):
    trainer = {HINGE: train_gate_hinge, CROSS_ENTROPY: train_gate_crossentropy}.get(loss)
    if trainer is None:
        raise UsageError(f"unknown gate loss {loss!r} (use {HINGE} or {CROSS_ENTROPY})")
    hc = _hinge_config(cfg)
    gates = []
    for tap in _gate_taps(cfg, bb):
        feats_path = _path(cfg, f"features_tap{tap}_train.csv")
        if feats_path.exists():
            feats = load_dataset_csv(feats_path, class_count=bb.class_count)
            X, y = feats.features, feats.labels
        else:
            X, y = _tap_features(bb, train, tap), train.labels
        gates.append((tap, trainer(X, y, bb.class_count, hc)))
    return gates


def _grids(cfg, section, model, val):
    explicit = cfg.get(section, "grid")
    if explicit:
        values = with_sentinel(parse_thresholds(explicit))
        return [values] * model.n_gates
    points = cfg.getint(section, "grid_points")
    table = score_table(model, val)
    return [default_grid(table.max_scores[:, k], points) for k in range(model.n_gates)]


# --- subcommands -----------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    csv = cfg.get("data", "csv")
    if csv:
        data = load_dataset_csv(csv)
    else:
        scales = cfg.get("data", "fine_scales")
        hc = HierarchyConfig(
            coarse_count=cfg.getint("data", "coarse_count"),
            fine_per_coarse=cfg.getint("data", "fine_per_coarse"),
            samples_per_class=cfg.getint("data", "samples_per_class"),
            coarse_separation=cfg.getfloat("data", "coarse_separation"),
            fine_separation=cfg.getfloat("data", "fine_separation"),
            noise_sigma=cfg.getfloat("data", "noise_sigma"),
            feature_dim=cfg.getint("data", "feature_dim"),
            seed=cfg.seed,
            fine_scales=tuple(_parse_list(scales, float, "fine_scales")) if scales else None,
        )
        data = generate_hierarchical_blobs(hc)
    fractions = _parse_list(cfg.get("data", "split"), float, "split fractions")
    parts = split_dataset(data, fractions, seed=cfg.seed)
    save_dataset_csv(data, _path(cfg, "data.csv"), cfg.comment()[2:])
    for name, part in zip(SPLITS, parts):
        save_dataset_csv(part, _path(cfg, f"{name}.csv"), cfg.comment()[2:])
    sizes = "/".join(str(p.n_samples) for p in parts)
    return f"gen-data: n={data.n_samples} c={data.class_count} f={data.feature_dim} splits={sizes}"


def cmd_train_backbone(cfg, args):
    train, _, _ = _load_splits(cfg)
    dims = _parse_list(cfg.get("backbone", "layer_dims"), int, "layer_dims")
    taps = cfg.get("backbone", "taps")
    bb = train_backbone(
        train,
        dims,
        epochs=cfg.getint("backbone", "epochs"),
        learning_rate=cfg.getfloat("backbone", "learning_rate"),
        batch_size=cfg.getint("backbone", "batch_size"),
        seed=cfg.seed,
        tap_points=_parse_list(taps, int, "taps") if taps else None,
    )
    save_backbone(bb, _path(cfg, "backbone.txt"))
    acc = cascade_evaluate(CascadeModel(bb), train).accuracy
    return f"train-backbone: blocks={len(bb.blocks)} total_flops={bb.total_flops} train_acc={acc:.4f}"


def cmd_extract_features(cfg, args):
    bb = _load_backbone(cfg)
    splits = _load_splits(cfg)
    for tap in bb.tap_points:
        for name, data in zip(SPLITS, splits):
            feats = LabeledDataset(_tap_features(bb, data, tap), data.labels, data.class_count)
            save_dataset_csv(feats, _path(cfg, f"features_tap{tap}_{name}.csv"), cfg.comment()[2:])
    return f"extract-features: taps={list(bb.tap_points)} splits={len(splits)}"


def cmd_train_gates(cfg, args):
    bb = _load_backbone(cfg)
    train, _, _ = _load_splits(cfg)
    loss = cfg.get("gates", "loss")
    gates = _train_gates(cfg, bb, train, loss)
    for k, (_, gate) in enumerate(gates):
        save_gate(gate, _path(cfg, _gate_file(loss, k)))
    return f"train-gates: loss={loss} gates={len(gates)} taps={[t for t, _ in gates]}"


def _floor(cfg, model, val):
    floor = cfg.get("calibration", "accuracy_floor")
    if floor is not None:
        return float(floor)
    base = cascade_evaluate(model.with_thresholds([math.inf] * model.n_gates), val).accuracy
    return max(0.0, base - cfg.getfloat("calibration", "margin"))


def cmd_calibrate(cfg, args):
    model = _load_model(cfg)
    _, val, _ = _load_splits(cfg)
    spec = CalibrationSpec(
        _floor(cfg, model, val),
        tuple(_grids(cfg, "calibration", model, val)),
        cfg.getint("calibration", "product_cap"),
    )
    result = calibrate_sequential(model, val, spec)
    _write_lines(cfg, "calibration.csv", report_rows(result))
    text = ",".join(repr(t) if math.isfinite(t) else str(t) for t in result.thresholds)
    atomic_write_text(_path(cfg, "thresholds.txt"), text + "\n")
    return (
        f"calibrate: floor={spec.accuracy_floor:.4f} thresholds={text} "
        f"val_acc={result.metrics.accuracy:.4f} avg_flops={result.metrics.avg_flops:.1f}"
    )


def _eval_split(args):
    if args.split not in SPLITS:
        raise UsageError(f"--split must be one of {SPLITS}")
    return SPLITS.index(args.split)


def cmd_evaluate(cfg, args):
    data = _load_splits(cfg)[_eval_split(args)]
    thresholds = args.thresholds
    if thresholds is None and args.calibrated:
        thresholds = _require(_path(cfg, "thresholds.txt"), "calibrate").read_text().strip()
    if thresholds is None:
        model = CascadeModel(_load_backbone(cfg))
    else:
        model = _load_model(cfg)
        values = parse_thresholds(thresholds)
        if len(values) != model.n_gates:
            raise UsageError(f"{model.n_gates} gates but {len(values)} thresholds given")
        model = model.with_thresholds(values)
    m = cascade_evaluate(model, data)
    _write_lines(cfg, "metrics.csv", [metrics_header(model.n_gates), metrics_row(m)])
    return (
        f"evaluate: split={args.split} accuracy={m.accuracy:.4f} avg_flops={m.avg_flops:.1f} "
        f"total_flops={model.backbone.total_flops} flops_reduction={m.flops_reduction:.4f}"
    )


def cmd_sweep(cfg, args):
    model = _load_model(cfg)
    splits = _load_splits(cfg)
    grids = _grids(cfg, "sweep", model, splits[1])
    rows = threshold_sweep(model, splits[_eval_split(args)], grids)
    _write_lines(cfg, "sweep.csv", [metrics_header(model.n_gates)] + [metrics_row(m) for _, m in rows])
    return f"sweep: points={len(rows)} split={args.split}"


def cmd_exit_stats(cfg, args):
    model = _load_model(cfg)
    data = _load_splits(cfg)[_eval_split(args)]
    counts = exit_class_stats(model, data, args.margin)
    _write_lines(cfg, "stats.csv", stats_rows(counts))
    per_gate = ",".join(str(int(c)) for c in counts.sum(axis=1))
    return f"exit-stats: margin={args.margin:g} confident_per_gate={per_gate}"


def accuracy_frontier(points):
    """Upper-left frontier of ``(avg_flops, accuracy)`` pairs, sorted by FLOPs."""
    frontier = []
    best = -1.0
    for flops, acc in sorted(points, key=lambda p: (p[0], -p[1])):
        if acc > best:
            frontier.append((flops, acc))
            best = acc
    return frontier


def matched_comparison(hinge_points, ce_points, tolerance=0.05):
    """Pair each cross-entropy frontier point with the best hinge accuracy in budget.

    The budget for a cross-entropy point with cost F is any hinge point with
    cost at most ``(1 + tolerance) * F``.

    Returns:
        List of ``(ce_flops, ce_accuracy, hinge_accuracy)`` for every budget
        with at least one hinge point, in increasing FLOPs.
    """
    hinge = accuracy_frontier(hinge_points)
    matched = []
    for flops, acc in accuracy_frontier(ce_points):
        within = [a for f, a in hinge if f <= (1.0 + tolerance) * flops]
        if within:
            matched.append((flops, acc, max(within)))
    return matched


def cmd_compare_losses(cfg, args):
    bb = _load_backbone(cfg)
    train, val, test = _load_splits(cfg)
    data = (train, val, test)[_eval_split(args)]
    sweeps = {}
    for loss in (HINGE, CROSS_ENTROPY):
        model = CascadeModel(bb, tuple(_train_gates(cfg, bb, train, loss)))
        grids = _grids(cfg, "sweep", model, val)
        sweeps[loss] = threshold_sweep(model, data, grids)
    n_gates = len(_gate_taps(cfg, bb))
    lines = ["loss," + metrics_header(n_gates)]
    for loss, rows in sweeps.items():
        lines += [f"{loss}," + metrics_row(m) for _, m in rows]
    _write_lines(cfg, "compare_losses.csv", lines)
    matched = matched_comparison(
        [(m.avg_flops, m.accuracy) for _, m in sweeps[HINGE]],
        [(m.avg_flops, m.accuracy) for _, m in sweeps[CROSS_ENTROPY]],
    )
    worst = min((h - c for _, c, h in matched), default=float("nan"))
    return f"compare-losses: points={sum(len(r) for r in sweeps.values())} matched={len(matched)} worst_gap={worst:+.4f}"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "extract-features": cmd_extract_features,
    "train-gates": cmd_train_gates,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "exit-stats": cmd_exit_stats,
    "compare-losses": cmd_compare_losses,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatecascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gatecascade {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value; repeatable")
        if name in ("evaluate", "sweep", "exit-stats", "compare-losses"):
            p.add_argument("--split", default="test", help="dataset split to evaluate on")
        if name == "train-gates":
            p.add_argument("--loss", choices=(HINGE, CROSS_ENTROPY))
        if name == "evaluate":
            p.add_argument("--thresholds", help="comma-separated per-gate thresholds; inf/-inf allowed")
            p.add_argument("--calibrated", action="store_true",
                           help="use thresholds.txt written by calibrate")
        if name == "exit-stats":
            p.add_argument("--margin", type=float, default=1.0)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if getattr(args, "loss", None):
            overrides.append(f"gates.loss={args.loss}")
        cfg = load_config(args.config, overrides, seed=args.seed, out=args.out)
        summary = COMMANDS[args.command](cfg, args)
    except GateCascadeError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.code}: {message}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error: data: {' '.join(str(exc).split())}", file=sys.stderr)
        return DataError.exit_status
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
