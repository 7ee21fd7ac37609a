"""Batch command-line front end.

Artifact layout under the output directory::

    phantom/            generated phantoms (images/, truth/, manifest.csv)
    images/despeckled/  SRAD output + manifest.csv
    images/augmented/   sources and variants + manifest.csv
    images/<mode>/      contrast-enhanced rasters that lines were tracked on
    lines/<mode>/       line CSV and binary PGM per element + manifest.csv
    features/           features_<mode>.csv
    models/             <model>_<mode>_k<K>_s<seed>.model
    reports/            cells_/aggregate_<model>_<mode>_k<K>_s<seed>.csv, summary_s<seed>.csv
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import augment as augment_mod
from .evaluation import (AGGREGATE_HEADER, ArtifactError, ExperimentData, ProtocolConfig, format_table, make_splits,
                         plot_accuracy, read_aggregate_csv, run_cell, run_experiment,
                         write_aggregate_csv, write_cell_csv)
from .features import compute_features, read_feature_csv, write_feature_csv
from .imaging import ParameterError, SradParams, prewitt_gradient
from .io import DataError, read_image, write_image
from .line import TrackParams, line_to_binary, read_path_csv, write_path_csv
from .manifest import Element, read_manifest, write_manifest
from .nn.model import MODEL_KINDS, save_model
from .nn.train import TrainConfig, TrainingError
from .phantom import generate_dataset
from .pipeline import IMAGE_MODES, PipelineConfig, despeckle, extract, image_channels, mode_image

log = logging.getLogger("glisson")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# configuration -----------------------------------------------------------

def _block(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"config block {name!r}: unknown keys {sorted(unknown)}")
    return cls(**values)


class RunConfig:
    """Validated run configuration: a JSON document with command-line overrides.

    Recognised top-level keys: ``out``, ``seed``, ``mode``, ``srad``,
    ``track``, ``pipeline``, ``augment``, ``train``, ``protocol`` and
    ``model``.
    """

    def __init__(self, doc: dict | None = None):
        doc = dict(doc or {})
        allowed = {"out", "seed", "mode", "srad", "track", "pipeline", "augment", "train",
                   "protocol", "model"}
        unknown = set(doc) - allowed
        if unknown:
            raise ParameterError(f"unknown config keys {sorted(unknown)}")
        self.out = Path(doc.get("out", "out"))
        self.seed = int(doc.get("seed", 0))
        if not 0 <= self.seed < 2 ** 64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.mode = doc.get("mode", "roi")
        if self.mode not in IMAGE_MODES:
            raise ParameterError(f"mode must be one of {IMAGE_MODES}, got {self.mode!r}")
        srad = _block(SradParams, doc.get("srad", {}), "srad")
        track = _block(TrackParams, doc.get("track", {}), "track")
        pipe = dict(doc.get("pipeline", {}))
        if "roi_band" in pipe:
            pipe["roi_band"] = tuple(pipe["roi_band"])
        self.pipeline = _block(PipelineConfig, {**pipe, "srad": srad, "track": track}, "pipeline")
        aug = dict(doc.get("augment", {}))
        unknown = set(aug) - {"variants_per_image"}
        if unknown:
            raise ParameterError(f"config block 'augment': unknown keys {sorted(unknown)}")
        self.variants = int(aug.get("variants_per_image", 3))
        if self.variants < 0:
            raise ParameterError("variants_per_image must be non-negative")
        train = _block(TrainConfig, {**doc.get("train", {})}, "train")
        proto = dict(doc.get("protocol", {}))
        unknown = set(proto) - {"folds", "permutations"}
        if unknown:
            raise ParameterError(f"config block 'protocol': unknown keys {sorted(unknown)}")
        self.protocol = ProtocolConfig(folds=int(proto.get("folds", 10)),
                                       permutations=int(proto.get("permutations", 25)),
                                       seed=self.seed, train=replace(train, seed=self.seed))
        self.model_options = dict(doc.get("model", {}))

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        doc = {}
        if args.config:
            try:
                doc = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"{args.config}: cannot read config ({exc})") from exc
            if not isinstance(doc, dict):
                raise ParameterError(f"{args.config}: config must be a JSON object")
        if args.out is not None:
            doc["out"] = args.out
        if args.seed is not None:
            doc["seed"] = args.seed
        if getattr(args, "mode", None) is not None:
            doc["mode"] = args.mode
        for key, flag in (("folds", "folds"), ("permutations", "permutations")):
            if getattr(args, flag, None) is not None:
                doc.setdefault("protocol", {})[key] = getattr(args, flag)
        if getattr(args, "max_epochs", None) is not None:
            train = doc.setdefault("train", {})
            train["max_epochs"] = args.max_epochs
            train["patience"] = min(train.get("patience", TrainConfig.patience), args.max_epochs)
        if getattr(args, "variants", None) is not None:
            doc.setdefault("augment", {})["variants_per_image"] = args.variants
        return cls(doc)

    def digest_dict(self) -> dict:
        return {"pipeline": repr(self.pipeline), "protocol": self.protocol.to_dict(),
                "model": self.model_options, "mode": self.mode, "seed": self.seed}


# helpers -----------------------------------------------------------------

def _load_manifest(path: Path, stage_hint: str) -> list[Element]:
    if not path.is_file():
        raise ArtifactError(f"{path} not found; run '{stage_hint}' first")
    return read_manifest(path)


def _stale(outputs, inputs, force: bool) -> bool:
    if force:
        return True
    outs = [Path(p) for p in outputs]
    if not all(p.is_file() for p in outs):
        return True
    newest_in = max(Path(p).stat().st_mtime for p in inputs)
    return min(p.stat().st_mtime for p in outs) < newest_in


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _pgm(rel: str) -> str:
    return Path(rel).with_suffix(".pgm").as_posix()


# per-element workers (module level so they can be sent to worker processes)

def _preprocess_one(task):
    src, dst, cfg, force = task
    if _stale([dst], [src], force):
        write_image(despeckle(read_image(src), cfg), dst)


def _extract_one(task):
    src, img_dst, csv_dst, pgm_dst, mode, cfg, force = task
    if not _stale([img_dst, csv_dst, pgm_dst], [src], force):
        return
    ex = extract(mode_image(read_image(src), mode, cfg), cfg)
    if ex.degenerate:
        log.warning("%s: zero dynamic range, contrast left unchanged", src)
    write_image(ex.enhanced, img_dst)
    write_path_csv(ex.path, csv_dst)
    write_image(ex.line_raster, pgm_dst)


def _features_one(task):
    img_path, csv_path, cfg = task
    img = read_image(img_path)
    path = read_path_csv(csv_path)
    if path.width != img.shape[1]:
        raise DataError(f"{csv_path}: path width {path.width} does not match image width {img.shape[1]}")
    return compute_features(img, prewitt_gradient(img), path, ridge_offset=cfg.track.ridge_offset)


def _warn_empty(cmd: str) -> int:
    log.warning("%s: manifest has no elements; nothing to do", cmd)
    return EXIT_OK


# commands ----------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> int:
    try:
        counts = [int(x) for x in args.per_stage.split(",")]
    except ValueError:
        raise UsageError(f"--per-stage expects integers, got {args.per_stage!r}") from None
    if len(counts) == 1:
        counts = counts[0]
    elif len(counts) != 5:
        raise UsageError("--per-stage takes one count or five comma-separated counts")
    dest = Path(args.dest) if args.dest else cfg.out / "phantom"
    elements = generate_dataset(counts, dest, seed=cfg.seed, fmt=args.format)
    print(f"wrote {len(elements)} phantoms to {dest / 'manifest.csv'}")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest) if args.manifest else cfg.out / "phantom" / "manifest.csv"
    elements = _load_manifest(manifest, "phantom")
    if not elements:
        return _warn_empty("preprocess")
    root, dest = manifest.parent, cfg.out / "images" / "despeckled"
    out = [replace(e, path=_pgm(e.path), origin_path=_pgm(e.origin_path or e.path)) for e in elements]
    tasks = [(root / e.path, dest / o.path, cfg.pipeline, args.force) for e, o in zip(elements, out)]
    for src, *_ in tasks:
        if not src.is_file():
            raise DataError(f"{src}: image not found")
    _map(_preprocess_one, tasks, args.jobs)
    write_manifest(out, dest / "manifest.csv")
    print(f"despeckled {len(out)} images into {dest}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    src_dir = cfg.out / "images" / "despeckled"
    elements = _load_manifest(src_dir / "manifest.csv", "preprocess")
    if not elements:
        return _warn_empty("augment")
    dest = cfg.out / "images" / "augmented"
    out = augment_mod.augment_dataset(elements, src_dir, dest, cfg.variants, seed=cfg.seed, jobs=args.jobs)
    write_manifest(out, dest / "manifest.csv")
    print(f"{len(elements)} sources -> {len(out)} elements in {dest}")
    return EXIT_OK


def _modes(args, cfg) -> list[str]:
    return list(IMAGE_MODES) if getattr(args, "all_modes", False) else [cfg.mode]


def cmd_extract(args, cfg: RunConfig) -> int:
    src_dir = cfg.out / "images" / "augmented"
    elements = _load_manifest(src_dir / "manifest.csv", "augment")
    if not elements:
        return _warn_empty("extract")
    for mode in _modes(args, cfg):
        img_dir, line_dir = cfg.out / "images" / mode, cfg.out / "lines" / mode
        tasks = []
        for e in elements:
            stem = Path(e.path).with_suffix("")
            tasks.append((src_dir / e.path, img_dir / e.path, line_dir / f"{stem.as_posix()}.csv",
                          line_dir / f"{stem.as_posix()}.pgm", mode, cfg.pipeline, args.force))
        for t in tasks:
            if not t[0].is_file():
                raise DataError(f"{t[0]}: image not found")
        _map(_extract_one, tasks, args.jobs)
        write_manifest(elements, line_dir / "manifest.csv")
        print(f"extracted {len(elements)} lines ({mode}) into {line_dir}")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    for mode in _modes(args, cfg):
        line_dir = cfg.out / "lines" / mode
        elements = _load_manifest(line_dir / "manifest.csv", "extract")
        if not elements:
            return _warn_empty("features")
        img_dir = cfg.out / "images" / mode
        tasks = [(img_dir / e.path, line_dir / f"{Path(e.path).with_suffix('').as_posix()}.csv", cfg.pipeline)
                 for e in elements]
        for img_path, csv_path, _ in tasks:
            for p in (img_path, csv_path):
                if not p.is_file():
                    raise ArtifactError(f"{p} not found; run 'extract' first")
        dest = cfg.out / "features" / f"features_{mode}.csv"
        if not _stale([dest], [p for t in tasks for p in t[:2]], args.force):
            print(f"{dest} is up to date")
            continue
        vectors = _map(_features_one, tasks, args.jobs)
        write_feature_csv(zip(elements, vectors), dest)
        print(f"wrote {len(vectors)} feature rows to {dest}")
    return EXIT_OK


def load_experiment_data(cfg: RunConfig, kind: str) -> ExperimentData:
    """Assemble the arrays ``kind`` needs from the artifact tree."""
    mode = cfg.mode
    line_dir = cfg.out / "lines" / mode
    elements = _load_manifest(line_dir / "manifest.csv", "extract")
    if not elements:
        raise ArtifactError(f"{line_dir / 'manifest.csv'} lists no elements")
    data = ExperimentData(elements=elements, mode=mode)
    if kind in ("mlnn", "concat"):
        fpath = cfg.out / "features" / f"features_{mode}.csv"
        if not fpath.is_file():
            raise ArtifactError(f"{fpath} not found; run 'features' first")
        table = read_feature_csv(fpath)
        missing = [e.path for e in elements if e.path not in table]
        if missing:
            raise ArtifactError(f"{fpath} lacks {len(missing)} elements (e.g. {missing[0]}); rerun 'features'")
        data.features = np.array([table[e.path].as_array() for e in elements])
    if kind in ("cnn", "cnnl", "concat"):
        imgs, lines = [], []
        for e in elements:
            img_path = cfg.out / "images" / mode / e.path
            if not img_path.is_file():
                raise ArtifactError(f"{img_path} not found; run 'extract' first")
            img = read_image(img_path)
            raster = None
            if kind != "cnn":
                path = read_path_csv(line_dir / f"{Path(e.path).with_suffix('').as_posix()}.csv")
                raster = line_to_binary(path, img.shape[1], img.shape[0])
            ch = image_channels(img, raster, mode).astype(np.float32)
            imgs.append(ch[:1])
            if raster is not None:
                lines.append(ch[1:])
        data.images = np.stack(imgs)
        if lines:
            data.lines = np.stack(lines)
    return data


def _cell_name(model: str, mode: str, k: int, seed: int) -> str:
    return f"{model}_{mode}_k{k}_s{seed}"


def cmd_train(args, cfg: RunConfig) -> int:
    data = load_experiment_data(cfg, args.model)
    plan = make_splits(data.elements, cfg.protocol.folds, 1, cfg.seed)[0]
    result, state = run_cell(data, args.model, args.classes, plan, cfg.protocol.train, cfg.model_options)
    dest = cfg.out / "models" / f"{_cell_name(args.model, cfg.mode, args.classes, cfg.seed)}.model"
    save_model(state.net, dest, config=cfg.digest_dict(), history=state.history)
    print(f"trained {args.model} ({cfg.mode}, {args.classes} classes): test acc {result.acc:.4f}, "
          f"mae {result.mae:.4f}, best epoch {state.best_epoch}; saved {dest}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    data = load_experiment_data(cfg, args.model)
    report = run_experiment(data, args.model, args.classes, cfg.protocol, cfg.model_options)
    name = _cell_name(args.model, cfg.mode, args.classes, cfg.seed)
    reports_dir = cfg.out / "reports"
    write_cell_csv([report], reports_dir / f"cells_{name}.csv")
    write_aggregate_csv([report], reports_dir / f"aggregate_{name}.csv")
    print(f"{args.model} {cfg.mode} K={args.classes} over {len(report.cells)} cells: "
          f"acc {report.acc_mean:.4f} ± {report.acc_std:.4f}, mae {report.mae_mean:.4f} ± {report.mae_std:.4f} "
          f"(± is the sample std over cells)")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    reports_dir = cfg.out / "reports"
    files = sorted(reports_dir.glob(f"aggregate_*_s{cfg.seed}.csv"))
    if not files:
        raise ArtifactError(f"no aggregate reports in {reports_dir}; run 'eval' first")
    rows = [r for f in files for r in read_aggregate_csv(f)]
    print(format_table(rows))
    summary = reports_dir / f"summary_s{cfg.seed}.csv"
    with summary.open("w", newline="") as fh:
        import csv
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for r in rows:
            w.writerow([r["model"], r["mode"], r["classes"], repr(r["acc_mean"]), repr(r["acc_std"]),
                        repr(r["mae_mean"]), repr(r["mae_std"])])
    if args.plot:
        try:
            plot_accuracy(rows, reports_dir / f"summary_s{cfg.seed}.png")
        except ImportError:
            raise UsageError("--plot needs matplotlib (install the 'plot' extra)") from None
    return EXIT_OK


# argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes for per-element stages")
    common.add_argument("--force", action="store_true", help="recompute up-to-date outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="glisson", description="Glisson line fibrosis staging pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic phantoms")
    p.add_argument("--per-stage", default="44,31,35,20,27",
                   help="one count for every stage or five comma-separated counts")
    p.add_argument("--dest", help="target directory (default: OUT/phantom)")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("preprocess", parents=[common], help="SRAD despeckling")
    p.add_argument("--manifest", help="input manifest (default: OUT/phantom/manifest.csv)")

    p = sub.add_parser("augment", parents=[common], help="crop-and-zoom / rotation variants")
    p.add_argument("--variants", type=int, help="variants per source image (default 3)")

    for name, help_text in (("extract", "contrast stretch, Prewitt and line tracking"),
                            ("features", "line features per element")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--mode", choices=IMAGE_MODES)
        p.add_argument("--all-modes", action="store_true", help="process both image modes")

    for name, help_text in (("train", "train one model on the first split"),
                            ("eval", "full cross-validation protocol")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--model", required=True, help=f"one of {', '.join(MODEL_KINDS)}")
        p.add_argument("--classes", type=int, choices=(2, 3, 5), default=2)
        p.add_argument("--mode", choices=IMAGE_MODES)
        p.add_argument("--folds", type=int)
        p.add_argument("--permutations", type=int)
        p.add_argument("--max-epochs", type=_positive)

    p = sub.add_parser("report", parents=[common], help="tabulate aggregate reports")
    p.add_argument("--plot", action="store_true", help="also write a PNG bar chart")
    return parser


COMMANDS = {
    "phantom": cmd_phantom, "preprocess": cmd_preprocess, "augment": cmd_augment,
    "extract": cmd_extract, "features": cmd_features, "train": cmd_train,
    "eval": cmd_eval, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "model", None) is not None and args.model not in MODEL_KINDS:
            raise UsageError(f"unknown model {args.model!r}; choose from {', '.join(MODEL_KINDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = RunConfig.from_args(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"glisson: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"glisson: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArtifactError) as exc:
        print(f"glisson: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"glisson: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
