"""Command-line pipeline: gen, build-dataset, train, inspect, eval.

Exit codes: 0 success, 2 usage or configuration error, 3 incompatible or
unreadable input, 4 runtime abort (e.g. training divergence).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import ScanSource, build_dataset, load_datasets, save_datasets
from .detector import PRESETS, FlawCNNClassifier, inspect_scan
from .errors import ConfigError, DatasetShortfallError, DivergenceError, IncompatibleInputError, ScanFormatError, UTFlawError
from .evalkit import confusion, flaw_hits, format_flaw_hit_report, format_metrics, metrics, overlay_render
from .postproc import DEFAULT_POLICY, POLICIES, PostProcConfig, filter_detections, format_depth_report
from .scan import read_truth_sidecar, write_truth_sidecar
from .sigproc import measure_depth_map
from .synth import build_depth_field, load_synth_config, truth_regions, write_synth_scan

logger = logging.getLogger("utflaw")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4


class _Abort(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def sibling(path, suffix) -> Path:
    """``scan.utb`` -> ``scan<suffix>`` (e.g. ``.truth``, ``.depth.npy``)."""
    return Path(path).with_suffix(suffix)


def _out_path(args, default: Path, name: str) -> Path:
    if args.out_dir is None:
        return default
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if not Path(args.config).is_file():
        raise _Abort(EXIT_USAGE, f"config file not found: {args.config}")
    config = load_synth_config(args.config)
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    scan_path = Path(args.output)
    if args.out_dir is not None:
        scan_path = _out_path(args, scan_path, scan_path.name)
    truth_path = Path(args.truth) if args.truth else sibling(scan_path, ".truth")
    field = build_depth_field(config)
    nbytes = write_synth_scan(config, scan_path, field)
    write_truth_sidecar(truth_regions(config), truth_path)
    np.save(sibling(scan_path, ".depth.npy"), field)
    print(f"seed {config.rng_seed} flaws {len(config.flaws)} bytes {nbytes} scan {scan_path} truth {truth_path}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    if not args.scans:
        raise _Abort(EXIT_USAGE, "no scans given")
    if not 0 < args.cv_fraction < 1:
        raise _Abort(EXIT_USAGE, "--cv-fraction must lie in (0, 1)")
    sources = []
    for k, path in enumerate(args.scans):
        depth_path = sibling(path, ".depth.npy")
        if not Path(path).is_file() or not depth_path.is_file():
            raise _Abort(EXIT_INPUT, f"{path}: scan or its {depth_path.name} depth field is missing")
        sources.append(ScanSource(k, path, np.load(depth_path)))
    n_cv = int(round(args.size * args.cv_fraction))
    n_train = args.size - n_cv
    try:
        train, cv = build_dataset(sources, n_train, n_cv, args.balance, args.sub_threshold_share, args.seed)
    except DatasetShortfallError as exc:
        raise _Abort(EXIT_INPUT, str(exc)) from None
    save_datasets(args.out, train, cv, args.balance, args.sub_threshold_share, args.seed)
    for name, ds in (("train", train), ("cv", cv)):
        neg, pos = ds.class_counts()
        print(f"{name} n={len(ds)} label0={neg} label1={pos}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train, cv, _ = load_datasets(args.dataset)
    if args.resume:
        clf = FlawCNNClassifier.load(args.resume)
        if getattr(clf, "state_", None) is None:
            raise _Abort(EXIT_INPUT, f"{args.resume}: checkpoint has no training state")
        clf.set_params(epochs=args.epochs)
        resume = clf.resume_state()
    else:
        clf = FlawCNNClassifier(
            preset=args.preset,
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.learning_rate,
            l2=args.l2,
            dropout=args.dropout,
            optimizer=args.optimizer,
            patience=args.patience,
            random_state=args.seed,
        )
        resume = None
    state_path = Path(args.checkpoint).with_suffix(".state")

    def on_epoch(state, model):
        # a resumable snapshot after every epoch
        clf.state_ = state
        clf.last_weights_ = model.get_weights()
        clf.save(state_path, include_state=True)

    try:
        clf.fit(train.X, train.y, cv.X, cv.y, resume=resume, log=print, on_epoch=on_epoch if args.snapshot else None)
    except DivergenceError as exc:
        raise _Abort(EXIT_RUNTIME, f"training diverged: {exc}") from None
    clf.save(args.checkpoint, include_state=True)
    if len(cv):
        print("cv " + format_metrics(metrics(confusion(clf.predict(cv.X), cv.y))))
    print(f"best epoch {clf.state_.best_epoch} checkpoint {args.checkpoint}")
    return EXIT_OK


def _postproc_config(args):
    return PostProcConfig(threshold_mm=args.threshold_mm, ref_policy=args.ref_policy)


def _inspect_one(path, clf, args):
    """Returns (inspection, post-processed detections, depth report)."""
    ins = inspect_scan(path, clf)
    if args.no_postproc:
        return ins, ins.detections, None
    res = filter_detections(ins.detections, ins, _postproc_config(args))
    return ins, res.detections, res.report


def _load_truth(path, explicit=None):
    truth_path = Path(explicit) if explicit else sibling(path, ".truth")
    return read_truth_sidecar(truth_path) if truth_path.is_file() else None


def cmd_inspect(args) -> int:
    clf = FlawCNNClassifier.load(args.checkpoint)
    ins, detections, report = _inspect_one(args.scan, clf, args)
    stem = Path(args.scan).stem
    base = Path(args.scan).parent
    positives = sum(d.cls == 1 for d in ins.detections)
    retained = [d for d in detections if d.cls == 1]
    report_path = _out_path(args, base / f"{stem}.report.txt", f"{stem}.report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        if report is None:
            fh.write("# post-processing disabled; raw CNN positives\n")
            fh.writelines(f"{d.grid_coords[0]} {d.grid_coords[1]} retained nan\n" for d in retained)
        else:
            fh.write(format_depth_report(report))
    truth = _load_truth(args.scan, args.truth)
    if truth is not None:
        hits = flaw_hits(detections, truth, ins.header)
        hits_path = _out_path(args, base / f"{stem}.hits.txt", f"{stem}.hits.txt")
        hits_path.write_text(format_flaw_hit_report(hits), encoding="utf-8")
        print(f"flaw hits {hits.hits}/{len(hits.qualifying)} open-field fp {len(hits.false_positives)}")
    depth = measure_depth_map(ins.tof_ns, ins.header, ins.valid)
    overlay_path = _out_path(args, base / f"{stem}.overlay.ppm", f"{stem}.overlay.ppm")
    overlay_path.write_bytes(overlay_render(depth, ins.header, detections, truth or ()))
    print(
        f"inspection points {len(ins.detections)} cnn positives {positives} retained {len(retained)} "
        f"dropped waveforms {ins.dropped_waveforms} report {report_path} overlay {overlay_path}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.scans:
        raise _Abort(EXIT_USAGE, "no scans given")
    clf = FlawCNNClassifier.load(args.checkpoint)
    unreadable = []
    qualifying = hits = fps = points = retained = 0
    for path in args.scans:
        try:
            truth = _load_truth(path)
            if truth is None:
                raise ScanFormatError(f"no truth sidecar {sibling(path, '.truth')}")
            ins, detections, _ = _inspect_one(path, clf, args)
        except (OSError, UTFlawError) as exc:
            unreadable.append((path, exc))
            logger.error("%s: %s", path, exc)
            continue
        rep = flaw_hits(detections, truth, ins.header)
        qualifying += len(rep.qualifying)
        hits += rep.hits
        fps += len(rep.false_positives)
        points += len(ins.detections)
        retained += rep.total_detections
        print(f"scan {path} hits {rep.hits}/{len(rep.qualifying)} open_field_fp {len(rep.false_positives)} points {len(ins.detections)}")
    rate = hits / qualifying if qualifying else None
    rate_txt = "undefined" if rate is None else f"{rate:.4f} ({100 * rate:.2f}%)"
    print(f"scans {len(args.scans) - len(unreadable)} inspection points {points} retained {retained}")
    print(f"per-flaw hit rate {hits}/{qualifying} = {rate_txt}")
    print(f"open-field false positives {fps}")
    for path, exc in unreadable:
        print(f"unreadable {path}: {exc}")
    return EXIT_INPUT if unreadable else EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_postproc_flags(p):
    p.add_argument("--threshold-mm", type=float, default=0.09)
    p.add_argument("--ref-policy", choices=POLICIES, default=DEFAULT_POLICY)
    p.add_argument("--no-postproc", action="store_true", help="report raw CNN positives")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utflaw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a scan, its truth sidecar and depth field")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    p.add_argument("--truth", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("output")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build-dataset", help="balanced train/CV bundles from generated scans")
    p.add_argument("scans", nargs="*")
    p.add_argument("--size", type=int, default=10000)
    p.add_argument("--balance", type=float, default=0.25, help="label-1 fraction")
    p.add_argument("--cv-fraction", type=float, default=1 / 6)
    p.add_argument("--sub-threshold-share", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train the CNN on a dataset file")
    p.add_argument("dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ci_small")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--snapshot", action="store_true", help="write <checkpoint>.state after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="detect flaws in one scan")
    p.add_argument("scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--out-dir", default=None)
    _add_postproc_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("eval", help="aggregate per-flaw results over many scans")
    p.add_argument("scans", nargs="*")
    p.add_argument("--checkpoint", required=True)
    _add_postproc_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Abort as exc:
        print(f"utflaw {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"utflaw {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IncompatibleInputError, ScanFormatError, FileNotFoundError) as exc:
        print(f"utflaw {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (UTFlawError, OSError, ArithmeticError) as exc:
        print(f"utflaw {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
