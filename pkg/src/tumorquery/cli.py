"""Command-line entry point: gen, train, infer, eval and ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
Relative output paths are resolved under ``$TUMORQUERY_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .inference import (
    DEFAULT_CONNECTIVITY, extract_instances, patient_diagnosis, predict_volume, scaled_min_voxels,
)
from .metrics import emit_report, evaluate, plot_report
from .model import load_checkpoint
from .phantom import PhantomSpec, default_phantom_spec, load_manifest, make_dataset
from .queries import MODES
from .taxonomy import DETECTION, DIAGNOSIS, TaxonomyError, taxonomy_from_name
from .train import TrainConfig, TrainingDivergedError, train_from_manifest
from .volume import CaseFormatError, load_arrays, load_case, save_arrays

OUTPUT_ROOT_ENV = "TUMORQUERY_OUTPUT_ROOT"
PREDICTIONS_FILE = "predictions.json"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


log = logging.getLogger("tumorquery")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_manifest(path):
    try:
        return load_manifest(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> dict:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        taxonomy = taxonomy_from_name(args.taxonomy)
    except (OSError, TaxonomyError, ValueError) as exc:
        raise UsageError(f"bad --taxonomy: {exc}") from exc
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = default_phantom_spec(taxonomy, dims=tuple(args.dims), tumor_prob=args.tumor_prob,
                                    normal_prob=args.normal_prob, noise=args.noise)
    out = output_path(args.out)
    m = make_dataset(spec, taxonomy, args.n, args.seed, args.splits, out)
    print(f"manifest {out / 'manifest.json'} sha256 {m.digest}")
    return {"manifest_hash": m.digest}


# ---------------------------------------------------------------------------
# train


def train_config_from_args(args) -> TrainConfig:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config: {exc}") from exc
    for key in ("mode", "lr", "seed", "batch_size", "epochs", "steps_per_epoch", "split", "d"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "patch", None):
        cfg["patch"] = args.patch
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _train(manifest, cfg: TrainConfig, out: Path):
    _write_json(out / "train_config.json", {"train_config": cfg.to_dict(), "manifest_hash": manifest.digest})
    res = train_from_manifest(manifest, cfg, out)
    print(f"checkpoint {res.checkpoint} sha256 {res.digest}")
    return res


def cmd_train(args) -> dict:
    cfg = train_config_from_args(args)
    if cfg.mode not in MODES:
        raise UsageError(f"invalid --mode {cfg.mode!r}")
    manifest = _load_manifest(args.manifest)
    res = _train(manifest, cfg, output_path(args.out))
    return {"checkpoint": str(res.checkpoint), "digest": res.digest}


# ---------------------------------------------------------------------------
# infer


def _infer(manifest, manifest_path, checkpoint, out: Path, split: str, gaussian: bool, tta: bool,
           step: float, window=None, min_voxels=None, connectivity=DEFAULT_CONNECTIVITY) -> dict:
    try:
        model, blob = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if window is None:
        window = blob.get("extra", {}).get("train_config", {}).get("patch", (32, 32, 32))
    recs = manifest.split(split)
    if not recs:
        raise DataError(f"manifest has no {split!r} cases")
    config = {"split": split, "gaussian": gaussian, "tta": tta, "step": step, "window": list(window),
              "min_voxels": min_voxels, "connectivity": connectivity}
    out.mkdir(parents=True, exist_ok=True)
    cases = {}
    for rec in recs:
        vol, _ = load_case(manifest.case_path(rec))
        mv = scaled_min_voxels(vol.spacing) if min_voxels is None else min_voxels
        pred = predict_volume(model, vol.voxels, window, step, gaussian, tta, mv, connectivity, vol.spacing)
        rel = f"{rec.case_id}.tqp"
        save_arrays(out / rel, {"det": pred.det, "diag": pred.diag}, vol.spacing,
                    manifest_hash=manifest.digest, checkpoint_hash=blob["digest"])
        cases[rec.case_id] = {
            "file": rel,
            "det_instances": [i.to_dict(model.taxonomy) for i in pred.det_instances],
            "diag_instances": [i.to_dict(model.taxonomy) for i in pred.diag_instances],
            "diagnosis": {k: (None if v is None else model.taxonomy.class_name(v))
                          for k, v in pred.diagnosis.items()},
        }
        log.info("predicted %s", rec.case_id)
    doc = {"manifest": str(manifest_path), "manifest_hash": manifest.digest, "checkpoint_hash": blob["digest"],
           "model_config": blob["config"], "infer_config": config, "cases": cases}
    _write_json(out / PREDICTIONS_FILE, doc)
    return doc


def cmd_infer(args) -> dict:
    manifest = _load_manifest(args.manifest)
    doc = _infer(manifest, args.manifest, args.checkpoint, output_path(args.out), args.split,
                 not args.no_gaussian, not args.no_tta, args.step, args.window, args.min_voxels,
                 args.connectivity)
    print(f"predictions {output_path(args.out) / PREDICTIONS_FILE} ({len(doc['cases'])} cases)")
    return doc


# ---------------------------------------------------------------------------
# eval


def _eval(manifest, pred_dir: Path, min_voxels, connectivity: int, plots=None):
    try:
        doc = json.loads((pred_dir / PREDICTIONS_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read predictions in {pred_dir}: {exc}") from exc
    if doc.get("manifest_hash") != manifest.digest:
        raise DataError("prediction set was made from a different manifest "
                        f"({doc.get('manifest_hash')} != {manifest.digest})")
    taxonomy = manifest.get_taxonomy()
    by_id = {c.case_id: c for c in manifest.cases}
    cases = []
    used_mv = None
    for case_id in sorted(doc["cases"]):
        if case_id not in by_id:
            raise DataError(f"prediction for unknown case {case_id}")
        vol, lab = load_case(manifest.case_path(by_id[case_id]))
        arrays, header = load_arrays(pred_dir / doc["cases"][case_id]["file"])
        if header.get("manifest_hash") != manifest.digest or header.get("checkpoint_hash") != doc["checkpoint_hash"]:
            raise DataError(f"{case_id}: prediction file hashes do not match the prediction set")
        mv = scaled_min_voxels(vol.spacing) if min_voxels is None else min_voxels
        used_mv = mv
        det, diag = arrays["det"], arrays["diag"]
        diag_inst = extract_instances(diag, taxonomy, DIAGNOSIS, mv, connectivity, vol.spacing)
        cases.append({
            "case_id": case_id, "gt": lab.labels, "det": det, "diag": diag,
            "det_instances": extract_instances(det, taxonomy, DETECTION, mv, connectivity, vol.spacing),
            "diagnosis": patient_diagnosis(diag_inst, taxonomy),
        })
    meta = {"checkpoint_hash": doc["checkpoint_hash"], "manifest_hash": manifest.digest,
            "config": {"model": doc.get("model_config"), "infer": doc.get("infer_config")}}
    report = evaluate(cases, taxonomy, meta, used_mv if used_mv is not None else 0, connectivity)
    if plots:
        plot_report(report, plots)
    return report


def cmd_eval(args) -> dict:
    manifest = _load_manifest(args.manifest)
    report = _eval(manifest, Path(args.predictions), args.min_voxels, args.connectivity,
                   output_path(args.plots) if args.plots else None)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(out, report)
    for k, v in report.headline().items():
        print(f"{k:>20}: {'n/a' if v is None else f'{v:.4f}'}")
    return report.headline()


# ---------------------------------------------------------------------------
# ablate


TABLE_COLUMNS = ("Sensitivity", "Specificity", "Dice")


def format_table(rows: dict) -> str:
    head = f"{'Mode':<10} " + " ".join(f"{c:>12}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for mode, vals in rows.items():
        cells = " ".join(f"{'n/a' if vals[c] is None else f'{vals[c]:.4f}':>12}" for c in TABLE_COLUMNS)
        lines.append(f"{mode:<10} {cells}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> dict:
    modes = args.modes or list(MODES)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"invalid modes {bad}")
    base = train_config_from_args(args)
    manifest = _load_manifest(args.manifest)
    out = output_path(args.out)
    rows, runs = {}, {}
    for mode in modes:
        cfg = TrainConfig.from_dict({**base.to_dict(), "mode": mode})
        res = _train(manifest, cfg, out / mode)
        _infer(manifest, args.manifest, res.checkpoint, out / mode / "predictions", args.test_split,
               not args.no_gaussian, not args.no_tta, args.step, None, args.min_voxels, args.connectivity)
        report = _eval(manifest, out / mode / "predictions", args.min_voxels, args.connectivity)
        emit_report(out / mode / "report.json", report)
        head = report.headline()
        rows[mode] = {c: head[c] for c in TABLE_COLUMNS}
        runs[mode] = {"checkpoint_hash": res.digest, "train_config": cfg.to_dict()}
    doc = {"columns": list(TABLE_COLUMNS), "rows": rows, "runs": runs, "manifest_hash": manifest.digest}
    _write_json(out / "ablation.json", doc)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return doc


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--patch", type=int, nargs=3)
    p.add_argument("--d", type=int)
    p.add_argument("--split", help="manifest split to train on")


def _add_infer_flags(p):
    p.add_argument("--no-tta", action="store_true", help="disable flip test-time augmentation")
    p.add_argument("--no-gaussian", action="store_true", help="uniform instead of Gaussian blending")
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--min-voxels", type=int, help="instance size threshold (default scales 200 by spacing)")
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=DEFAULT_CONNECTIVITY)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tumorquery")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--taxonomy", default="toy", help="'toy', 'clinical' or a taxonomy JSON file")
    g.add_argument("--spec", help="phantom spec JSON (overrides the shape flags)")
    g.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    g.add_argument("--tumor-prob", type=float, default=0.6)
    g.add_argument("--normal-prob", type=float, default=0.25)
    g.add_argument("--noise", type=float, default=10.0)
    g.add_argument("--splits", type=float, nargs="+", default=(0.8, 0.2))

    t = sub.add_parser("train", help="train a model on a manifest split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=MODES)
    _add_train_flags(t)

    i = sub.add_parser("infer", help="sliding-window prediction for a manifest split")
    i.add_argument("--manifest", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--window", type=int, nargs=3, help="defaults to the training patch")
    _add_infer_flags(i)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True, help="directory written by infer")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--plots", help="directory for bar charts")
    e.add_argument("--min-voxels", type=int)
    e.add_argument("--connectivity", type=int, choices=(6, 26), default=DEFAULT_CONNECTIVITY)

    a = sub.add_parser("ablate", help="train and evaluate each query representation mode")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--modes", nargs="+", help=f"subset of {MODES}; default all")
    a.add_argument("--test-split", default="test")
    _add_train_flags(a)
    _add_infer_flags(a)
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CaseFormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
