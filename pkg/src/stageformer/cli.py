"""Command-line harness: synth, split, train, eval, score, export-attn, gradcheck.

Exit status is 0 on success, 1 on invalid input or usage and 2 when a run
fails (including a failing gradient suite).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

log = logging.getLogger("stageformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this harness reserves 2 for run failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _load_manifest(path: str, fold: list[int] | None = None):
    from .signals import read_manifest

    m = read_manifest(path)
    return m.subset(folds=fold) if fold is not None else m


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .signals import SyntheticSpec, synth_generate, write_dataset

    spec = SyntheticSpec.from_dict(_read_json(args.spec))
    if args.seed is not None:
        spec.rng_seed = args.seed
    if args.n is not None:
        spec.n_recordings = args.n
    recs = synth_generate(spec)
    path = write_dataset(recs, spec.class_names, args.out)
    print(f"wrote {len(recs)} recordings, manifest {path}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .signals import read_manifest, split_folds, write_manifest

    m = split_folds(read_manifest(args.manifest), args.folds, args.seed)
    out = Path(args.out or args.manifest)
    if out.resolve().parent != Path(args.manifest).resolve().parent:
        raise ValueError("the split manifest must sit beside the original so record paths still resolve")
    write_manifest(m, out)
    sizes = np.bincount([e.fold for e in m.entries], minlength=args.folds)
    print(f"wrote {out}: fold sizes {sizes.tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    d = _read_json(args.config)
    for key in ("epochs", "seed", "variant", "batch_size", "val_fold"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    tcfg = TrainConfig.from_dict(d)
    manifest = _load_manifest(args.manifest)
    if args.exclude_fold is not None:
        manifest = manifest.subset(exclude=args.exclude_fold)
    res = train(tcfg, manifest, out_dir=args.out, resume=args.resume,
                on_epoch=lambda row: print(json.dumps(row, sort_keys=True)))
    print(f"checkpoint {Path(args.out) / 'last.ckpt'} at epoch {res.checkpoint.epoch}")
    return EXIT_OK


def _weights(path: str | None, class_names):
    from .metrics import read_weight_matrix

    return None if path is None else read_weight_matrix(path, class_names)


def _write_report(report, out: str | None) -> None:
    text = report.to_json() + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    from .metrics import write_predictions
    from .train import evaluate

    manifest = _load_manifest(args.manifest, args.fold)
    ev = evaluate(args.checkpoint, manifest, _weights(args.weights, manifest.class_names), args.threshold)
    if args.predictions:
        write_predictions(args.predictions, ev.ids, ev.scores)
    _write_report(ev.report, args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    from .metrics import evaluate_predictions, read_predictions

    manifest = _load_manifest(args.manifest, args.fold)
    ids, scores = read_predictions(args.predictions)
    if scores.ndim != 2 or scores.shape[1] != manifest.n_classes:
        raise ValueError(f"predictions have {scores.shape[-1]} score columns, manifest {manifest.n_classes} classes")
    labels = [manifest.find(i).labels for i in ids]
    report = evaluate_predictions(scores, labels, manifest.class_names,
                                  _weights(args.weights, manifest.class_names), args.threshold)
    _write_report(report, args.out)
    return EXIT_OK


def cmd_export_attn(args) -> int:
    from .export import export_attention
    from .signals import load_recording

    manifest = _load_manifest(args.manifest)
    rec = load_recording(manifest.resolve(manifest.find(args.recording)))
    files = export_attention(args.checkpoint, rec, args.out)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    dtypes = {"float64": [np.float64], "float32": [np.float32], "both": [np.float64, np.float32]}[args.dtype]
    ok = True
    for dt in dtypes:
        print(f"# {np.dtype(dt).name}")
        for r in run_gradient_suite(args.instances, args.seed, dt, args.model_instances):
            print(r.line())
            ok &= r.passed
    print("gradient suite " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAILED


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .model import VARIANTS

    p = _Parser(prog="stageformer", description="Three-stage ECG transformer harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset from a SyntheticSpec JSON")
    s.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--seed", type=int, help="override rng_seed")
    s.add_argument("-n", type=int, help="override n_recordings")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="assign stratified folds to a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output manifest (default: overwrite in place)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train from a TrainConfig JSON")
    s.add_argument("--config", required=True, help="TrainConfig JSON file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--epochs", type=int, help="override epochs")
    s.add_argument("--seed", type=int, help="override seed")
    s.add_argument("--batch-size", dest="batch_size", type=int, help="override batch_size")
    s.add_argument("--variant", choices=sorted(VARIANTS), help="override the model variant")
    s.add_argument("--val-fold", dest="val_fold", type=int, help="hold out this fold for validation")
    s.add_argument("--exclude-fold", dest="exclude_fold", type=int, nargs="+",
                   help="drop these folds (e.g. the test fold) before training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fold", type=int, nargs="+", help="restrict to these folds")
    s.add_argument("--weights", help="challenge weight-matrix CSV (default: identity)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--predictions", help="also write the predictions CSV here")
    s.add_argument("--out", help="report JSON path (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score a predictions CSV without a model")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--weights", required=True, help="challenge weight-matrix CSV")
    s.add_argument("--fold", type=int, nargs="+", help="restrict label lookup to these folds")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", help="report JSON path (default: stdout)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("export-attn", help="export attention maps for one recording")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--recording", required=True, help="recording id")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_export_attn)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=50, help="random instances per primitive")
    s.add_argument("--model-instances", dest="model_instances", type=int, help="end-to-end instances")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=["float64", "float32", "both"], default="float64")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, IsADirectoryError) as e:
        print(f"stageformer {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any other failure is a run failure
        log.debug("failure", exc_info=True)
        print(f"stageformer {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
