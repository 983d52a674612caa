"""Command-line entry point: ``iodcnn {synth,train,eval,fuse,gradcheck,infer}``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
Every file is written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import network as N
from .data import Dataset, ManifestError, SyntheticSpec, generate_synthetic, read_image
from .gradcheck import LAYER_CHECKS, run_suite
from .rois import ProposalParseError
from .tensor import make_rng
from .training import ConfigError, default_config, load_config, run_config

log = logging.getLogger("iodcnn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ManifestError, ConfigError, N.CheckpointError, ProposalParseError, E.MetricError,
                     ValueError, FileNotFoundError, NotADirectoryError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    N.atomic_write(path, text.encode())


def _write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec(count=args.count, min_size=args.min_size, max_size=args.max_size,
                         noise=args.noise, seed=args.seed)
    manifest, _ = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    ds = Dataset.load(args.data, args.proposals)
    for i in range(len(ds)):
        w, h = ds.size(i)
        if min(w, h) < cfg.spec.min_input_size:
            raise ConfigError(f"{ds.manifest.entries[i].image}: {w}x{h} is below the network minimum "
                              f"{cfg.spec.min_input_size}")
    result = run_config(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for k, (name, blob) in enumerate(result.checkpoints.items(), start=1):
        N.atomic_write(out / f"stage{k}", blob)
        index.append({"file": f"stage{k}", "stage": name})
    _write_text(out / "train_log.csv", result.log_csv())
    _write_json(out / "stages.json", index)
    print(f"trained {len(index)} stages; checkpoints and train_log.csv in {out}")
    return EXIT_OK


def cmd_eval(args):
    net = N.load(args.checkpoint)
    ds = Dataset.load(args.data, args.proposals)
    report = E.evaluate_network(net, ds, args.rigid_iou, args.nonrigid_iou)
    report["checkpoint"] = str(args.checkpoint)
    for key in ("ap_event", "map_rigid", "ap_nonrigid"):
        report.setdefault(key, None)
    if args.scores and "event" in net.spec.tasks:
        E.save_scores_for(net, ds, args.scores)
    E.write_report(args.report, report)
    print(json.dumps({k: report[k] for k in ("ap_event", "map_rigid", "ap_nonrigid")}))
    return EXIT_OK


def cmd_fuse(args):
    ds = Dataset.load(args.data)
    ids = [e.image for e in ds.manifest.entries]
    labels = np.array([ds.event_label(i) for i in range(len(ds))])
    report: dict = {"mode": args.mode}
    if args.mode == "score":
        if not args.scores:
            raise ConfigError("score fusion needs --scores")
        mats = E.read_score_matrix(args.scores, ids)
        weights = args.weights
        if weights is None and args.search:
            weights, _ = E.search_fusion_weights(mats, labels)
        fused = E.score_fusion(mats, weights)
        report["weights"] = list(map(float, weights)) if weights is not None else [1.0 / len(mats)] * len(mats)
        report["ap_models"] = [E.average_precision(m[:, 1], labels) for m in mats]
        report["ap_fused"] = E.average_precision(fused[:, 1], labels)
        rows = [(i, s[0], s[1]) for i, s in zip(ids, fused)]
    else:
        if not args.checkpoint:
            raise ConfigError("feature fusion needs --checkpoint")
        nets = [N.load(p) for p in args.checkpoint]
        train = Dataset.load(args.train_data) if args.train_data else ds
        y_train = np.array([train.event_label(i) for i in range(len(train))])
        clf = E.feature_fusion_train(E.fc7_matrix(nets, train), y_train, args.hinge_c,
                                     make_rng(args.seed, 40), epochs=args.epochs)
        s = clf.score(E.fc7_matrix(nets, ds))
        report["hinge_c"] = args.hinge_c
        report["ap_fused"] = E.average_precision(s, labels)
        rows = [(i, -float(v), float(v)) for i, v in zip(ids, s)]
    if args.out_scores:
        E.write_scores(args.out_scores, rows)
    E.write_report(args.report, report)
    print(json.dumps({"ap_fused": report["ap_fused"]}))
    return EXIT_OK


def cmd_gradcheck(args):
    names = args.only or list(LAYER_CHECKS)
    unknown = [n for n in names if n not in LAYER_CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; choose from {list(LAYER_CHECKS)}")
    worst: dict[str, tuple[float, bool]] = {}

    def report(r):
        err, ok = worst.get(r.name, (0.0, True))
        worst[r.name] = (max(err, r.max_rel_error), ok and r.passed)

    _, seconds = run_suite(range(args.seeds), names, report)
    for name in names:
        err, ok = worst[name]
        print(f"{'PASS' if ok else 'FAIL'} {name:22s} max_rel_error={err:.3e}")
    print(f"{len(names)} checks x {args.seeds} seeds in {seconds:.1f}s")
    return EXIT_OK if all(ok for _, ok in worst.values()) else EXIT_RUNTIME


def cmd_infer(args):
    net = N.load(args.checkpoint)
    img = read_image(args.image)
    p = net.forward_infer(net.preprocess(img), "event")
    doc = {"image": str(args.image), **{c: float(v) for c, v in zip(N.EVENT_CLASSES, p)}}
    text = json.dumps(doc)
    if args.out:
        _write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iodcnn", description="Multi-task event recognition and object detection CNN.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--min-size", type=int, default=64)
    s.add_argument("--max-size", type=int, default=80)
    s.add_argument("--noise", type=float, default=0.04)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="single-task or cascaded training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--proposals")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="AP/mAP report for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--proposals")
    s.add_argument("--scores", help="also write event scores CSV")
    s.add_argument("--rigid-iou", type=float, default=0.5)
    s.add_argument("--nonrigid-iou", type=float, default=0.2)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse", help="score or feature fusion")
    s.add_argument("--mode", choices=("score", "feature"), default="score")
    s.add_argument("--data", required=True, help="manifest whose labels are scored")
    s.add_argument("--report", required=True)
    s.add_argument("--scores", nargs="+", help="score CSVs (score mode)")
    s.add_argument("--weights", nargs="+", type=float)
    s.add_argument("--search", action="store_true", help="grid-search weights on --data")
    s.add_argument("--checkpoint", nargs="+", help="checkpoints (feature mode)")
    s.add_argument("--train-data", help="manifest for fitting the classifier (feature mode)")
    s.add_argument("--hinge-c", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-scores")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("gradcheck", help="finite-difference checks")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--only", nargs="+")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("infer", help="event scores for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
