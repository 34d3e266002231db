"""Command-line entry point: ``rmarn <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite training, failed gradient check).
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, diagnostics, training
from .errors import ArgumentError, CheckpointError, ConfigError, DataError, RMARNError, TrainingError
from .retrieval import format_table

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("rmarn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi got {text!r}") from None
    return lo, hi


def _add_run_flags(p, data_required=True):
    p.add_argument("--data", required=data_required, help="manifest.json of a pair archive")
    p.add_argument("--config", help="JSON run config (may name a preset)")
    p.add_argument("--preset", choices=sorted(training.PRESETS), help="start from a named preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-gps", action="store_true")
    p.add_argument("--no-rls", action="store_true")
    p.add_argument("--no-afr", action="store_true")


def build_parser():
    parser = _Parser(prog="rmarn", description="Text / point-cloud retrieval with Riemann local similarity.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic paired archive")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--latent-dim", type=int, default=8)
    g.add_argument("--text-dim", type=int, default=32)
    g.add_argument("--point-dim", type=int, default=32)
    g.add_argument("--text-len", type=_int_pair, default=(8, 16), metavar="LO,HI")
    g.add_argument("--point-len", type=_int_pair, default=(32, 64), metavar="LO,HI")

    f = sub.add_parser("featurize", help="toy featurizers: caption text / ASCII XYZ or PLY clouds -> RMFT")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="caption to featurize")
    src.add_argument("--points", help="ASCII .xyz or .ply point cloud")
    src.add_argument("--pairs", help="JSON list of {id, caption, cloud[, split]}; writes a manifest")
    f.add_argument("--out", required=True, help="output .rmft file (or directory with --pairs)")
    f.add_argument("--dim", type=int, default=32)
    f.add_argument("--n-sample", type=int, default=64)
    f.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on the train split, select on val")
    _add_run_flags(t)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="recall@k of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--json", help="also write the JSON report here")

    c = sub.add_parser("gradcheck", help="finite-difference check of every stage")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-bug", choices=diagnostics.STAGES, help="double one analytic gradient (checker test)")
    c.add_argument("--threshold", type=float, default=diagnostics.THRESHOLD)

    a = sub.add_parser("ablate", help="train and compare the component ablations")
    _add_run_flags(a)
    a.add_argument("--out")
    a.add_argument("--split", default="test", choices=data.SPLITS)

    s = sub.add_parser("sweep", help="train once per value of one setting")
    _add_run_flags(s)
    s.add_argument("--sweep", required=True, metavar="NAME=V1,V2,...")
    s.add_argument("--out")
    s.add_argument("--split", default="test", choices=data.SPLITS)
    return parser


def _run_config(args):
    if args.config:
        run = training.load_run_config(args.config)
        if args.preset:
            raise UsageError("use either --config or --preset, not both")
    elif args.preset:
        run = training.preset(args.preset)
    else:
        run = training.RunConfig()
    changes = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs),
                                 ("batch_size", args.batch_size), ("lr", args.lr)) if v is not None}
    model = {}
    if args.no_gps:
        model["use_gps"] = False
    if args.no_rls:
        model["use_rls"] = False
    if args.no_afr:
        model["use_afr"] = False
    return run.replace(model=model, **changes)


def _fit_dims(run, manifest, split="train"):
    """Set the model's input widths from the archive's feature files."""
    entry = manifest.split(split)[0]
    t = data.read_features(manifest.root / entry.text_feature_path)
    p = data.read_features(manifest.root / entry.point_feature_path)
    return run.replace(model={"text_dim": t.width, "point_dim": p.width})


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args):
    spec = data.SyntheticSpec(n_pairs=args.pairs, s_t=args.text_len, s_p=args.point_len, h_t=args.text_dim,
                              h_p=args.point_dim, latent_dim=args.latent_dim, noise=args.noise, seed=args.seed)
    spec.validate()
    manifest = data.generate_synthetic(args.out, spec)
    counts = manifest.counts()
    print(f"wrote {len(manifest.entries)} pairs to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def _featurize_pairs(args):
    try:
        items = json.loads(Path(args.pairs).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pair list {args.pairs}: {exc}") from exc
    if not isinstance(items, list) or not items:
        raise DataError("pair list must be a non-empty JSON array")
    base = Path(args.pairs).parent
    prepared = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or not {"id", "caption", "cloud"} <= set(item):
            raise DataError(f"pair #{i} needs id, caption and cloud")
        text = data.featurize_text(item["caption"], args.dim, args.seed, item["id"])
        cloud = data.load_point_cloud(base / item["cloud"])
        pts = data.featurize_pointcloud(cloud, args.dim, args.n_sample, args.seed, item["id"])
        prepared.append((item, text, pts))
    splits = data.split_assignment(len(items), np.random.default_rng(args.seed))
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for (item, text, pts), split in zip(prepared, splits):
        tp, pp = f"features/{item['id']}.text.rmft", f"features/{item['id']}.point.rmft"
        data.write_features(text, out / tp)
        data.write_features(pts, out / pp)
        entries.append(data.PairEntry(item["id"], tp, pp, item.get("split", split), item["caption"]))
    manifest = data.PairManifest(entries, out, {"generator": "featurize", "seed": args.seed, "dim": args.dim,
                                                "n_sample": args.n_sample})
    manifest.validate()
    data.save_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(entries)} pairs to {out}")


def cmd_featurize(args):
    if args.pairs:
        _featurize_pairs(args)
        return EXIT_OK
    if args.text is not None:
        seq = data.featurize_text(args.text, args.dim, args.seed)
    else:
        seq = data.featurize_pointcloud(data.load_point_cloud(args.points), args.dim, args.n_sample, args.seed)
    data.write_features(seq, args.out)
    print(f"wrote {seq.length} x {seq.width} features to {args.out}")
    return EXIT_OK


def _progress(rec):
    parts = [f"epoch {rec['epoch']:>3}", f"eval_loss {rec['eval_loss']:.4f}"]
    if rec.get("train_loss") is not None:
        parts.append(f"train_loss {rec['train_loss']:.4f}")
    if "val.rsum_total" in rec:
        parts.append(f"val rsum {rec['val.rsum_total']:.1f}")
    log.info("  ".join(parts))


def cmd_train(args):
    run = _run_config(args)
    manifest = data.load_manifest(args.data, require_splits=("train",))
    run = _fit_dims(run, manifest)
    train_data = data.load_split(manifest, "train")
    val_data = data.load_split(manifest, "val") if manifest.split("val") else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(run.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    result = training.train(run, train_data, val_data, out, progress=_progress)
    summary = {"event": "trained", "best_epoch": result.best_epoch, "out": str(out), "seed": run.seed,
               "config_hash": run.config_hash(), "format_version": training.FORMAT_VERSION}
    _emit(summary)
    return EXIT_OK


def _report_json(reports, **extra):
    body = {name: rep.to_dict() for name, rep in reports.items()}
    return {**extra, "reports": body, "rsum_total": sum(rep.rsum for rep in reports.values()),
            "format_version": training.FORMAT_VERSION}


def cmd_eval(args):
    model, meta = checkpoint.load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.data)
    texts, points = data.load_split(manifest, args.split)
    if texts[0].width != model.config.text_dim or points[0].width != model.config.point_dim:
        raise CheckpointError(
            f"checkpoint expects feature widths ({model.config.text_dim}, {model.config.point_dim}), "
            f"split {args.split!r} has ({texts[0].width}, {points[0].width})")
    if len(texts) < 10:
        log.warning("split %r has only %d pairs; recall@k saturates for k >= %d", args.split, len(texts), len(texts))
    reports = training.evaluate(model, texts, points)
    print(format_table(reports, f"split {args.split} ({len(texts)} pairs)"))
    report = _report_json(reports, split=args.split, seed=meta.get("seed"),
                          config_hash=model.config.config_hash())
    _emit(report)
    if args.json:
        Path(args.json).write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args):
    results = diagnostics.run_gradcheck(args.seed, args.inject_bug, args.threshold)
    print(f"{'stage':<24}{'max rel error':>16}  status")
    for r in results:
        print(f"{r.stage:<24}{r.max_rel_error:>16.3e}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.stage for r in results if not r.passed]
    _emit({"seed": args.seed, "threshold": args.threshold, "stages": [r.to_dict() for r in results],
           "failed": failed, "format_version": training.FORMAT_VERSION})
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_for_compare(args):
    run = _run_config(args)
    manifest = data.load_manifest(args.data, require_splits=("train", args.split))
    run = _fit_dims(run, manifest)
    train_data = data.load_split(manifest, "train")
    val_data = data.load_split(manifest, "val") if manifest.split("val") else None
    return run, train_data, val_data, data.load_split(manifest, args.split)


def _comparison_table(rows, label):
    lines = [f"{label:<16}{'dir':<6}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'Rsum':>9}"]
    short = {"text_to_point": "t2p", "point_to_text": "p2t"}
    for name, reports in rows:
        for key, rep in reports.items():
            r = rep.r_at
            lines.append(f"{name:<16}{short[key]:<6}{r[1]:>8.2f}{r[5]:>8.2f}{r[10]:>8.2f}{rep.rsum:>9.2f}")
    return "\n".join(lines)


def _write_rows(out, name, rows, run, **extra):
    body = {"seed": run.seed, "config_hash": run.config_hash(), "format_version": training.FORMAT_VERSION,
            **extra, "rows": [{"variant": n, **_report_json(r)} for n, r in rows]}
    _emit(body)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / f"{name}.json").write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_ablate(args):
    run, train_data, val_data, test_data = _load_for_compare(args)
    rows = training.ablate(run, train_data, val_data, test_data, progress=_progress)
    print(_comparison_table(rows, "variant"))
    _write_rows(args.out, "ablation", rows, run, split=args.split)
    return EXIT_OK


def cmd_sweep(args):
    name, values = training.parse_sweep(args.sweep)
    run, train_data, val_data, test_data = _load_for_compare(args)
    variants = []
    for v in values:
        if name in ("lr", "batch_size", "epochs"):
            variants.append((f"{name}={v}", run.replace(**{name: v})))
        else:
            variants.append((f"{name}={v}", run.replace(model={name: v})))
    rows = []
    for label, variant in variants:
        result = training.train(variant, train_data, val_data, progress=_progress)
        rows.append((label, training.evaluate(result.best_model, *test_data, chunk=variant.eval_chunk)))
    print(_comparison_table(rows, name))
    _write_rows(args.out, f"sweep_{name}", rows, run, split=args.split, sweep=name)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RMARNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
