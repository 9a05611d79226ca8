"""``mailscan`` command line.

Exit codes: 0 success (for ``scan``: every input benign), 1 at least one
input judged malware, 2 usage, input or database error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .acfg import build_acfgs, dump_signature, merge_all
from .asmfront import ListingError, normalize, parse_listing, sniff_arch
from .config import ConfigError, load_config, resolve
from .detector import (
    Combinator,
    CorruptDb,
    IncompatibleDbVersion,
    Label,
    TrainingConfig,
    analyze_file,
    classify,
    load_db,
    save_db,
    train,
)
from .mail import dump_mail, translate
from .swod import PatternWeights, build_swod_signature, dump_swod

log = logging.getLogger("mailscan")

LISTING_SUFFIXES = (".lst", ".asm", ".s", ".txt")
EXIT_OK, EXIT_MALWARE, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _listings(paths: list[str]) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in LISTING_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise UsageError(f"no such file or directory: {raw}")
    return out


def _read_program(path: str, arch):
    text = Path(path).read_text(encoding="utf-8")
    return parse_listing(text, sniff_arch(text, arch or "x86"), path)


# --- subcommands -------------------------------------------------------------

def cmd_translate(args, cfg) -> int:
    p = _read_program(args.input, cfg["arch"])
    m = translate(normalize(p))
    if args.dump == "mail":
        sys.stdout.write(dump_mail(m))
        return EXIT_OK
    sig = merge_all(build_acfgs(m))
    if args.dump == "acfg":
        sys.stdout.write(dump_signature(sig))
        return EXIT_OK
    weights = load_db(args.db).pattern_weights if args.db else PatternWeights.zeros()
    sys.stdout.write(dump_swod(build_swod_signature(m, sig, weights, cfg["index_len"])))
    return EXIT_OK


def cmd_sign(args, cfg) -> int:
    a = analyze_file(args.input, cfg["arch"])
    weights = load_db(args.db).pattern_weights if args.db else PatternWeights.zeros()
    swod = build_swod_signature(a.mail, a.acfg, weights, cfg["index_len"])
    doc = {
        "path": args.input,
        "statements": len(a.mail),
        "acfgs": [
            {"label": g.function_label, "blocks": len(g), "edges": len(g.edges)}
            for g in a.acfg.acfgs
        ],
        "swod_index": list(swod.index_array),
    }
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _training_config(cfg) -> TrainingConfig:
    return TrainingConfig(
        calibrate=cfg["calibrate"],
        calibration_fraction=cfg["calibration_fraction"],
        seed=cfg["seed"],
        index_len=cfg["index_len"],
        combinator=Combinator(cfg["combinator"]),
        size_bound=cfg["size_bound"],
    )


def _with_overrides(db, cfg):
    changes = {}
    if cfg["acfg_threshold"] is not None:
        changes["acfg_threshold"] = cfg["acfg_threshold"]
    if cfg["swod_k"] is not None:
        changes["swod_k"] = cfg["swod_k"]
    return dataclasses.replace(db, **changes) if changes else db


def cmd_train(args, cfg) -> int:
    for d in (args.malware, args.benign):
        if not Path(d).is_dir():
            raise UsageError(f"not a directory: {d}")
    mal = [analyze_file(p, cfg["arch"]) for p in _listings([args.malware])]
    ben = [analyze_file(p, cfg["arch"]) for p in _listings([args.benign])]
    if not mal or not ben:
        raise UsageError("both --malware and --benign need at least one listing")
    db = _with_overrides(train(mal, ben, _training_config(cfg)), cfg)
    save_db(db, args.out)
    print(json.dumps({
        "db": args.out,
        "families": len(db.acfg_templates),
        "acfg_threshold": db.acfg_threshold,
        "swod_k": db.swod_k,
        "index_len": db.index_len,
        "combinator": db.combinator.value,
    }, sort_keys=True))
    return EXIT_OK


_WORKER_DB = None


def _init_worker(db_path, cfg):
    global _WORKER_DB
    _WORKER_DB = (_with_overrides(load_db(db_path), cfg), cfg["arch"])


def _scan_one(path: str) -> dict:
    db, arch = _WORKER_DB
    try:
        return classify(path, db, arch).to_json()
    except (ListingError, ValueError, OSError) as exc:
        return {"path": path, "error": f"{type(exc).__name__}: {exc}"}


def cmd_scan(args, cfg) -> int:
    paths = [str(p) for p in _listings(args.inputs)]
    if not paths:
        raise UsageError("no inputs to scan")
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(cfg["jobs"], initializer=_init_worker,
                                 initargs=(args.db, cfg)) as pool:
            results = list(pool.map(_scan_one, paths))
    else:
        _init_worker(args.db, cfg)
        results = [_scan_one(p) for p in paths]
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for r in results:
            if args.no_timings:
                r.pop("ms_per_stage", None)
            out.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    errors = sum("error" in r for r in results)
    malware = sum(r.get("label") == Label.MALWARE.value for r in results)
    print(f"scanned {len(results)}: {malware} malware, "
          f"{len(results) - malware - errors} benign, {errors} errors", file=sys.stderr)
    if args.report:
        _scan_report(results, Path(args.report))
    if errors:
        return EXIT_ERROR
    return EXIT_MALWARE if malware else EXIT_OK


def _scan_report(results: list[dict], out: Path) -> None:
    from .plotting import plot_scores
    out.mkdir(parents=True, exist_ok=True)
    with (out / "verdicts.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "family", "acfg_score", "swod_matched"])
        for r in results:
            if "error" in r:
                w.writerow([r["path"], "Error", "", "", ""])
            else:
                w.writerow([r["path"], r["label"], r["family"] or "", r["acfg_score"],
                            r["swod_matched"]])
    ok = [r for r in results if "error" not in r]
    plot_scores([Path(r["path"]).name for r in ok], [r["acfg_score"] for r in ok],
                [r["label"] == Label.MALWARE.value for r in ok], out / "scores.svg")


def cmd_mutate(args, cfg) -> int:
    from .mutator import ObfuscationKind, generate_variant_corpus, mutate, to_listing
    from .evalkit import LabeledDataset

    if args.corpus:
        kinds = args.kinds.split(",") if args.kinds else [k.value for k in ObfuscationKind]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
        if not args.out_dir:
            raise UsageError("--corpus needs --out-dir")
        base = LabeledDataset.from_manifest(args.corpus)
        base = LabeledDataset(tuple(i for i in base.items if i.is_malware), base.root)
        ds = generate_variant_corpus(seeds, kinds, base, args.out_dir, cfg["intensity"])
        print(json.dumps({"variants": len(ds), "out_dir": args.out_dir}))
        return EXIT_OK
    if not (args.input and args.kind):
        raise UsageError("give --in and --kind, or --corpus")
    p = _read_program(args.input, cfg["arch"])
    text = to_listing(mutate(p, args.kind, cfg["seed"], cfg["intensity"]), None)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .evalkit import LabeledDataset, run_cv, write_reports

    ds = LabeledDataset.from_manifest(args.dataset)
    m = run_cv(ds, cfg["folds"], cfg["seed"], _training_config(cfg), cfg["jobs"])
    summary = write_reports(m, args.out, plot=not args.no_plot)
    print(json.dumps({k: summary[k] for k in ("dr", "fpr", "auc", "counts")}, sort_keys=True))
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from .synth import generate_large, write_corpus

    if args.large:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path = Path(args.out) / f"large_{args.large}.lst"
        path.write_text(generate_large(cfg["seed"], args.large), encoding="utf-8")
        print(path)
        return EXIT_OK
    mal, ben = write_corpus(args.out, args.malware, args.benign, cfg["seed"])
    print(json.dumps({"malware": len(mal), "benign": len(ben),
                      "manifest": str(Path(args.out) / "manifest.csv")}))
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mailscan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mailscan {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, training=False):
        p.add_argument("--arch", choices=["x86", "arm"])
        p.add_argument("--index-len", type=int)
        if training:
            p.add_argument("--seed", type=int)
            p.add_argument("--combinator", choices=[c.value for c in Combinator])
            p.add_argument("--size-bound", type=int)
            p.add_argument("--calibration-fraction", type=float)
            p.add_argument("--no-calibrate", dest="calibrate", action="store_const", const=False)
            p.add_argument("--acfg-threshold", type=float)
            p.add_argument("--swod-k", type=int)

    p = sub.add_parser("translate", help="dump MAIL, ACFGs or the SWOD signature")
    p.add_argument("input")
    p.add_argument("--dump", choices=["mail", "acfg", "swod"], default="mail")
    p.add_argument("--db", help="take SWOD weights from this database")
    common(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("sign", help="print a JSON signature summary")
    p.add_argument("input")
    p.add_argument("--db")
    common(p)
    p.set_defaults(func=cmd_sign)

    p = sub.add_parser("train", help="build a template database")
    p.add_argument("--malware", required=True)
    p.add_argument("--benign", required=True)
    p.add_argument("--out", required=True)
    common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("scan", help="classify listings, one JSON line each")
    p.add_argument("--db", required=True)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="write JSON lines here instead of stdout")
    p.add_argument("--report", help="directory for verdicts.csv and scores.svg")
    p.add_argument("--no-timings", action="store_true")
    p.add_argument("--acfg-threshold", type=float)
    p.add_argument("--swod-k", type=int)
    common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("mutate", help="write obfuscated variants")
    p.add_argument("--in", dest="input")
    p.add_argument("--kind")
    p.add_argument("--seed", type=int)
    p.add_argument("--intensity", type=float)
    p.add_argument("--out")
    p.add_argument("--corpus", help="manifest of base listings (malware rows are used)")
    p.add_argument("--kinds", help="comma separated kinds for --corpus")
    p.add_argument("--seeds", help="comma separated seeds for --corpus")
    p.add_argument("--out-dir")
    common(p)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("eval", help="n-fold cross validation with reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", default="eval_out")
    p.add_argument("--no-plot", action="store_true")
    common(p, training=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--malware", type=int, default=30)
    p.add_argument("--benign", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--large", type=int, help="write one listing of about N instructions")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        flags = {k: v for k, v in vars(args).items() if k != "func"}
        cfg = resolve(flags, load_config())
        return args.func(args, cfg)
    except ListingError as exc:
        print(f"error: {getattr(args, 'input', '') or ''}: {exc}", file=sys.stderr)
    except (UsageError, ConfigError, CorruptDb, IncompatibleDbVersion, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
