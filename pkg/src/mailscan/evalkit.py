"""Cross validation, detection metrics, ROC/AUC and report files."""

from __future__ import annotations

import csv
import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .detector import Analysis, Label, TrainingConfig, Verdict, analyze_file, classify_analysis, train


class TooFewItems(ValueError):
    pass


class SingleClass(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    path: str
    label: Label
    family: str | None = None
    arch: str | None = None

    @property
    def is_malware(self) -> bool:
        return self.label is Label.MALWARE


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[Item, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        paths = [i.path for i in self.items]
        if len(set(paths)) != len(paths):
            raise ValueError("dataset paths must be unique")

    def __len__(self) -> int:
        return len(self.items)

    def resolve(self, item: Item) -> Path:
        p = Path(item.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    @classmethod
    def from_manifest(cls, path: str | Path) -> "LabeledDataset":
        """Read ``path,label,family[,arch]`` rows; paths are relative to the manifest."""
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        items = tuple(
            Item(r["path"], Label(r["label"]), r.get("family") or None, r.get("arch") or None)
            for r in rows
        )
        return cls(items, path.parent)

    def write_manifest(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "family", "arch"])
            for i in self.items:
                w.writerow([i.path, i.label.value, i.family or "", i.arch or ""])


@dataclass(frozen=True)
class Metrics:
    tp: int
    fn: int
    fp: int
    tn: int
    per_fold: tuple["Metrics", ...] = ()
    scores: tuple[tuple[float, bool], ...] = field(default=(), compare=False)

    @property
    def dr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fn, self.fp, self.tn

    @classmethod
    def from_verdicts(cls, items: Sequence[Item], verdicts: Sequence[Verdict]) -> "Metrics":
        tp = fn = fp = tn = 0
        for item, v in zip(items, verdicts):
            flagged = v.label is Label.MALWARE
            if item.is_malware:
                tp, fn = tp + flagged, fn + (not flagged)
            else:
                fp, tn = fp + flagged, tn + (not flagged)
        scores = tuple((v.score, i.is_malware) for i, v in zip(items, verdicts))
        return cls(tp, fn, fp, tn, (), scores)

    @classmethod
    def pooled(cls, folds: Sequence["Metrics"]) -> "Metrics":
        return cls(
            sum(m.tp for m in folds), sum(m.fn for m in folds),
            sum(m.fp for m in folds), sum(m.tn for m in folds),
            tuple(folds), tuple(s for m in folds for s in m.scores),
        )


def nfold_split(d: LabeledDataset, n: int, seed: int) -> list[tuple[Item, ...]]:
    """Stratified, seeded partition into ``n`` folds whose sizes differ by at most one.

    Items are sorted by path before shuffling so input order does not matter.
    Each label is dealt round robin, the second label continuing where the
    first stopped.
    """
    if n < 2:
        raise TooFewItems("need at least two folds")
    if len(d.items) < n:
        raise TooFewItems(f"{len(d.items)} items cannot fill {n} folds")
    rng = random.Random(seed)
    folds: list[list[Item]] = [[] for _ in range(n)]
    slot = 0
    for label in (Label.MALWARE, Label.BENIGN):
        group = sorted((i for i in d.items if i.label is label), key=lambda i: i.path)
        rng.shuffle(group)
        for item in group:
            folds[slot % n].append(item)
            slot += 1
    return [tuple(sorted(f, key=lambda i: i.path)) for f in folds]


def _analyze(d: LabeledDataset, item: Item) -> Analysis:
    return analyze_file(d.resolve(item), item.arch, item.family)


def _run_fold(args) -> Metrics:
    train_items, test_items, cache, cfg = args
    mal = [cache[i.path] for i in train_items if i.is_malware]
    ben = [cache[i.path] for i in train_items if not i.is_malware]
    db = train(mal, ben, cfg)
    verdicts = [classify_analysis(cache[i.path], db) for i in test_items]
    return Metrics.from_verdicts(test_items, verdicts)


def run_cv(d: LabeledDataset, n: int, seed: int, cfg: TrainingConfig = TrainingConfig(),
           jobs: int = 1) -> Metrics:
    """Train on n-1 folds, classify the held-out fold, pool the counts."""
    folds = nfold_split(d, n, seed)
    cache = {i.path: _analyze(d, i) for i in sorted(d.items, key=lambda i: i.path)}
    work = []
    for k, test in enumerate(folds):
        rest = tuple(i for j, f in enumerate(folds) if j != k for i in f)
        work.append((rest, test, {i.path: cache[i.path] for i in d.items}, cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_fold = list(pool.map(_run_fold, work))
    else:
        per_fold = [_run_fold(w) for w in work]
    return Metrics.pooled(per_fold)


def roc_and_auc(scores: Sequence[tuple[float, bool]]) -> tuple[list[tuple[float, float]], float]:
    """ROC points ``(fpr, dr)`` from a sweep over distinct scores, and trapezoidal AUC.

    Items with equal scores enter the curve together as one step.
    """
    pos = sum(1 for _, y in scores if y)
    neg = len(scores) - pos
    if pos == 0 or neg == 0:
        raise SingleClass("ROC needs both malware and benign scores")
    points = [(0.0, 0.0)]
    tp = fp = 0
    ordered = sorted(scores, key=lambda x: -x[0])
    i = 0
    while i < len(ordered):
        s = ordered[i][0]
        while i < len(ordered) and ordered[i][0] == s:
            tp += ordered[i][1]
            fp += not ordered[i][1]
            i += 1
        points.append((fp / neg, tp / pos))
    auc = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(points, points[1:]))
    return points, auc


def write_reports(m: Metrics, out_dir: str | Path, plot: bool = True) -> dict:
    """``folds.csv``, ``summary.json`` and, with both labels present, ``roc.svg``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "folds.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "tp", "fn", "fp", "tn", "dr", "fpr"])
        for k, f in enumerate(m.per_fold or (m,)):
            w.writerow([k, f.tp, f.fn, f.fp, f.tn, f"{f.dr:.6f}", f"{f.fpr:.6f}"])
        w.writerow(["all", m.tp, m.fn, m.fp, m.tn, f"{m.dr:.6f}", f"{m.fpr:.6f}"])
    summary = {
        "score_source": "ACFG similarity (best template)",
        "dr": round(m.dr, 6),
        "fpr": round(m.fpr, 6),
        "counts": {"tp": m.tp, "fn": m.fn, "fp": m.fp, "tn": m.tn},
        "folds": len(m.per_fold),
        "auc": None,
        "roc": [],
    }
    try:
        points, auc = roc_and_auc(m.scores)
    except SingleClass:
        points, auc = [], None
    summary["auc"] = None if auc is None else round(auc, 6)
    summary["roc"] = [[round(x, 6), round(y, 6)] for x, y in points]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if plot and points:
        from .plotting import plot_roc
        plot_roc(points, auc, out / "roc.svg")
    return summary
