"""Binary detection metrics, ROC/AUC and the two evaluation scenarios."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import CombinedSentence

# Sentence counts of the original splits, used only as ratios.
SCENARIO1_COUNTS = {"train": 58461, "validation": 10317, "test": 17195}
SCENARIO2_NORMAL_COUNTS = {"train": 14626, "validation": 1625, "test": 855}
DEFAULT_SEEN_FAMILIES = ("DDoS", "DoS")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_matrix(predicted, actual) -> ConfusionMatrix:
    """Counts with attack (1) as the positive class."""
    p = np.asarray(predicted).astype(int)
    a = np.asarray(actual).astype(int)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("empty prediction list")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (a == 1))),
        tn=int(np.sum((p == 0) & (a == 0))),
        fp=int(np.sum((p == 1) & (a == 0))),
        fn=int(np.sum((p == 0) & (a == 1))),
    )


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division: frozenset = frozenset()
    matrix: ConfusionMatrix | None = None

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
        }


def _ratio(num, den, name, flags):
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def _class_scores(tp, fp, fn, tag, flags):
    p = _ratio(tp, tp + fp, f"precision_{tag}", flags)
    r = _ratio(tp, tp + fn, f"recall_{tag}", flags)
    f = _ratio(2 * p * r, p + r, f"f1_{tag}", flags)
    return p, r, f


def classification_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus binary (attack-positive) and support-weighted P/R/F1.

    Any ratio with a zero denominator is reported as 0 and its name is
    added to ``zero_division``.
    """
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    flags: set[str] = set()
    acc = (cm.tp + cm.tn) / total
    p1, r1, f1 = _class_scores(cm.tp, cm.fp, cm.fn, "attack", flags)
    p0, r0, f0 = _class_scores(cm.tn, cm.fn, cm.fp, "normal", flags)
    pos, neg = cm.tp + cm.fn, cm.tn + cm.fp
    w1, w0 = pos / total, neg / total
    return MetricsReport(
        accuracy=acc,
        precision=p1,
        recall=r1,
        f1=f1,
        weighted_precision=w0 * p0 + w1 * p1,
        weighted_recall=w0 * r0 + w1 * r1,
        weighted_f1=w0 * f0 + w1 * f1,
        zero_division=frozenset(flags),
        matrix=cm,
    )


@dataclass
class RocCurve:
    thresholds: np.ndarray  # first entry is +inf, the (0, 0) corner
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, x, y in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
            writer.writerow(["auc", repr(float(self.auc))])


def roc_curve_and_auc(scores, labels) -> RocCurve:
    """ROC points at every distinct score, AUC by the trapezoid rule.

    A point is emitted after each block of tied scores, so ties contribute
    a diagonal segment; the resulting area equals the probability that a
    random positive outscores a random negative, ties counted one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last_of_block = np.r_[s[1:] != s[:-1], True]
    thr = np.r_[np.inf, s[last_of_block]]
    tpr = np.r_[0, tps[last_of_block]] / n_pos
    fpr = np.r_[0, fps[last_of_block]] / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thr, fpr, tpr, auc)


def auc_by_pairs(scores, labels) -> float:
    """Concordant-pair probability (ties 1/2); O(P*N), for checking."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes must be present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def format_metrics_report(report: MetricsReport, title: str = "") -> str:
    cm = report.matrix
    lines = []
    if title:
        lines.append(title)
    if cm is not None:
        lines += [
            "confusion matrix (rows = actual, cols = predicted)",
            f"               pred normal  pred attack",
            f"  normal       {cm.tn:>11d}  {cm.fp:>11d}",
            f"  attack       {cm.fn:>11d}  {cm.tp:>11d}",
        ]
    for k, v in report.as_dict().items():
        lines.append(f"{k:<20s} {v:.6f}")
    if report.zero_division:
        lines.append("zero_division        " + ",".join(sorted(report.zero_division)))
    return "\n".join(lines) + "\n"


def write_metrics_csv(report: MetricsReport, path, extra: dict | None = None) -> None:
    cm = report.matrix
    row = {}
    if cm is not None:
        row.update(tp=cm.tp, tn=cm.tn, fp=cm.fp, fn=cm.fn)
    row.update({k: f"{v:.6f}" for k, v in report.as_dict().items()})
    row.update(extra or {})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(row))
        writer.writerow(list(row.values()))


# ---------------------------------------------------------------------------
# scenario splits
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSplit:
    scenario: int
    train: list[CombinedSentence]
    validation: list[CombinedSentence]
    test: list[CombinedSentence]
    composition: dict[str, dict[str, int]] = field(default_factory=dict)
    held_out: tuple[str, ...] = ()

    def parts(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


def _fraction_targets(n: int, counts: dict[str, int]) -> dict[str, int]:
    total = sum(counts.values())
    test = round(n * counts["test"] / total)
    val = round(n * counts["validation"] / total)
    return {"train": n - test - val, "validation": val, "test": test}


def _allocate(target: int, sizes: list[int], frac: float, caps: list[int]) -> list[int]:
    """Largest-remainder allocation of ``target`` items across strata."""
    quotas = [n * frac for n in sizes]
    alloc = [min(int(np.floor(q)), c) for q, c in zip(quotas, caps)]
    remainders = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - np.floor(quotas[i])), i))
    short = target - sum(alloc)
    while short > 0:
        progressed = False
        for i in remainders:
            if short == 0:
                break
            if alloc[i] < caps[i]:
                alloc[i] += 1
                short -= 1
                progressed = True
        if not progressed:
            break
    return alloc


def _stratified(groups: dict[str, list[int]], targets, rng):
    cats = list(groups)
    sizes = [len(groups[c]) for c in cats]
    n = sum(sizes)
    test = _allocate(targets["test"], sizes, targets["test"] / n if n else 0, sizes)
    caps = [s - t for s, t in zip(sizes, test)]
    val = _allocate(targets["validation"], sizes, targets["validation"] / n if n else 0, caps)
    out = {"train": [], "validation": [], "test": []}
    for c, nt, nv in zip(cats, test, val):
        idx = np.asarray(groups[c])[rng.permutation(len(groups[c]))]
        out["test"].extend(idx[:nt].tolist())
        out["validation"].extend(idx[nt:nt + nv].tolist())
        out["train"].extend(idx[nt + nv:].tolist())
    return out


def build_scenario_split(sentences: Sequence[CombinedSentence], scenario: int, seed: int = 0,
                         seen_families: Sequence[str] = DEFAULT_SEEN_FAMILIES) -> ScenarioSplit:
    """Partition combined sentences into train/validation/test.

    Scenario 1 splits everything, stratified by category, at the
    58,461 : 10,317 : 17,195 ratio. Scenario 2 splits Normal and the
    ``seen_families`` at the 14,626 : 1,625 : 855 ratio and sends every
    sentence of the remaining (held-out) families to test. A sentence's
    category is that of its last member flow.
    """
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(sentences):
        groups.setdefault(s.category, []).append(i)
    if "Normal" not in groups:
        raise ValueError("required category absent: Normal")
    rng = np.random.default_rng(seed)

    held_out: tuple[str, ...] = ()
    if scenario == 1:
        if len(groups) < 2:
            raise ValueError("required category absent: no attack family present")
        idx = _stratified(groups, _fraction_targets(len(sentences), SCENARIO1_COUNTS), rng)
    else:
        seen = ("Normal", *seen_families)
        missing = [c for c in seen if c not in groups]
        if missing:
            raise ValueError(f"required category absent: {missing}")
        held_out = tuple(c for c in groups if c not in seen)
        if not held_out:
            raise ValueError("required category absent: no held-out attack family")
        seen_groups = {c: groups[c] for c in groups if c in seen}
        n_seen = sum(len(v) for v in seen_groups.values())
        idx = _stratified(seen_groups, _fraction_targets(n_seen, SCENARIO2_NORMAL_COUNTS), rng)
        for c in held_out:
            idx["test"].extend(groups[c])

    parts = {k: [sentences[i] for i in sorted(v)] for k, v in idx.items()}
    composition = {k: dict(sorted(Counter(s.category for s in v).items())) for k, v in parts.items()}
    return ScenarioSplit(scenario, parts["train"], parts["validation"], parts["test"],
                         composition, held_out)


def write_composition(split: ScenarioSplit, path) -> None:
    cats = sorted({c for comp in split.composition.values() for c in comp})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", *cats, "total"])
        for name, comp in split.composition.items():
            writer.writerow([name, *[comp.get(c, 0) for c in cats], sum(comp.values())])
