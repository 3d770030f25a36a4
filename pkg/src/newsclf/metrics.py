"""Scoring: macro/micro F1 for multiclass and multilabel predictions.

Conventions (fixed here, documented because official scorers differ):
- 0/0 precision, recall or F1 is defined as 0.
- Macro-F1 averages over the *full* label space, counting zero-support labels
  at 0, so scores stay comparable across runs.
- Single exception: if gold and predictions are both entirely empty over all
  units, micro-F1 is 1 (nothing to find, nothing found).

Whether zero-support labels belong in macro-F1 is a convention choice that
cannot be cross-checked against the official task scorer; it is pinned here.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Set
from dataclasses import dataclass
from pathlib import Path

from .corpus import LabelKind, LabelSpace, Subtask
from .errors import ValidationError

F1_MACRO = "f1_macro"
F1_MICRO = "f1_micro"


@dataclass(frozen=True)
class LabelScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    subtask: Subtask
    f1_macro: float
    f1_micro: float
    per_label: dict[str, LabelScores]
    n_instances: int

    def official(self) -> float:
        return getattr(self, official_measure(self.subtask))

    def to_json(self) -> str:
        return json.dumps(
            {
                "subtask": self.subtask.value,
                "f1_macro": self.f1_macro,
                "f1_micro": self.f1_micro,
                "n_instances": self.n_instances,
                "per_label": {
                    label: [s.precision, s.recall, s.f1, s.support]
                    for label, s in self.per_label.items()
                },
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            subtask=Subtask(raw["subtask"]),
            f1_macro=raw["f1_macro"],
            f1_micro=raw["f1_micro"],
            per_label={
                label: LabelScores(p, r, f1, support)
                for label, (p, r, f1, support) in raw["per_label"].items()
            },
            n_instances=raw["n_instances"],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def official_measure(subtask: Subtask) -> str:
    """The ranking metric of a subtask: macro-F1 for S1, micro-F1 for S2/S3."""
    return F1_MACRO if subtask is Subtask.S1 else F1_MICRO


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision == recall:
        # harmonic mean of equals is the value itself; skipping the formula
        # keeps multiclass micro-F1 bit-identical to accuracy
        return precision, recall, precision
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _check_coverage(gold: Mapping, pred: Mapping) -> None:
    missing = sorted(set(gold) - set(pred))
    if missing:
        raise ValidationError(f"predictions missing for unit ids: {missing}")


def score_multiclass(
    gold: Mapping[str, str], pred: Mapping[str, str], space: LabelSpace
) -> EvalReport:
    """Score single-label predictions with one-vs-rest confusion counts.

    Micro-F1 from pooled counts equals accuracy here. Extra predictions for
    units outside `gold` are ignored.
    """
    if space.kind is not LabelKind.MULTICLASS:
        raise ValidationError(f"{space.subtask.value} is not a multiclass subtask")
    _check_coverage(gold, pred)
    known = set(space.labels)
    tp = {label: 0 for label in space.labels}
    fp = {label: 0 for label in space.labels}
    fn = {label: 0 for label in space.labels}
    for unit, g in gold.items():
        p = pred[unit]
        if g not in known:
            raise ValidationError(f"unit {unit!r}: unknown gold label {g!r}")
        if p not in known:
            raise ValidationError(f"unit {unit!r}: unknown predicted label {p!r}")
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1

    per_label = {}
    for label in space.labels:
        precision, recall, f1 = _f1(tp[label], fp[label], fn[label])
        support = tp[label] + fn[label]
        per_label[label] = LabelScores(precision, recall, f1, support)
    macro = sum(s.f1 for s in per_label.values()) / len(space.labels)
    _, _, micro = _f1(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    return EvalReport(space.subtask, macro, micro, per_label, len(gold))


def score_multilabel(
    gold: Mapping[str, Set[str]], pred: Mapping[str, Set[str]], space: LabelSpace
) -> EvalReport:
    """Score label-set predictions; micro-F1 pools (unit, label) pair counts."""
    if space.kind is not LabelKind.MULTILABEL:
        raise ValidationError(f"{space.subtask.value} is not a multilabel subtask")
    _check_coverage(gold, pred)
    known = set(space.labels)
    tp = {label: 0 for label in space.labels}
    fp = {label: 0 for label in space.labels}
    fn = {label: 0 for label in space.labels}
    for unit, g in gold.items():
        p = pred[unit]
        for labels, name in ((g, "gold"), (p, "predicted")):
            bad = set(labels) - known
            if bad:
                raise ValidationError(
                    f"unit {unit!r}: unknown {name} label {sorted(bad)[0]!r}"
                )
        for label in g & p:
            tp[label] += 1
        for label in p - g:
            fp[label] += 1
        for label in g - p:
            fn[label] += 1

    per_label = {}
    for label in space.labels:
        precision, recall, f1 = _f1(tp[label], fp[label], fn[label])
        per_label[label] = LabelScores(precision, recall, f1, tp[label] + fn[label])
    macro = sum(s.f1 for s in per_label.values()) / len(space.labels)
    total_tp, total_fp, total_fn = sum(tp.values()), sum(fp.values()), sum(fn.values())
    if total_tp + total_fp + total_fn == 0:
        micro = 1.0  # nothing to find, nothing found
    else:
        _, _, micro = _f1(total_tp, total_fp, total_fn)
    return EvalReport(space.subtask, macro, micro, per_label, len(gold))


def oracle_score(
    gold: Mapping[str, object], pred: Mapping[str, object], space: LabelSpace
) -> tuple[float, float]:
    """Brute-force reference scorer: literal enumeration of (unit, label) pairs.

    Accepts single labels or label sets; exists solely so the production
    scorers have an independent implementation to agree with.
    """
    _check_coverage(gold, pred)

    def as_set(value) -> frozenset[str]:
        if isinstance(value, str):
            return frozenset([value])
        return frozenset(value)

    gold_sets = {unit: as_set(v) for unit, v in gold.items()}
    pred_sets = {unit: as_set(pred[unit]) for unit in gold_sets}

    pairs = [(unit, label) for unit in sorted(gold_sets) for label in space.labels]
    decided = [
        (label, label in gold_sets[unit], label in pred_sets[unit])
        for unit, label in pairs
    ]

    per_label_f1 = []
    for label in space.labels:
        tp = sum(1 for l, g, p in decided if l == label and g and p)
        fp = sum(1 for l, g, p in decided if l == label and not g and p)
        fn = sum(1 for l, g, p in decided if l == label and g and not p)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_label_f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    macro = sum(per_label_f1) / len(space.labels)

    tp = sum(1 for _, g, p in decided if g and p)
    fp = sum(1 for _, g, p in decided if not g and p)
    fn = sum(1 for _, g, p in decided if g and not p)
    if tp + fp + fn == 0:
        micro = 1.0
    else:
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        micro = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return micro, macro
