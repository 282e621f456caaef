"""Evaluation protocol: position, per-word, and weighted word metrics.

Position metrics treat tagging as binary (FP anywhere vs no FP); per-word
metrics are one-vs-rest per FP word, where a true positive requires the
predicted word to equal the gold word at that slot. Any metric with a
zero denominator (a "missed score") is reported as 0.0, and fold averages
are plain arithmetic means of fold reports.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import NO_FP, AnnotatedCorpus, FpVocabulary
from .nn import PrecomputedEmbeddings, TaggerModel, forward, embed, sentence_key
from .train import Checkpoint, SentenceItem, VocabularyMismatchError, corpus_items, sequence_ranges

TagSeq = Sequence[int]


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f: float
    specificity: float

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f": self.f,
            "specificity": self.specificity,
        }


ZERO_METRICS = Metrics(0.0, 0.0, 0.0, 0.0)


def _ratio(num: int | float, den: int | float) -> float:
    """num / den with the missed-score rule: 0.0 on a zero denominator."""
    return num / den if den else 0.0


def _from_counts(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    # F as 2TP/(2TP+FP+FN) is the harmonic mean of precision and recall,
    # computed as a single integer ratio.
    return Metrics(
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        f=_ratio(2 * tp, 2 * tp + fp + fn),
        specificity=_ratio(tn, tn + fp),
    )


@dataclass
class ConfusionCounts:
    """One-vs-rest counts per class plus binary position counts.

    per_class[c] = (TP, FP, FN, TN) for class c over all slots; class 0
    is the no-FP class. binary holds the same four counts for the
    FP-vs-no-FP position task.
    """

    num_classes: int
    per_class: np.ndarray
    binary: np.ndarray
    slots: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionCounts":
        return cls(num_classes, np.zeros((num_classes, 4), np.int64), np.zeros(4, np.int64))

    def add_sequences(self, pred: TagSeq, gold: TagSeq) -> None:
        if len(pred) != len(gold):
            raise ValueError(f"length mismatch: {len(pred)} predicted vs {len(gold)} gold tags")
        p = np.asarray(pred, dtype=np.int64)
        g = np.asarray(gold, dtype=np.int64)
        n = len(p)
        pred_counts = np.bincount(p, minlength=self.num_classes)
        gold_counts = np.bincount(g, minlength=self.num_classes)
        agree = np.bincount(p[p == g], minlength=self.num_classes)
        tp = agree
        fp = pred_counts - agree
        fn = gold_counts - agree
        tn = n - tp - fp - fn
        self.per_class += np.stack([tp, fp, fn, tn], axis=1)
        pb = p != NO_FP
        gb = g != NO_FP
        btp = int(np.sum(pb & gb))
        bfp = int(np.sum(pb & ~gb))
        bfn = int(np.sum(~pb & gb))
        self.binary += np.array([btp, bfp, bfn, n - btp - bfp - bfn], np.int64)
        self.slots += n

    def merge(self, other: "ConfusionCounts") -> None:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts over different tag spaces")
        self.per_class += other.per_class
        self.binary += other.binary
        self.slots += other.slots

    def position_metrics(self) -> Metrics:
        return _from_counts(*(int(x) for x in self.binary))

    def class_metrics(self, c: int) -> Metrics:
        return _from_counts(*(int(x) for x in self.per_class[c]))


def _check_aligned(pred: Sequence[TagSeq], gold: Sequence[TagSeq]) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences vs {len(gold)} gold sequences")


def position_metrics(pred: Sequence[TagSeq], gold: Sequence[TagSeq]) -> Metrics:
    """Binary FP-position precision/recall/F/specificity over aligned slots."""
    _check_aligned(pred, gold)
    counts = ConfusionCounts.empty(1 + max((max(s, default=0) for s in list(pred) + list(gold)), default=0))
    for p, g in zip(pred, gold):
        counts.add_sequences(p, g)
    return counts.position_metrics()


def per_word_metrics(
    pred: Sequence[TagSeq], gold: Sequence[TagSeq], vocab: FpVocabulary
) -> dict[str, Metrics]:
    """One-vs-rest metrics for every vocabulary word (missed scores are 0)."""
    _check_aligned(pred, gold)
    counts = ConfusionCounts.empty(vocab.num_classes)
    for p, g in zip(pred, gold):
        counts.add_sequences(p, g)
    return {w: counts.class_metrics(t + 1) for t, w in enumerate(vocab.words)}


def weighted_word_average(
    per_word: Mapping[str, Metrics], gold_word_counts: Mapping[str, int]
) -> tuple[Metrics, bool]:
    """Gold-frequency-weighted mean of per-word metrics.

    Returns (metrics, no_gold_fps). When there are no gold FPs at all the
    metrics are 0.0 and the flag is set.
    """
    total = sum(gold_word_counts.get(w, 0) for w in per_word)
    if total == 0:
        return ZERO_METRICS, True
    sums = {"precision": 0.0, "recall": 0.0, "f": 0.0, "specificity": 0.0}
    for w, m in per_word.items():
        c = gold_word_counts.get(w, 0)
        if c:
            for k, v in m.as_dict().items():
                sums[k] += c * v
    return Metrics(**{k: v / total for k, v in sums.items()}), False


def count_gold_words(gold: Sequence[TagSeq], vocab: FpVocabulary) -> dict[str, int]:
    counts = dict.fromkeys(vocab.words, 0)
    for seq in gold:
        for t in seq:
            if t != NO_FP:
                counts[vocab.words[t - 1]] += 1
    return counts


@dataclass
class MetricsReport:
    position: Metrics
    per_word: dict[str, Metrics]
    word_weighted: Metrics
    gold_word_counts: dict[str, int]
    warnings: tuple[str, ...] = ()
    counts: ConfusionCounts | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "position": self.position.as_dict(),
            "per_word": {w: m.as_dict() for w, m in self.per_word.items()},
            "word_weighted": self.word_weighted.as_dict(),
            "gold_word_counts": dict(self.gold_word_counts),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def evaluate_tags(
    pred: Sequence[TagSeq], gold: Sequence[TagSeq], vocab: FpVocabulary
) -> MetricsReport:
    """Full report from aligned predicted and gold tag sequences."""
    _check_aligned(pred, gold)
    counts = ConfusionCounts.empty(vocab.num_classes)
    for p, g in zip(pred, gold):
        counts.add_sequences(p, g)
    per_word = {w: counts.class_metrics(t + 1) for t, w in enumerate(vocab.words)}
    gold_counts = count_gold_words(gold, vocab)
    weighted, no_gold = weighted_word_average(per_word, gold_counts)
    warnings = ("no gold FPs in evaluation slice",) if no_gold else ()
    return MetricsReport(
        position=counts.position_metrics(),
        per_word=per_word,
        word_weighted=weighted,
        gold_word_counts=gold_counts,
        warnings=warnings,
        counts=counts,
    )


def predict_item_tags(
    model: TaggerModel, items: Sequence[SentenceItem], unit: str = "sentence"
) -> list[list[int]]:
    """Predicted tags for each item, honoring the sequence unit."""
    out = []
    for sid, idx, sentence in items:
        emb = embed(model.embedding, sentence, sentence_key(sid, idx))
        tags: list[int] = []
        for a, b in sequence_ranges(sentence, unit):
            logits = forward(model, emb[a:b])
            tags.extend(int(t) for t in np.argmax(logits, axis=1))
        out.append(tags)
    return out


def _model_unit(ckpt: Checkpoint, unit: str | None) -> str:
    if unit is not None:
        return unit
    cfg = ckpt.manifest.get("train_config") or {}
    return cfg.get("sequence_unit", "sentence")


def evaluate_model(
    ckpt: Checkpoint,
    corpus: AnnotatedCorpus,
    items: Sequence[SentenceItem] | None = None,
    unit: str | None = None,
    embeddings: PrecomputedEmbeddings | None = None,
) -> MetricsReport:
    """Evaluate a checkpoint on a corpus slice (default: every sentence)."""
    if ckpt.vocabulary.words != corpus.vocabulary.words:
        raise VocabularyMismatchError("checkpoint vocabulary does not match the corpus")
    model = ckpt.to_model(embeddings)
    if items is None:
        items = corpus_items(corpus)
    pred = predict_item_tags(model, items, _model_unit(ckpt, unit))
    gold = [list(s.fp_tags) for _, _, s in items]
    return evaluate_tags(pred, gold, corpus.vocabulary)


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic mean over fold reports (metrics averaged, counts summed)."""
    if not reports:
        raise ValueError("no reports to average")

    def mean_metrics(values: Sequence[Metrics]) -> Metrics:
        n = len(values)
        return Metrics(
            precision=sum(m.precision for m in values) / n,
            recall=sum(m.recall for m in values) / n,
            f=sum(m.f for m in values) / n,
            specificity=sum(m.specificity for m in values) / n,
        )

    words: list[str] = []
    for r in reports:
        for w in r.per_word:
            if w not in words:
                words.append(w)
    per_word = {
        w: mean_metrics([r.per_word.get(w, ZERO_METRICS) for r in reports]) for w in words
    }
    gold_counts = {w: sum(r.gold_word_counts.get(w, 0) for r in reports) for w in words}
    warnings = tuple(w for r in reports for w in r.warnings)
    return MetricsReport(
        position=mean_metrics([r.position for r in reports]),
        per_word=per_word,
        word_weighted=mean_metrics([r.word_weighted for r in reports]),
        gold_word_counts=gold_counts,
        warnings=warnings,
    )


def per_fp_breakdown(report: MetricsReport) -> list[tuple[str, Metrics, int]]:
    """Per-word rows ordered by descending gold frequency, ties lexicographic."""
    rows = [
        (w, m, report.gold_word_counts.get(w, 0)) for w, m in report.per_word.items()
    ]
    rows.sort(key=lambda r: (-r[2], r[0]))
    return rows


def per_speaker_reports(
    ckpt: Checkpoint,
    corpus: AnnotatedCorpus,
    items: Sequence[SentenceItem] | None = None,
    unit: str | None = None,
    embeddings: PrecomputedEmbeddings | None = None,
) -> dict[str, MetricsReport]:
    """One full report per speaker over the given slice."""
    if ckpt.vocabulary.words != corpus.vocabulary.words:
        raise VocabularyMismatchError("checkpoint vocabulary does not match the corpus")
    model = ckpt.to_model(embeddings)
    if items is None:
        items = corpus_items(corpus)
    resolved_unit = _model_unit(ckpt, unit)
    by_speaker: dict[str, list[SentenceItem]] = {}
    for item in items:
        by_speaker.setdefault(item[0], []).append(item)
    out = {}
    for sid in sorted(by_speaker):
        speaker_items = by_speaker[sid]
        pred = predict_item_tags(model, speaker_items, resolved_unit)
        gold = [list(s.fp_tags) for _, _, s in speaker_items]
        out[sid] = evaluate_tags(pred, gold, corpus.vocabulary)
    return out


def per_speaker_distribution(
    ckpt: Checkpoint,
    corpus: AnnotatedCorpus,
    items: Sequence[SentenceItem] | None = None,
    unit: str | None = None,
    embeddings: PrecomputedEmbeddings | None = None,
) -> dict[str, dict[str, float]]:
    """Position F and word-weighted F per speaker, for external plotting."""
    reports = per_speaker_reports(ckpt, corpus, items, unit, embeddings)
    return {
        sid: {"position_f": r.position.f, "word_weighted_f": r.word_weighted.f}
        for sid, r in reports.items()
    }


CSV_COLUMNS = ("key", "precision", "recall", "f", "specificity", "gold_count")


def _write_csv(path: Path, rows: list[tuple[str, Metrics, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for key, m, count in rows:
            writer.writerow([key, m.precision, m.recall, m.f, m.specificity, count])


def write_per_fp_csv(report: MetricsReport, path: str | Path) -> None:
    _write_csv(Path(path), per_fp_breakdown(report))


def write_per_speaker_csvs(
    speaker_reports: Mapping[str, MetricsReport], position_path: str | Path, word_path: str | Path
) -> None:
    """Two per-speaker CSVs: position metrics and weighted word metrics."""
    position_rows = []
    word_rows = []
    for sid in sorted(speaker_reports):
        r = speaker_reports[sid]
        n_gold = sum(r.gold_word_counts.values())
        position_rows.append((sid, r.position, n_gold))
        word_rows.append((sid, r.word_weighted, n_gold))
    _write_csv(Path(position_path), position_rows)
    _write_csv(Path(word_path), word_rows)


def format_report(report: MetricsReport) -> str:
    """Fixed-width table for terminal output."""
    lines = [
        f"{'':14s}{'precision':>10s}{'recall':>10s}{'F':>10s}{'specificity':>12s}",
        "position      " + _fmt_metrics(report.position),
        "word-weighted " + _fmt_metrics(report.word_weighted),
    ]
    for w, m, count in per_fp_breakdown(report):
        lines.append(f"  {w:12s}" + _fmt_metrics(m) + f"  (gold {count})")
    for warning in report.warnings:
        lines.append(f"warning: {warning}")
    return "\n".join(lines)


def _fmt_metrics(m: Metrics) -> str:
    return f"{m.precision:10.4f}{m.recall:10.4f}{m.f:10.4f}{m.specificity:12.4f}"
