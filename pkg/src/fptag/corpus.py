"""Annotated corpus data model and JSONL serialization.

A corpus maps speakers to sentences. A sentence is an ordered list of
breath groups of morphemes together with one filled-pause tag per slot:
slot i sits immediately before morpheme i (in sentence-flattened order)
and one extra sentinel slot marks the sentence end, so a sentence with n
morphemes has n + 1 slots.

Tags are small integers: ``NO_FP`` (0) means no filled pause, tag k
(k >= 1) means the k-th word of the corpus vocabulary is inserted at
that slot.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

NO_FP = 0

CORPUS_FORMAT = "fp-corpus"
CORPUS_VERSION = 1

#: The default filled-pause vocabulary (romanized), most frequent first.
DEFAULT_FP_WORDS = (
    "ee", "e", "ma", "ano", "anoo", "maa", "eeto",
    "a", "aa", "n", "nn", "etto", "aanoo",
)


class CorpusFormatError(ValueError):
    """Raised when a corpus file or in-memory corpus violates the schema."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PositionCategory(Enum):
    """Structural category of a slot within its sentence.

    The order of members is the canonical order of position-rate vectors.
    """

    SENTENCE_HEAD = "sentence_head"
    BREATH_GROUP_BOUNDARY = "breath_group_boundary"
    BREATH_GROUP_MIDDLE = "breath_group_middle"
    SENTENCE_END = "sentence_end"


POSITION_CATEGORIES = tuple(PositionCategory)


def _check_surface(surface: object, line: int | None = None) -> str:
    if not isinstance(surface, str) or not surface:
        raise CorpusFormatError(f"morpheme surface must be a non-empty string, got {surface!r}", line)
    for ch in surface:
        if ch.isspace() or unicodedata.category(ch) == "Cc":
            raise CorpusFormatError(
                f"morpheme surface {surface!r} contains whitespace or control characters", line
            )
    return surface


@dataclass(frozen=True)
class FpVocabulary:
    """Ordered list of filled-pause words; class 0 (no FP) is implicit."""

    words: tuple[str, ...]

    def __post_init__(self):
        seen = set()
        for w in self.words:
            _check_surface(w)
            if w in seen:
                raise CorpusFormatError(f"duplicate FP word {w!r} in vocabulary")
            seen.add(w)

    @property
    def num_classes(self) -> int:
        """Size of the tag space: the FP words plus the no-FP class."""
        return len(self.words) + 1

    def tag_of(self, word: str) -> int:
        return self.words.index(word) + 1

    def word_of(self, tag: int) -> str | None:
        """Word for a tag, or None for NO_FP."""
        if tag == NO_FP:
            return None
        return self.words[tag - 1]


DEFAULT_VOCABULARY = FpVocabulary(DEFAULT_FP_WORDS)


@dataclass(frozen=True)
class Sentence:
    """Breath groups of morphemes plus one FP tag per slot."""

    breath_groups: tuple[tuple[str, ...], ...]
    fp_tags: tuple[int, ...]

    def __post_init__(self):
        if not self.breath_groups:
            raise CorpusFormatError("sentence has no breath groups")
        for bg in self.breath_groups:
            if not bg:
                raise CorpusFormatError("empty breath group")
            for m in bg:
                _check_surface(m)
        n = sum(len(bg) for bg in self.breath_groups)
        if len(self.fp_tags) != n + 1:
            raise CorpusFormatError(
                f"tag/slot count mismatch: {n} morphemes need {n + 1} tags, got {len(self.fp_tags)}"
            )
        for t in self.fp_tags:
            if not isinstance(t, int) or t < 0:
                raise CorpusFormatError(f"invalid FP tag {t!r}")

    @property
    def morphemes(self) -> tuple[str, ...]:
        return tuple(m for bg in self.breath_groups for m in bg)

    @property
    def slot_count(self) -> int:
        return len(self.fp_tags)


@dataclass(frozen=True)
class AnnotatedCorpus:
    """Immutable container of speakers, their sentences, and the tag space."""

    vocabulary: FpVocabulary
    speakers: dict[str, tuple[Sentence, ...]] = field(default_factory=dict)

    def __post_init__(self):
        limit = self.vocabulary.num_classes
        for sid, sentences in self.speakers.items():
            if not isinstance(sid, str) or not sid:
                raise CorpusFormatError(f"invalid speaker id {sid!r}")
            for s in sentences:
                for t in s.fp_tags:
                    if t >= limit:
                        raise CorpusFormatError(
                            f"speaker {sid!r}: FP tag {t} out of range for vocabulary of "
                            f"{len(self.vocabulary.words)} words"
                        )

    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)

    def sentences(self, speaker_id: str) -> tuple[Sentence, ...]:
        if speaker_id not in self.speakers:
            raise KeyError(f"unknown speaker {speaker_id!r}")
        return self.speakers[speaker_id]

    def iter_sentences(self) -> Iterator[tuple[str, int, Sentence]]:
        """Yield (speaker_id, sentence_index, sentence) in canonical order."""
        for sid in self.speaker_ids():
            for i, s in enumerate(self.speakers[sid]):
                yield sid, i, s

    @property
    def num_sentences(self) -> int:
        return sum(len(s) for s in self.speakers.values())

    @property
    def num_slots(self) -> int:
        return sum(s.slot_count for _, _, s in self.iter_sentences())

    @property
    def num_fps(self) -> int:
        return sum(1 for _, _, s in self.iter_sentences() for t in s.fp_tags if t != NO_FP)


def slot_positions(sentence: Sentence) -> list[PositionCategory]:
    """Position category of every slot, one per slot in order.

    Slot 0 is the sentence head and the final sentinel slot is the
    sentence end; the slot before the first morpheme of each later breath
    group is a breath-group boundary; all remaining slots are middles.
    """
    cats: list[PositionCategory] = []
    for bg_index, bg in enumerate(sentence.breath_groups):
        for m_index in range(len(bg)):
            if not cats:
                cats.append(PositionCategory.SENTENCE_HEAD)
            elif m_index == 0 and bg_index > 0:
                cats.append(PositionCategory.BREATH_GROUP_BOUNDARY)
            else:
                cats.append(PositionCategory.BREATH_GROUP_MIDDLE)
    cats.append(PositionCategory.SENTENCE_END)
    return cats


def build_fp_vocabulary(
    corpus: AnnotatedCorpus, speaker_fraction_threshold: float = 0.20
) -> FpVocabulary:
    """Select FP words used by at least the given fraction of speakers.

    A word is kept when (speakers using it at least once) / (all speakers)
    reaches the threshold. Kept words are ordered by descending total
    corpus frequency, ties broken lexicographically, so class indices are
    reproducible.
    """
    if not corpus.speakers:
        raise CorpusFormatError("cannot build a vocabulary from an empty corpus")
    if not 0.0 <= speaker_fraction_threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {speaker_fraction_threshold}")
    words = corpus.vocabulary.words
    total = {w: 0 for w in words}
    users: dict[str, set[str]] = {w: set() for w in words}
    for sid, _, sentence in corpus.iter_sentences():
        for t in sentence.fp_tags:
            if t != NO_FP:
                w = words[t - 1]
                total[w] += 1
                users[w].add(sid)
    n_speakers = len(corpus.speakers)
    kept = [w for w in words if len(users[w]) / n_speakers >= speaker_fraction_threshold]
    kept.sort(key=lambda w: (-total[w], w))
    return FpVocabulary(tuple(kept))


def restrict_corpus(corpus: AnnotatedCorpus, vocab: FpVocabulary) -> AnnotatedCorpus:
    """Re-tag a corpus against a new vocabulary.

    Tags whose word is missing from the new vocabulary fall back to NO_FP
    (lossy by design: the tag space is exactly the vocabulary).
    """
    tag_map = {NO_FP: NO_FP}
    for old_tag in range(1, corpus.vocabulary.num_classes):
        w = corpus.vocabulary.words[old_tag - 1]
        tag_map[old_tag] = vocab.tag_of(w) if w in vocab.words else NO_FP
    speakers = {
        sid: tuple(
            Sentence(s.breath_groups, tuple(tag_map[t] for t in s.fp_tags))
            for s in sents
        )
        for sid, sents in corpus.speakers.items()
    }
    return AnnotatedCorpus(vocab, speakers)


def _parse_header(line: str) -> FpVocabulary:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"malformed JSON header: {e}", line=1) from e
    if not isinstance(obj, dict):
        raise CorpusFormatError("header must be a JSON object", line=1)
    extra = set(obj) - {"format", "version", "fp_vocabulary"}
    if extra:
        raise CorpusFormatError(f"unknown header fields {sorted(extra)}", line=1)
    if obj.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(f"unsupported format {obj.get('format')!r}", line=1)
    if obj.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported version {obj.get('version')!r}", line=1)
    vocab_words = obj.get("fp_vocabulary")
    if not isinstance(vocab_words, list) or not all(isinstance(w, str) for w in vocab_words):
        raise CorpusFormatError("fp_vocabulary must be a list of strings", line=1)
    return FpVocabulary(tuple(vocab_words))


def _parse_sentence_line(
    obj: dict, vocab: FpVocabulary, line: int, require_tags: bool = True
) -> tuple[str, Sentence]:
    expected = {"speaker", "breath_groups"} | ({"fp_tags"} if require_tags else set())
    extra = set(obj) - expected
    if extra:
        raise CorpusFormatError(f"unknown fields {sorted(extra)}", line)
    missing = expected - set(obj)
    if missing:
        raise CorpusFormatError(f"missing fields {sorted(missing)}", line)
    speaker = obj["speaker"]
    if not isinstance(speaker, str) or not speaker:
        raise CorpusFormatError(f"speaker id must be a non-empty string, got {speaker!r}", line)
    bgs = obj["breath_groups"]
    if not isinstance(bgs, list) or not bgs or not all(isinstance(bg, list) for bg in bgs):
        raise CorpusFormatError("breath_groups must be a non-empty list of lists", line)
    breath_groups = tuple(tuple(_check_surface(m, line) for m in bg) for bg in bgs)
    n = sum(len(bg) for bg in breath_groups)
    if require_tags:
        raw_tags = obj["fp_tags"]
        if not isinstance(raw_tags, list):
            raise CorpusFormatError("fp_tags must be a list", line)
        if len(raw_tags) != n + 1:
            raise CorpusFormatError(
                f"tag/slot count mismatch: {n} morphemes need {n + 1} tags, got {len(raw_tags)}",
                line,
            )
        tags = []
        for raw in raw_tags:
            if raw is None:
                tags.append(NO_FP)
            elif isinstance(raw, str):
                if raw not in vocab.words:
                    raise CorpusFormatError(f"FP word {raw!r} not in declared vocabulary", line)
                tags.append(vocab.tag_of(raw))
            else:
                raise CorpusFormatError(f"fp_tags entries must be null or a string, got {raw!r}", line)
    else:
        tags = [NO_FP] * (n + 1)
    try:
        sentence = Sentence(breath_groups, tuple(tags))
    except CorpusFormatError as e:
        raise CorpusFormatError(str(e), line) from e
    return speaker, sentence


def _parse_lines(path: Path, require_tags: bool) -> AnnotatedCorpus:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusFormatError(f"cannot read {path}: {e}") from e
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError("empty file: missing header line", line=1)
    vocab = _parse_header(lines[0])
    speakers: dict[str, list[Sentence]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"malformed JSON line: {e}", lineno) from e
        if not isinstance(obj, dict):
            raise CorpusFormatError("sentence line must be a JSON object", lineno)
        speaker, sentence = _parse_sentence_line(obj, vocab, lineno, require_tags)
        speakers.setdefault(speaker, []).append(sentence)
    return AnnotatedCorpus(vocab, {sid: tuple(s) for sid, s in speakers.items()})


def parse_corpus(path: str | Path) -> AnnotatedCorpus:
    """Parse a corpus file (strict: unknown fields and bad tags rejected)."""
    return _parse_lines(Path(path), require_tags=True)


def parse_fluent(path: str | Path) -> AnnotatedCorpus:
    """Parse a fluent (untagged) corpus file; every slot gets NO_FP."""
    return _parse_lines(Path(path), require_tags=False)


def write_corpus(corpus: AnnotatedCorpus, path: str | Path) -> None:
    """Write a corpus in canonical form.

    One sentence per line, keys in fixed order, sentences grouped by
    speaker in lexicographic speaker-id order: equal corpora produce
    byte-identical files.
    """
    lines = [
        json.dumps(
            {"format": CORPUS_FORMAT, "version": CORPUS_VERSION,
             "fp_vocabulary": list(corpus.vocabulary.words)},
            ensure_ascii=False,
        )
    ]
    for sid in corpus.speaker_ids():
        for sentence in corpus.speakers[sid]:
            lines.append(
                json.dumps(
                    {
                        "speaker": sid,
                        "breath_groups": [list(bg) for bg in sentence.breath_groups],
                        "fp_tags": [corpus.vocabulary.word_of(t) for t in sentence.fp_tags],
                    },
                    ensure_ascii=False,
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
