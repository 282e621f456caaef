"""Synthetic corpus generation for desk-scale experiments.

Speakers are drawn from archetypes. An archetype fixes the FP word
distribution, a per-position insertion probability, and the sentence
shape distributions. Generation is deterministic given a seed, and each
speaker's empirical word/position rates converge to the archetype
parameters as the sentence count grows.

The tagger gets a learnable signal because the morpheme following an
inserted FP is drawn preferentially from a small cue set associated with
that FP word, so FP identity and neighboring lexicon items are
statistically coupled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import (
    NO_FP,
    AnnotatedCorpus,
    FpVocabulary,
    PositionCategory,
    Sentence,
    _check_surface,
)

PROB_TOL = 1e-9

#: Fixed lexicon of fluent-token surfaces; cue sets are slices of it.
DEFAULT_LEXICON = (
    "kore", "sore", "are", "wa", "ga", "wo", "ni", "de", "to", "mo",
    "desu", "masu", "shita", "suru", "iru", "aru", "nai", "koto", "mono",
    "hito", "toki", "basho", "hanashi", "kangae",
)

#: Given an inserted FP, probability that the next morpheme comes from
#: the FP word's cue set rather than the whole lexicon.
CUE_STRENGTH = 0.75
CUE_SET_SIZE = 2


class SynthSpecError(ValueError):
    """Raised when a synthesis spec is inconsistent."""


def _check_prob_vector(name: str, vec: Sequence[float]) -> tuple[float, ...]:
    vec = tuple(float(p) for p in vec)
    if not vec:
        raise SynthSpecError(f"{name}: empty probability vector")
    if any(p < 0.0 for p in vec):
        raise SynthSpecError(f"{name}: negative probability")
    if abs(sum(vec) - 1.0) > PROB_TOL:
        raise SynthSpecError(f"{name}: probabilities sum to {sum(vec)!r}, not 1")
    return vec


@dataclass(frozen=True)
class Archetype:
    """One speaker tendency: who talks like this and how they pause."""

    name: str
    speakers: int
    sentences_per_speaker: int
    word_dist: Mapping[str, float]
    insert_prob: Mapping[PositionCategory, float]
    bg_count_dist: tuple[float, ...]
    bg_len_dist: tuple[float, ...]

    def __post_init__(self):
        if not self.name:
            raise SynthSpecError("archetype name must be non-empty")
        if self.speakers < 1 or self.sentences_per_speaker < 1:
            raise SynthSpecError(f"archetype {self.name!r}: needs >=1 speaker and >=1 sentence")
        _check_prob_vector(f"archetype {self.name!r} word_dist", list(self.word_dist.values()))
        _check_prob_vector(f"archetype {self.name!r} bg_count_dist", self.bg_count_dist)
        _check_prob_vector(f"archetype {self.name!r} bg_len_dist", self.bg_len_dist)
        for cat in PositionCategory:
            p = self.insert_prob.get(cat, 0.0)
            if not 0.0 <= p <= 1.0:
                raise SynthSpecError(
                    f"archetype {self.name!r}: insert_prob[{cat.value}] = {p} outside [0, 1]"
                )


@dataclass(frozen=True)
class SynthSpec:
    fp_words: tuple[str, ...]
    archetypes: tuple[Archetype, ...]
    lexicon: tuple[str, ...] = DEFAULT_LEXICON

    def __post_init__(self):
        if not self.archetypes:
            raise SynthSpecError("need at least one archetype")
        if len(set(a.name for a in self.archetypes)) != len(self.archetypes):
            raise SynthSpecError("archetype names must be unique")
        if len(set(self.lexicon)) != len(self.lexicon) or not self.lexicon:
            raise SynthSpecError("lexicon must be non-empty without duplicates")
        for w in self.lexicon:
            _check_surface(w)
        vocab = FpVocabulary(self.fp_words)
        for a in self.archetypes:
            unknown = set(a.word_dist) - set(vocab.words)
            if unknown:
                raise SynthSpecError(
                    f"archetype {a.name!r}: word_dist mentions unknown FP words {sorted(unknown)}"
                )


def cue_set(spec: SynthSpec, word_index: int) -> tuple[str, ...]:
    """Lexicon items that preferentially follow the given FP word."""
    base = word_index * CUE_SET_SIZE
    return tuple(
        spec.lexicon[(base + i) % len(spec.lexicon)] for i in range(CUE_SET_SIZE)
    )


def _gen_sentence(spec: SynthSpec, arch: Archetype, rng: np.random.Generator) -> Sentence:
    n_bg = 1 + int(rng.choice(len(arch.bg_count_dist), p=arch.bg_count_dist))
    bg_lens = [
        1 + int(rng.choice(len(arch.bg_len_dist), p=arch.bg_len_dist)) for _ in range(n_bg)
    ]
    word_names = list(arch.word_dist.keys())
    word_probs = np.array([arch.word_dist[w] for w in word_names])
    vocab_index = {w: i for i, w in enumerate(spec.fp_words)}

    breath_groups: list[tuple[str, ...]] = []
    tags: list[int] = []
    for bg_index, bg_len in enumerate(bg_lens):
        morphemes = []
        for m_index in range(bg_len):
            if not tags:
                cat = PositionCategory.SENTENCE_HEAD
            elif m_index == 0 and bg_index > 0:
                cat = PositionCategory.BREATH_GROUP_BOUNDARY
            else:
                cat = PositionCategory.BREATH_GROUP_MIDDLE
            tag = NO_FP
            if rng.random() < arch.insert_prob.get(cat, 0.0):
                w = word_names[int(rng.choice(len(word_names), p=word_probs))]
                tag = vocab_index[w] + 1
            tags.append(tag)
            if tag != NO_FP and rng.random() < CUE_STRENGTH:
                cues = cue_set(spec, tag - 1)
                morphemes.append(cues[int(rng.integers(len(cues)))])
            else:
                morphemes.append(spec.lexicon[int(rng.integers(len(spec.lexicon)))])
        breath_groups.append(tuple(morphemes))
    # sentinel slot: FP insertion at the sentence end, no morpheme follows
    tag = NO_FP
    if rng.random() < arch.insert_prob.get(PositionCategory.SENTENCE_END, 0.0):
        w = word_names[int(rng.choice(len(word_names), p=word_probs))]
        tag = vocab_index[w] + 1
    tags.append(tag)
    return Sentence(tuple(breath_groups), tuple(tags))


def synth_corpus(spec: SynthSpec, seed: int) -> AnnotatedCorpus:
    """Generate a corpus from archetypes, deterministically for a seed."""
    rng = np.random.default_rng(seed)
    vocab = FpVocabulary(spec.fp_words)
    speakers: dict[str, tuple[Sentence, ...]] = {}
    for arch in spec.archetypes:
        for i in range(arch.speakers):
            sid = f"{arch.name}-{i:02d}"
            speakers[sid] = tuple(
                _gen_sentence(spec, arch, rng) for _ in range(arch.sentences_per_speaker)
            )
    return AnnotatedCorpus(vocab, speakers)


def _category_from_key(key: str) -> PositionCategory:
    for cat in PositionCategory:
        if key == cat.value:
            return cat
    raise SynthSpecError(f"unknown position category {key!r}")


def spec_from_dict(obj: dict) -> SynthSpec:
    """Build a SynthSpec from decoded TOML/JSON data."""
    try:
        fp_words = tuple(obj["fp_words"])
        raw_archetypes = obj["archetype"]
    except KeyError as e:
        raise SynthSpecError(f"missing key {e.args[0]!r} in synthesis spec") from e
    lexicon = tuple(obj.get("lexicon", DEFAULT_LEXICON))
    archetypes = []
    for raw in raw_archetypes:
        extra = set(raw) - {
            "name", "speakers", "sentences_per_speaker",
            "word_dist", "insert_prob", "bg_count_dist", "bg_len_dist",
        }
        if extra:
            raise SynthSpecError(f"unknown archetype keys {sorted(extra)}")
        try:
            archetypes.append(
                Archetype(
                    name=str(raw["name"]),
                    speakers=int(raw["speakers"]),
                    sentences_per_speaker=int(raw["sentences_per_speaker"]),
                    word_dist={str(k): float(v) for k, v in raw["word_dist"].items()},
                    insert_prob={
                        _category_from_key(k): float(v) for k, v in raw["insert_prob"].items()
                    },
                    bg_count_dist=tuple(float(p) for p in raw["bg_count_dist"]),
                    bg_len_dist=tuple(float(p) for p in raw["bg_len_dist"]),
                )
            )
        except KeyError as e:
            raise SynthSpecError(f"archetype missing key {e.args[0]!r}") from e
    return SynthSpec(fp_words=fp_words, archetypes=tuple(archetypes), lexicon=lexicon)
