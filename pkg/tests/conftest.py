import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from fptag.corpus import AnnotatedCorpus, FpVocabulary, PositionCategory, Sentence
from fptag.synth import Archetype, SynthSpec, synth_corpus


def make_sentence(breath_groups, tags):
    return Sentence(tuple(tuple(bg) for bg in breath_groups), tuple(tags))


@pytest.fixture
def tiny_vocab():
    return FpVocabulary(("ee", "ma", "n"))


@pytest.fixture
def tiny_corpus(tiny_vocab):
    """Two speakers, hand-built tags (1 = ee, 2 = ma, 3 = n)."""
    return AnnotatedCorpus(
        tiny_vocab,
        {
            "spkA": (
                make_sentence([["kore", "wa"], ["ii"]], [1, 0, 2, 0]),
                make_sentence([["sore"]], [0, 1]),
            ),
            "spkB": (
                make_sentence([["are", "mo", "ii"]], [0, 0, 0, 3]),
            ),
        },
    )


def basic_insert_probs(head=0.5, boundary=0.3, middle=0.1, end=0.2):
    return {
        PositionCategory.SENTENCE_HEAD: head,
        PositionCategory.BREATH_GROUP_BOUNDARY: boundary,
        PositionCategory.BREATH_GROUP_MIDDLE: middle,
        PositionCategory.SENTENCE_END: end,
    }


def make_synth_spec(
    fp_words=("ee", "ma"),
    word_dist=None,
    speakers=3,
    sentences=20,
    insert_probs=None,
    name="arch",
):
    word_dist = word_dist or {"ee": 0.8, "ma": 0.2}
    return SynthSpec(
        fp_words=tuple(fp_words),
        archetypes=(
            Archetype(
                name=name,
                speakers=speakers,
                sentences_per_speaker=sentences,
                word_dist=word_dist,
                insert_prob=insert_probs or basic_insert_probs(),
                bg_count_dist=(0.5, 0.3, 0.2),
                bg_len_dist=(0.2, 0.3, 0.3, 0.2),
            ),
        ),
    )


@pytest.fixture
def synth_small():
    return synth_corpus(make_synth_spec(), seed=11)
