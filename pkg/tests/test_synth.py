import numpy as np
import pytest

from fptag.corpus import NO_FP, PositionCategory
from fptag.synth import Archetype, SynthSpec, SynthSpecError, spec_from_dict, synth_corpus

from conftest import basic_insert_probs, make_synth_spec


def test_zero_insertion_probability_means_no_fps():
    spec = make_synth_spec(insert_probs=basic_insert_probs(0.0, 0.0, 0.0, 0.0))
    corpus = synth_corpus(spec, seed=4)
    assert all(
        t == NO_FP for _, _, s in corpus.iter_sentences() for t in s.fp_tags
    )


def test_same_seed_identical_corpora():
    spec = make_synth_spec()
    assert synth_corpus(spec, seed=123) == synth_corpus(spec, seed=123)


def test_different_seed_differs():
    spec = make_synth_spec()
    assert synth_corpus(spec, seed=1) != synth_corpus(spec, seed=2)


def test_word_rates_converge_to_archetype():
    spec = make_synth_spec(word_dist={"ee": 0.8, "ma": 0.2}, speakers=1, sentences=500)
    corpus = synth_corpus(spec, seed=17)
    counts = np.zeros(2)
    for _, _, s in corpus.iter_sentences():
        for t in s.fp_tags:
            if t != NO_FP:
                counts[t - 1] += 1
    rates = counts / counts.sum()
    assert abs(rates[0] - 0.8) <= 0.05
    assert abs(rates[1] - 0.2) <= 0.05


def test_invalid_word_distribution_rejected():
    with pytest.raises(SynthSpecError, match="sum to"):
        make_synth_spec(word_dist={"ee": 0.8, "ma": 0.1})


def test_insert_probability_out_of_range_rejected():
    with pytest.raises(SynthSpecError, match="outside"):
        make_synth_spec(insert_probs=basic_insert_probs(head=1.5))


def test_unknown_word_in_distribution_rejected():
    with pytest.raises(SynthSpecError, match="unknown FP words"):
        SynthSpec(
            fp_words=("ee",),
            archetypes=(
                Archetype(
                    "a", 1, 1, {"zzz": 1.0}, basic_insert_probs(), (1.0,), (1.0,)
                ),
            ),
        )


def test_duplicate_archetype_names_rejected():
    arch = make_synth_spec().archetypes[0]
    with pytest.raises(SynthSpecError, match="unique"):
        SynthSpec(fp_words=("ee", "ma"), archetypes=(arch, arch))


def test_spec_from_dict_round_trip():
    raw = {
        "fp_words": ["ee", "ma"],
        "archetype": [
            {
                "name": "a",
                "speakers": 2,
                "sentences_per_speaker": 3,
                "word_dist": {"ee": 0.5, "ma": 0.5},
                "insert_prob": {"sentence_head": 0.5, "sentence_end": 0.1},
                "bg_count_dist": [1.0],
                "bg_len_dist": [0.5, 0.5],
            }
        ],
    }
    spec = spec_from_dict(raw)
    assert spec.archetypes[0].insert_prob[PositionCategory.SENTENCE_HEAD] == 0.5
    corpus = synth_corpus(spec, seed=1)
    assert len(corpus.speakers) == 2
    assert corpus.num_sentences == 6


def test_spec_from_dict_rejects_unknown_keys():
    raw = {
        "fp_words": ["ee"],
        "archetype": [
            {
                "name": "a",
                "speakers": 1,
                "sentences_per_speaker": 1,
                "word_dist": {"ee": 1.0},
                "insert_prob": {},
                "bg_count_dist": [1.0],
                "bg_len_dist": [1.0],
                "bogus": 1,
            }
        ],
    }
    with pytest.raises(SynthSpecError, match="unknown archetype keys"):
        spec_from_dict(raw)


def test_spec_from_dict_rejects_bad_category():
    raw = {
        "fp_words": ["ee"],
        "archetype": [
            {
                "name": "a",
                "speakers": 1,
                "sentences_per_speaker": 1,
                "word_dist": {"ee": 1.0},
                "insert_prob": {"nowhere": 0.5},
                "bg_count_dist": [1.0],
                "bg_len_dist": [1.0],
            }
        ],
    }
    with pytest.raises(SynthSpecError, match="unknown position category"):
        spec_from_dict(raw)


def test_cue_coupling_is_present():
    # morphemes following an FP should over-represent that word's cue set
    from fptag.synth import cue_set

    spec = make_synth_spec(word_dist={"ee": 1.0, "ma": 0.0}, speakers=2, sentences=300)
    corpus = synth_corpus(spec, seed=21)
    cues = set(cue_set(spec, 0))
    after_fp = 0
    after_fp_cue = 0
    for _, _, s in corpus.iter_sentences():
        morphemes = s.morphemes
        for i, t in enumerate(s.fp_tags[:-1]):
            if t != NO_FP:
                after_fp += 1
                after_fp_cue += morphemes[i] in cues
    assert after_fp > 100
    # cue strength 0.75 plus background; uniform background alone would be ~2/24
    assert after_fp_cue / after_fp > 0.5
