"""Filled-pause prediction toolkit.

Tags each slot of fluent tokenized text with either "no filled pause" or
one of the FP words in a corpus vocabulary, groups speakers by their FP
usage, and fine-tunes group-dependent taggers from a shared base model.
"""

from .corpus import (
    NO_FP,
    AnnotatedCorpus,
    CorpusFormatError,
    FpVocabulary,
    PositionCategory,
    Sentence,
    build_fp_vocabulary,
    parse_corpus,
    slot_positions,
    write_corpus,
)
from .synth import Archetype, SynthSpec, synth_corpus
from .profiles import (
    Dendrogram,
    GroupAssignment,
    assign_group,
    cut_dendrogram,
    position_usage_profile,
    ward_cluster,
    word_usage_profile,
)
from .nn import (
    TaggerModel,
    class_weights_from_counts,
    embed,
    predict_tags,
    weighted_ce_loss,
)
from .train import (
    Checkpoint,
    CvPlan,
    TrainConfig,
    finetune,
    load_checkpoint,
    make_cv_plan,
    save_checkpoint,
    train_base,
)
from .evaluation import (
    MetricsReport,
    evaluate_model,
    per_word_metrics,
    position_metrics,
    weighted_word_average,
)

__version__ = "0.1.0"
