"""Training orchestration: base training, fine-tuning, CV plans, checkpoints.

A base model is trained on the full multi-speaker corpus; group- or
speaker-dependent models are fine-tuned from it on a sub-corpus, starting
from the parent's parameters. Cross-validation plans partition speakers
into folds; the speaker-close mode additionally holds out a fraction of
each training speaker's sentences for validation and close evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import AnnotatedCorpus, FpVocabulary, Sentence, restrict_corpus
from .nn import (
    AdamState,
    BlstmParams,
    DivergenceError,
    GateParams,
    Hyper,
    PrecomputedEmbeddings,
    TaggerModel,
    TrainableLookup,
    backward_batch,
    ce_terms,
    class_weights_from_counts,
    clip_and_step,
    embed,
    forward_batch,
    init_model,
    make_dropout_mask,
    sentence_key,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fp-checkpoint"
CHECKPOINT_VERSION = 1

SEQUENCE_UNITS = ("sentence", "breath_group")
LOSS_MODES = ("equal", "weighted")
CV_MODES = ("speaker_open", "speaker_close")

#: (speaker_id, sentence_index, sentence) triples; indices refer to the
#: speaker's sentence list in the source corpus so that precomputed
#: embedding keys stay stable across sub-corpus slicing.
SentenceItem = tuple[str, int, Sentence]


class ConfigError(ValueError):
    """Raised for invalid training configuration or empty training data."""


class VocabularyMismatchError(ValueError):
    """Raised when a checkpoint and a corpus disagree on the tag space."""


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or wrong-version checkpoint files."""


@dataclass(frozen=True)
class LrDecay:
    factor: float
    every_steps: int

    def __post_init__(self):
        if self.factor <= 0 or self.every_steps <= 0:
            raise ConfigError(f"invalid lr decay {self}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    batch_size: int = 32
    clip_norm: float = 0.5
    seed: int = 0
    sequence_unit: str = "sentence"
    loss_mode: str = "weighted"
    lr_decay: LrDecay | None = None
    d_emb: int = 32
    hidden_size: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.sequence_unit not in SEQUENCE_UNITS:
            raise ConfigError(f"sequence_unit must be one of {SEQUENCE_UNITS}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.d_emb <= 0 or self.hidden_size <= 0:
            raise ConfigError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.lr_decay is not None:
            d["lr_decay"] = asdict(self.lr_decay)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        decay = data.get("lr_decay")
        if isinstance(decay, dict):
            extra = set(decay) - {"factor", "every_steps"}
            if extra:
                raise ConfigError(f"unknown lr_decay keys {sorted(extra)}")
            data["lr_decay"] = LrDecay(float(decay["factor"]), int(decay["every_steps"]))
        return cls(**data)

    def lr_at(self, step: int) -> float:
        """Learning rate for a 1-based step index."""
        if self.lr_decay is None:
            return self.lr
        return self.lr * self.lr_decay.factor ** ((step - 1) // self.lr_decay.every_steps)


# Two shipped presets: the hyperparameters reported for the full-scale
# experiments, and a desk-scale variant that trains in seconds.
PRESETS: dict[str, dict[str, dict]] = {
    "paper": {
        "train": dict(lr=1e-5, steps=60000, batch_size=32, clip_norm=0.5,
                      d_emb=300, hidden_size=1024),
        "finetune": dict(lr=1e-5, steps=10000, batch_size=32, clip_norm=0.5,
                         d_emb=300, hidden_size=1024),
    },
    "desk": {
        "train": dict(lr=1e-3, steps=2000, batch_size=32, clip_norm=0.5,
                      d_emb=32, hidden_size=64),
        "finetune": dict(lr=1e-3, steps=500, batch_size=32, clip_norm=0.5,
                         d_emb=32, hidden_size=64),
    },
}


def preset_config(name: str, phase: str = "train") -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if phase not in ("train", "finetune"):
        raise ConfigError(f"unknown preset phase {phase!r}")
    return TrainConfig(**PRESETS[name][phase])


def tag_counts(sentences: Sequence[Sentence], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in sentences:
        counts += np.bincount(np.asarray(s.fp_tags), minlength=num_classes)
    return counts


def sequence_ranges(sentence: Sentence, unit: str) -> list[tuple[int, int]]:
    """Slot ranges of the model input sequences for one sentence.

    With breath-group units, the final group's range also covers the
    sentence-end sentinel slot so the ranges always partition all slots.
    """
    if unit == "sentence":
        return [(0, sentence.slot_count)]
    ranges = []
    start = 0
    for bg in sentence.breath_groups:
        ranges.append((start, start + len(bg)))
        start += len(bg)
    last_start, _ = ranges[-1]
    ranges[-1] = (last_start, sentence.slot_count)
    return ranges


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """A manifest plus named float32 tensors, in manifest-declared order."""

    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def checkpoint_id(self) -> str:
        return self.manifest["id"]

    @property
    def vocabulary(self) -> FpVocabulary:
        return FpVocabulary(tuple(self.manifest["fp_vocabulary"]))

    def to_bytes(self) -> bytes:
        header = json.dumps(
            self.manifest, sort_keys=True, ensure_ascii=False, separators=(",", ":")
        ).encode("utf-8")
        payload = b"".join(
            np.ascontiguousarray(self.tensors[t["name"]], dtype="<f4").tobytes()
            for t in self.manifest["tensors"]
        )
        return header + b"\0" + payload

    @classmethod
    def from_model(
        cls,
        model: TaggerModel,
        vocab: FpVocabulary,
        steps_completed: int,
        parent: str | None = None,
        train_config: TrainConfig | None = None,
    ) -> "Checkpoint":
        if isinstance(model.embedding, TrainableLookup):
            embedding_meta = {"kind": "trainable_lookup", "tokens": list(model.embedding.tokens)}
        else:
            embedding_meta = {"kind": "precomputed", "d_emb": model.embedding.d_emb}
        tensors = {
            name: np.ascontiguousarray(arr, dtype=np.float32)
            for name, arr in model.named_parameters().items()
        }
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyper": {
                "d_emb": model.hyper.d_emb,
                "hidden_size": model.hyper.hidden_size,
                "num_classes": model.hyper.num_classes,
                "seed": model.hyper.seed,
                "dropout": model.hyper.dropout,
            },
            "embedding": embedding_meta,
            "fp_vocabulary": list(vocab.words),
            "class_weights": [float(w) for w in np.asarray(model.class_weights, dtype=np.float32)],
            "steps_completed": int(steps_completed),
            "parent": parent,
            "train_config": train_config.to_dict() if train_config is not None else None,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
        }
        manifest["id"] = _checkpoint_id(manifest, tensors)
        return cls(manifest, tensors)

    def to_model(self, embeddings: PrecomputedEmbeddings | None = None) -> TaggerModel:
        hyper = Hyper(**self.manifest["hyper"])
        meta = self.manifest["embedding"]
        tensors = {n: a.copy() for n, a in self.tensors.items()}
        if meta["kind"] == "trainable_lookup":
            provider = TrainableLookup(meta["tokens"], tensors.pop("embedding.table"))
        elif meta["kind"] == "precomputed":
            if embeddings is None:
                raise CheckpointError(
                    "checkpoint was trained with precomputed embeddings; "
                    "pass the sidecar to rebuild the model"
                )
            if embeddings.d_emb != meta["d_emb"]:
                raise CheckpointError(
                    f"sidecar dimension {embeddings.d_emb} != checkpoint {meta['d_emb']}"
                )
            provider = embeddings
        else:
            raise CheckpointError(f"unknown embedding kind {meta['kind']!r}")
        def gates(prefix: str) -> GateParams:
            return GateParams(
                *(tensors[f"{prefix}.w_{gate}"] for gate in ("i", "f", "g", "o")),
                *(tensors[f"{prefix}.b_{gate}"] for gate in ("i", "f", "g", "o")),
            )

        params = BlstmParams(gates("fwd"), gates("bwd"), tensors["w_out"], tensors["b_out"])
        weights = np.array(self.manifest["class_weights"], dtype=np.float32)
        return TaggerModel(provider, params, weights, hyper)


def _checkpoint_id(manifest: dict, tensors: dict[str, np.ndarray]) -> str:
    unsigned = {k: v for k, v in manifest.items() if k != "id"}
    blob = json.dumps(unsigned, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode("utf-8"))
    for t in manifest["tensors"]:
        digest.update(np.ascontiguousarray(tensors[t["name"]], dtype="<f4").tobytes())
    return digest.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    sep = data.find(b"\0")
    if sep < 0:
        raise CheckpointError(f"{path}: missing manifest separator")
    try:
        manifest = json.loads(data[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed manifest: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')!r}")
    payload = data[sep + 1 :]
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        nbytes = size * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload at {t['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    ckpt = Checkpoint(manifest, tensors)
    if _checkpoint_id(manifest, tensors) != manifest.get("id"):
        raise CheckpointError(f"{path}: checkpoint id does not match contents")
    return ckpt


# ---------------------------------------------------------------------------
# training


def corpus_items(corpus: AnnotatedCorpus) -> list[SentenceItem]:
    return list(corpus.iter_sentences())


def _dataset_loss(
    model: TaggerModel, items: Sequence[SentenceItem], unit: str
) -> float:
    num_total = 0.0
    den_total = 0.0
    for sid, idx, sentence in items:
        emb = embed(model.embedding, sentence, sentence_key(sid, idx))
        gold = np.asarray(sentence.fp_tags, dtype=np.int64)
        for a, b in sequence_ranges(sentence, unit):
            logits, _ = forward_batch(model, emb[None, a:b])
            num, den, _ = ce_terms(logits, gold[None, a:b], model.class_weights)
            num_total += num
            den_total += den
    return num_total / den_total if den_total else 0.0


def _train_step(
    model: TaggerModel,
    batch: Sequence[SentenceItem],
    config: TrainConfig,
    params: dict[str, np.ndarray],
    adam: AdamState,
    lr: float,
    dropout_rng: np.random.Generator | None,
) -> float:
    """One optimizer step; the loss pools every real slot in the batch."""
    lookup = model.embedding if isinstance(model.embedding, TrainableLookup) else None
    sequences = []  # (emb [T, D], gold [T], row_ids [T] | None)
    for sid, idx, sentence in batch:
        if lookup is not None:
            ids = lookup.row_ids(sentence)
            emb = lookup.table[ids]
        else:
            ids = None
            emb = embed(model.embedding, sentence, sentence_key(sid, idx))
        gold = np.asarray(sentence.fp_tags, dtype=np.int64)
        for a, b in sequence_ranges(sentence, config.sequence_unit):
            sequences.append((emb[a:b], gold[a:b], ids[a:b] if ids is not None else None))

    buckets: dict[int, list] = {}
    for seq in sequences:
        buckets.setdefault(len(seq[1]), []).append(seq)

    num_total = 0.0
    den_total = 0.0
    pending = []
    for length in sorted(buckets):
        group = buckets[length]
        xs = np.stack([s[0] for s in group])
        gold = np.stack([s[1] for s in group])
        mask = None
        if dropout_rng is not None:
            mask = make_dropout_mask(
                dropout_rng,
                (len(group), length, 2 * model.hyper.hidden_size),
                config.dropout,
                dtype=xs.dtype,
            )
        logits, cache = forward_batch(model, xs, mask)
        num, den, dlogits_unnorm = ce_terms(logits, gold, model.class_weights)
        num_total += num
        den_total += den
        pending.append((group, cache, dlogits_unnorm))

    loss = num_total / den_total
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    for group, cache, dlogits_unnorm in pending:
        batch_grads = backward_batch(model, cache, dlogits_unnorm / den_total)
        for name in grads:
            if name in batch_grads:
                grads[name] += batch_grads[name]
        if lookup is not None:
            row_ids = np.stack([s[2] for s in group])
            np.add.at(grads["embedding.table"], row_ids, batch_grads["d_embeddings"])
    clip_and_step(params, grads, adam, lr, config.clip_norm)
    return loss


def _run_training(
    model: TaggerModel,
    items: Sequence[SentenceItem],
    config: TrainConfig,
    validation: Sequence[SentenceItem] = (),
) -> None:
    if not items:
        raise ConfigError("empty training split")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    dropout_rng = (
        np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        if config.dropout > 0
        else None
    )
    params = model.named_parameters()
    adam = AdamState.for_params(params)
    order = rng.permutation(len(items))
    cursor = 0
    for step in range(1, config.steps + 1):
        if cursor >= len(order):
            order = rng.permutation(len(items))
            cursor = 0
        batch = [items[i] for i in order[cursor : cursor + config.batch_size]]
        cursor += config.batch_size
        loss = _train_step(model, batch, config, params, adam, config.lr_at(step), dropout_rng)
        if step % 100 == 0 or step == config.steps:
            log.info("step %d/%d loss %.6f", step, config.steps, loss)
        if validation and (step % 500 == 0 or step == config.steps):
            log.info(
                "step %d validation loss %.6f",
                step,
                _dataset_loss(model, validation, config.sequence_unit),
            )


def _resolve_class_weights(
    sentences: Sequence[Sentence], num_classes: int, loss_mode: str, dtype
) -> np.ndarray:
    if loss_mode == "equal":
        return np.ones(num_classes, dtype=dtype)
    counts = tag_counts(sentences, num_classes)
    return class_weights_from_counts(counts).astype(dtype)


def train_base(
    corpus: AnnotatedCorpus,
    vocab: FpVocabulary | None,
    config: TrainConfig,
    items: Sequence[SentenceItem] | None = None,
    validation: Sequence[SentenceItem] = (),
    embeddings: PrecomputedEmbeddings | None = None,
) -> Checkpoint:
    """Train a non-personalized model from scratch and checkpoint it.

    `items` restricts training to a subset of the corpus (e.g. one CV
    fold's training speakers); sentence indices keep their original
    values so precomputed-embedding keys stay valid.
    """
    if config.steps <= 0:
        raise ConfigError("training needs steps > 0")
    if vocab is None:
        vocab = corpus.vocabulary
    elif vocab.words != corpus.vocabulary.words:
        corpus = restrict_corpus(corpus, vocab)
    if items is None:
        items = corpus_items(corpus)
    else:
        items = [
            (sid, idx, corpus.speakers[sid][idx]) for sid, idx, _ in items
        ]  # re-read through the (possibly re-tagged) corpus
    if not items:
        raise ConfigError("empty training split")

    hyper = Hyper(config.d_emb, config.hidden_size, vocab.num_classes, config.seed, config.dropout)
    if embeddings is not None:
        if embeddings.d_emb != config.d_emb:
            raise ConfigError(f"sidecar dimension {embeddings.d_emb} != configured {config.d_emb}")
        rng = np.random.default_rng(hyper.seed)
        params = BlstmParams.create(hyper.d_emb, hyper.hidden_size, hyper.num_classes, rng)
        model = TaggerModel(embeddings, params, np.ones(hyper.num_classes, np.float32), hyper)
    else:
        tokens = sorted({m for _, _, s in items for m in s.morphemes})
        model = init_model(tokens, len(vocab.words), hyper)
    model.class_weights = _resolve_class_weights(
        [s for _, _, s in items], vocab.num_classes, config.loss_mode, model.params.b_out.dtype
    )
    _run_training(model, items, config, validation)
    return Checkpoint.from_model(model, vocab, steps_completed=config.steps, train_config=config)


def finetune(
    base: Checkpoint,
    subcorpus: AnnotatedCorpus,
    config: TrainConfig,
    items: Sequence[SentenceItem] | None = None,
    validation: Sequence[SentenceItem] = (),
    embeddings: PrecomputedEmbeddings | None = None,
) -> Checkpoint:
    """Fine-tune from a base checkpoint on a sub-corpus.

    The parent's parameters are the initial values and the topology is
    unchanged; class weights are recomputed from the sub-corpus when the
    loss mode is weighted. steps == 0 is a recorded no-op (the returned
    checkpoint has identical tensors and the parent id).
    """
    vocab = base.vocabulary
    if subcorpus.vocabulary.words != vocab.words:
        raise VocabularyMismatchError(
            "sub-corpus vocabulary does not match the base checkpoint"
        )
    if items is None:
        items = corpus_items(subcorpus)
    if not items:
        raise ConfigError("empty fine-tuning sub-corpus")
    model = base.to_model(embeddings)
    model.class_weights = _resolve_class_weights(
        [s for _, _, s in items], vocab.num_classes, config.loss_mode,
        model.params.b_out.dtype,
    )
    if config.steps > 0:
        _run_training(model, items, config, validation)
    return Checkpoint.from_model(
        model,
        vocab,
        steps_completed=base.manifest["steps_completed"] + config.steps,
        parent=base.checkpoint_id,
        train_config=config,
    )


# ---------------------------------------------------------------------------
# cross-validation plans


@dataclass(frozen=True)
class CvPlan:
    folds: tuple[tuple[str, ...], ...]
    mode: str
    ratio: float
    seed: int

    def __post_init__(self):
        if self.mode not in CV_MODES:
            raise ConfigError(f"mode must be one of {CV_MODES}")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"train ratio must be in (0, 1), got {self.ratio}")
        seen: set[str] = set()
        for fold in self.folds:
            for sid in fold:
                if sid in seen:
                    raise ConfigError(f"speaker {sid!r} appears in two folds")
                seen.add(sid)

    def to_json(self) -> str:
        return json.dumps(
            {
                "folds": [list(f) for f in self.folds],
                "mode": self.mode,
                "ratio": self.ratio,
                "seed": self.seed,
            },
            ensure_ascii=False,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CvPlan":
        obj = json.loads(text)
        return cls(
            folds=tuple(tuple(f) for f in obj["folds"]),
            mode=obj["mode"],
            ratio=float(obj["ratio"]),
            seed=int(obj["seed"]),
        )


def make_cv_plan(
    speaker_ids: Sequence[str],
    k: int,
    mode: str = "speaker_open",
    ratio: float = 0.9,
    seed: int = 0,
) -> CvPlan:
    """Partition speakers into k folds of near-equal size (difference <= 1)."""
    ids = sorted(speaker_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate speaker ids")
    if k < 2 or k > len(ids):
        raise ConfigError(f"k must be in [2, {len(ids)}], got {k}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    folds = tuple(tuple(order[i::k]) for i in range(k))
    return CvPlan(folds=folds, mode=mode, ratio=ratio, seed=seed)


@dataclass(frozen=True)
class FoldData:
    train: tuple[SentenceItem, ...]
    validation: tuple[SentenceItem, ...]
    open_eval: tuple[SentenceItem, ...]
    close_eval: tuple[SentenceItem, ...]


def _speaker_rng(seed: int, speaker_id: str) -> np.random.Generator:
    digest = hashlib.sha256(speaker_id.encode("utf-8")).digest()
    return np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")])
    )


def fold_split(corpus: AnnotatedCorpus, plan: CvPlan, fold_index: int) -> FoldData:
    """Materialize one fold of a CV plan against a corpus.

    Open evaluation uses the held-out fold's speakers; close evaluation
    (speaker_close mode) uses the per-speaker held-out sentence fraction
    of the training speakers, so the two evaluation speaker sets are
    disjoint.
    """
    if not 0 <= fold_index < len(plan.folds):
        raise ConfigError(f"fold index {fold_index} out of range")
    held_out = set(plan.folds[fold_index])
    missing = {sid for fold in plan.folds for sid in fold} - set(corpus.speakers)
    if missing:
        raise ConfigError(f"plan speakers missing from corpus: {sorted(missing)}")
    train: list[SentenceItem] = []
    validation: list[SentenceItem] = []
    open_eval: list[SentenceItem] = []
    for sid in corpus.speaker_ids():
        sentences = corpus.speakers[sid]
        if sid in held_out:
            open_eval.extend((sid, i, s) for i, s in enumerate(sentences))
            continue
        if plan.mode == "speaker_close" and len(sentences) >= 2:
            n_val = max(1, round(len(sentences) * (1.0 - plan.ratio)))
            rng = _speaker_rng(plan.seed, sid)
            val_idx = set(rng.choice(len(sentences), size=n_val, replace=False).tolist())
        else:
            val_idx = set()
        for i, s in enumerate(sentences):
            (validation if i in val_idx else train).append((sid, i, s))
    return FoldData(
        train=tuple(train),
        validation=tuple(validation),
        open_eval=tuple(open_eval),
        close_eval=tuple(validation),
    )
