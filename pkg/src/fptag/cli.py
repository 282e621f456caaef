"""Command-line entry point.

Commands: ingest, vocab, cluster, train, finetune, eval, predict, synth.
Every run writes a resolved-config snapshot into the output directory.
Exit codes: 0 success, 1 runtime failure, 2 invalid input or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation as eval_mod
from . import nn as nn_mod
from . import profiles as profiles_mod
from . import synth as synth_mod
from . import train as train_mod
from .corpus import CorpusFormatError
from .synth import SynthSpecError
from .train import CheckpointError, ConfigError, VocabularyMismatchError

log = logging.getLogger("fptag")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

DEFAULT_CLUSTER_THRESHOLDS = {"word": 1.0, "position": 1.7}


def _load_toml(path: str | Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", default="fptag-out", help="output directory (default: fptag-out)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--preset", choices=sorted(train_mod.PRESETS), default="desk")
    common.add_argument("--log-level", default="INFO")
    return common


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--loss-mode", choices=train_mod.LOSS_MODES, default=None)
    p.add_argument("--sequence-unit", choices=train_mod.SEQUENCE_UNITS, default=None)
    p.add_argument("--d-emb", type=int, default=None)
    p.add_argument("--hidden-size", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--embeddings", help="precomputed-embedding sidecar file")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="fptag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and canonicalize a corpus")
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("vocab", parents=[common], help="build an FP vocabulary from a corpus")
    p.add_argument("corpus")
    p.add_argument("--threshold", type=float, default=0.20,
                   help="minimum fraction of speakers using a word (default 0.20)")
    p.add_argument("--apply", help="also write the corpus re-tagged against the new vocabulary")

    p = sub.add_parser("cluster", parents=[common], help="group speakers by FP tendency")
    p.add_argument("corpus")
    p.add_argument("--feature", choices=("word", "position"), default="word")
    p.add_argument("--threshold", type=float, default=None,
                   help="dendrogram cut distance (default 1.0 word / 1.7 position)")

    p = sub.add_parser("train", parents=[common], help="train the non-personalized model")
    p.add_argument("corpus")
    p.add_argument("--name", default="base", help="checkpoint name (default: base)")
    p.add_argument("--cv", type=int, default=None, help="make a k-fold speaker plan")
    p.add_argument("--fold", type=int, default=0, help="fold to hold out (with --cv)")
    p.add_argument("--mode", choices=train_mod.CV_MODES, default="speaker_open")
    p.add_argument("--ratio", type=float, default=0.9)
    _train_flags(p)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune from a base checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--name", default="finetuned")
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--plan", help="CV plan JSON written by `train --cv`")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--mode", choices=("open", "close"), default="open")
    p.add_argument("--embeddings", help="precomputed-embedding sidecar file")

    p = sub.add_parser("predict", parents=[common], help="insert FPs into fluent text")
    p.add_argument("checkpoint")
    p.add_argument("fluent", help="tokenized JSONL without fp_tags")
    p.add_argument("--groups", help="group assignment JSON from `cluster`")
    p.add_argument("--profile", help="target-speaker profile JSON (requires --groups)")
    p.add_argument("--group-ckpt-dir", help="directory with <group-id>.ckpt checkpoints")
    p.add_argument("--embeddings", help="precomputed-embedding sidecar file")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("spec", help="TOML synthesis spec")
    p.add_argument("output", help="corpus file to write")

    return parser


def _prepare_run(args: argparse.Namespace, extra: dict | None = None) -> Path:
    """Create the output directory and write the resolved-config snapshot."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": args.command,
        "preset": getattr(args, "preset", None),
        "seed": getattr(args, "seed", None),
        "args": {
            k: v for k, v in vars(args).items() if k not in ("command",) and v is not None
        },
    }
    if extra:
        snapshot.update(extra)
    (out / "resolved_config.json").write_text(
        json.dumps(snapshot, ensure_ascii=False, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )
    return out


def _resolve_train_config(args: argparse.Namespace, phase: str) -> train_mod.TrainConfig:
    """Preset defaults, overlaid by the TOML config file, overlaid by flags."""
    merged = dict(train_mod.PRESETS[args.preset][phase])
    if args.config:
        file_cfg = _load_toml(args.config)
        unknown = set(file_cfg) - {
            f.name for f in train_mod.TrainConfig.__dataclass_fields__.values()
        }
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)} in {args.config}")
        merged.update(file_cfg)
    flag_map = {
        "lr": args.lr,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "clip_norm": args.clip_norm,
        "loss_mode": args.loss_mode,
        "sequence_unit": args.sequence_unit,
        "d_emb": args.d_emb,
        "hidden_size": args.hidden_size,
        "dropout": args.dropout,
        "seed": args.seed,
    }
    merged.update({k: v for k, v in flag_map.items() if v is not None})
    return train_mod.TrainConfig.from_dict(merged)


def _load_embeddings(args: argparse.Namespace) -> nn_mod.PrecomputedEmbeddings | None:
    path = getattr(args, "embeddings", None)
    return nn_mod.PrecomputedEmbeddings.load(path) if path else None


def cmd_ingest(args: argparse.Namespace) -> int:
    _prepare_run(args)
    corpus = corpus_mod.parse_corpus(args.input)
    corpus_mod.write_corpus(corpus, args.output)
    n_slots = corpus.num_slots
    n_fps = corpus.num_fps
    print(
        f"ingested {args.input}: {len(corpus.speakers)} speakers, "
        f"{corpus.num_sentences} sentences, {n_slots} slots, "
        f"FP rate {n_fps / n_slots if n_slots else 0.0:.4f}"
    )
    return EXIT_OK


def cmd_vocab(args: argparse.Namespace) -> int:
    out = _prepare_run(args)
    corpus = corpus_mod.parse_corpus(args.corpus)
    vocab = corpus_mod.build_fp_vocabulary(corpus, args.threshold)
    (out / "vocabulary.json").write_text(
        json.dumps({"threshold": args.threshold, "words": list(vocab.words)},
                   ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"kept {len(vocab.words)} FP words: {', '.join(vocab.words) or '(none)'}")
    if args.apply:
        corpus_mod.write_corpus(corpus_mod.restrict_corpus(corpus, vocab), args.apply)
        print(f"re-tagged corpus written to {args.apply}")
    return EXIT_OK


def cmd_cluster(args: argparse.Namespace) -> int:
    corpus = corpus_mod.parse_corpus(args.corpus)
    if len(corpus.speakers) < 2:
        raise ConfigError("clustering needs at least 2 speakers")
    threshold = args.threshold
    if threshold is None:
        threshold = DEFAULT_CLUSTER_THRESHOLDS[args.feature]
    if threshold < 0:
        raise ConfigError(f"threshold must be non-negative, got {threshold}")
    out = _prepare_run(args, {"feature": args.feature, "threshold": threshold})
    ids, matrix = profiles_mod.profile_matrix(corpus, args.feature)
    if threshold == 0:
        # degenerate cut: no merge has distance < 0, every speaker stays alone
        assignment = profiles_mod.GroupAssignment(
            args.feature,
            0.0,
            {f"g{i}": (sid,) for i, sid in enumerate(ids)},
            {f"g{i}": matrix[i] for i in range(len(ids))},
        )
    else:
        dendro = profiles_mod.ward_cluster(matrix)
        assignment = profiles_mod.cut_dendrogram(
            dendro, threshold, ids, matrix, feature=args.feature
        )
    (out / "groups.json").write_text(assignment.to_json() + "\n", encoding="utf-8")
    total = 0
    for gid, sub in profiles_mod.split_corpus_by_group(corpus, assignment).items():
        corpus_mod.write_corpus(sub, out / f"group_{gid}.jsonl")
        total += sub.num_sentences
    assert total == corpus.num_sentences
    sizes = ", ".join(f"{gid}: {len(m)} speakers" for gid, m in assignment.groups.items())
    print(f"{len(assignment.groups)} groups at threshold {threshold} ({sizes})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args, "train")
    out = _prepare_run(args, {"train_config": config.to_dict()})
    corpus = corpus_mod.parse_corpus(args.corpus)
    items = None
    validation: tuple = ()
    if args.cv is not None:
        plan = train_mod.make_cv_plan(
            corpus.speaker_ids(), args.cv, mode=args.mode, ratio=args.ratio, seed=config.seed
        )
        (out / "plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
        fold = train_mod.fold_split(corpus, plan, args.fold)
        items, validation = fold.train, fold.validation
    ckpt = train_mod.train_base(
        corpus, None, config, items=items, validation=validation,
        embeddings=_load_embeddings(args),
    )
    path = out / f"{args.name}.ckpt"
    train_mod.save_checkpoint(ckpt, path)
    print(f"checkpoint {ckpt.checkpoint_id[:12]} written to {path}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _resolve_train_config(args, "finetune")
    out = _prepare_run(args, {"train_config": config.to_dict()})
    base = train_mod.load_checkpoint(args.checkpoint)
    corpus = corpus_mod.parse_corpus(args.corpus)
    ckpt = train_mod.finetune(base, corpus, config, embeddings=_load_embeddings(args))
    path = out / f"{args.name}.ckpt"
    train_mod.save_checkpoint(ckpt, path)
    print(f"checkpoint {ckpt.checkpoint_id[:12]} (parent {base.checkpoint_id[:12]}) written to {path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    out = _prepare_run(args)
    ckpt = train_mod.load_checkpoint(args.checkpoint)
    corpus = corpus_mod.parse_corpus(args.corpus)
    embeddings = _load_embeddings(args)
    items = None
    if args.plan:
        plan = train_mod.CvPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
        fold = train_mod.fold_split(corpus, plan, args.fold)
        items = fold.open_eval if args.mode == "open" else fold.close_eval
        if not items:
            raise ConfigError(
                f"{args.mode} evaluation slice is empty "
                f"(plan mode {plan.mode!r}; close needs a speaker_close plan)"
            )
    report = eval_mod.evaluate_model(ckpt, corpus, items=items, embeddings=embeddings)
    speaker_reports = eval_mod.per_speaker_reports(
        ckpt, corpus, items=items, embeddings=embeddings
    )
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    eval_mod.write_per_fp_csv(report, out / "per_fp.csv")
    eval_mod.write_per_speaker_csvs(
        speaker_reports, out / "per_speaker_position.csv", out / "per_speaker_word.csv"
    )
    distribution = {
        sid: {"position_f": r.position.f, "word_weighted_f": r.word_weighted.f}
        for sid, r in speaker_reports.items()
    }
    (out / "per_speaker.json").write_text(
        json.dumps(distribution, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(eval_mod.format_report(report))
    return EXIT_OK


def _render_plain(sentence: corpus_mod.Sentence, tags: list[int],
                  vocab: corpus_mod.FpVocabulary) -> str:
    tokens: list[str] = []
    morphemes = sentence.morphemes
    for i, tag in enumerate(tags):
        if tag != corpus_mod.NO_FP:
            tokens.append(vocab.words[tag - 1])
        if i < len(morphemes):
            tokens.append(morphemes[i])
    return " ".join(tokens)


def cmd_predict(args: argparse.Namespace) -> int:
    out = _prepare_run(args)
    ckpt = train_mod.load_checkpoint(args.checkpoint)
    if args.profile:
        if not args.groups:
            raise ConfigError("--profile requires --groups")
        if not args.group_ckpt_dir:
            raise ConfigError("--profile requires --group-ckpt-dir")
        assignment = profiles_mod.GroupAssignment.from_json(
            Path(args.groups).read_text(encoding="utf-8")
        )
        profile_obj = json.loads(Path(args.profile).read_text(encoding="utf-8"))
        vector = np.asarray(
            profile_obj["vector"] if isinstance(profile_obj, dict) else profile_obj,
            dtype=np.float64,
        )
        gid = profiles_mod.assign_group(assignment, vector)
        group_path = Path(args.group_ckpt_dir) / f"{gid}.ckpt"
        if not group_path.exists():
            raise ConfigError(f"missing group checkpoint {group_path}")
        log.info("profile assigned to group %s; loading %s", gid, group_path)
        print(f"using group {gid} checkpoint {group_path}")
        ckpt = train_mod.load_checkpoint(group_path)
    fluent = corpus_mod.parse_fluent(args.fluent)
    if ckpt.vocabulary.words != fluent.vocabulary.words:
        raise VocabularyMismatchError("checkpoint vocabulary does not match the input")
    model = ckpt.to_model(_load_embeddings(args))
    unit = eval_mod._model_unit(ckpt, None)
    vocab = ckpt.vocabulary
    tagged_speakers: dict[str, list[corpus_mod.Sentence]] = {}
    text_lines = []
    for sid, idx, sentence in fluent.iter_sentences():
        tags = eval_mod.predict_item_tags(model, [(sid, idx, sentence)], unit)[0]
        tagged_speakers.setdefault(sid, []).append(
            corpus_mod.Sentence(sentence.breath_groups, tuple(tags))
        )
        text_lines.append(_render_plain(sentence, tags, vocab))
    tagged = corpus_mod.AnnotatedCorpus(
        vocab, {sid: tuple(s) for sid, s in tagged_speakers.items()}
    )
    corpus_mod.write_corpus(tagged, out / "predicted.jsonl")
    (out / "predicted.txt").write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    print(f"tagged {fluent.num_sentences} sentences -> {out / 'predicted.jsonl'}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    raw = _load_toml(args.spec)
    seed = args.seed if args.seed is not None else int(raw.pop("seed", 0))
    raw.pop("seed", None)
    spec = synth_mod.spec_from_dict(raw)
    _prepare_run(args, {"synth_seed": seed})
    corpus = synth_mod.synth_corpus(spec, seed)
    corpus_mod.write_corpus(corpus, args.output)
    print(
        f"synthesized {len(corpus.speakers)} speakers, {corpus.num_sentences} sentences "
        f"-> {args.output}"
    )
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "vocab": cmd_vocab,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "synth": cmd_synth,
}

INVALID_INPUT_ERRORS = (
    CorpusFormatError,
    ConfigError,
    SynthSpecError,
    CheckpointError,
    VocabularyMismatchError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except INVALID_INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
