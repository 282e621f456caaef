"""Speaker FP-usage profiles and hierarchical grouping.

A speaker's word profile is the rate of each FP word among their FPs; the
position profile is the rate of each position category. Speakers are
grouped by agglomerative clustering with Euclidean distance and Ward
linkage, cut at a distance threshold, and unseen speakers are assigned to
the group with the nearest centroid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import NO_FP, POSITION_CATEGORIES, AnnotatedCorpus, slot_positions

WORD_FEATURE = "word"
POSITION_FEATURE = "position"


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    word_rates: np.ndarray
    position_rates: np.ndarray


@dataclass(frozen=True)
class Merge:
    """One agglomeration step: clusters `left` < `right` joined at `distance`."""

    left: int
    right: int
    distance: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge log over n_leaves singleton clusters (ids 0..n-1).

    The cluster produced by merge k gets id n_leaves + k. Ward linkage is
    monotone, so distances never decrease along the log.
    """

    n_leaves: int
    merges: tuple[Merge, ...]

    def __post_init__(self):
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError(
                f"{self.n_leaves} leaves need {self.n_leaves - 1} merges, got {len(self.merges)}"
            )
        for a, b in zip(self.merges, self.merges[1:]):
            if b.distance < a.distance - 1e-12:
                raise ValueError(
                    f"merge distances decrease: {a.distance} then {b.distance}"
                )


def word_usage_profile(corpus: AnnotatedCorpus, speaker_id: str) -> np.ndarray:
    """Per-word FP rates for one speaker; all zeros if they use no FPs."""
    counts = np.zeros(len(corpus.vocabulary.words))
    for sentence in corpus.sentences(speaker_id):
        for t in sentence.fp_tags:
            if t != NO_FP:
                counts[t - 1] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts


def position_usage_profile(corpus: AnnotatedCorpus, speaker_id: str) -> np.ndarray:
    """Rates of the four position categories among one speaker's FPs."""
    index = {cat: i for i, cat in enumerate(POSITION_CATEGORIES)}
    counts = np.zeros(len(POSITION_CATEGORIES))
    for sentence in corpus.sentences(speaker_id):
        cats = slot_positions(sentence)
        for t, cat in zip(sentence.fp_tags, cats):
            if t != NO_FP:
                counts[index[cat]] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts


def speaker_profile(corpus: AnnotatedCorpus, speaker_id: str) -> SpeakerProfile:
    return SpeakerProfile(
        speaker_id,
        word_usage_profile(corpus, speaker_id),
        position_usage_profile(corpus, speaker_id),
    )


def profile_matrix(corpus: AnnotatedCorpus, feature: str) -> tuple[list[str], np.ndarray]:
    """Profile vectors for all speakers in sorted speaker-id order."""
    ids = corpus.speaker_ids()
    if feature == WORD_FEATURE:
        rows = [word_usage_profile(corpus, sid) for sid in ids]
    elif feature == POSITION_FEATURE:
        rows = [position_usage_profile(corpus, sid) for sid in ids]
    else:
        raise ValueError(f"unknown profile feature {feature!r}")
    return ids, np.array(rows)


def ward_cluster(profiles: np.ndarray) -> Dendrogram:
    """Agglomerate profile vectors under Ward linkage with Euclidean distance.

    The linkage distance between clusters A and B is
    sqrt(2|A||B| / (|A|+|B|)) * ||centroid(A) - centroid(B)||, which for
    singletons is the plain Euclidean distance. Updated distances follow
    the Lance-Williams recurrence on squared distances. Ties are broken
    deterministically by merging the pair with the smallest (min id,
    max id).
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    if profiles.ndim != 2:
        raise ValueError("profiles must be a 2-D array of equal-length vectors")
    n = profiles.shape[0]
    if n < 2:
        raise ValueError("need at least 2 profiles to cluster")

    sizes = {i: 1 for i in range(n)}
    # squared Ward distances between active clusters, keyed (min id, max id)
    d2: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            diff = profiles[i] - profiles[j]
            d2[(i, j)] = float(diff @ diff)

    merges: list[Merge] = []
    active = list(range(n))
    for step in range(n - 1):
        best_pair = None
        best = np.inf
        for a_idx in range(len(active)):
            for b_idx in range(a_idx + 1, len(active)):
                pair = (active[a_idx], active[b_idx])
                if d2[pair] < best:
                    best = d2[pair]
                    best_pair = pair
        i, j = best_pair
        new_id = n + step
        new_size = sizes[i] + sizes[j]
        merges.append(Merge(i, j, float(np.sqrt(best)), new_size))
        active.remove(i)
        active.remove(j)
        for k in active:
            d_ki = d2.pop((min(i, k), max(i, k)))
            d_kj = d2.pop((min(j, k), max(j, k)))
            nk = sizes[k]
            d2[(k, new_id)] = (
                (sizes[i] + nk) * d_ki + (sizes[j] + nk) * d_kj - nk * best
            ) / (new_size + nk)
        del d2[(i, j)]
        sizes[new_id] = new_size
        active.append(new_id)
    return Dendrogram(n, tuple(merges))


@dataclass(frozen=True)
class GroupAssignment:
    """A partition of speakers plus the centroid of each group.

    Group ids g0, g1, ... are assigned by descending group size, ties by
    the lexicographically smallest member speaker id.
    """

    feature: str
    threshold: float
    groups: dict[str, tuple[str, ...]]
    centroids: dict[str, np.ndarray]

    def group_of(self, speaker_id: str) -> str:
        for gid, members in self.groups.items():
            if speaker_id in members:
                return gid
        raise KeyError(f"speaker {speaker_id!r} not in any group")

    def to_json(self) -> str:
        return json.dumps(
            {
                "feature": self.feature,
                "threshold": self.threshold,
                "groups": {g: list(m) for g, m in self.groups.items()},
                "centroids": {g: [float(x) for x in c] for g, c in self.centroids.items()},
            },
            ensure_ascii=False,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroupAssignment":
        obj = json.loads(text)
        return cls(
            feature=obj["feature"],
            threshold=float(obj["threshold"]),
            groups={g: tuple(m) for g, m in obj["groups"].items()},
            centroids={g: np.array(c, dtype=np.float64) for g, c in obj["centroids"].items()},
        )


def cut_dendrogram(
    dendrogram: Dendrogram,
    threshold: float,
    speaker_ids: list[str],
    profiles: np.ndarray,
    feature: str = "custom",
) -> GroupAssignment:
    """Cut a dendrogram: apply merges with distance strictly below threshold.

    `speaker_ids` and `profiles` give the leaf labels and vectors in
    dendrogram leaf order; they are needed to name the groups and compute
    centroids.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if len(speaker_ids) != dendrogram.n_leaves or len(profiles) != dendrogram.n_leaves:
        raise ValueError("speaker ids / profiles do not match dendrogram leaves")
    profiles = np.asarray(profiles, dtype=np.float64)

    members: dict[int, list[int]] = {i: [i] for i in range(dendrogram.n_leaves)}
    for step, merge in enumerate(dendrogram.merges):
        if merge.distance >= threshold:
            break  # distances are non-decreasing: later merges are too far apart
        new_id = dendrogram.n_leaves + step
        members[new_id] = members.pop(merge.left) + members.pop(merge.right)

    clusters = []
    for leaf_indices in members.values():
        ids = sorted(speaker_ids[i] for i in leaf_indices)
        centroid = profiles[leaf_indices].mean(axis=0)
        clusters.append((ids, centroid))
    clusters.sort(key=lambda c: (-len(c[0]), c[0][0]))
    groups = {f"g{k}": tuple(ids) for k, (ids, _) in enumerate(clusters)}
    centroids = {f"g{k}": centroid for k, (_, centroid) in enumerate(clusters)}
    return GroupAssignment(feature, float(threshold), groups, centroids)


def assign_group(assignment: GroupAssignment, profile: np.ndarray) -> str:
    """Id of the group whose centroid is nearest (ties: first-created group)."""
    if not assignment.groups:
        raise ValueError("empty group assignment")
    profile = np.asarray(profile, dtype=np.float64)
    best_gid = None
    best = np.inf
    for gid, centroid in assignment.centroids.items():
        if centroid.shape != profile.shape:
            raise ValueError(
                f"profile dimension {profile.shape} does not match centroid {centroid.shape}"
            )
        d = float(np.linalg.norm(profile - centroid))
        if d < best:
            best = d
            best_gid = gid
    return best_gid


def split_corpus_by_group(
    corpus: AnnotatedCorpus, assignment: GroupAssignment
) -> dict[str, AnnotatedCorpus]:
    """One sub-corpus per group, sharing the parent vocabulary."""
    out = {}
    for gid, members in assignment.groups.items():
        speakers = {sid: corpus.speakers[sid] for sid in members if sid in corpus.speakers}
        out[gid] = AnnotatedCorpus(corpus.vocabulary, speakers)
    return out
