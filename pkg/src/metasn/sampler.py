"""Episode construction, biased toward hard class combinations and instances.

Hardness mode picks the first class uniformly, then each further class with
probability proportional to the mean (over already chosen classes) of the
row-normalised closeness ``exp(-dis(f0(c_i), f0(c_j)))``. Inside each class,
documents far from the class embedding are more likely to be drawn.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import ClassMeta, CorpusError, Document, SplitDataset
from .encoder import pairwise_distances_np

SAMPLER_MODES = ("hardness", "uniform")
STREAMS = ("class", "instance", "init", "val", "test")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    target_classes: tuple[int, ...]
    support: dict[int, tuple[Document, ...]]
    query: dict[int, tuple[Document, ...]]
    episode_id: int = 0

    @property
    def n_way(self) -> int:
        return len(self.target_classes)

    def support_docs(self) -> list[Document]:
        """Supports in class order (class-major)."""
        return [d for c in self.target_classes for d in self.support[c]]

    def query_docs(self) -> list[Document]:
        return [d for c in self.target_classes for d in self.query[c]]

    def query_labels(self) -> np.ndarray:
        """Index into target_classes of each query (class-major order)."""
        return np.array([i for i, c in enumerate(self.target_classes) for _ in self.query[c]], dtype=np.intp)

    def support_labels(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.target_classes) for _ in self.support[c]], dtype=np.intp)

    def to_json(self, classes: Mapping[int, ClassMeta] | None = None) -> dict:
        rec = {
            "episode": self.episode_id,
            "class_ids": list(self.target_classes),
            "support": {str(c): [d.id for d in self.support[c]] for c in self.target_classes},
            "query": {str(c): [d.id for d in self.query[c]] for c in self.target_classes},
        }
        if classes is not None:
            rec["classes"] = [classes[c].label for c in self.target_classes]
        return rec


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def draw_index(weights: np.ndarray, rng: np.random.Generator) -> int:
    """One index with probability proportional to non-negative ``weights``."""
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if not total > 0:
        raise SamplerError("cannot draw from an all-zero weight vector")
    i = int(np.searchsorted(cdf, rng.random() * total, side="right"))
    return min(i, len(weights) - 1)


def draw_without_replacement(probs: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k distinct indices by repeated single draws, renormalising after each."""
    w = np.array(probs, dtype=np.float64, copy=True)
    if k > np.count_nonzero(w):
        raise SamplerError(f"cannot draw {k} items from {np.count_nonzero(w)} with non-zero probability")
    out = []
    for _ in range(k):
        i = draw_index(w, rng)
        out.append(i)
        w[i] = 0.0
    return out


def class_step_probs(
    chosen: Sequence[int],
    candidates: Sequence[int],
    classes: Mapping[int, ClassMeta],
    metric: str = "euclidean",
) -> np.ndarray:
    """Probability of each candidate being the next class of a hard episode.

    For every chosen class, closeness to all classes in ``classes`` is
    softmax-normalised (self included); those rows are averaged over the chosen
    classes and renormalised over ``candidates``.
    """
    if len(candidates) == 0:
        raise SamplerError("class_step_probs: empty candidate set")
    if len(chosen) == 0:
        raise SamplerError("class_step_probs: no chosen class")
    if set(chosen) & set(candidates):
        raise SamplerError("class_step_probs: chosen and candidate classes overlap")
    universe = sorted(set(classes) | set(chosen) | set(candidates))
    col = {c: i for i, c in enumerate(universe)}
    f_all = np.array([classes[c].init_embedding for c in universe])
    f_chosen = f_all[[col[c] for c in chosen]]
    neg = -pairwise_distances_np(f_chosen, f_all, metric)
    neg -= neg.max(axis=1, keepdims=True)
    rows = np.exp(neg)
    rows /= rows.sum(axis=1, keepdims=True)
    p = rows[:, [col[c] for c in candidates]].mean(axis=0)
    return p / p.sum()


def instance_probs(
    class_id: int,
    dataset: SplitDataset,
    exclude: Sequence[str] | set = (),
    metric: str = "euclidean",
) -> tuple[list[int], np.ndarray]:
    """(document indices, probabilities) over the class's non-excluded documents.

    Probability grows as exp(+distance) from the class embedding.
    """
    docs = dataset.docs_by_class[class_id]
    exclude = set(exclude)
    keep = [i for i, d in enumerate(docs) if d.id not in exclude]
    if not keep:
        raise SamplerError(f"class {class_id}: every document is excluded")
    f0 = dataset.doc_init_embeddings(class_id)[keep]
    centre = dataset.classes[class_id].init_embedding[None, :]
    score = pairwise_distances_np(centre, f0, metric)[0]
    w = np.exp(score - score.max())
    return keep, w / w.sum()


def sample_classes(
    dataset: SplitDataset,
    split: str,
    n_way: int,
    mode: str,
    rng: np.random.Generator,
    metric: str = "euclidean",
) -> list[int]:
    ids = dataset.class_ids(split)
    if len(ids) < n_way:
        raise SamplerError(f"split {split!r} has {len(ids)} classes, fewer than the {n_way} required")
    if mode == "uniform":
        return [ids[i] for i in rng.choice(len(ids), size=n_way, replace=False)]
    if mode != "hardness":
        raise SamplerError(f"unknown sampler mode {mode!r}")
    split_classes = {c: dataset.classes[c] for c in ids}
    chosen = [ids[int(rng.integers(len(ids)))]]
    while len(chosen) < n_way:
        cand = [c for c in ids if c not in chosen]
        p = class_step_probs(chosen, cand, split_classes, metric)
        chosen.append(cand[draw_index(p, rng)])
    return chosen


def sample_episode(
    dataset: SplitDataset,
    split: str,
    n_way: int,
    k_shot: int,
    l_query: int,
    mode: str,
    rng: np.random.Generator,
    instance_rng: np.random.Generator | None = None,
    metric: str = "euclidean",
    episode_id: int = 0,
) -> Episode:
    """One N-way K-shot episode with L queries per class.

    ``rng`` drives class choice; ``instance_rng`` (default: ``rng``) drives
    document choice.
    """
    if min(n_way, k_shot, l_query) < 1:
        raise SamplerError("n_way, k_shot and l_query must be positive")
    if instance_rng is None:
        instance_rng = rng
    try:
        dataset.require(split, n_way)
    except CorpusError as exc:
        raise SamplerError(str(exc)) from None
    classes = sample_classes(dataset, split, n_way, mode, rng, metric)
    support, query = {}, {}
    for cid in classes:
        docs = dataset.docs_by_class[cid]
        if len(docs) < k_shot + l_query:
            raise SamplerError(
                f"class {dataset.classes[cid].label!r} has {len(docs)} documents, "
                f"needs {k_shot + l_query}"
            )
        if mode == "uniform":
            pick = instance_rng.choice(len(docs), size=k_shot + l_query, replace=False)
            support[cid] = tuple(docs[i] for i in pick[:k_shot])
            query[cid] = tuple(docs[i] for i in pick[k_shot:])
            continue
        keep, p = instance_probs(cid, dataset, (), metric)
        s_idx = [keep[i] for i in draw_without_replacement(p, k_shot, instance_rng)]
        support[cid] = tuple(docs[i] for i in s_idx)
        keep, p = instance_probs(cid, dataset, {docs[i].id for i in s_idx}, metric)
        q_idx = [keep[i] for i in draw_without_replacement(p, l_query, instance_rng)]
        query[cid] = tuple(docs[i] for i in q_idx)
    return Episode(tuple(classes), support, query, episode_id)


def sample_episodes(
    dataset: SplitDataset,
    split: str,
    count: int,
    n_way: int,
    k_shot: int,
    l_query: int,
    mode: str,
    seed: int,
    metric: str = "euclidean",
) -> list[Episode]:
    """A reproducible list of episodes from one seed."""
    class_rng, inst_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return [
        sample_episode(dataset, split, n_way, k_shot, l_query, mode, class_rng, inst_rng, metric, i)
        for i in range(count)
    ]
