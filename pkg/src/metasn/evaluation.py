"""Meta-testing: per-episode accuracy, multi-seed reports, embedding export."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import SplitDataset
from .encoder import Encoder, EncoderConfig, pairwise_distances_np
from .sampler import Episode, sample_episodes
from .trainer import TrainConfig, adapt, predict_indices, query_logits

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_episodes", "accuracy_mean", "accuracy_std", "per_episode", "config", "seeds"],
    "properties": {
        "n_episodes": {"type": "integer", "minimum": 1},
        "accuracy_mean": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy_std": {"type": "number", "minimum": 0},
        "seed_means": {"type": "array", "items": {"type": "number"}},
        "seed_std": {"type": "number", "minimum": 0},
        "per_episode": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "config": {"type": "object"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
    },
}


@dataclass
class EvalReport:
    n_episodes: int
    accuracy_mean: float
    accuracy_std: float
    per_episode: list[float]
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    seed_means: list[float] = field(default_factory=list)
    seed_std: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def classify_query(query_encoding: np.ndarray, prototypes: Mapping[int, np.ndarray], metric: str = "euclidean") -> int:
    """Class of the nearest prototype; exact ties go to the smallest class id."""
    if not prototypes:
        raise ValueError("classify_query needs at least one prototype")
    ids = sorted(prototypes)
    dist = pairwise_distances_np(np.asarray(query_encoding)[None, :], np.array([prototypes[c] for c in ids]), metric)[0]
    return ids[int(np.argmin(dist))]


def episode_accuracy(episode: Episode, params, classes, encoder: Encoder, config: TrainConfig) -> float:
    if config.adapt_at_eval:
        params, _ = adapt(episode, params, classes, encoder, config)
    logits = query_logits(episode, params, classes, encoder, config).value
    pred = predict_indices(logits, episode.target_classes)
    return float(np.mean(pred == episode.query_labels()))


def evaluate(
    dataset: SplitDataset,
    split: str,
    params: Mapping[str, np.ndarray],
    encoder_config: EncoderConfig,
    config: TrainConfig,
    n_episodes: int = 1000,
    seeds: Sequence[int] = (0,),
    n_way: int | None = None,
    k_shot: int | None = None,
    l_query: int | None = None,
    mode: str = "uniform",
    workers: int = 1,
) -> EvalReport:
    """Accuracy over ``n_episodes`` uniformly sampled episodes per seed.

    The headline mean is over all episodes of all seeds (equal counts per
    seed, so it equals the mean of the per-seed means). ``workers`` > 1
    scores episodes on a thread pool; results keep episode order.
    """
    n_way = n_way or config.n_way
    k_shot = k_shot or config.k_shot
    l_query = l_query or config.l_query
    dataset.require(split, n_way, k_shot + l_query)
    encoder = Encoder(dataset.table, encoder_config)
    per_episode: list[float] = []
    seed_means = []
    for seed in seeds:
        eps = sample_episodes(dataset, split, n_episodes, n_way, k_shot, l_query, mode, seed, encoder_config.distance)
        score = lambda ep: episode_accuracy(ep, params, dataset.classes, encoder, config)  # noqa: E731
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                accs = list(pool.map(score, eps))
        else:
            accs = [score(ep) for ep in eps]
        per_episode += accs
        seed_means.append(float(np.mean(accs)))
    snapshot = {
        "split": split,
        "n_way": n_way,
        "k_shot": k_shot,
        "l_query": l_query,
        "mode": mode,
        "prototype_mode": config.prototype_mode,
        "knowledge_mode": config.knowledge_mode,
        "adapt_at_eval": config.adapt_at_eval,
        "inner_lr": config.inner_lr,
        "encoder": asdict(encoder_config),
    }
    return EvalReport(
        n_episodes=n_episodes,
        accuracy_mean=float(np.mean(per_episode)),
        accuracy_std=float(np.std(per_episode)),
        per_episode=per_episode,
        config=snapshot,
        seeds=[int(s) for s in seeds],
        seed_means=seed_means,
        seed_std=float(np.std(seed_means)),
    )


def export_embeddings(episodes: Sequence[Episode], params, encoder: Encoder, path, classes=None) -> int:
    """Write one TSV row per query: episode id, doc id, embedding values, label."""
    d_fc = encoder.config.d_fc
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["episode", "doc_id"] + [f"e{i}" for i in range(d_fc)] + ["label"])
        for ep in episodes:
            docs = ep.query_docs()
            enc = encoder.encode_values([d.tokens for d in docs], params)
            for doc, vec in zip(docs, enc):
                label = classes[doc.class_id].label if classes is not None else doc.class_id
                w.writerow([ep.episode_id, doc.id] + [repr(float(v)) for v in vec] + [label])
                rows += 1
    return rows
