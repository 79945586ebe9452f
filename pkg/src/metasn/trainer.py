"""Meta-training: weighted contrastive inner step, cross-entropy outer step.

Per episode the encoder takes one plain gradient step on the weighted
contrastive loss over (prototype, prototype) and (support, prototype) pairs,
then the cross-entropy of the queries against the prototypes is measured at
the adapted parameters. The outer update averages those query-loss gradients
over the epoch's episodes (first-order: the adapted parameters are treated as
if they were the originals) and applies one Adam step.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import ClassMeta, Document, SplitDataset
from .encoder import Encoder, EncoderConfig, distance_matrix, init_params, pairwise_distances_np, prototype_matrix, row_distance
from .numerics import autodiff as ad
from .sampler import Episode, rng_streams, sample_episode, sample_episodes

log = logging.getLogger(__name__)

ABLATIONS = ("rpv", "ew", "rts", "ln")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplePair:
    left: Document | ClassMeta
    right: ClassMeta
    y: int
    w: float = float("nan")
    kind: str = "support_proto"


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 5
    k_shot: int = 1
    l_query: int = 25
    tasks_per_epoch: int = 3
    max_epochs: int = 1000
    inner_lr: float = 0.2
    outer_lr: float = 2e-5
    pair_weight_alpha: float = 5.0
    margin_delta: float = 10.0
    patience: int = 20
    rpv: bool = False
    ew: bool = False
    rts: bool = False
    ln: bool = False
    proto_pairs: bool = True
    seed: int = 0
    val_episodes: int = 100
    val_split: str = "val"
    val_mode: str = "uniform"
    adapt_at_eval: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("n_way", "k_shot", "l_query", "tasks_per_epoch", "max_epochs", "val_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be non-negative (inner) and positive (outer)")
        if self.pair_weight_alpha < 0 or self.margin_delta <= 0:
            raise ValueError("pair_weight_alpha must be >= 0 and margin_delta > 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    @property
    def knowledge_mode(self) -> str:
        return "name_only" if self.ln else "name_plus_description"

    @property
    def prototype_mode(self) -> str:
        return "support_mean" if self.rpv else "label_text"

    @property
    def sampler_mode(self) -> str:
        return "uniform" if self.rts else "hardness"

    def with_ablations(self, flags: Sequence[str]) -> "TrainConfig":
        unknown = set(flags) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        return replace(self, **{f: True for f in flags})


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    best_params: dict[str, np.ndarray] | None = None
    bad_epochs: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], rngs=None) -> "TrainState":
        params = {k: np.array(v, copy=True) for k, v in params.items()}
        zeros = lambda: {k: np.zeros_like(v) for k, v in params.items()}  # noqa: E731
        return cls(params, zeros(), zeros(), rngs=rngs or {})


# ------------------------------------------------------------------ pairs


def build_pairs(episode: Episode, classes: Mapping[int, ClassMeta], knowledge_mode: str = "name_plus_description", proto_pairs: bool = True) -> list[SamplePair]:
    """All prototype pairs (i < j, label 0) and every support with every prototype."""
    protos = [classes[c] for c in episode.target_classes]
    pairs = []
    if proto_pairs:
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                pairs.append(SamplePair(protos[i], protos[j], 0, kind="proto_proto"))
    for doc in episode.support_docs():
        for p in protos:
            pairs.append(SamplePair(doc, p, int(doc.class_id == p.class_id), kind="support_proto"))
    return pairs


def support_weights(episode: Episode, params: Mapping, encoder: Encoder, metric: str | None = None) -> np.ndarray:
    """Softmax over supports of minus the mean distance to the episode's queries."""
    metric = metric or encoder.config.distance
    queries = episode.query_docs()
    if not queries:
        raise TrainingError("cannot weight supports without queries")
    s = encoder.encode_values([d.tokens for d in episode.support_docs()], params)
    q = encoder.encode_values([d.tokens for d in queries], params)
    score = -pairwise_distances_np(s, q, metric).mean(axis=1)
    e = np.exp(score - score.max())
    return e / e.sum()


def compute_weights(pairs: Sequence[SamplePair], episode: Episode, params: Mapping, encoder: Encoder, config: TrainConfig) -> list[SamplePair]:
    """Attach weights: alpha for prototype pairs, the support's weight otherwise."""
    supports = episode.support_docs()
    if config.ew:
        sw = np.full(len(supports), 1.0 / len(supports))
    else:
        sw = support_weights(episode, params, encoder)
    by_id = {d.id: float(w) for d, w in zip(supports, sw)}
    out = []
    for p in pairs:
        if p.kind == "proto_proto":
            out.append(replace(p, w=float(config.pair_weight_alpha)))
        else:
            out.append(replace(p, w=by_id[p.left.id]))
    return out


# ------------------------------------------------------------------ losses


def contrastive_loss(pairs: Sequence[SamplePair], params: Mapping, encoder: Encoder, config: TrainConfig, episode: Episode | None = None) -> ad.Node:
    """Weighted contrastive loss: y*dis + (1-y)*max(0, margin - dis), summed."""
    if not pairs:
        return ad.const(0.0)
    metric = encoder.config.distance
    docs: dict[str, Document] = {}
    protos: dict[int, ClassMeta] = {}
    for p in pairs:
        if isinstance(p.left, Document):
            docs.setdefault(p.left.id, p.left)
        else:
            protos.setdefault(p.left.class_id, p.left)
        protos.setdefault(p.right.class_id, p.right)
    doc_ids = list(docs)
    if config.rpv:
        if episode is None:
            raise TrainingError("support-mean prototypes need the episode")
        for d in episode.support_docs():
            if d.id not in docs:
                docs[d.id] = d
                doc_ids.append(d.id)
    rows: list[ad.Node] = []
    doc_row = {}
    if doc_ids:
        enc_docs = encoder.encode_batch([docs[i].tokens for i in doc_ids], params)
        rows.append(enc_docs)
        doc_row = {i: r for r, i in enumerate(doc_ids)}
    proto_ids = list(protos)
    offset = len(doc_ids)
    if config.rpv:
        sub = Episode(tuple(proto_ids), {c: episode.support[c] for c in proto_ids}, {c: () for c in proto_ids})
        sup_rows = [doc_row[d.id] for d in sub.support_docs()]
        enc_p = prototype_matrix(sub, protos, params, encoder, "support_mean", support_encodings=ad.take(rows[0], np.array(sup_rows)))
    else:
        enc_p = encoder.encode_batch([protos[c].knowledge_tokens(config.knowledge_mode) for c in proto_ids], params)
    rows.append(enc_p)
    proto_row = {c: offset + r for r, c in enumerate(proto_ids)}
    table = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]

    left = np.array([doc_row[p.left.id] if isinstance(p.left, Document) else proto_row[p.left.class_id] for p in pairs])
    right = np.array([proto_row[p.right.class_id] for p in pairs])
    y = np.array([p.y for p in pairs], dtype=table.value.dtype)
    w = np.array([p.w for p in pairs], dtype=table.value.dtype)
    if not np.all(np.isfinite(w)):
        raise TrainingError("pairs must be weighted before computing the contrastive loss")
    dist = row_distance(ad.take(table, left), ad.take(table, right), metric)
    pos = ad.mul(y, dist)
    neg = ad.mul(1.0 - y, ad.relu(ad.sub(float(config.margin_delta), dist)))
    return ad.sum(ad.mul(w, ad.add(pos, neg)))


def query_logits(episode: Episode, params: Mapping, classes: Mapping[int, ClassMeta], encoder: Encoder, config: TrainConfig) -> ad.Node:
    """(N*L, N) negative distances of each query to each prototype."""
    q = encoder.encode_batch([d.tokens for d in episode.query_docs()], params)
    protos = prototype_matrix(episode, classes, params, encoder, config.prototype_mode, config.knowledge_mode)
    return ad.scale(distance_matrix(q, protos, encoder.config.distance), -1.0)


def query_loss(episode: Episode, params: Mapping, classes: Mapping[int, ClassMeta], encoder: Encoder, config: TrainConfig) -> ad.Node:
    """Mean softmax cross-entropy of all queries over -distance logits."""
    logits = query_logits(episode, params, classes, encoder, config)
    labels = episode.query_labels()
    picked = ad.take(logits, (np.arange(len(labels)), labels))
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), picked))


# ------------------------------------------------------------------ updates


def inner_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], inner_lr: float) -> dict[str, np.ndarray]:
    """One plain gradient step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite inner gradient for {name} (max |g| = {np.nanmax(np.abs(g))})")
    return {k: params[k] - inner_lr * grads[k] for k in params}


def _nodes(params: Mapping[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: ad.param(v, dtype=v.dtype) for k, v in params.items()}


def adapt(episode: Episode, params: Mapping[str, np.ndarray], classes: Mapping[int, ClassMeta], encoder: Encoder, config: TrainConfig) -> tuple[dict[str, np.ndarray], float]:
    """One inner step on the episode's weighted contrastive loss; returns (params', L_c)."""
    if config.inner_lr == 0:
        return dict(params), float("nan")
    pairs = compute_weights(build_pairs(episode, classes, config.knowledge_mode, config.proto_pairs), episode, params, encoder, config)
    nodes = _nodes(params)
    loss = contrastive_loss(pairs, nodes, encoder, config, episode)
    grads = ad.backward(loss, nodes)
    return inner_update(params, grads, config.inner_lr), float(loss.value)


def task_gradient(episode: Episode, params: Mapping[str, np.ndarray], classes: Mapping[int, ClassMeta], encoder: Encoder, config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Query loss at the adapted parameters and its first-order gradient."""
    adapted, _ = adapt(episode, params, classes, encoder, config)
    nodes = _nodes(adapted)
    loss = query_loss(episode, nodes, classes, encoder, config)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite query loss in episode {episode.episode_id}")
    return value, ad.backward(loss, nodes)


def meta_gradient(episodes: Sequence[Episode], params, classes, encoder, config) -> tuple[float, dict[str, np.ndarray]]:
    """Mean query loss over episodes and the mean first-order gradient."""
    if not episodes:
        raise TrainingError("meta step needs at least one episode")
    total = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    for ep in episodes:
        value, g = task_gradient(ep, params, classes, encoder, config)
        losses.append(value)
        for k in total:
            total[k] += g[k]
    n = len(episodes)
    return sum(losses) / n, {k: v / n for k, v in total.items()}


def adam_update(state: TrainState, grads: Mapping[str, np.ndarray], config: TrainConfig) -> None:
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        step = config.outer_lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
        state.params[k] = (state.params[k] - step).astype(state.params[k].dtype)


def meta_step(episodes: Sequence[Episode], state: TrainState, classes, encoder: Encoder, config: TrainConfig) -> float:
    """One outer update from ``episodes``; returns the mean query loss."""
    loss, grads = meta_gradient(episodes, state.params, classes, encoder, config)
    adam_update(state, grads, config)
    return loss


# ------------------------------------------------------------------ evaluation helpers


def predict_indices(neg_dist: np.ndarray, target_classes: Sequence[int]) -> np.ndarray:
    """Row-wise index (into target_classes) of the nearest prototype, ties to smallest class id."""
    order = np.argsort(np.asarray(target_classes), kind="stable")
    return order[np.argmax(neg_dist[:, order], axis=1)]


def episode_metrics(episode: Episode, params, classes, encoder: Encoder, config: TrainConfig) -> tuple[float, float, np.ndarray]:
    """(query loss, accuracy, predicted class indices) after optional adaptation."""
    if config.adapt_at_eval:
        params, _ = adapt(episode, params, classes, encoder, config)
    logits = query_logits(episode, params, classes, encoder, config)
    labels = episode.query_labels()
    lv = logits.value
    m = lv.max(axis=1, keepdims=True)
    lse = (np.log(np.exp(lv - m).sum(axis=1, keepdims=True)) + m)[:, 0]
    loss = float(np.mean(lse - lv[np.arange(len(labels)), labels]))
    pred = predict_indices(lv, episode.target_classes)
    return loss, float(np.mean(pred == labels)), pred


# ------------------------------------------------------------------ training loop


def train(
    dataset: SplitDataset,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    init: Mapping[str, np.ndarray] | None = None,
    on_epoch=None,
):
    """Meta-train with early stopping on validation query loss.

    Returns (best parameters, per-epoch log records).
    """
    encoder_config = encoder_config or EncoderConfig()
    if dataset.table is None:
        raise TrainingError("dataset has no embedding table")
    per_class = config.k_shot + config.l_query
    dataset.require("train", config.n_way, per_class)
    dataset.require(config.val_split, config.n_way, per_class)
    encoder = Encoder(dataset.table, encoder_config)
    metric = encoder_config.distance
    rngs = rng_streams(config.seed)
    params = dict(init) if init is not None else init_params(encoder_config, dataset.table.dim, rngs["init"])
    state = TrainState.fresh(params, rngs)
    val_seed = int(rngs["val"].integers(2**31))
    val_eps = sample_episodes(dataset, config.val_split, config.val_episodes, config.n_way, config.k_shot, config.l_query, config.val_mode, val_seed, metric)
    classes = dataset.classes
    records = []
    t0 = time.perf_counter()
    episode_counter = 0
    for epoch in range(1, config.max_epochs + 1):
        episodes = []
        for _ in range(config.tasks_per_epoch):
            episodes.append(
                sample_episode(dataset, "train", config.n_way, config.k_shot, config.l_query, config.sampler_mode, rngs["class"], rngs["instance"], metric, episode_counter)
            )
            episode_counter += 1
        meta_loss = meta_step(episodes, state, classes, encoder, config)
        val = [episode_metrics(ep, state.params, classes, encoder, config)[:2] for ep in val_eps]
        val_loss = float(np.mean([v[0] for v in val]))
        val_acc = float(np.mean([v[1] for v in val]))
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        state.epoch = epoch
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_params = {k: v.copy() for k, v in state.params.items()}
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        rec = {"epoch": epoch, "meta_loss": meta_loss, "val_loss": val_loss, "val_acc": val_acc, "seconds": time.perf_counter() - t0}
        records.append(rec)
        log.debug("epoch %d meta_loss %.5f val_loss %.5f val_acc %.4f", epoch, meta_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        if state.bad_epochs >= max(config.patience, 1):
            break
    return state.best_params, records


def loss_gradient_errors(
    episode: Episode, params: Mapping[str, np.ndarray], classes, encoder: Encoder, config: TrainConfig, step: float = 1e-4
) -> dict[str, float]:
    """Max relative error of reverse-mode vs central-difference gradients.

    Keys are "L_c/<param>" and "L_ce/<param>". Pair weights are computed once
    at ``params`` and held fixed, matching how the inner step treats them.
    """
    from .numerics import finite_diff_gradient, max_relative_error

    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    pairs = compute_weights(build_pairs(episode, classes, config.knowledge_mode, config.proto_pairs), episode, params, encoder, config)
    losses = {
        "L_c": lambda p: contrastive_loss(pairs, p, encoder, config, episode),
        "L_ce": lambda p: query_loss(episode, p, classes, encoder, config),
    }
    out = {}
    for name, fn in losses.items():
        nodes = _nodes(params)
        grads = ad.backward(fn(nodes), nodes)
        fd = finite_diff_gradient(lambda p: float(fn(p).value), params, step)
        for k in params:
            out[f"{name}/{k}"] = max_relative_error(grads[k], fd[k])
    return out


def proto_baseline_config(config: TrainConfig) -> TrainConfig:
    """Prototypical-network baseline: support means, uniform tasks, no inner step."""
    return replace(config, rts=True, rpv=True, ew=True, inner_lr=0.0, proto_pairs=False)


def proto_baseline_train(dataset: SplitDataset, config: TrainConfig, encoder_config: EncoderConfig | None = None):
    return train(dataset, proto_baseline_config(config), encoder_config)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
