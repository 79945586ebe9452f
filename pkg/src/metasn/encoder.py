"""Shared Siamese text encoder: TextCNN (conv/ReLU/max-pool per width) + FC."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .numerics import autodiff as ad
from .numerics.autodiff import Node

METRICS = ("euclidean", "squared_euclidean", "cosine")
PROTOTYPE_MODES = ("label_text", "support_mean")
CHECKPOINT_FORMAT = "metasn-checkpoint"
CHECKPOINT_VERSION = 1


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    filter_widths: tuple[int, ...] = (1, 3, 5)
    maps_per_width: int = 16
    d_fc: int = 64
    distance: str = "euclidean"
    dtype: str = "float64"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.filter_widths)
        object.__setattr__(self, "filter_widths", widths)
        if not widths or any(w <= 0 for w in widths):
            raise EncoderError("filter_widths must be positive")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise EncoderError("filter_widths must be strictly increasing")
        if self.maps_per_width <= 0 or self.d_fc <= 0:
            raise EncoderError("maps_per_width and d_fc must be positive")
        if self.distance not in METRICS:
            raise EncoderError(f"unknown distance {self.distance!r}")
        if self.dtype not in ("float32", "float64"):
            raise EncoderError(f"unsupported dtype {self.dtype!r}")

    @property
    def concat_dim(self) -> int:
        return self.maps_per_width * len(self.filter_widths)

    @property
    def max_width(self) -> int:
        return self.filter_widths[-1]


def param_shapes(config: EncoderConfig, embed_dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for w in config.filter_widths:
        shapes[f"conv{w}.weight"] = (config.maps_per_width, w, embed_dim)
        shapes[f"conv{w}.bias"] = (config.maps_per_width,)
    shapes["fc.weight"] = (config.concat_dim, config.d_fc)
    shapes["fc.bias"] = (config.d_fc,)
    return shapes


def init_params(config: EncoderConfig, embed_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config, embed_dim).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


class Encoder:
    """Maps token sequences to d_fc vectors given a parameter set.

    Parameters are passed per call so the same encoder serves both the
    current parameters and their one-step adapted copy.
    """

    def __init__(self, table: EmbeddingTable, config: EncoderConfig):
        self.table = table
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self._vectors = np.ascontiguousarray(table.vectors, dtype=self.dtype)
        self._idx_cache: dict[tuple[str, ...], np.ndarray] = {}

    def _indices(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        idx = self._idx_cache.get(key)
        if idx is None:
            if not key:
                raise EncoderError("cannot encode an empty token sequence")
            idx = self.table.indices(key)
            if len(self._idx_cache) < 200_000:
                self._idx_cache[key] = idx
        return idx

    def batch_inputs(self, token_lists: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
        """Zero-padded (B, T, d) word-vector batch and per-item valid lengths.

        Items shorter than the widest filter are padded with zero rows up to
        that width; those rows take part in the convolution.
        """
        idxs = [self._indices(t) for t in token_lists]
        lengths = np.array([max(len(i), self.config.max_width) for i in idxs], dtype=np.intp)
        x = np.zeros((len(idxs), int(lengths.max()), self.table.dim), dtype=self.dtype)
        for b, idx in enumerate(idxs):
            hit = idx >= 0
            x[b, : len(idx)][hit] = self._vectors[idx[hit]]
        return x, lengths

    def encode_batch(self, token_lists: Sequence[Sequence[str]], params: Mapping) -> Node:
        """(B, d_fc) encodings."""
        if len(token_lists) == 0:
            raise EncoderError("encode_batch: no items")
        x, lengths = self.batch_inputs(token_lists)
        p = {k: v if isinstance(v, Node) else ad.const(v, dtype=self.dtype) for k, v in params.items()}
        pooled = [
            ad.conv_relu_maxpool(x, lengths, p[f"conv{w}.weight"], p[f"conv{w}.bias"])
            for w in self.config.filter_widths
        ]
        h = ad.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
        return ad.affine(h, p["fc.weight"], p["fc.bias"])

    def encode(self, tokens: Sequence[str], params: Mapping) -> Node:
        """(d_fc,) encoding of one token sequence."""
        return ad.reshape(self.encode_batch([tokens], params), (self.config.d_fc,))

    def encode_values(self, token_lists: Sequence[Sequence[str]], params: Mapping, chunk: int = 512) -> np.ndarray:
        """Plain forward pass without building a gradient graph."""
        vals = {k: (v.value if isinstance(v, Node) else v) for k, v in params.items()}
        out = [self.encode_batch(token_lists[i : i + chunk], vals).value for i in range(0, len(token_lists), chunk)]
        return np.concatenate(out, axis=0)


# ------------------------------------------------------------------ distances


def _check_metric(metric):
    if metric not in METRICS:
        raise EncoderError(f"unknown distance {metric!r}")


def row_distance(u, v, metric: str = "euclidean") -> Node:
    """Distance between matching rows of (..., d) operands; broadcasting allowed."""
    _check_metric(metric)
    u, v = ad._as_node(u), ad._as_node(v)
    if u.shape[-1] != v.shape[-1]:
        raise ad.ShapeError("distance", u.shape, v.shape)
    if metric == "cosine":
        nu = ad.sqrt(ad.sum(ad.square(u), axis=-1))
        nv = ad.sqrt(ad.sum(ad.square(v), axis=-1))
        if np.any(nu.value == 0) or np.any(nv.value == 0):
            raise EncoderError("cosine distance with a zero vector")
        dot = ad.sum(ad.mul(u, v), axis=-1)
        return ad.sub(1.0, ad.div(dot, ad.mul(nu, nv)))
    sq = ad.sum(ad.square(ad.sub(u, v)), axis=-1)
    return sq if metric == "squared_euclidean" else ad.sqrt(sq)


def distance(u, v, metric: str = "euclidean") -> Node:
    return row_distance(u, v, metric)


def distance_matrix(a, b, metric: str = "euclidean") -> Node:
    """(n, m) distances between rows of a (n, d) and b (m, d)."""
    a, b = ad._as_node(a), ad._as_node(b)
    if a.shape[-1] != b.shape[-1]:
        raise ad.ShapeError("distance", a.shape, b.shape)
    n, d = a.shape
    m = b.shape[0]
    return row_distance(ad.reshape(a, (n, 1, d)), ad.reshape(b, (1, m, d)), metric)


def pairwise_distances_np(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Numpy-only (n, m) distance matrix."""
    _check_metric(metric)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ad.ShapeError("distance", a.shape, b.shape)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise EncoderError("cosine distance with a zero vector")
        return 1.0 - (a @ b.T) / np.outer(na, nb)
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return sq if metric == "squared_euclidean" else np.sqrt(sq)


# ------------------------------------------------------------------ prototypes


def prototype_matrix(
    episode,
    classes: Mapping,
    params: Mapping,
    encoder: Encoder,
    mode: str = "label_text",
    knowledge_mode: str = "name_plus_description",
    support_encodings: Node | None = None,
) -> Node:
    """(N, d_fc) prototypes in the episode's class order.

    label_text encodes each class's knowledge text; support_mean averages
    the encoded supports of each class.
    """
    if mode == "label_text":
        texts = [classes[c].knowledge_tokens(knowledge_mode) for c in episode.target_classes]
        return encoder.encode_batch(texts, params)
    if mode != "support_mean":
        raise EncoderError(f"unknown prototype mode {mode!r}")
    if support_encodings is None:
        support_encodings = encoder.encode_batch([d.tokens for d in episode.support_docs()], params)
    labels = episode.support_labels()
    avg = np.zeros((episode.n_way, len(labels)), dtype=support_encodings.value.dtype)
    for j, lab in enumerate(labels):
        avg[lab, j] = 1.0
    avg /= avg.sum(axis=1, keepdims=True)
    return ad.matmul(ad.const(avg, dtype=avg.dtype), support_encodings)


def encode_prototype(
    class_meta,
    episode,
    params: Mapping,
    encoder: Encoder,
    mode: str = "label_text",
    knowledge_mode: str = "name_plus_description",
) -> Node:
    """(d_fc,) prototype of one class."""
    if mode == "label_text":
        return encoder.encode(class_meta.knowledge_tokens(knowledge_mode), params)
    if mode != "support_mean":
        raise EncoderError(f"unknown prototype mode {mode!r}")
    docs = episode.support[class_meta.class_id]
    if not docs:
        raise EncoderError(f"class {class_meta.label!r} has no supports")
    return ad.mean(encoder.encode_batch([d.tokens for d in docs], params), axis=0)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: EncoderConfig, embed_dim: int, extra=None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_config": asdict(config),
        "embed_dim": int(embed_dim),
        "params": {
            name: {
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist(),
            }
            for name, arr in params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], EncoderConfig, int, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise EncoderError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise EncoderError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cfg = doc["encoder_config"]
    cfg["filter_widths"] = tuple(cfg["filter_widths"])
    config = EncoderConfig(**cfg)
    embed_dim = int(doc["embed_dim"])
    params = {
        name: np.array(entry["data"], dtype=np.float64).astype(entry["dtype"]).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    expected = param_shapes(config, embed_dim)
    for name, shape in expected.items():
        if name not in params or tuple(params[name].shape) != shape:
            raise EncoderError(f"{path}: parameter {name} missing or mis-shaped")
    return params, config, embed_dim, doc.get("extra", {})


def check_compatible(config: EncoderConfig, embed_dim: int, expected: EncoderConfig, expected_dim: int) -> None:
    """Raise naming the first mismatching field between a checkpoint and a run."""
    if embed_dim != expected_dim:
        raise EncoderError(f"embedding dimension mismatch: checkpoint {embed_dim}, data {expected_dim}")
    for f in ("filter_widths", "maps_per_width", "d_fc", "distance"):
        a, b = getattr(config, f), getattr(expected, f)
        if a != b:
            raise EncoderError(f"{f} mismatch: checkpoint {a}, config {b}")
