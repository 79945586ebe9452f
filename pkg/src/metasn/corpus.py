"""Labelled documents, class knowledge, class-disjoint splits, synthetic corpora."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embeddings import AllOOVError, EmbeddingTable, embed_avg, tokenize, write_vec_file

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
KNOWLEDGE_MODES = ("name_only", "name_plus_description")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[str, ...]
    class_id: int

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"document {self.id!r} has no tokens")


@dataclass(frozen=True, eq=False)
class ClassMeta:
    class_id: int
    label: str
    name_tokens: tuple[str, ...]
    description_tokens: tuple[str, ...]
    init_embedding: np.ndarray

    def __post_init__(self):
        if not self.name_tokens:
            raise CorpusError(f"class {self.label!r} has no name tokens")
        if not np.all(np.isfinite(self.init_embedding)):
            raise CorpusError(f"class {self.label!r} has a non-finite initial embedding")

    def knowledge_tokens(self, knowledge_mode: str = "name_plus_description") -> tuple[str, ...]:
        """Tokens of the class text: name, then description unless name_only."""
        if knowledge_mode == "name_only":
            return self.name_tokens
        if knowledge_mode == "name_plus_description":
            return self.name_tokens + self.description_tokens
        raise CorpusError(f"unknown knowledge mode {knowledge_mode!r}")


@dataclass(eq=False)
class SplitDataset:
    classes: dict[int, ClassMeta]
    docs_by_class: dict[int, list[Document]]
    split: dict[int, str]
    table: EmbeddingTable | None = None
    _doc_f0: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for cid in self.docs_by_class:
            if cid not in self.classes:
                raise CorpusError(f"documents reference unknown class id {cid}")
            if cid not in self.split:
                raise CorpusError(f"class {self.classes[cid].label!r} is not assigned to a split")
        for cid, name in self.split.items():
            if name not in SPLITS:
                raise CorpusError(f"unknown split {name!r} for class {cid}")
        seen: set[str] = set()
        for docs in self.docs_by_class.values():
            for d in docs:
                if d.id in seen:
                    raise CorpusError(f"duplicate document id {d.id!r}")
                seen.add(d.id)
        check_disjoint(self.split)

    def class_ids(self, split: str) -> list[int]:
        return sorted(cid for cid, s in self.split.items() if s == split)

    @property
    def m(self) -> dict[int, int]:
        """Number of documents per class."""
        return {cid: len(docs) for cid, docs in self.docs_by_class.items()}

    @property
    def n_docs(self) -> int:
        return sum(len(d) for d in self.docs_by_class.values())

    def require(self, split: str, n_way: int, per_class: int = 0) -> list[int]:
        """Class ids of ``split`` after checking it can host n_way-way episodes."""
        ids = self.class_ids(split)
        if len(ids) < n_way:
            raise CorpusError(
                f"split {split!r} has {len(ids)} classes, fewer than the {n_way} required"
            )
        for cid in ids:
            have = len(self.docs_by_class.get(cid, ()))
            if have < per_class:
                raise CorpusError(
                    f"class {self.classes[cid].label!r} in split {split!r} has {have} documents, "
                    f"needs at least {per_class}"
                )
        return ids

    def doc_init_embeddings(self, class_id: int) -> np.ndarray:
        """f0 of every document of a class, (m_i, d); cached."""
        cached = self._doc_f0.get(class_id)
        if cached is None:
            if self.table is None:
                raise CorpusError("dataset has no embedding table")
            rows = []
            for doc in self.docs_by_class[class_id]:
                try:
                    rows.append(embed_avg(doc.tokens, self.table))
                except AllOOVError:
                    rows.append(np.zeros(self.table.dim, dtype=self.table.vectors.dtype))
            cached = np.array(rows).reshape(len(rows), self.table.dim)
            self._doc_f0[class_id] = cached
        return cached


def check_disjoint(split: Mapping[int, str]) -> None:
    by_split = {s: {c for c, v in split.items() if v == s} for s in SPLITS}
    for a in range(len(SPLITS)):
        for b in range(a + 1, len(SPLITS)):
            both = by_split[SPLITS[a]] & by_split[SPLITS[b]]
            if both:
                raise CorpusError(f"classes {sorted(both)} appear in both {SPLITS[a]} and {SPLITS[b]}")


# ------------------------------------------------------------------ ingestion


def load_jsonl(path, field_map: Mapping[str, str] | None = None):
    """Read one labelled document per line.

    ``field_map`` may name ``text``, ``label`` and ``id`` fields. Text may be
    a string (tokenized) or a list of tokens. Returns (documents, labels) with
    labels interned to class ids in first-seen order.
    """
    fm = {"text": "text", "label": "label", "id": "id"}
    fm.update(field_map or {})
    labels: list[str] = []
    label_ids: dict[str, int] = {}
    docs: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: unparsable JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            for key in ("text", "label"):
                if fm[key] not in obj:
                    raise CorpusError(f"{path}:{lineno}: missing field {fm[key]!r}")
            text = obj[fm["text"]]
            tokens = tuple(tokenize(text)) if isinstance(text, str) else tuple(str(t).lower() for t in text)
            if not tokens:
                raise CorpusError(f"{path}:{lineno}: empty text")
            label = str(obj[fm["label"]])
            if label not in label_ids:
                label_ids[label] = len(labels)
                labels.append(label)
            doc_id = str(obj.get(fm["id"], lineno))
            docs.append(Document(doc_id, tokens, label_ids[label]))
    return docs, labels


def load_class_knowledge(path) -> dict[str, tuple[str, str]]:
    """JSONL of {class, name, description} -> {class: (name, description)}."""
    out: dict[str, tuple[str, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: unparsable JSON ({exc.msg})") from None
            if "class" not in obj:
                raise CorpusError(f"{path}:{lineno}: missing field 'class'")
            label = str(obj["class"])
            out[label] = (str(obj.get("name") or label), str(obj.get("description") or ""))
    return out


def load_split_file(path) -> dict[str, str]:
    """Plain-text split file with [train] / [val] / [test] sections -> {class: split}."""
    assignment: dict[str, str] = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                if current not in SPLITS:
                    raise CorpusError(f"{path}:{lineno}: unknown section {line}")
                continue
            if current is None:
                raise CorpusError(f"{path}:{lineno}: class listed before any section")
            if line in assignment and assignment[line] != current:
                raise CorpusError(f"{path}:{lineno}: class {line!r} in both {assignment[line]} and {current}")
            assignment[line] = current
    return assignment


def write_split_file(split_by_label: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in SPLITS:
            fh.write(f"[{s}]\n")
            for label, v in split_by_label.items():
                if v == s:
                    fh.write(label + "\n")


def build_class_meta(
    labels: Sequence[str],
    descriptions: Mapping[str, tuple[str, str]] | None,
    table: EmbeddingTable,
    knowledge_mode: str = "name_plus_description",
    seed: int = 0,
    on_oov: str = "fallback",
) -> dict[int, ClassMeta]:
    """ClassMeta per label, with f0(c) = mean word vector of the class text.

    With ``on_oov="fallback"`` a class whose text is entirely out of
    vocabulary gets a seeded random unit vector and a warning; with
    ``on_oov="error"`` it raises.
    """
    if knowledge_mode not in KNOWLEDGE_MODES:
        raise CorpusError(f"unknown knowledge mode {knowledge_mode!r}")
    descriptions = descriptions or {}
    out: dict[int, ClassMeta] = {}
    for cid, label in enumerate(labels):
        name, desc = descriptions.get(label, (label, ""))
        name_tokens = tuple(tokenize(name))
        desc_tokens = tuple(tokenize(desc))
        if not name_tokens:
            raise CorpusError(f"class {label!r} has an empty name")
        tokens = name_tokens if knowledge_mode == "name_only" else name_tokens + desc_tokens
        try:
            f0 = embed_avg(tokens, table)
        except AllOOVError:
            if on_oov == "error":
                raise AllOOVError(
                    f"class {label!r}: all knowledge tokens are out of vocabulary; "
                    "use on_oov='fallback' for a random unit vector"
                ) from None
            log.warning("class %r: knowledge tokens all OOV, using a random unit vector", label)
            rng = np.random.default_rng([seed, cid])
            f0 = rng.standard_normal(table.dim)
            f0 /= np.linalg.norm(f0)
        out[cid] = ClassMeta(cid, label, name_tokens, desc_tokens, np.asarray(f0, dtype=table.vectors.dtype))
    return out


def split_dataset(
    docs: Sequence[Document],
    classes: Mapping[int, ClassMeta],
    split_spec: Mapping,
    table: EmbeddingTable | None = None,
) -> SplitDataset:
    """Partition documents by class into train/val/test.

    ``split_spec`` maps class label (or class id) to a split name.
    """
    by_label = {c.label: cid for cid, c in classes.items()}
    split: dict[int, str] = {}
    for key, name in split_spec.items():
        cid = key if isinstance(key, int) else by_label.get(str(key))
        if cid is None or cid not in classes:
            raise CorpusError(f"split file names unknown class {key!r}")
        if cid in split and split[cid] != name:
            raise CorpusError(f"class {key!r} appears in two splits")
        split[cid] = name
    for cid, c in classes.items():
        if cid not in split:
            raise CorpusError(f"class {c.label!r} is not assigned to a split")
    docs_by_class: dict[int, list[Document]] = {cid: [] for cid in classes}
    for d in docs:
        if d.class_id not in docs_by_class:
            raise CorpusError(f"document {d.id!r} has unknown class id {d.class_id}")
        docs_by_class[d.class_id].append(d)
    return SplitDataset(dict(classes), docs_by_class, split, table)


def load_dataset(
    corpus_path,
    splits_path,
    table: EmbeddingTable,
    knowledge_path=None,
    knowledge_mode: str = "name_plus_description",
    field_map=None,
    seed: int = 0,
) -> SplitDataset:
    docs, labels = load_jsonl(corpus_path, field_map)
    knowledge = load_class_knowledge(knowledge_path) if knowledge_path else None
    classes = build_class_meta(labels, knowledge, table, knowledge_mode, seed)
    return split_dataset(docs, classes, load_split_file(splits_path), table)


# ------------------------------------------------------------------ synthetic


def synth_corpus(
    n_classes: int,
    docs_per_class: int,
    doc_len: int,
    vocab_per_class: int,
    overlap: float,
    embed_dim: int,
    seed: int,
    split_counts: tuple[int, int, int] | None = None,
    description_len: int | None = None,
    vocab_size: int | None = None,
    knowledge_mode: str = "name_plus_description",
):
    """Generate a labelled corpus with controllable class overlap.

    Each class owns a pool of ``vocab_per_class`` tokens of which a fraction
    ``overlap`` is a pool shared by every class. Documents draw tokens i.i.d.
    uniformly from their class pool. Word vectors are i.i.d. N(0, 1/embed_dim).
    The class name is its first pool token, its description the first
    ``description_len`` pool tokens, default the whole pool (own tokens precede
    shared ones). With i.i.d. word vectors, classes stay separable by their mean
    vector only for small pools (about 8 tokens or fewer at embed_dim 16).
    Returns (SplitDataset, EmbeddingTable).
    """
    for name, v in [
        ("n_classes", n_classes),
        ("docs_per_class", docs_per_class),
        ("doc_len", doc_len),
        ("vocab_per_class", vocab_per_class),
        ("embed_dim", embed_dim),
    ]:
        if int(v) <= 0:
            raise CorpusError(f"{name} must be positive")
    if not 0.0 <= overlap <= 1.0:
        raise CorpusError("overlap must lie in [0, 1]")
    n_shared = int(round(overlap * vocab_per_class))
    n_own = vocab_per_class - n_shared
    needed = n_shared + n_classes * n_own
    if vocab_size is None:
        vocab_size = needed
    if vocab_size < needed:
        raise CorpusError(
            f"vocabulary of {vocab_size} words exhausted: pools need {needed} distinct words"
        )
    if split_counts is None:
        n_train = (n_classes + 1) // 2
        n_val = int(round(0.2 * n_classes))
        split_counts = (n_train, n_val, n_classes - n_train - n_val)
    if sum(split_counts) != n_classes or min(split_counts) < 0:
        raise CorpusError(f"split counts {split_counts} do not partition {n_classes} classes")

    root = np.random.SeedSequence(seed)
    vec_rng, doc_rng = (np.random.default_rng(s) for s in root.spawn(2))
    words = [f"w{i:05d}" for i in range(vocab_size)]
    vectors = vec_rng.standard_normal((vocab_size, embed_dim)) / np.sqrt(embed_dim)
    table = EmbeddingTable({w: i for i, w in enumerate(words)}, vectors)

    shared = words[:n_shared]
    pools = [words[n_shared + c * n_own : n_shared + (c + 1) * n_own] + shared for c in range(n_classes)]
    labels = [f"class_{c:02d}" for c in range(n_classes)]
    if description_len is None:
        description_len = vocab_per_class
    knowledge = {
        labels[c]: (pools[c][0], " ".join(pools[c][:description_len])) for c in range(n_classes)
    }
    classes = build_class_meta(labels, knowledge, table, knowledge_mode, seed)
    docs = []
    for c in range(n_classes):
        pool = np.array(pools[c])
        for j in range(docs_per_class):
            toks = tuple(pool[doc_rng.integers(0, len(pool), size=doc_len)].tolist())
            docs.append(Document(f"d{c:02d}_{j:04d}", toks, c))
    names = []
    for s, count in zip(SPLITS, split_counts):
        names += [s] * count
    split_spec = {labels[c]: names[c] for c in range(n_classes)}
    return split_dataset(docs, classes, split_spec, table), table


def write_corpus(dataset: SplitDataset, out_dir, table: EmbeddingTable | None = None) -> dict[str, Path]:
    """Write corpus.jsonl, classes.jsonl, splits.txt and (optionally) embeddings.vec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "classes": out / "classes.jsonl",
        "splits": out / "splits.txt",
    }
    with open(paths["corpus"], "w", encoding="utf-8", newline="\n") as fh:
        for cid in sorted(dataset.docs_by_class):
            for d in dataset.docs_by_class[cid]:
                rec = {"id": d.id, "text": " ".join(d.tokens), "label": dataset.classes[cid].label}
                fh.write(json.dumps(rec) + "\n")
    with open(paths["classes"], "w", encoding="utf-8", newline="\n") as fh:
        for cid in sorted(dataset.classes):
            c = dataset.classes[cid]
            rec = {"class": c.label, "name": " ".join(c.name_tokens), "description": " ".join(c.description_tokens)}
            fh.write(json.dumps(rec) + "\n")
    write_split_file({dataset.classes[c].label: s for c, s in sorted(dataset.split.items())}, paths["splits"])
    if table is not None:
        paths["embeddings"] = out / "embeddings.vec"
        write_vec_file(table, paths["embeddings"])
    return paths
