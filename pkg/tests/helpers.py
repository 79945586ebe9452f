"""Small hand-built fixtures shared by several test modules."""
import numpy as np

from metasn.corpus import ClassMeta, Document, SplitDataset
from metasn.embeddings import EmbeddingTable
from metasn.encoder import Encoder, EncoderConfig
from metasn.sampler import Episode

# one "criterion N: PASS/FAIL ..." line per acceptance check, printed at session end
CRITERIA_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def identity_setup(class_vecs, doc_vecs, query_vecs=None):
    """Encoder whose output equals the (non-negative) vector of a one-token input.

    class_vecs[c] is the prototype encoding of class c; doc_vecs[c] its support
    encodings; query_vecs[c] its query encodings. Returns (encoder, params,
    classes, episode).
    """
    dim = len(class_vecs[0])
    words = {}
    classes, support, query = {}, {}, {}
    for c, cv in enumerate(class_vecs):
        words[f"c{c}"] = cv
        classes[c] = ClassMeta(c, f"class{c}", (f"c{c}",), (), np.asarray(cv, dtype=float))
        support[c] = []
        for j, v in enumerate(doc_vecs[c]):
            words[f"s{c}_{j}"] = v
            support[c].append(Document(f"s{c}_{j}", (f"s{c}_{j}",), c))
        query[c] = []
        for j, v in enumerate(query_vecs[c] if query_vecs else []):
            words[f"q{c}_{j}"] = v
            query[c].append(Document(f"q{c}_{j}", (f"q{c}_{j}",), c))
    table = EmbeddingTable.from_dict(words)
    cfg = EncoderConfig(filter_widths=(1,), maps_per_width=dim, d_fc=dim)
    params = {
        "conv1.weight": np.eye(dim)[:, None, :].copy(),
        "conv1.bias": np.zeros(dim),
        "fc.weight": np.eye(dim),
        "fc.bias": np.zeros(dim),
    }
    ids = tuple(range(len(class_vecs)))
    ep = Episode(ids, {c: tuple(support[c]) for c in ids}, {c: tuple(query[c]) for c in ids})
    return Encoder(table, cfg), params, classes, ep


def make_split_dataset(class_vecs, doc_vecs_by_class, split="train"):
    words, classes, docs = {}, {}, {}
    for cid, cvec in enumerate(class_vecs):
        words[f"c{cid}"] = cvec
        classes[cid] = ClassMeta(cid, f"class{cid}", (f"c{cid}",), (), np.asarray(cvec, dtype=float))
        docs[cid] = []
        for j, dvec in enumerate(doc_vecs_by_class[cid]):
            w = f"d{cid}_{j}"
            words[w] = dvec
            docs[cid].append(Document(w, (w,), cid))
    table = EmbeddingTable.from_dict(words)
    return SplitDataset(classes, docs, {c: split for c in classes}, table)
