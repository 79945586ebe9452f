"""Command-line front end: train, eval, synth, sample, gradcheck, export-embeddings.

Run settings come from one JSON document (``--config``); any field can be
overridden with ``--field value`` (values parsed as JSON when possible).
Exit codes: 0 success, 1 runtime failure, 2 configuration/validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .corpus import CorpusError, SplitDataset, load_dataset, synth_corpus, write_corpus
from .embeddings import EmbeddingError, load_vec_file
from .encoder import Encoder, EncoderConfig, EncoderError, check_compatible, init_params, load_checkpoint, save_checkpoint
from .evaluation import evaluate, export_embeddings
from .sampler import SAMPLER_MODES, SamplerError, sample_episode, sample_episodes
from .trainer import ABLATIONS, TrainConfig, TrainingError, loss_gradient_errors, train

log = logging.getLogger("metasn")

SEED_ENV = "METASN_SEED"
PATH_FIELDS = ("corpus", "splits", "embeddings", "class_knowledge")
ALIASES = {"n": "n_way", "k": "k_shot", "l": "l_query", "knowledge": "class_knowledge", "out": "output_dir"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_ENCODER_FIELDS = {f.name for f in fields(EncoderConfig)}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    corpus: str | None = None
    splits: str | None = None
    embeddings: str | None = None
    class_knowledge: str | None = None
    field_map: dict | None = None
    oov_policy: str = "skip"
    output_dir: str = "run"
    ablation: list[str] = field(default_factory=list)
    eval_split: str = "test"
    eval_mode: str = "uniform"
    n_episodes: int = 1000
    eval_seeds: list[int] = field(default_factory=lambda: [0])
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("train", "encoder")}
        out.update(asdict(self.train))
        enc = asdict(self.encoder)
        enc["filter_widths"] = list(enc["filter_widths"])
        out.update(enc)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        run, tr, enc = {}, {}, {}
        own = {f.name for f in fields(cls)} - {"train", "encoder"}
        for key, value in data.items():
            key = ALIASES.get(key, key)
            if key in own:
                run[key] = value
            elif key in _TRAIN_FIELDS:
                tr[key] = value
            elif key in _ENCODER_FIELDS:
                enc[key] = value
            else:
                raise ConfigError(f"unknown config field {key!r}")
        if isinstance(run.get("ablation"), str):
            run["ablation"] = [a for a in run["ablation"].split(",") if a]
        if "seed" not in tr:
            env = os.environ.get(SEED_ENV)
            if env is not None:
                try:
                    tr["seed"] = int(env)
                except ValueError:
                    raise ConfigError(f"seed: {SEED_ENV}={env!r} is not an integer") from None
        tr = {k: _coerce(k, v, TrainConfig) for k, v in tr.items()}
        enc = {k: _coerce(k, v, EncoderConfig) for k, v in enc.items()}
        try:
            train_cfg = TrainConfig(**tr)
            flags = run.get("ablation", [])
            unknown = [f for f in flags if f not in ABLATIONS]
            if unknown:
                raise ConfigError(f"ablation: unknown flag(s) {unknown}; choose from {list(ABLATIONS)}")
            train_cfg = train_cfg.with_ablations(flags)
            enc_cfg = EncoderConfig(**enc)
        except ConfigError:
            raise
        except (ValueError, TypeError, EncoderError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(**run, train=train_cfg, encoder=enc_cfg)


def _coerce(key: str, value: Any, cls) -> Any:
    default = {f.name: f.default for f in fields(cls)}[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
    return value


def parse_overrides(tokens: Sequence[str]) -> dict:
    """``--key value`` / ``--key=value`` pairs to a dict; dashes become underscores."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"{key.replace('-', '_')}: missing value")
            value = tokens[i + 1]
            i += 1
        i += 1
        key = key.replace("-", "_")
        out[ALIASES.get(key, key)] = _parse_value(value)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {config_path}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {config_path} is not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        base = p.parent
        for key in PATH_FIELDS:
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
    data = {ALIASES.get(k, k): v for k, v in data.items()}
    data.update(overrides)
    for key in PATH_FIELDS:
        if data.get(key):
            data[key] = str(Path(data[key]).resolve())
    return RunConfig.from_dict(data)


def check_paths(cfg: RunConfig, required: Sequence[str]) -> None:
    for key in PATH_FIELDS:
        value = getattr(cfg, key)
        if value is None:
            if key in required:
                raise ConfigError(f"{key}: required path not set")
        elif not Path(value).exists():
            raise ConfigError(f"{key}: path does not exist: {value}")


def load_run_dataset(cfg: RunConfig) -> SplitDataset:
    check_paths(cfg, ("corpus", "splits", "embeddings"))
    table = load_vec_file(cfg.embeddings, cfg.oov_policy, np.dtype(cfg.encoder.dtype))
    return load_dataset(
        cfg.corpus, cfg.splits, table, cfg.class_knowledge, cfg.train.knowledge_mode, cfg.field_map, cfg.train.seed
    )


def check_viable(ds: SplitDataset, splits: Sequence[str], n_way: int, per_class: int) -> None:
    """Each used split needs n_way classes, each with at least K + L documents."""
    for s in splits:
        try:
            ds.require(s, n_way, per_class)
        except CorpusError as exc:
            raise ConfigError(f"n_way/k_shot/l_query: {exc}") from None


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# ------------------------------------------------------------------ commands


def cmd_train(args, overrides) -> int:
    cfg = resolve_config(args.config, overrides)
    ds = load_run_dataset(cfg)
    tc = cfg.train
    check_viable(ds, ["train", tc.val_split], tc.n_way, tc.k_shot + tc.l_query)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log_path, timing_path = out / "train_log.jsonl", out / "timing.jsonl"
    with open(log_path, "w", encoding="utf-8") as lf, open(timing_path, "w", encoding="utf-8") as tf:

        def on_epoch(rec):
            lf.write(_dump({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
            tf.write(_dump({"epoch": rec["epoch"], "seconds": rec["seconds"]}) + "\n")
            log.info("epoch %d  meta_loss %.4f  val_loss %.4f  val_acc %.4f", rec["epoch"], rec["meta_loss"], rec["val_loss"], rec["val_acc"])

        best, records = train(ds, tc, cfg.encoder, on_epoch=on_epoch)
    best_epoch = min(records, key=lambda r: (r["val_loss"], r["epoch"]))["epoch"]
    save_checkpoint(out / "checkpoint.json", best, cfg.encoder, ds.table.dim, {"best_epoch": best_epoch, "epochs_run": len(records)})
    print(_dump({"checkpoint": str(out / "checkpoint.json"), "best_epoch": best_epoch, "epochs_run": len(records)}))
    return 0


def _require_file(name: str, path: str) -> None:
    if not Path(path).is_file():
        raise ConfigError(f"{name}: file not found: {path}")


def _checked_checkpoint(cfg: RunConfig, args, overrides, ds: SplitDataset):
    """Load the checkpoint and compare it with the run's encoder settings.

    Without a config file or encoder overrides the checkpoint's own encoder
    settings are used as-is.
    """
    params, enc_cfg, dim, _ = load_checkpoint(args.checkpoint)
    expected = cfg.encoder if (args.config or set(overrides) & _ENCODER_FIELDS) else enc_cfg
    try:
        check_compatible(enc_cfg, dim, expected, ds.table.dim)
    except EncoderError as exc:
        raise ConfigError(f"checkpoint: {exc}") from None
    return params, enc_cfg


def cmd_eval(args, overrides) -> int:
    _require_file("checkpoint", args.checkpoint)
    cfg = resolve_config(args.config, overrides)
    ds = load_run_dataset(cfg)
    tc = cfg.train
    check_viable(ds, [cfg.eval_split], tc.n_way, tc.k_shot + tc.l_query)
    params, enc_cfg = _checked_checkpoint(cfg, args, overrides, ds)
    report = evaluate(
        ds, cfg.eval_split, params, enc_cfg, tc, cfg.n_episodes, cfg.eval_seeds, mode=cfg.eval_mode, workers=cfg.workers
    )
    print(report.to_json())
    return 0


def cmd_synth(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"{next(iter(overrides))}: not a synth option")
    counts = tuple(int(x) for x in args.split_counts.split(",")) if args.split_counts else None
    if counts is not None and len(counts) != 3:
        raise ConfigError("split_counts: expected three comma-separated integers")
    seed = _seed_arg(args.seed)
    ds, table = synth_corpus(
        args.n_classes, args.docs_per_class, args.doc_len, args.vocab_per_class, args.overlap, args.embed_dim, seed, counts
    )
    paths = write_corpus(ds, args.out, table)
    run = {
        "corpus": paths["corpus"].name,
        "splits": paths["splits"].name,
        "class_knowledge": paths["classes"].name,
        "embeddings": paths["embeddings"].name,
        "seed": seed,
    }
    (Path(args.out) / "run.json").write_text(json.dumps(run, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(_dump({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_sample(args, overrides) -> int:
    cfg = resolve_config(args.config, overrides)
    ds = load_run_dataset(cfg)
    tc = cfg.train
    mode = args.mode or tc.sampler_mode
    if mode not in SAMPLER_MODES:
        raise ConfigError(f"mode: choose from {list(SAMPLER_MODES)}")
    check_viable(ds, [args.split], tc.n_way, tc.k_shot + tc.l_query)
    eps = sample_episodes(ds, args.split, args.count, tc.n_way, tc.k_shot, tc.l_query, mode, tc.seed, cfg.encoder.distance)
    for ep in eps:
        print(_dump(ep.to_json(ds.classes)))
    return 0


def tiny_gradcheck(seed: int = 0, step: float = 1e-4) -> dict[str, float]:
    """Gradient check of both losses on the small reference configuration.

    Vocabulary 20 (4 classes x 5 words), 8-d vectors, widths (1, 3), two maps
    each, d_fc 6, one 2-way 1-shot episode with 2 queries per class.
    """
    ds, table = synth_corpus(4, 6, 5, 5, 0.0, 8, seed, split_counts=(4, 0, 0), vocab_size=20)
    enc_cfg = EncoderConfig(filter_widths=(1, 3), maps_per_width=2, d_fc=6)
    encoder = Encoder(table, enc_cfg)
    rng = np.random.default_rng(seed)
    params = init_params(enc_cfg, table.dim, rng)
    # small random biases so the check also covers bias gradients through active units
    params = {k: (v + 0.1 * rng.standard_normal(v.shape) if k.endswith("bias") else v) for k, v in params.items()}
    ep = sample_episode(ds, "train", 2, 1, 2, "hardness", rng)
    return loss_gradient_errors(ep, params, ds.classes, encoder, TrainConfig(n_way=2, k_shot=1, l_query=2), step)


def cmd_gradcheck(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"{next(iter(overrides))}: not a gradcheck option")
    errs = tiny_gradcheck(_seed_arg(args.seed))
    for name, err in errs.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err <= args.tol else 'FAIL'}")
    worst = max(errs.values())
    print(f"max\t{worst:.3e}")
    return 0 if worst <= args.tol else 1


def cmd_export(args, overrides) -> int:
    _require_file("checkpoint", args.checkpoint)
    cfg = resolve_config(args.config, overrides)
    ds = load_run_dataset(cfg)
    tc = cfg.train
    check_viable(ds, [cfg.eval_split], tc.n_way, tc.k_shot + tc.l_query)
    params, enc_cfg = _checked_checkpoint(cfg, args, overrides, ds)
    eps = sample_episodes(ds, cfg.eval_split, args.episodes, tc.n_way, tc.k_shot, tc.l_query, "uniform", tc.seed, enc_cfg.distance)
    rows = export_embeddings(eps, params, Encoder(ds.table, enc_cfg), args.out, ds.classes)
    print(_dump({"path": args.out, "rows": rows}))
    return 0


def _seed_arg(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"seed: {SEED_ENV}={env!r} is not an integer") from None


def _no_abbrev(add, common):
    def wrapped(*args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        kwargs.setdefault("parents", [common])
        return add(*args, **kwargs)

    return wrapped


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasn", description="Meta-learned Siamese text classifier.", allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser = _no_abbrev(sub.add_parser, common)

    t = sub.add_parser("train", help="meta-train and write checkpoint + logs")
    t.add_argument("--config")

    e = sub.add_parser("eval", help="evaluate a checkpoint; prints an EvalReport as JSON")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")

    s = sub.add_parser("synth", help="write a synthetic corpus, embeddings and split file")
    s.add_argument("--out", required=True)
    s.add_argument("--n-classes", type=int, default=10)
    s.add_argument("--docs-per-class", type=int, default=40)
    s.add_argument("--doc-len", type=int, default=12)
    s.add_argument("--vocab-per-class", type=int, default=4)
    s.add_argument("--overlap", type=float, default=0.0)
    s.add_argument("--embed-dim", type=int, default=16)
    s.add_argument("--split-counts", help="train,val,test class counts")
    s.add_argument("--seed", type=int)

    sm = sub.add_parser("sample", help="print sampled episodes as JSON lines")
    sm.add_argument("--config")
    sm.add_argument("--split", default="train")
    sm.add_argument("--mode", choices=SAMPLER_MODES)
    sm.add_argument("--count", type=int, default=1)

    g = sub.add_parser("gradcheck", help="finite-difference check of both losses on a tiny model")
    g.add_argument("--seed", type=int)
    g.add_argument("--tol", type=float, default=1e-4)

    x = sub.add_parser("export-embeddings", help="write query embeddings of sampled episodes as TSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.add_argument("--episodes", type=int, default=10)
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
    "export-embeddings": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = parse_overrides(rest)
        return COMMANDS[args.command](args, overrides)
    except ConfigError as exc:
        print(f"metasn {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, EmbeddingError, SamplerError, EncoderError) as exc:
        print(f"metasn {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"metasn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
