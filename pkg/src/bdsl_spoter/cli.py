"""Command-line front end: ``bdsl-spoter <subcommand> [options]``.

Configuration resolves in three layers: dataclass defaults, then a JSON file
given by ``--config``, then per-field flags such as ``--model.n-heads 9`` or
``--train.curriculum-lengths 200``. The resolved configuration is written as
``config.json`` into every output directory and can be passed back with
``--config`` to repeat a run.

Exit status: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import kernels
from .features import ShardEntry, read_shard, write_shard
from .metrics import (
    cross_validate,
    evaluate_logits,
    rank_classes,
    throughput_profile,
)
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.model import ConfigError, ModelConfig, flops_formula, init_params
from .pose_data import DataError, LabelVocab, load_manifest, load_vocab, speaker_disjoint_split
from .preprocess import AugmentationConfig, PreprocessConfig, preprocess_batch
from .synth import SyntheticSpec, write_dataset
from .training import TrainConfig, fit, label_smoothing_loss, predict_logits

log = logging.getLogger("bdsl_spoter")

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentationConfig,
    "preprocess": PreprocessConfig,
    "synth": SyntheticSpec,
}
# fields owned elsewhere: the sequence length comes from the model, the
# training seed from the global --seed
_EXCLUDED = {("preprocess", "T"), ("train", "seed")}
PATH_KEYS = ("data", "vocab", "features", "checkpoint", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ config

def _fields(section):
    return [f for f in dataclasses.fields(SECTIONS[section])
            if f.init and (section, f.name) not in _EXCLUDED and not f.name.startswith("_")]


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(value, default, key):
    """Convert a flag string or JSON value to the type of ``default``."""
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _parse_bool(value)
        if isinstance(default, tuple):
            items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{key}: {exc}") from None


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    sections: dict = dataclasses.field(default_factory=dict)
    paths: dict = dataclasses.field(default_factory=dict)
    explicit: set = dataclasses.field(default_factory=set)

    def build(self, section, **extra):
        values = dict(self.sections[section])
        values.update(extra)
        try:
            return SECTIONS[section](**values)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid {section} configuration: {exc}") from None

    def model(self, n_classes=None):
        if n_classes is not None and "model.n_classes" not in self.explicit:
            # derived from the vocabulary; recorded so the echo is complete
            self.sections["model"]["n_classes"] = n_classes
        return self.build("model")

    def train(self):
        return self.build("train", seed=self.seed)

    def preprocess(self, T):
        return self.build("preprocess", T=T)

    def to_dict(self, command):
        out = {"command": command, "seed": self.seed, "workers": self.workers}
        for name in SECTIONS:
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.sections[name].items()}
        out["paths"] = {k: v for k, v in sorted(self.paths.items()) if v is not None}
        return out


def resolve_config(args) -> RunConfig:
    sections = {name: {f.name: _default_of(f) for f in _fields(name)} for name in SECTIONS}
    explicit = set()
    seed, workers, paths = 0, os.cpu_count() or 1, {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in doc.items():
            if key in SECTIONS:
                if not isinstance(val, dict):
                    raise UsageError(f"config section {key!r} must be an object")
                for fk, fv in val.items():
                    if fk not in sections[key]:
                        raise UsageError(f"unknown config field {key}.{fk}")
                    sections[key][fk] = _coerce(fv, sections[key][fk], f"{key}.{fk}")
                    explicit.add(f"{key}.{fk}")
            elif key == "seed":
                seed = _coerce(val, 0, "seed")
            elif key == "workers":
                workers = _coerce(val, 1, "workers")
            elif key == "paths":
                paths = {k: v for k, v in val.items() if k in PATH_KEYS}
            elif key != "command":
                raise UsageError(f"unknown config key {key!r}")
    for dest, raw in vars(args).items():
        if "." in dest:
            section, name = dest.split(".", 1)
            sections[section][name] = _coerce(raw, sections[section][name], dest)
            explicit.add(dest)
    if args.seed is not None:
        seed = args.seed
    if args.workers is not None:
        workers = args.workers
    if seed < 0 or workers < 1:
        raise UsageError("--seed must be >= 0 and --workers >= 1")
    for key in PATH_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            paths[key] = str(val)
    return RunConfig(seed, workers, sections, paths, explicit)


def _need(cfg: RunConfig, key):
    val = cfg.paths.get(key)
    if val is None:
        raise UsageError(f"--{key} is required")
    return Path(val)


def _out_dir(cfg: RunConfig, command) -> Path:
    out = _need(cfg, "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    _write_json(out / "config.json", cfg.to_dict(command))
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _executor(cfg: RunConfig):
    return ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else nullcontext(None)


def _load_samples(cfg: RunConfig, vocab: LabelVocab):
    path = _need(cfg, "data")
    if not path.exists():
        raise DataError(f"sample file {path} does not exist")
    return load_manifest(path, vocab)


def _load_vocab(cfg: RunConfig) -> LabelVocab:
    path = _need(cfg, "vocab")
    if not path.exists():
        raise DataError(f"vocabulary file {path} does not exist")
    return load_vocab(path)


def _load_ckpt(cfg: RunConfig):
    path = _need(cfg, "checkpoint")
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    if cfg.paths.get("vocab"):
        vocab = _load_vocab(cfg)
    elif ckpt.vocab is not None:
        vocab = LabelVocab(tuple(ckpt.vocab))
    else:
        raise DataError("checkpoint has no vocabulary; pass --vocab")
    if len(vocab) != ckpt.config.n_classes:
        raise DataError(f"vocabulary has {len(vocab)} classes but the checkpoint predicts {ckpt.config.n_classes}")
    prep = PreprocessConfig(**{**(ckpt.preprocess or {}), "T": ckpt.config.T})
    return ckpt, vocab, prep


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig):
    spec = cfg.build("synth")
    out = _out_dir(cfg, "synth")
    info = write_dataset(spec, cfg.seed, out)
    log.info("wrote %d samples to %s", info["n_samples"], out)
    return 0


def cmd_preprocess(cfg: RunConfig):
    vocab = _load_vocab(cfg)
    samples = _load_samples(cfg, vocab)
    model_cfg = cfg.model(len(vocab))
    prep = cfg.preprocess(model_cfg.T)
    out = _out_dir(cfg, "preprocess")
    with _executor(cfg) as ex:
        feats = preprocess_batch(samples, prep.T, prep, None, executor=ex)
    entries = [ShardEntry(s.video_id, vocab.name(s.label), s.signer_id) for s in samples]
    write_shard(out / "features.bfts", feats, entries)
    log.info("wrote %d x %d x %d features to %s", *feats.shape, out / "features.bfts")
    return 0


def _report_dict(report, vocab, extra=None):
    d = report.to_dict(vocab.names)
    if extra:
        d.update(extra)
    return d


def cmd_train(cfg: RunConfig):
    vocab = _load_vocab(cfg)
    samples = _load_samples(cfg, vocab)
    model_cfg = cfg.model(len(vocab))
    if model_cfg.n_classes != len(vocab):
        raise DataError(f"model.n_classes={model_cfg.n_classes} but the vocabulary has {len(vocab)} classes")
    train_cfg = cfg.train()
    prep = cfg.preprocess(model_cfg.T)
    aug = cfg.build("augment")
    out = _out_dir(cfg, "train")
    split = speaker_disjoint_split(samples, seed=cfg.seed)
    train, val, test = split.partition(samples)
    _write_json(out / "split.json", split.to_dict())
    log.info("split: %d train / %d val / %d test samples", len(train), len(val), len(test))
    kernels.set_num_threads(cfg.workers)
    with _executor(cfg) as ex:
        result = fit(train, val, model_cfg, train_cfg, aug=aug, prep=prep, executor=ex)
        x = preprocess_batch(test, model_cfg.T, prep, None, executor=ex)
    (out / "train_log.tsv").write_text(result.log.to_tsv(), encoding="utf-8")
    meta = {"best_epoch": result.best_epoch, "best_val_top1": result.best_val_top1, "seed": cfg.seed}
    save_checkpoint(out / "model.bspt", result.params, vocab=list(vocab.names),
                    preprocess=_prep_dict(prep), meta=meta)
    y = np.array([s.label for s in test])
    logits = predict_logits(result.params, x)
    loss, _ = label_smoothing_loss(logits, y, train_cfg.label_smoothing_eps)
    report = evaluate_logits(logits, y, loss)
    _write_json(out / "metrics.json", _report_dict(report, vocab, {"split": "test", **meta}))
    print(f"test top1={report.top1:.4f} top5={report.top5:.4f} macro_f1={report.macro_f1:.4f}"
          f" best_epoch={result.best_epoch}")
    return 0


def _prep_dict(prep: PreprocessConfig):
    return {"alpha": prep.alpha, "normalization_mode": prep.normalization_mode}


def _features_for(cfg: RunConfig, vocab, prep, ex):
    if not (cfg.paths.get("features") or cfg.paths.get("data")):
        raise UsageError("one of --data or --features is required")
    if cfg.paths.get("features"):
        feats, entries = read_shard(cfg.paths["features"])
        if feats.shape[1] != prep.T:
            raise DataError(f"shard has T={feats.shape[1]}, checkpoint expects {prep.T}")
        labels = np.array([vocab.index(e.label) for e in entries])
        ids = [e.video_id for e in entries]
        return np.asarray(feats), labels, ids
    samples = _load_samples(cfg, vocab)
    x = preprocess_batch(samples, prep.T, prep, None, executor=ex)
    return x, np.array([s.label for s in samples]), [s.video_id for s in samples]


def cmd_eval(cfg: RunConfig, pgm: bool = False):
    ckpt, vocab, prep = _load_ckpt(cfg)
    out = _out_dir(cfg, "eval")
    with _executor(cfg) as ex:
        x, y, _ = _features_for(cfg, vocab, prep, ex)
    logits = predict_logits(ckpt.params, x)
    loss, _ = label_smoothing_loss(logits, y, cfg.train().label_smoothing_eps)
    report = evaluate_logits(logits, y, loss)
    _write_json(out / "metrics.json", _report_dict(report, vocab))
    (out / "confusion.tsv").write_text(report.confusion.to_tsv(vocab.names), encoding="utf-8")
    if pgm:
        (out / "confusion.pgm").write_bytes(report.confusion.to_pgm())
    print(f"top1={report.top1:.4f} top5={report.top5:.4f} macro_f1={report.macro_f1:.4f} n={report.n_samples}")
    return 0


def softmax_ranked(logits, k):
    """Per row: ``[(class_index, probability), ...]`` for the ``k`` most likely classes."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    order = rank_classes(p)[:, :k]
    return [[(int(c), float(p[i, c])) for c in row] for i, row in enumerate(order)]


def cmd_infer(cfg: RunConfig, top_k: int):
    ckpt, vocab, prep = _load_ckpt(cfg)
    if not 1 <= top_k <= len(vocab):
        raise UsageError(f"--top-k must be in [1, {len(vocab)}]")
    with _executor(cfg) as ex:
        x, _, ids = _features_for(cfg, vocab, prep, ex)
    ranked = softmax_ranked(predict_logits(ckpt.params, x), top_k)
    lines = ["video_id\trank\tclass\tprobability"]
    for vid, row in zip(ids, ranked):
        lines += [f"{vid}\t{r}\t{vocab.name(c)}\t{p:.9g}" for r, (c, p) in enumerate(row, start=1)]
    text = "\n".join(lines) + "\n"
    if cfg.paths.get("out"):
        out = _out_dir(cfg, "infer")
        (out / "predictions.tsv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


PROFILE_COLUMNS = ("param_count", "flops", "T", "mean_latency_ms", "p95_latency_ms", "fps",
                   "peak_working_set_bytes", "n_timed", "backend")


def cmd_profile(cfg: RunConfig, n_warmup: int, n_timed: int):
    if cfg.paths.get("checkpoint"):
        params = _load_ckpt(cfg)[0].params
    else:
        params = init_params(cfg.model(), cfg.seed)
    kernels.set_num_threads(cfg.workers)
    if n_timed < 10:
        raise UsageError("--n-timed must be >= 10")
    rep = throughput_profile(params, n_warmup, n_timed, seed=cfg.seed)
    d = rep.to_dict()
    table = "\t".join(PROFILE_COLUMNS) + "\n" + "\t".join(
        f"{d[c]:.4f}" if isinstance(d[c], float) else str(d[c]) for c in PROFILE_COLUMNS) + "\n"
    formula = flops_formula(params.config)
    sys.stdout.write(table + formula + "\n")
    if cfg.paths.get("out"):
        out = _out_dir(cfg, "profile")
        (out / "profile.tsv").write_text(table, encoding="utf-8")
        _write_json(out / "profile.json", {**d, "flops_formula": formula})
    return 0


def cmd_xval(cfg: RunConfig, folds: int, baseline):
    vocab = _load_vocab(cfg)
    samples = _load_samples(cfg, vocab)
    model_cfg = cfg.model(len(vocab))
    prep = cfg.preprocess(model_cfg.T)
    out = _out_dir(cfg, "xval")
    kernels.set_num_threads(cfg.workers)
    with _executor(cfg) as ex:
        res = cross_validate(samples, folds, model_cfg, cfg.train(), seed=cfg.seed,
                             aug=cfg.build("augment"), prep=prep, baseline=baseline, executor=ex,
                             on_fold=lambda k, a: log.info("fold %d accuracy %.4f", k, a))
    _write_json(out / "cv.json", res.to_dict())
    print(f"mean={res.mean:.4f} std={res.std:.4f} ci95=({res.ci95[0]:.4f}, {res.ci95[1]:.4f})")
    return 0


# ------------------------------------------------------------------- parser

def _flag_name(section, name):
    return f"--{section}.{name.replace('_', '-')}"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None, help="worker processes and kernel threads")
    for section in SECTIONS:
        group = common.add_argument_group(section)
        for f in _fields(section):
            group.add_argument(_flag_name(section, f.name), dest=f"{section}.{f.name}",
                               default=argparse.SUPPRESS, metavar="V")

    parser = _Parser(prog="bdsl-spoter", description="Pose-based isolated sign recognition.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out")

    p = sub.add_parser("preprocess", parents=[common], help="write a feature shard")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train on a signer-disjoint split")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--features")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--pgm", action="store_true", help="also write confusion.pgm")

    p = sub.add_parser("infer", parents=[common], help="ranked class probabilities per sample")
    p.add_argument("--checkpoint")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--features")
    p.add_argument("--vocab")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out")

    p = sub.add_parser("profile", parents=[common], help="parameter, FLOP and latency report")
    p.add_argument("--checkpoint")
    p.add_argument("--n-warmup", type=int, default=5)
    p.add_argument("--n-timed", type=int, default=50)
    p.add_argument("--out")

    p = sub.add_parser("xval", parents=[common], help="signer-disjoint K-fold cross-validation")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--baseline", help="comma-separated baseline fold accuracies for Cohen's d")
    p.add_argument("--out")
    return parser


def _setup_logging():
    level = os.environ.get("BDSL_SPOTER_LOG", "INFO").strip().upper()
    value = int(level) if level.isdigit() else getattr(logging, level, None)
    if not isinstance(value, int):
        value = logging.INFO
    logging.basicConfig(level=value, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "synth":
            return cmd_synth(cfg)
        if cmd == "preprocess":
            return cmd_preprocess(cfg)
        if cmd == "train":
            return cmd_train(cfg)
        if cmd == "eval":
            return cmd_eval(cfg, args.pgm)
        if cmd == "infer":
            return cmd_infer(cfg, args.top_k)
        if cmd == "profile":
            return cmd_profile(cfg, args.n_warmup, args.n_timed)
        baseline = None
        if args.baseline:
            try:
                baseline = [float(v) for v in args.baseline.split(",")]
            except ValueError:
                raise UsageError("--baseline must be comma-separated numbers") from None
        return cmd_xval(cfg, args.folds, baseline)
    except UsageError as exc:
        print(f"bdsl-spoter: usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"bdsl-spoter: configuration error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"bdsl-spoter: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
