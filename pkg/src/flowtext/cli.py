"""Command-line entry point: one pipeline stage per subcommand.

Every command reads upstream artifact files, writes its own artifacts into
``--out`` (each with a ``.meta`` sidecar naming the config hash and input
hashes) and appends one provenance line to ``<out>/run.log``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import encoder as enc
from . import pipeline as pl
from .codec import dataset_to_sentences, read_combined, write_group_meta, write_sentence_csv
from .config import ConfigError, RunConfig
from .evaluation import (classification_metrics, confusion_matrix, format_metrics_report,
                         roc_curve_and_auc, write_composition, write_metrics_csv)
from .ingest import FlowDataError, build_dataset, load_flow_csv, write_flow_csv, write_rejections
from .tokenizer import Vocabulary
from .trainer import TrainingDiverged, load_checkpoint, save_checkpoint

logger = logging.getLogger("flowtext")

COMMANDS = ("synth", "ingest", "select", "encode", "split", "train", "train-baseline", "eval", "roc")
SPLIT_PARTS = ("train", "validation", "test")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    """sha256 prefix of a file, or of a directory's files in name order."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


class Run:
    def __init__(self, command: str, cfg: RunConfig, inputs, out: Path):
        self.command = command
        self.cfg = cfg
        self.inputs = [Path(p) for p in inputs]
        self.out = out
        self.outputs: list[str] = []
        self.input_hashes = {p.name: file_digest(p) for p in self.inputs if p.exists()}
        out.mkdir(parents=True, exist_ok=True)

    def meta(self, artifact: Path, **extra) -> None:
        lines = [f"command = {self.command}", f"config_hash = {self.cfg.digest()}"]
        lines += [f"input.{k} = {v}" for k, v in self.input_hashes.items()]
        lines += [f"{k} = {v}" for k, v in extra.items()]
        Path(str(artifact) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.outputs.append(artifact.name)

    def log(self) -> None:
        inputs = ",".join(f"{k}:{v}" for k, v in self.input_hashes.items()) or "-"
        line = (f"{self.command} config={self.cfg.digest()} seed={self.cfg.seed} "
                f"scenario={self.cfg.scenario} inputs={inputs} outputs={','.join(self.outputs) or '-'}")
        with (self.out / "run.log").open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def read_meta(artifact) -> dict[str, str]:
    path = Path(str(artifact) + ".meta")
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _need_inputs(args, n: int, what: str) -> list[Path]:
    paths = [Path(p) for p in (args.inputs or [])]
    if len(paths) < n:
        raise CliError(f"missing input: {what}")
    for p in paths:
        if not p.exists():
            raise CliError(f"missing input: {p}")
    return paths


def _groups_path(sentence_csv: Path) -> Path:
    return sentence_csv.with_name(sentence_csv.stem + "_groups.csv")


def _load_split(directory: Path, cfg: RunConfig):
    if directory.is_file():
        raise CliError(f"expected a split directory, got file {directory}")
    parts = {}
    for name in SPLIT_PARTS:
        path = directory / f"{name}.csv"
        if not path.is_file():
            raise CliError(f"missing input: {path}")
        parts[name] = read_combined(path, _groups_path(path))
    info = read_meta(directory / "train.csv")
    held = tuple(filter(None, info.get("held_out", "").split(",")))
    split = pl.ScenarioSplit(int(info.get("scenario", cfg.scenario)), parts["train"],
                             parts["validation"], parts["test"], {}, held)
    return split, info.get("split_id", "")


def _resolve_checkpoint(path: Path) -> Path:
    if (path / "manifest.txt").is_file():
        return path
    for name in ("checkpoint", "checkpoint-mlp", "checkpoint-cnn"):
        if (path / name / "manifest.txt").is_file():
            return path / name
    raise CliError(f"missing checkpoint: {path}")


def _resolve_test(path: Path) -> Path:
    if path.is_dir():
        path = path / "test.csv"
    if not path.is_file():
        raise CliError(f"missing input: {path}")
    return path


def _typed(value: str, kind: str):
    if "bool" in kind:
        return value == "True"
    if "int" in kind and value != "None":
        return int(value)
    if "float" in kind:
        return float(value)
    return value


def _encoder_config(meta: dict) -> enc.EncoderConfig:
    kw = {f.name: _typed(meta[f"encoder_{f.name}"], str(f.type))
          for f in dataclasses.fields(enc.EncoderConfig)}
    return enc.EncoderConfig(**kw)


def _scorer(checkpoint: Path):
    """Return ``(score_fn, meta)`` for an encoder or baseline checkpoint."""
    params, meta = load_checkpoint(checkpoint)
    kind = meta.get("model_type", "")
    if kind == "encoder":
        vocab = Vocabulary.load(checkpoint / "vocab.txt")
        if vocab.digest() != meta.get("vocab_digest"):
            raise CliError("mismatched encoding: checkpoint vocabulary hash differs from its record")
        run = pl.EncoderRun(params, _encoder_config(meta), vocab, None, int(meta["max_len"]))
        return (lambda items: pl.encoder_scores(run, items)), meta
    if kind in ("mlp", "cnn"):
        run = pl.BaselineRun(bl.model_from_checkpoint(params, meta), bl.TfidfModel.load(checkpoint), None)
        return (lambda items: pl.baseline_scores(run, items)), meta
    raise CliError(f"unknown model type in checkpoint: {kind!r}")


def _check_encoding(meta: dict, test_path: Path) -> None:
    want = meta.get("split_id", "")
    got = read_meta(test_path).get("split_id", "")
    if want and got and want != got:
        raise CliError(f"mismatched encoding: test split {got} was not produced with checkpoint split {want}")
    if want and not got:
        logger.warning("test file %s carries no split record; encoding check skipped", test_path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, run):
    data = pl.synthesize(cfg)
    path = run.out / "flows.csv"
    write_flow_csv(data, path)
    run.meta(path, rows=len(data))
    print(f"wrote {len(data)} synthetic flows to {path}")


def cmd_ingest(args, cfg, run):
    paths = _need_inputs(args, 1, "flow CSV")
    parts = [load_flow_csv(p) for p in paths]
    schema = parts[0].schema
    for p, d in zip(paths[1:], parts[1:]):
        if set(d.features) != set(schema.features):
            raise CliError(f"header mismatch between {paths[0]} and {p}")
    raw, cats, rejected = [], [], []
    for p, d in zip(paths, parts):
        idx = [d.features.index(f) for f in schema.features]
        raw += [tuple(r[j] for j in idx) for r in d.raw]
        cats += list(d.categories)
        rejected += [f"{p.name} {r}" for r in d.rejections]
    data = build_dataset(schema, raw, cats, ";".join(map(str, paths)), rejected)
    path = run.out / "flows.csv"
    write_flow_csv(data, path)
    write_rejections(data, run.out / "rejections.txt")
    run.meta(path, rows=len(data), rejected=len(rejected))
    print(f"kept {len(data)} flows, rejected {len(rejected)}")


def cmd_select(args, cfg, run):
    (path,) = _need_inputs(args, 1, "flow CSV")[:1]
    data = load_flow_csv(path)
    report, chosen = pl.rank_features(data, cfg)
    imp = run.out / "importances.csv"
    report.to_csv(imp)
    run.meta(imp)
    feats = run.out / "selected_features.txt"
    feats.write_text("\n".join(chosen) + "\n", encoding="utf-8")
    run.meta(feats)
    sel = run.out / "selected.csv"
    write_flow_csv(data.select(chosen), sel)
    run.meta(sel, features=len(chosen))
    print("selected: " + ", ".join(chosen))


def cmd_encode(args, cfg, run):
    (path,) = _need_inputs(args, 1, "flow CSV")[:1]
    data = load_flow_csv(path)
    singles = dataset_to_sentences(data)
    sent = run.out / "sentences.csv"
    write_sentence_csv(singles, sent)
    run.meta(sent, rows=len(singles))
    combined = pl.combine_flows(singles, cfg.group_size, cfg.per_category_grouping)
    comb = run.out / "combined.csv"
    write_sentence_csv(combined, comb)
    write_group_meta(combined, _groups_path(comb))
    run.meta(comb, rows=len(combined), group_size=cfg.group_size)
    print(f"{len(singles)} flow sentences, {len(combined)} combined sentences")


def cmd_split(args, cfg, run):
    (path,) = _need_inputs(args, 1, "combined sentence CSV")[:1]
    groups = _groups_path(path)
    if not groups.is_file():
        raise CliError(f"missing input: {groups}")
    split = pl.make_split(read_combined(path, groups), cfg)
    files = []
    for name, items in split.parts().items():
        f = run.out / f"{name}.csv"
        write_sentence_csv(items, f)
        write_group_meta(items, _groups_path(f))
        files.append(f)
    split_id = hashlib.sha256(b"".join(f.read_bytes() for f in files)).hexdigest()[:16]
    for f, items in zip(files, split.parts().values()):
        run.meta(f, rows=len(items), scenario=split.scenario, held_out=",".join(split.held_out),
                 split_id=split_id)
    comp = run.out / "composition.csv"
    write_composition(split, comp)
    run.meta(comp, split_id=split_id)
    print(f"scenario {split.scenario}: " + ", ".join(f"{k}={len(v)}" for k, v in split.parts().items()))


def cmd_train(args, cfg, run):
    (path,) = _need_inputs(args, 1, "split directory")[:1]
    split, split_id = _load_split(path, cfg)
    ckpt = run.out / "checkpoint"
    meta = {"model_type": "encoder", "config_hash": cfg.digest(), "split_id": split_id,
            "scenario": split.scenario, "held_out": ",".join(split.held_out), "seed": cfg.seed}
    result = pl.train_encoder(split, cfg, checkpoint_dir=ckpt, checkpoint_meta=meta)
    result.vocab.save(ckpt / "vocab.txt")
    log = run.out / "train_log.csv"
    result.log.to_csv(log)
    run.meta(log, best_step=result.log.best_step)
    run.outputs.append("checkpoint")
    last = result.log.rows[-1]
    print(f"best step {result.log.best_step}; last eval step {last['step']} "
          f"val_loss {last['val_loss']:.4f} accuracy {last['accuracy']:.4f}")


def cmd_train_baseline(args, cfg, run):
    (path,) = _need_inputs(args, 1, "split directory")[:1]
    if args.model not in ("mlp", "cnn"):
        raise CliError("--model must be mlp or cnn")
    split, split_id = _load_split(path, cfg)
    result = pl.train_baseline(split, cfg, args.model)
    ckpt = run.out / f"checkpoint-{args.model}"
    meta = {**result.model.meta(), "config_hash": cfg.digest(), "split_id": split_id,
            "scenario": split.scenario, "held_out": ",".join(split.held_out), "seed": cfg.seed,
            "threshold": cfg.threshold}
    save_checkpoint(ckpt, result.model.params, meta)
    result.tfidf.save(ckpt)
    log = run.out / f"{args.model}_log.csv"
    with log.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in result.log.epochs:
            writer.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['val_loss']:.6f}"])
    run.meta(log, best_epoch=result.log.best_epoch)
    run.outputs.append(ckpt.name)
    print(f"{args.model}: best epoch {result.log.best_epoch}, val_loss "
          f"{min(r['val_loss'] for r in result.log.epochs):.4f}")


def _scored_test(args, cfg):
    if not args.inputs:
        raise CliError("missing checkpoint: no --in given")
    paths = [Path(p) for p in args.inputs]
    ckpt = _resolve_checkpoint(paths[0])
    if len(paths) < 2:
        raise CliError("missing input: test sentence CSV")
    test_path = _resolve_test(paths[1])
    score, meta = _scorer(ckpt)
    _check_encoding(meta, test_path)
    items = read_combined(test_path, _groups_path(test_path))
    scores = score(items)
    return items, scores, meta


def cmd_eval(args, cfg, run):
    items, scores, meta = _scored_test(args, cfg)
    threshold = float(meta.get("threshold", cfg.threshold))
    pred = (scores >= threshold).astype(int)
    y = np.array([s.label for s in items])
    report = classification_metrics(confusion_matrix(pred, y))
    lines = [format_metrics_report(report, f"model {meta.get('model_type')} on {len(items)} test sentences")]
    if 0 < y.sum() < len(y):
        lines.append(f"auc                  {roc_curve_and_auc(scores, y).auc:.6f}\n")
    lines.append("per-category detection (flagged / total)\n")
    for cat, (hit, n) in pl.category_detection(items, pred).items():
        lines.append(f"  {cat:<10s} {hit:>7d} / {n:<7d} {hit / n:.6f}\n")
    held = tuple(filter(None, meta.get("held_out", "").split(",")))
    extra = {}
    if held and any(s.category in held for s in items):
        rec = pl.held_out_recall(items, pred, held)
        lines.append(f"held-out recall      {rec:.6f} ({','.join(held)})\n")
        extra["held_out_recall"] = f"{rec:.6f}"
    text = "".join(lines)
    out = run.out / "metrics.txt"
    out.write_text(text, encoding="utf-8")
    run.meta(out)
    csv_path = run.out / "metrics.csv"
    write_metrics_csv(report, csv_path, extra)
    run.meta(csv_path)
    pred_path = run.out / "predictions.csv"
    with pred_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "category", "label", "score", "predicted"])
        for i, (s, p, q) in enumerate(zip(items, scores, pred)):
            writer.writerow([i, s.category, s.label, f"{p:.6f}", q])
    run.meta(pred_path)
    sys.stdout.write(text)


def cmd_roc(args, cfg, run):
    items, scores, _ = _scored_test(args, cfg)
    curve = roc_curve_and_auc(scores, [s.label for s in items])
    out = run.out / "roc.csv"
    curve.to_csv(out)
    run.meta(out, auc=f"{curve.auc:.6f}")
    print(f"auc {curve.auc:.6f} over {len(curve.fpr)} points")


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "select": cmd_select, "encode": cmd_encode,
    "split": cmd_split, "train": cmd_train, "train-baseline": cmd_train_baseline,
    "eval": cmd_eval, "roc": cmd_roc,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowtext", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value run configuration")
    parser.add_argument("--in", dest="inputs", nargs="+", metavar="PATH", help="input artifacts")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--scenario", type=int, choices=(1, 2), help="overrides the config scenario")
    parser.add_argument("--model", choices=("mlp", "cnn"), default="mlp", help="baseline to train")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {k: v for k, v in (("seed", args.seed), ("scenario", args.scenario)) if v is not None}
        if overrides:
            cfg = cfg.replace(**overrides)
        run = Run(args.command, cfg, args.inputs or [], Path(args.out))
        HANDLERS[args.command](args, cfg, run)
        run.log()
    except (CliError, ConfigError, FlowDataError, TrainingDiverged, FileNotFoundError,
            KeyError, ValueError) as exc:
        message = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"flowtext {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
