"""In-process pipeline stages shared by the command line and the experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import baselines as bl
from . import encoder as enc
from .codec import CombinedSentence, combine_flows, dataset_to_sentences
from .config import RunConfig
from .evaluation import ScenarioSplit, build_scenario_split
from .features import ImportanceReport, feature_importances, fit_random_forest, select_top_k
from .ingest import FlowDataset, generate_synthetic_flows
from .tokenizer import Vocabulary, build_vocab, encode
from .trainer import TrainLog, fine_tune

logger = logging.getLogger(__name__)


def synthesize(cfg: RunConfig) -> FlowDataset:
    return generate_synthetic_flows(cfg.synth_normal, cfg.attack_counts(), seed=cfg.seed,
                                    separation=cfg.synth_separation)


def rank_features(dataset: FlowDataset, cfg: RunConfig) -> tuple[ImportanceReport, list[str]]:
    """Fit the forest (on at most ``forest_max_rows`` rows) and pick the top k."""
    X, y = dataset.values, dataset.labels
    if cfg.forest_max_rows is not None and len(X) > cfg.forest_max_rows:
        rows = np.sort(np.random.default_rng([cfg.seed, 7]).choice(len(X), cfg.forest_max_rows,
                                                                   replace=False))
        X, y = X[rows], y[rows]
    forest = fit_random_forest(X, y, cfg.forest())
    report = feature_importances(forest, list(dataset.features))
    return report, select_top_k(report, cfg.top_k)


def make_sentences(dataset: FlowDataset, cfg: RunConfig) -> list[CombinedSentence]:
    return combine_flows(dataset_to_sentences(dataset), cfg.group_size, cfg.per_category_grouping)


def make_split(sentences: Sequence[CombinedSentence], cfg: RunConfig) -> ScenarioSplit:
    return build_scenario_split(sentences, cfg.scenario, seed=cfg.seed, seen_families=cfg.seen())


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderRun:
    params: dict
    config: enc.EncoderConfig
    vocab: Vocabulary
    log: TrainLog
    max_len: int


def _val_subset(items, cfg: RunConfig):
    if cfg.val_limit is None or len(items) <= cfg.val_limit:
        return list(items)
    idx = np.sort(np.random.default_rng([cfg.seed, 3]).choice(len(items), cfg.val_limit, replace=False))
    return [items[i] for i in idx]


def train_encoder(split: ScenarioSplit, cfg: RunConfig, checkpoint_dir=None,
                  checkpoint_meta=None) -> EncoderRun:
    """Vocabulary from the training texts, then fine-tune from a seeded init."""
    vocab = build_vocab([s.text for s in split.train], cfg.vocab_size)
    train = [encode(s.text, vocab, cfg.max_len, s.label) for s in split.train]
    val = [encode(s.text, vocab, cfg.max_len, s.label) for s in _val_subset(split.validation, cfg)]
    config = cfg.encoder(len(vocab))
    params = enc.init_params(config, cfg.seed)
    meta = None
    if checkpoint_meta is not None:
        meta = {**checkpoint_meta, **{f"encoder_{k}": v for k, v in config.to_dict().items()},
                "vocab_digest": vocab.digest(), "max_len": cfg.max_len}
    best, log = fine_tune(params, config, train, val, cfg.training(), cfg.eval_batch_size,
                          checkpoint_dir, meta)
    return EncoderRun(best.params, config, vocab, log, cfg.max_len)


def encoder_scores(run: EncoderRun, sentences: Sequence, batch_size: int = 64) -> np.ndarray:
    """Attack-class probability for each sentence."""
    seqs = [encode(s.text, run.vocab, run.max_len, s.label) for s in sentences]
    return enc.predict_proba(seqs, run.params, run.config, batch_size)[:, 1]


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineRun:
    model: object
    tfidf: bl.TfidfModel
    log: bl.BaselineTrainLog


def train_baseline(split: ScenarioSplit, cfg: RunConfig, kind: str) -> BaselineRun:
    tfidf = bl.fit_tfidf([s.text for s in split.train], cfg.tfidf_features)
    X, _ = bl.transform(tfidf, [s.text for s in split.train])
    Xv, _ = bl.transform(tfidf, [s.text for s in split.validation])
    y = np.array([s.label for s in split.train])
    yv = np.array([s.label for s in split.validation])
    common = dict(seed=cfg.seed, val_features=Xv, val_labels=yv, epochs=cfg.baseline_epochs,
                  batch_size=cfg.baseline_batch_size, learning_rate=cfg.baseline_learning_rate,
                  patience=cfg.baseline_patience)
    if kind == "mlp":
        model, log = bl.train_mlp(X, y, **common)
    elif kind == "cnn":
        model, log = bl.train_cnn1d(X, y, padding=cfg.cnn_padding, **common)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return BaselineRun(model, tfidf, log)


def baseline_scores(run: BaselineRun, sentences: Sequence) -> np.ndarray:
    X, _ = bl.transform(run.tfidf, [s.text for s in sentences])
    return bl.predict(run.model, X)


# ---------------------------------------------------------------------------
# reporting helpers
# ---------------------------------------------------------------------------

def category_detection(sentences: Sequence[CombinedSentence], predicted) -> dict[str, tuple[int, int]]:
    """Per category: (flagged as attack, total)."""
    out: dict[str, list[int]] = {}
    for s, p in zip(sentences, predicted):
        row = out.setdefault(s.category, [0, 0])
        row[0] += int(p)
        row[1] += 1
    return {k: (v[0], v[1]) for k, v in sorted(out.items())}


def held_out_recall(sentences: Sequence[CombinedSentence], predicted, held_out: Sequence[str]) -> float:
    hits = [int(p) for s, p in zip(sentences, predicted) if s.category in held_out]
    if not hits:
        raise ValueError("no held-out sentences in the test set")
    return sum(hits) / len(hits)
