"""TF-IDF features with dense (MLP) and 1D-convolutional baseline detectors.

Both networks end in one sigmoid unit, train with Adam on binary
cross-entropy (5 epochs, batch 128, early stopping on validation loss)
and share the checkpoint format in :mod:`flowtext.trainer`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import pre_tokenize
from .trainer import OptimizerState, TrainingDiverged, adamw_update

BCE_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# TF-IDF
# ---------------------------------------------------------------------------

@dataclass
class TfidfModel:
    vocabulary: list[str]
    idf: np.ndarray
    width: int = 512

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocabulary)}

    def save(self, directory) -> None:
        directory = Path(directory)
        lines = [f"{t}\t{w!r}" for t, w in zip(self.vocabulary, self.idf.tolist())]
        (directory / "tfidf.tsv").write_text(f"width\t{self.width}\n" + "\n".join(lines) + "\n",
                                             encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "TfidfModel":
        lines = (Path(directory) / "tfidf.tsv").read_text(encoding="utf-8").splitlines()
        width = int(lines[0].split("\t")[1])
        toks, idf = [], []
        for line in lines[1:]:
            t, w = line.split("\t")
            toks.append(t)
            idf.append(float(w))
        return cls(toks, np.array(idf), width)


def fit_tfidf(corpus: Sequence[str], max_features: int = 512) -> TfidfModel:
    """Keep the ``max_features`` tokens with highest document frequency.

    Ties in document frequency are broken lexicographically. Weights use the
    smoothed ``idf = ln((1 + N) / (1 + df)) + 1``.
    """
    docs = [set(pre_tokenize(t)) for t in corpus]
    if not docs:
        raise ValueError("empty corpus")
    df = Counter(tok for d in docs for tok in d)
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:max_features]
    vocab = [t for t, _ in ranked]
    n = len(docs)
    idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in vocab])
    return TfidfModel(vocab, idf, max_features)


def transform(model: TfidfModel, texts: Sequence[str]):
    """L2-normalised TF-IDF rows of width ``model.width``.

    Returns ``(X, empty)``; ``empty[i]`` flags a text with no in-vocabulary
    token, whose row is left all-zero.
    """
    index = model.index
    X = np.zeros((len(texts), model.width))
    for i, text in enumerate(texts):
        counts = Counter(t for t in pre_tokenize(text) if t in index)
        for tok, c in counts.items():
            j = index[tok]
            X[i, j] = c * model.idf[j]
    norms = np.linalg.norm(X, axis=1)
    empty = norms == 0
    X[~empty] /= norms[~empty, None]
    return X, empty


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def binary_cross_entropy(p, y) -> float:
    """Mean of -[y log p + (1 - y) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_from_logits(z, y):
    """Mean BCE and d/dz, computed stably from logits."""
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(loss), (_sigmoid(z) - y) / len(y)


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _dropout(x, rate, rng):
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """512 -> 128 -> 128 -> 1, ReLU hidden units, dropout after each."""

    params: dict[str, np.ndarray]
    input_dim: int = 512
    hidden: int = 128
    dropout: float = 0.5
    kind: str = field(default="mlp", init=False)

    @classmethod
    def init(cls, seed=0, input_dim=512, hidden=128, dropout=0.5, dtype="float32"):
        rng = np.random.default_rng(seed)
        p = {
            "w1": _glorot(rng, input_dim, hidden, (input_dim, hidden), dtype),
            "b1": np.zeros(hidden, dtype),
            "w2": _glorot(rng, hidden, hidden, (hidden, hidden), dtype),
            "b2": np.zeros(hidden, dtype),
            "w3": _glorot(rng, hidden, 1, (hidden, 1), dtype),
            "b3": np.zeros(1, dtype),
        }
        return cls(p, input_dim, hidden, dropout)

    def meta(self) -> dict:
        return {"model_type": "mlp", "input_dim": self.input_dim, "hidden": self.hidden,
                "dropout": self.dropout}

    def forward(self, X, rng=None):
        p = self.params
        X = np.asarray(X, dtype=p["w1"].dtype)
        u1 = X @ p["w1"] + p["b1"]
        a1, k1 = _dropout(np.maximum(u1, 0), self.dropout, rng)
        u2 = a1 @ p["w2"] + p["b2"]
        a2, k2 = _dropout(np.maximum(u2, 0), self.dropout, rng)
        z = (a2 @ p["w3"] + p["b3"])[:, 0]
        return z, (X, u1, a1, k1, u2, a2, k2)

    def backward(self, cache, dz):
        p = self.params
        X, u1, a1, k1, u2, a2, k2 = cache
        dz = dz[:, None].astype(p["w3"].dtype)
        g = {"w3": a2.T @ dz, "b3": dz.sum(axis=0)}
        da2 = dz @ p["w3"].T
        if k2 is not None:
            da2 = da2 * k2
        du2 = da2 * (u2 > 0)
        g["w2"], g["b2"] = a1.T @ du2, du2.sum(axis=0)
        da1 = du2 @ p["w2"].T
        if k1 is not None:
            da1 = da1 * k1
        du1 = da1 * (u1 > 0)
        g["w1"], g["b1"] = X.T @ du1, du1.sum(axis=0)
        return g

    def relu_inputs(self, cache):
        return [cache[1], cache[4]]


# ---------------------------------------------------------------------------
# 1D CNN
# ---------------------------------------------------------------------------

def conv1d(x, w, b, padding="valid"):
    """Cross-correlate (B, L, Cin) with kernel (K, Cin, Cout); returns output and windows."""
    K = w.shape[0]
    if padding == "same":
        left = (K - 1) // 2
        x = np.pad(x, ((0, 0), (left, K - 1 - left), (0, 0)))
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    B, L, C = x.shape
    if L < K:
        raise ValueError(f"input length {L} shorter than kernel {K}")
    windows = np.lib.stride_tricks.sliding_window_view(x, K, axis=1)  # (B, Lout, C, K)
    Lout = L - K + 1
    cols = windows.transpose(0, 1, 3, 2).reshape(B * Lout, K * C)
    out = (cols @ w.reshape(K * C, -1) + b).reshape(B, Lout, -1)
    return out, cols


def conv1d_backward(dout, cols, w, in_len, padding="valid"):
    K, C, _ = w.shape
    B, Lout, _ = dout.shape
    d2 = dout.reshape(B * Lout, -1)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(K * C, -1).T).reshape(B, Lout, K, C)
    padded = Lout + K - 1
    dx = np.zeros((B, padded, C), dtype=dout.dtype)
    for j in range(K):
        dx[:, j:j + Lout] += dcols[:, :, j]
    if padding == "same":
        left = (K - 1) // 2
        dx = dx[:, left:left + in_len]
    return dx, dw, db


def max_pool1d(x, size=2):
    """Non-overlapping max pooling along axis 1; a ragged tail is dropped."""
    B, L, C = x.shape
    Lp = L // size
    blocks = x[:, :Lp * size].reshape(B, Lp, size, C)
    out = blocks[:, :, 0].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, size):  # strict > keeps the first maximum
        better = blocks[:, :, j] > out
        out[better] = blocks[:, :, j][better]
        arg[better] = j
    return out, (arg, L, size)


def max_pool1d_backward(dout, cache):
    arg, L, size = cache
    B, Lp, C = dout.shape
    dblocks = np.zeros((B, Lp, size, C), dtype=dout.dtype)
    for j in range(size):
        dblocks[:, :, j] = np.where(arg == j, dout, 0)
    dx = np.zeros((B, L, C), dtype=dout.dtype)
    dx[:, :Lp * size] = dblocks.reshape(B, Lp * size, C)
    return dx


@dataclass
class Cnn1dParams:
    """Conv(128, k5) -> pool2 -> Conv(128, k5) -> pool2 -> Dense(128) -> sigmoid."""

    params: dict[str, np.ndarray]
    input_dim: int = 512
    filters: int = 128
    kernel: int = 5
    hidden: int = 128
    dropout: float = 0.5
    padding: str = "valid"
    kind: str = field(default="cnn", init=False)

    @staticmethod
    def flat_dim(input_dim, kernel, filters, padding="valid"):
        shrink = 0 if padding == "same" else kernel - 1
        n = (input_dim - shrink) // 2
        n = (n - shrink) // 2
        if n < 1:
            raise ValueError("input too short for two conv/pool stages")
        return n * filters

    @classmethod
    def init(cls, seed=0, input_dim=512, filters=128, kernel=5, hidden=128, dropout=0.5,
             padding="valid", dtype="float32"):
        rng = np.random.default_rng(seed)
        flat = cls.flat_dim(input_dim, kernel, filters, padding)
        p = {
            "c1_w": _glorot(rng, kernel * 1, kernel * filters, (kernel, 1, filters), dtype),
            "c1_b": np.zeros(filters, dtype),
            "c2_w": _glorot(rng, kernel * filters, kernel * filters, (kernel, filters, filters), dtype),
            "c2_b": np.zeros(filters, dtype),
            "d1_w": _glorot(rng, flat, hidden, (flat, hidden), dtype),
            "d1_b": np.zeros(hidden, dtype),
            "out_w": _glorot(rng, hidden, 1, (hidden, 1), dtype),
            "out_b": np.zeros(1, dtype),
        }
        return cls(p, input_dim, filters, kernel, hidden, dropout, padding)

    def meta(self) -> dict:
        return {"model_type": "cnn", "input_dim": self.input_dim, "filters": self.filters,
                "kernel": self.kernel, "hidden": self.hidden, "dropout": self.dropout,
                "padding": self.padding}

    def forward(self, X, rng=None):
        p = self.params
        X = np.asarray(X, dtype=p["c1_w"].dtype)
        x0 = X[:, :, None]
        u1, cols1 = conv1d(x0, p["c1_w"], p["c1_b"], self.padding)
        r1 = np.maximum(u1, 0)
        m1, pool1 = max_pool1d(r1)
        u2, cols2 = conv1d(m1, p["c2_w"], p["c2_b"], self.padding)
        r2 = np.maximum(u2, 0)
        m2, pool2 = max_pool1d(r2)
        flat = m2.reshape(len(X), -1)
        u3 = flat @ p["d1_w"] + p["d1_b"]
        a3, k3 = _dropout(np.maximum(u3, 0), self.dropout, rng)
        z = (a3 @ p["out_w"] + p["out_b"])[:, 0]
        return z, (x0, u1, cols1, pool1, m1, u2, cols2, pool2, m2, flat, u3, a3, k3)

    def backward(self, cache, dz):
        p = self.params
        x0, u1, cols1, pool1, m1, u2, cols2, pool2, m2, flat, u3, a3, k3 = cache
        dz = dz[:, None].astype(p["out_w"].dtype)
        g = {"out_w": a3.T @ dz, "out_b": dz.sum(axis=0)}
        da3 = dz @ p["out_w"].T
        if k3 is not None:
            da3 = da3 * k3
        du3 = da3 * (u3 > 0)
        g["d1_w"], g["d1_b"] = flat.T @ du3, du3.sum(axis=0)
        dm2 = (du3 @ p["d1_w"].T).reshape(m2.shape)
        du2 = max_pool1d_backward(dm2, pool2) * (u2 > 0)
        dm1, g["c2_w"], g["c2_b"] = conv1d_backward(du2, cols2, p["c2_w"], m1.shape[1], self.padding)
        du1 = max_pool1d_backward(dm1, pool1) * (u1 > 0)
        _, g["c1_w"], g["c1_b"] = conv1d_backward(du1, cols1, p["c1_w"], x0.shape[1], self.padding)
        return g

    def relu_inputs(self, cache):
        return [cache[1], cache[5], cache[10]]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class BaselineTrainLog:
    epochs: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0


def loss_and_gradients(model, X, y, seed=None):
    """Mean BCE and parameter gradients; dropout active when ``seed`` is given."""
    rng = np.random.default_rng(seed) if seed is not None else None
    z, cache = model.forward(X, rng)
    loss, dz = _bce_from_logits(z.astype(np.float64), np.asarray(y, dtype=np.float64))
    return loss, model.backward(cache, dz)


def predict(model, X, batch_size: int = 512) -> np.ndarray:
    """Sigmoid probabilities of the attack class (dropout off)."""
    X = np.asarray(X)
    out = [_sigmoid(model.forward(X[i:i + batch_size])[0].astype(np.float64))
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _fit(model, X, y, X_val, y_val, seed, epochs, batch_size, learning_rate, patience):
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"feature width {X.shape[1]} != {model.input_dim}")
    rng = np.random.default_rng(seed)
    state = OptimizerState.zeros_like(model.params)
    log = BaselineTrainLog()
    best, best_loss, since = None, math.inf, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_gradients(model, X[idx], y[idx], int(rng.integers(2**31 - 1)))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            adamw_update(model.params, grads, state, learning_rate, 0.0)
            losses.append(loss)
        val_loss = binary_cross_entropy(predict(model, X_val), y_val)
        log.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss, since = val_loss, 0
            best = {k: v.copy() for k, v in model.params.items()}
            log.best_epoch = epoch
        else:
            since += 1
            if since >= patience:
                log.stopped_early = True
                break
    model.params = best
    return model, log


def train_mlp(features, labels, seed=0, val_features=None, val_labels=None, epochs=5,
              batch_size=128, learning_rate=1e-3, patience=2, **model_kw):
    """Fit the dense baseline; validation data defaults to a 10% holdout."""
    features, labels, val_features, val_labels = _holdout(features, labels, val_features, val_labels, seed)
    model = MlpParams.init(seed, input_dim=np.shape(features)[1], **model_kw)
    return _fit(model, features, labels, val_features, val_labels, seed, epochs, batch_size,
                learning_rate, patience)


def train_cnn1d(features, labels, seed=0, val_features=None, val_labels=None, epochs=5,
                batch_size=128, learning_rate=1e-3, patience=2, **model_kw):
    """Fit the convolutional baseline; same regimen as :func:`train_mlp`."""
    features, labels, val_features, val_labels = _holdout(features, labels, val_features, val_labels, seed)
    model = Cnn1dParams.init(seed, input_dim=np.shape(features)[1], **model_kw)
    return _fit(model, features, labels, val_features, val_labels, seed, epochs, batch_size,
                learning_rate, patience)


def _holdout(X, y, X_val, y_val, seed):
    X, y = np.asarray(X), np.asarray(y)
    if X_val is not None:
        return X, y, np.asarray(X_val), np.asarray(y_val)
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(X))
    n_val = max(1, len(X) // 10)
    v, t = order[:n_val], order[n_val:]
    return X[t], y[t], X[v], y[v]


def model_from_checkpoint(params, config: dict):
    kind = config["model_type"]
    if kind == "mlp":
        return MlpParams(params, int(config["input_dim"]), int(config["hidden"]),
                         float(config["dropout"]))
    if kind == "cnn":
        return Cnn1dParams(params, int(config["input_dim"]), int(config["filters"]),
                           int(config["kernel"]), int(config["hidden"]),
                           float(config["dropout"]), config["padding"])
    raise ValueError(f"not a baseline checkpoint: {kind!r}")
