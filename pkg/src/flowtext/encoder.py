"""A small transformer encoder classifier with hand-written backprop.

Parameters live in an ordered ``dict[str, np.ndarray]``. The forward pass
records every intermediate it needs on a :class:`ForwardTape`;
:func:`backward` replays the tape in reverse to produce exact gradients.

Layout per layer is post-norm::

    h = LayerNorm(x + Dropout(Attention(x)))
    y = LayerNorm(h + Dropout(FFN(h)))

and the class logits come from a linear head over position 0 ([CLS]).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tokenizer import TokenSequence, batch_arrays

LN_EPS = 1e-12
MASK_NEG = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    hidden_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    max_positions: int = 512
    n_classes: int = 2
    dropout_rate: float = 0.1
    activation: str = "relu"
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if min(self.vocab_size, self.n_layers, self.ffn_dim, self.max_positions) < 1:
            raise ValueError("sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @classmethod
    def desk(cls, vocab_size: int, **kw) -> "EncoderConfig":
        """2 layers / 128 dims / 4 heads, sized for CPU training."""
        return cls(vocab_size, n_layers=2, hidden_dim=128, n_heads=4, ffn_dim=512, **kw)

    @classmethod
    def base(cls, vocab_size: int, **kw) -> "EncoderConfig":
        """The 12-layer, 768-dimensional base geometry."""
        kw.setdefault("activation", "gelu")
        return cls(vocab_size, n_layers=12, hidden_dim=768, n_heads=12, ffn_dim=3072, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


LAYER_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden_dim, config.ffn_dim
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "seg_emb": (2, d),
        "pos_emb": (config.max_positions, d),
    }
    per_layer = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1_g": (d,), "ln1_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,), "ln2_g": (d,), "ln2_b": (d,),
    }
    for layer in range(config.n_layers):
        for name in LAYER_PARAMS:
            shapes[f"layer{layer}.{name}"] = per_layer[name]
    shapes["cls_w"] = (d, config.n_classes)
    shapes["cls_b"] = (config.n_classes,)
    return shapes


def _truncated_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Weights ~ N(0, init_std) truncated at two std; biases 0; LN gains 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            arr = np.ones(shape)
        elif short.startswith("b") or short.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, config.init_std)
        params[name] = arr.astype(config.dtype)
    return params


def layer_view(params, layer: int) -> dict[str, np.ndarray]:
    prefix = f"layer{layer}."
    return {name: params[prefix + name] for name in LAYER_PARAMS}


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _activation(u, kind):
    if kind == "relu":
        return np.maximum(u, 0)
    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def _activation_grad(u, kind):
    if kind == "relu":
        return (u > 0).astype(u.dtype)
    cdf = 0.5 * (1.0 + erf(u / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return (cdf + u * pdf).astype(u.dtype)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    d = dy.shape[-1]
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * g
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout(x, rate, rng):
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def _mask_bias(mask, dtype):
    mask = np.asarray(mask)
    if np.any(mask.sum(axis=-1) == 0):
        raise ValueError("attention mask hides every key of a sequence")
    return np.where(mask > 0, 0.0, MASK_NEG).astype(dtype)


def _dense_grad(x, dy):
    d_in, d_out = x.shape[-1], dy.shape[-1]
    return x.reshape(-1, d_in).T @ dy.reshape(-1, d_out), dy.reshape(-1, d_out).sum(axis=0)


def _attention(x, bias, p, n_heads, q_len):
    """Multi-head attention with queries from the first ``q_len`` positions."""
    B, L, d = x.shape
    dh = d // n_heads
    xq = x[:, :q_len]
    q = (xq @ p["wq"] + p["bq"]).reshape(B, q_len, n_heads, dh).transpose(0, 2, 1, 3)
    k = (x @ p["wk"] + p["bk"]).reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
    v = (x @ p["wv"] + p["bv"]).reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
    scale = x.dtype.type(1.0 / math.sqrt(dh))
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias[:, None, None, :]
    probs = _softmax(scores)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, q_len, d)
    out = ctx @ p["wo"] + p["bo"]
    return out, (x, q, k, v, probs, ctx, scale)


def _attention_back(dout, p, n_heads, cache):
    x, q, k, v, probs, ctx, scale = cache
    B, L, d = x.shape
    q_len = dout.shape[1]
    dh = d // n_heads
    g = {}
    g["wo"], g["bo"] = _dense_grad(ctx, dout)
    dctx = (dout @ p["wo"].T).reshape(B, q_len, n_heads, dh).transpose(0, 2, 1, 3)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    dq = dq.transpose(0, 2, 1, 3).reshape(B, q_len, d)
    dk = dk.transpose(0, 2, 1, 3).reshape(B, L, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, L, d)
    g["wq"], g["bq"] = _dense_grad(x[:, :q_len], dq)
    g["wk"], g["bk"] = _dense_grad(x, dk)
    g["wv"], g["bv"] = _dense_grad(x, dv)
    dx = dk @ p["wk"].T + dv @ p["wv"].T
    dx[:, :q_len] += dq @ p["wq"].T
    return dx, g


# ---------------------------------------------------------------------------
# public single-sequence operations
# ---------------------------------------------------------------------------

def embed_sequence(seq: TokenSequence, params) -> np.ndarray:
    """Token + segment + position embeddings, shape (len(seq), hidden_dim)."""
    ids = np.asarray(seq.ids)
    vocab_size, max_pos = params["tok_emb"].shape[0], params["pos_emb"].shape[0]
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token id out of range")
    if len(ids) > max_pos:
        raise ValueError(f"sequence length {len(ids)} exceeds max_positions {max_pos}")
    seg = np.asarray(seq.segment_ids)
    return params["tok_emb"][ids] + params["seg_emb"][seg] + params["pos_emb"][: len(ids)]


def self_attention(hidden, mask, layer_params, n_heads: int) -> np.ndarray:
    """Scaled dot-product multi-head self-attention for one (L, d) sequence."""
    hidden = np.asarray(hidden)
    bias = _mask_bias(np.asarray(mask)[None], hidden.dtype)
    out, _ = _attention(hidden[None], bias, layer_params, n_heads, hidden.shape[0])
    return out[0]


def attention_weights(hidden, mask, layer_params, n_heads: int) -> np.ndarray:
    """Per-head attention probabilities, shape (n_heads, L, L)."""
    hidden = np.asarray(hidden)
    bias = _mask_bias(np.asarray(mask)[None], hidden.dtype)
    _, cache = _attention(hidden[None], bias, layer_params, n_heads, hidden.shape[0])
    return cache[4][0]


def feed_forward(hidden, layer_params, activation: str = "relu") -> np.ndarray:
    u = np.asarray(hidden) @ layer_params["w1"] + layer_params["b1"]
    return _activation(u, activation) @ layer_params["w2"] + layer_params["b2"]


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTape:
    config: EncoderConfig
    ids: np.ndarray
    segments: np.ndarray
    bias: np.ndarray
    emb_keep: np.ndarray | None
    layers: list = field(default_factory=list)
    final: np.ndarray | None = None
    cls_only: bool = True


def _as_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 3 and isinstance(batch[0], np.ndarray):
        return batch
    return batch_arrays(batch)


def forward(batch, params, config: EncoderConfig, mode: str = "eval", seed: int = 0,
            cls_only: bool = True, ids_override=None):
    """Run the encoder; returns ``(logits, tape)``.

    ``batch`` is a list of equal-length :class:`TokenSequence` (or the
    ``(ids, mask, segments)`` arrays from :func:`batch_arrays`). In ``train``
    mode dropout masks come from ``seed``; ``eval`` mode is deterministic.
    With ``cls_only`` the last layer computes outputs for position 0 alone,
    which is all the classifier reads. ``ids_override`` substitutes token
    ids (used for masked-token corruption) while keeping mask and segments.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    ids, mask, seg = _as_arrays(batch)
    if ids_override is not None:
        ids = np.asarray(ids_override)
    B, L = ids.shape
    if L > config.max_positions:
        raise ValueError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    dtype = params["tok_emb"].dtype
    rng = np.random.default_rng(seed) if mode == "train" and config.dropout_rate > 0 else None
    rate = config.dropout_rate

    x = params["tok_emb"][ids] + params["seg_emb"][seg] + params["pos_emb"][:L]
    x, emb_keep = _dropout(x, rate, rng)
    bias = _mask_bias(mask, dtype)
    tape = ForwardTape(config, ids, seg, bias, emb_keep, cls_only=cls_only)

    for layer in range(config.n_layers):
        p = layer_view(params, layer)
        q_len = 1 if cls_only and layer == config.n_layers - 1 else L
        a, attn_cache = _attention(x, bias, p, config.n_heads, q_len)
        a, keep1 = _dropout(a, rate, rng)
        h, ln1 = _layer_norm(x[:, :q_len] + a, p["ln1_g"], p["ln1_b"])
        u = h @ p["w1"] + p["b1"]
        z = _activation(u, config.activation)
        f = z @ p["w2"] + p["b2"]
        f, keep2 = _dropout(f, rate, rng)
        x_new, ln2 = _layer_norm(h + f, p["ln2_g"], p["ln2_b"])
        tape.layers.append((q_len, attn_cache, keep1, ln1, h, u, z, keep2, ln2, L))
        x = x_new

    tape.final = x
    logits = x[:, 0] @ params["cls_w"] + params["cls_b"]
    return logits, tape


def backward(tape: ForwardTape, params, d_logits=None, d_final=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``d_logits`` is dLoss/dlogits; ``d_final`` optionally adds a gradient on
    the final hidden states (the masked-token head uses it).
    """
    config = tape.config
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    x_final = tape.final
    dx = np.zeros_like(x_final)
    if d_logits is not None:
        h_cls = x_final[:, 0]
        grads["cls_w"] += h_cls.T @ d_logits
        grads["cls_b"] += d_logits.sum(axis=0)
        dx[:, 0] += d_logits @ params["cls_w"].T
    if d_final is not None:
        dx += d_final

    for layer in reversed(range(config.n_layers)):
        p = layer_view(params, layer)
        q_len, attn_cache, keep1, ln1, h, u, z, keep2, ln2, L = tape.layers[layer]
        pre = f"layer{layer}."
        dr2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_back(dx, p["ln2_g"], ln2)
        dh = dr2.copy()
        df = dr2 * keep2 if keep2 is not None else dr2
        grads[pre + "w2"], grads[pre + "b2"] = _dense_grad(z, df)
        du = (df @ p["w2"].T) * _activation_grad(u, config.activation)
        grads[pre + "w1"], grads[pre + "b1"] = _dense_grad(h, du)
        dh += du @ p["w1"].T
        dr1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_back(dh, p["ln1_g"], ln1)
        da = dr1 * keep1 if keep1 is not None else dr1
        dx_in, g_attn = _attention_back(da, p, config.n_heads, attn_cache)
        dx_in[:, :q_len] += dr1
        for name, g in g_attn.items():
            grads[pre + name] = g
        dx = dx_in

    if tape.emb_keep is not None:
        dx = dx * tape.emb_keep
    B, L, d = dx.shape
    flat = dx.reshape(-1, d)
    np.add.at(grads["tok_emb"], tape.ids.reshape(-1), flat)
    np.add.at(grads["seg_emb"], tape.segments.reshape(-1), flat)
    grads["pos_emb"][:L] += dx.sum(axis=0)
    return grads


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def predict_proba(batch, params, config: EncoderConfig, batch_size: int = 64) -> np.ndarray:
    """Eval-mode softmax probabilities, shape (n, n_classes)."""
    batch = list(batch)
    out = []
    for start in range(0, len(batch), batch_size):
        logits, _ = forward(batch[start:start + batch_size], params, config, "eval")
        out.append(np.exp(_log_softmax(logits.astype(np.float64))))
    return np.concatenate(out) if out else np.zeros((0, config.n_classes))


def loss_and_gradients(batch, labels, params, config: EncoderConfig,
                       objective: str = "classification", seed: int = 0,
                       mode: str = "train"):
    """Mean cross-entropy and its exact gradients.

    ``classification``: ``labels`` are class ids, scored on the [CLS] logits.
    ``mlm``: ``batch`` holds the original sequences and ``labels`` is one
    ``(corrupted_ids, {position: original_id})`` pair per sequence (as
    returned by :func:`flowtext.tokenizer.mlm_mask`); masked positions are
    scored against the token embedding table (tied output weights).
    """
    if objective == "classification":
        y = np.asarray(labels, dtype=np.int64)
        logits, tape = forward(batch, params, config, mode, seed, cls_only=True)
        if y.shape != (logits.shape[0],) or y.min() < 0 or y.max() >= config.n_classes:
            raise ValueError("labels must be class ids, one per sequence")
        logp = _log_softmax(logits)
        n = len(y)
        loss = -logp[np.arange(n), y].mean()
        d_logits = np.exp(logp)
        d_logits[np.arange(n), y] -= 1.0
        d_logits /= n
        return float(loss), backward(tape, params, d_logits=d_logits)

    if objective == "mlm":
        corrupted = np.array([ids for ids, _ in labels], dtype=np.int64)
        rows, cols, targets = [], [], []
        for b, (_, tmap) in enumerate(labels):
            for pos, orig in sorted(tmap.items()):
                rows.append(b)
                cols.append(pos)
                targets.append(orig)
        if not targets:
            raise ValueError("mlm objective needs at least one masked position")
        _, tape = forward(batch, params, config, mode, seed, cls_only=False,
                          ids_override=corrupted)
        rows, cols, targets = map(np.asarray, (rows, cols, targets))
        emb = params["tok_emb"]
        hidden = tape.final[rows, cols]
        logp = _log_softmax(hidden @ emb.T)
        m = len(targets)
        loss = -logp[np.arange(m), targets].mean()
        d_logits = np.exp(logp)
        d_logits[np.arange(m), targets] -= 1.0
        d_logits /= m
        d_final = np.zeros_like(tape.final)
        np.add.at(d_final, (rows, cols), d_logits @ emb)
        grads = backward(tape, params, d_final=d_final)
        grads["tok_emb"] += d_logits.T @ hidden
        return float(loss), grads

    raise ValueError(f"unknown objective {objective!r}")
