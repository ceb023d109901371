"""Fine-tuning loop: AdamW, linear warmup/decay, periodic eval, early stopping.

Also home to the on-disk checkpoint format shared by every model in the
package: a directory holding ``config.txt`` ("key = value" lines),
``tensors.bin`` (little-endian float32, concatenated) and ``manifest.txt``
(one "name shape offset" line per tensor).
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import encoder as enc
from .evaluation import classification_metrics, confusion_matrix

logger = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainingArguments:
    """Defaults are the fine-tuning values used for the 12-layer model."""

    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 128
    grad_accumulation: int = 1
    epochs: int = 1
    eval_and_save_every: int = 100
    early_stopping: bool = True
    patience: int = 3
    warmup_steps: int = 500
    max_steps: int | None = None  # overrides the epoch-derived total
    seed: int = 0

    def total_steps(self, n_train: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        per_epoch = math.ceil(math.ceil(n_train / self.batch_size) / self.grad_accumulation)
        return per_epoch * self.epochs

    def validate(self, total_steps: int | None = None):
        for name in ("learning_rate", "batch_size", "grad_accumulation", "epochs",
                     "eval_and_save_every", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be non-negative")
        if total_steps is not None and self.warmup_steps > total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} exceeds total_steps={total_steps}")


def lr_at_step(step: int, args: TrainingArguments, total_steps: int) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak, warm = args.learning_rate, args.warmup_steps
    if warm > 0 and step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    return peak * (total_steps - step) / (total_steps - warm)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_update(params, grads, state: OptimizerState, lr: float, weight_decay: float = 0.0):
    """One in-place AdamW step with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * p)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(directory, params: Mapping[str, np.ndarray], config: Mapping[str, object]) -> None:
    """Write ``params`` as float32 little-endian plus manifest and config text."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {_format_value(v)}" for k, v in config.items()]
    (directory / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    offset = 0
    manifest = []
    with (directory / "tensors.bin").open("wb") as fh:
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            shape = "x".join(map(str, arr.shape)) or "scalar"
            manifest.append(f"{name} {shape} {offset}")
            offset += data.nbytes
    (directory / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def read_config_text(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_checkpoint(directory):
    """Return ``(params, config)``; config values are left as strings."""
    directory = Path(directory)
    if not (directory / "manifest.txt").is_file():
        raise FileNotFoundError(f"missing checkpoint: {directory}")
    blob = (directory / "tensors.bin").read_bytes()
    params = {}
    for line in (directory / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape_text, offset = line.split()
        shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=int(offset))
        params[name] = arr.reshape(shape).astype(np.float32)
    return params, read_config_text(directory / "config.txt")


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "train_loss", "val_loss", "accuracy", "precision", "recall", "f1")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    best_step: int = 0

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow([row["step"]] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:]])


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    val_loss: float


def evaluate_classifier(predict_proba: Callable, items, labels, batch_size: int = 64):
    """Validation loss (mean cross-entropy) and weighted metrics."""
    probs = predict_proba(items)
    y = np.asarray(labels, dtype=np.int64)
    p1 = np.clip(probs[:, 1], 1e-7, 1 - 1e-7)
    loss = float(-np.mean(y * np.log(p1) + (1 - y) * np.log(1 - p1)))
    pred = (probs[:, 1] >= 0.5).astype(int)
    report = classification_metrics(confusion_matrix(pred, y))
    return loss, report, probs


def fine_tune(params, config: enc.EncoderConfig, train_set: Sequence, val_set: Sequence,
              args: TrainingArguments, eval_batch_size: int = 64,
              checkpoint_dir=None, checkpoint_meta: Mapping | None = None):
    """Train every encoder parameter on labelled :class:`TokenSequence` items.

    Mini-batches are drawn from a seeded permutation per epoch. Every
    ``eval_and_save_every`` optimizer steps (and at the final step) the
    model is scored on ``val_set``; the lowest validation loss wins. With
    early stopping on, training halts after ``patience`` evaluations in a
    row without a new best. Returns ``(best Checkpoint, TrainLog)``.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be nonempty")
    total = args.total_steps(len(train_set))
    args.validate(total)
    params = {k: v.copy() for k, v in params.items()}
    state = OptimizerState.zeros_like(params)
    log = TrainLog()
    rng = np.random.default_rng(args.seed)
    val_labels = [s.label for s in val_set]

    def predict(items):
        return enc.predict_proba(items, params, config, eval_batch_size)

    best: Checkpoint | None = None
    since_best = 0
    window: list[float] = []
    step = 0
    order = np.empty(0, dtype=np.int64)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor >= len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        idx = order[cursor:cursor + args.batch_size]
        cursor += args.batch_size
        return [train_set[i] for i in idx]

    while step < total:
        grads_sum, loss_sum = None, 0.0
        for micro in range(args.grad_accumulation):
            batch = next_batch()
            drop_seed = int(rng.integers(0, 2**31 - 1))
            loss, grads = enc.loss_and_gradients(
                batch, [s.label for s in batch], params, config,
                objective="classification", seed=drop_seed)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}", best)
            loss_sum += loss
            if grads_sum is None:
                grads_sum = grads
            else:
                for k in grads_sum:
                    grads_sum[k] += grads[k]
        if args.grad_accumulation > 1:
            for k in grads_sum:
                grads_sum[k] /= args.grad_accumulation
        step += 1
        lr = lr_at_step(step, args, total)
        try:
            adamw_update(params, grads_sum, state, lr, args.weight_decay)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), best) from None
        window.append(loss_sum / args.grad_accumulation)

        if step % args.eval_and_save_every == 0 or step == total:
            val_loss, report, _ = evaluate_classifier(predict, val_set, val_labels)
            row = {
                "step": step,
                "train_loss": float(np.mean(window)),
                "val_loss": val_loss,
                "accuracy": report.accuracy,
                "precision": report.weighted_precision,
                "recall": report.weighted_recall,
                "f1": report.weighted_f1,
            }
            log.rows.append(row)
            window = []
            logger.info("step %d train %.4f val %.4f acc %.4f", step, row["train_loss"],
                        val_loss, report.accuracy)
            if best is None or val_loss < best.val_loss:
                best = Checkpoint({k: v.copy() for k, v in params.items()}, step, val_loss)
                since_best = 0
                if checkpoint_dir is not None:
                    meta = dict(checkpoint_meta or {})
                    meta["step"] = step
                    save_checkpoint(checkpoint_dir, best.params, meta)
            else:
                since_best += 1
                if args.early_stopping and since_best >= args.patience:
                    log.stopped_early = True
                    break
    log.best_step = best.step
    return best, log


def training_args_dict(args: TrainingArguments) -> dict:
    return asdict(args)
