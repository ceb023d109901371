"""Run configuration: one ``key = value`` file covering every pipeline default."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .features import ForestConfig
from .ingest import CATEGORIES, normalize_category
from .trainer import TrainingArguments


class ConfigError(ValueError):
    pass


def _parse_counts(text: str) -> dict[str, int]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, n = part.partition(":")
        out[normalize_category(name)] = int(n)
    return out


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scenario: int = 1
    seen_families: str = "DDoS,DoS"

    # synthetic corpus
    synth_normal: int = 10000
    synth_attacks: str = "DDoS:4000,DoS:4000,Probe:3000,BFA:2000,Web:1500,BOTNET:1000,U2R:500"
    synth_separation: float = 1.0

    # feature selection
    top_k: int = 10
    forest_n_trees: int = 100
    forest_max_depth: int | None = None
    forest_min_samples_split: int = 2
    forest_features_per_split: int | None = None
    forest_bootstrap: bool = True
    forest_max_rows: int | None = 20000

    # sentences and tokens
    group_size: int = 4
    per_category_grouping: bool = False
    vocab_size: int = 1000
    max_len: int = 256

    # encoder and its training (desk-scale values; see README)
    encoder_preset: str = "desk"
    activation: str = "relu"
    dropout_rate: float = 0.1
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    grad_accumulation: int = 1
    epochs: int = 1
    eval_every: int = 100
    early_stopping: bool = True
    patience: int = 3
    warmup_steps: int = 30
    max_steps: int | None = 300
    val_limit: int | None = 500
    eval_batch_size: int = 64

    # baselines
    tfidf_features: int = 512
    baseline_epochs: int = 5
    baseline_batch_size: int = 128
    baseline_learning_rate: float = 1e-3
    baseline_patience: int = 2
    cnn_padding: str = "valid"
    threshold: float = 0.5

    # ------------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
            try:
                values[key] = _coerce(value, kinds[key])
            except ValueError:
                raise ConfigError(f"{origin}:{n}: bad value for {key}: {value!r}") from None
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"missing config: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    # ------------------------------------------------------------------
    def attack_counts(self) -> dict[str, int]:
        return _parse_counts(self.synth_attacks)

    def seen(self) -> tuple[str, ...]:
        return tuple(normalize_category(s) for s in self.seen_families.split(",") if s.strip())

    def forest(self) -> ForestConfig:
        return ForestConfig(n_trees=self.forest_n_trees, max_depth=self.forest_max_depth,
                            min_samples_split=self.forest_min_samples_split,
                            features_per_split=self.forest_features_per_split,
                            bootstrap=self.forest_bootstrap, seed=self.seed)

    def encoder(self, vocab_size: int) -> EncoderConfig:
        preset = EncoderConfig.desk if self.encoder_preset == "desk" else EncoderConfig.base
        return preset(vocab_size, max_positions=max(self.max_len, 2),
                      activation=self.activation, dropout_rate=self.dropout_rate)

    def training(self) -> TrainingArguments:
        return TrainingArguments(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                                 batch_size=self.batch_size, grad_accumulation=self.grad_accumulation,
                                 epochs=self.epochs, eval_and_save_every=self.eval_every,
                                 early_stopping=self.early_stopping, patience=self.patience,
                                 warmup_steps=self.warmup_steps, max_steps=self.max_steps,
                                 seed=self.seed)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.scenario in (1, 2), "scenario must be 1 or 2")
        try:
            counts = self.attack_counts()
            seen = self.seen()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        need(all(c in CATEGORIES and c != "Normal" for c in counts), "synth_attacks names a non-attack")
        need(all(n >= 0 for n in counts.values()), "synth counts must be non-negative")
        need(self.synth_normal >= 0, "synth_normal must be non-negative")
        need(0.0 < self.synth_separation <= 1.0, "synth_separation must lie in (0, 1]")
        need(all(s in CATEGORIES and s != "Normal" for s in seen), "seen_families names a non-attack")
        need(self.top_k >= 1, "top_k must be positive")
        need(self.forest_n_trees >= 1, "forest_n_trees must be positive")
        need(self.forest_max_depth is None or self.forest_max_depth >= 1, "forest_max_depth must be positive")
        need(self.forest_min_samples_split >= 2, "forest_min_samples_split must be at least 2")
        need(self.forest_features_per_split is None or self.forest_features_per_split >= 1,
             "forest_features_per_split must be positive")
        need(self.forest_max_rows is None or self.forest_max_rows >= 2, "forest_max_rows must be at least 2")
        need(self.group_size >= 1, "group_size must be positive")
        need(self.vocab_size >= 6, "vocab_size too small")
        need(self.max_len >= 3, "max_len must be at least 3")
        need(self.encoder_preset in ("desk", "base"), "encoder_preset must be desk or base")
        need(self.activation in ("relu", "gelu"), "activation must be relu or gelu")
        need(0.0 <= self.dropout_rate < 1.0, "dropout_rate must lie in [0, 1)")
        need(self.val_limit is None or self.val_limit >= 1, "val_limit must be positive")
        need(self.eval_batch_size >= 1, "eval_batch_size must be positive")
        need(self.max_steps is None or self.max_steps >= 1, "max_steps must be positive")
        try:
            args = self.training()
            args.validate(self.max_steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        need(self.tfidf_features >= 1, "tfidf_features must be positive")
        need(self.baseline_epochs >= 1 and self.baseline_batch_size >= 1 and self.baseline_patience >= 1,
             "baseline epochs, batch size and patience must be positive")
        need(self.baseline_learning_rate > 0, "baseline_learning_rate must be positive")
        need(self.cnn_padding in ("valid", "same"), "cnn_padding must be valid or same")
        need(0.0 < self.threshold < 1.0, "threshold must lie in (0, 1)")


def _coerce(text: str, kind):
    kind = str(kind)
    optional = "None" in kind
    if optional and text.lower() == "none":
        return None
    if kind.startswith("bool"):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(text)
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text
