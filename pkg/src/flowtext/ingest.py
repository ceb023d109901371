"""Loading, validating and labelling flow-record datasets.

Flow files follow the CICFlowMeter/InSDN layout: one header row, one flow
per line, a trailing ``Label`` column holding the traffic category. Raw
value text is kept verbatim next to the parsed number because downstream
sentences are built from the text, never from re-formatted floats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

SOCKET_FEATURES = (
    "Flow ID",
    "Src IP",
    "Src Port",
    "Dst IP",
    "Dst Port",
    "Protocol",
    "Timestamp",
)

# Full 84-column InSDN header (83 attributes + label), in file order.
INSDN_COLUMNS = (
    "Flow ID", "Src IP", "Src Port", "Dst IP", "Dst Port", "Protocol",
    "Timestamp", "Flow Duration", "Tot Fwd Pkts", "Tot Bwd Pkts",
    "TotLen Fwd Pkts", "TotLen Bwd Pkts", "Fwd Pkt Len Max",
    "Fwd Pkt Len Min", "Fwd Pkt Len Mean", "Fwd Pkt Len Std",
    "Bwd Pkt Len Max", "Bwd Pkt Len Min", "Bwd Pkt Len Mean",
    "Bwd Pkt Len Std", "Flow Byts/s", "Flow Pkts/s", "Flow IAT Mean",
    "Flow IAT Std", "Flow IAT Max", "Flow IAT Min", "Fwd IAT Tot",
    "Fwd IAT Mean", "Fwd IAT Std", "Fwd IAT Max", "Fwd IAT Min",
    "Bwd IAT Tot", "Bwd IAT Mean", "Bwd IAT Std", "Bwd IAT Max",
    "Bwd IAT Min", "Fwd PSH Flags", "Bwd PSH Flags", "Fwd URG Flags",
    "Bwd URG Flags", "Fwd Header Len", "Bwd Header Len", "Fwd Pkts/s",
    "Bwd Pkts/s", "Pkt Len Min", "Pkt Len Max", "Pkt Len Mean",
    "Pkt Len Std", "Pkt Len Var", "FIN Flag Cnt", "SYN Flag Cnt",
    "RST Flag Cnt", "PSH Flag Cnt", "ACK Flag Cnt", "URG Flag Cnt",
    "CWE Flag Count", "ECE Flag Cnt", "Down/Up Ratio", "Pkt Size Avg",
    "Fwd Seg Size Avg", "Bwd Seg Size Avg", "Fwd Byts/b Avg",
    "Fwd Pkts/b Avg", "Fwd Blk Rate Avg", "Bwd Byts/b Avg",
    "Bwd Pkts/b Avg", "Bwd Blk Rate Avg", "Subflow Fwd Pkts",
    "Subflow Fwd Byts", "Subflow Bwd Pkts", "Subflow Bwd Byts",
    "Init Fwd Win Byts", "Init Bwd Win Byts", "Fwd Act Data Pkts",
    "Fwd Seg Size Min", "Active Mean", "Active Std", "Active Max",
    "Active Min", "Idle Mean", "Idle Std", "Idle Max", "Idle Min", "Label",
)

# The ten features ranked highest on InSDN, in dataset column order.
TOP10_FEATURES = (
    "Flow Duration",
    "Flow Pkts/s",
    "Flow IAT Mean",
    "Flow IAT Max",
    "Bwd IAT Tot",
    "Bwd IAT Mean",
    "Bwd Header Len",
    "Bwd Pkts/s",
    "Pkt Len Max",
    "Init Bwd Win Byts",
)

CATEGORIES = ("Normal", "DDoS", "DoS", "Probe", "BFA", "Web", "BOTNET", "U2R")
ATTACK_FAMILIES = CATEGORIES[1:]

_CATEGORY_LOOKUP = {c.lower(): c for c in CATEGORIES}
# spellings seen in the public InSDN release
_CATEGORY_LOOKUP.update({
    "web-attack": "Web",
    "web attack": "Web",
    "bruteforce": "BFA",
    "brute force": "BFA",
    "botnet": "BOTNET",
})


class FlowDataError(ValueError):
    """Raised when a flow file or dataset violates its schema."""


def normalize_category(text: str) -> str:
    """Map a label spelling onto one of :data:`CATEGORIES`."""
    key = text.strip().lower()
    try:
        return _CATEGORY_LOOKUP[key]
    except KeyError:
        raise FlowDataError(f"unknown attack category {text!r}") from None


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[str, ...]
    socket_features: tuple[str, ...] = SOCKET_FEATURES
    label_column: str = "Label"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "socket_features", tuple(self.socket_features))
        if len(set(self.features)) != len(self.features):
            raise FlowDataError("feature names must be unique")
        overlap = set(self.features) & set(self.socket_features)
        if overlap:
            raise FlowDataError(f"socket features retained: {sorted(overlap)}")
        if self.label_column in self.features:
            raise FlowDataError("label column listed as a feature")

    @classmethod
    def insdn(cls) -> "FeatureSchema":
        """The 76 retained InSDN features."""
        feats = [c for c in INSDN_COLUMNS if c not in SOCKET_FEATURES and c != "Label"]
        return cls(tuple(feats))

    @classmethod
    def top10(cls) -> "FeatureSchema":
        return cls(TOP10_FEATURES)


@dataclass(frozen=True)
class FlowRecord:
    """One flow: raw text per feature, its category and binary label."""

    raw: Mapping[str, str]
    attack_category: str
    binary_label: int

    def value(self, name: str) -> float:
        return float(self.raw[name])


@dataclass(frozen=True, eq=False)
class FlowDataset:
    """Immutable, order-preserving collection of flows over one schema.

    ``raw`` holds the verbatim cell text (rows x features); ``values`` the
    parsed float64 matrix of the same shape.
    """

    schema: FeatureSchema
    raw: tuple[tuple[str, ...], ...]
    values: np.ndarray
    categories: tuple[str, ...]
    labels: np.ndarray
    provenance: str = ""
    rejections: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n, d = len(self.raw), len(self.schema.features)
        if self.values.shape != (n, d):
            raise FlowDataError(f"values shape {self.values.shape} != ({n}, {d})")
        if len(self.categories) != n or len(self.labels) != n:
            raise FlowDataError("categories/labels length mismatch")
        if not np.all(np.isfinite(self.values)):
            raise FlowDataError("non-finite feature value")
        self.values.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.raw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlowDataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.raw == other.raw
            and self.categories == other.categories
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def features(self) -> tuple[str, ...]:
        return self.schema.features

    def record(self, i: int) -> FlowRecord:
        return FlowRecord(
            dict(zip(self.schema.features, self.raw[i])),
            self.categories[i],
            int(self.labels[i]),
        )

    def __iter__(self) -> Iterator[FlowRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def select(self, features: Sequence[str]) -> "FlowDataset":
        """Project onto ``features`` (kept in the order given)."""
        missing = [f for f in features if f not in self.schema.features]
        if missing:
            raise FlowDataError(f"unknown features: {missing}")
        idx = [self.schema.features.index(f) for f in features]
        schema = FeatureSchema(tuple(features), self.schema.socket_features,
                               self.schema.label_column)
        return FlowDataset(
            schema,
            tuple(tuple(row[j] for j in idx) for row in self.raw),
            self.values[:, idx].copy(),
            self.categories,
            self.labels.copy(),
            self.provenance,
            self.rejections,
        )


def _parse_number(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite value")
    return value


def build_dataset(schema, raw_rows, categories, provenance="", rejections=()):
    """Assemble a :class:`FlowDataset` from raw text rows and category names."""
    raw_rows = tuple(tuple(r) for r in raw_rows)
    cats = tuple(normalize_category(c) for c in categories)
    values = np.array(
        [[_parse_number(v) for v in row] for row in raw_rows], dtype=np.float64
    ).reshape(len(raw_rows), len(schema.features))
    labels = np.array([0 if c == "Normal" else 1 for c in cats], dtype=np.int64)
    return FlowDataset(schema, raw_rows, values, cats, labels, provenance,
                       tuple(rejections))


def load_flow_csv(path, schema: FeatureSchema | None = None) -> FlowDataset:
    """Read a flow CSV, dropping socket-identity columns.

    Header names are whitespace-stripped before matching. When ``schema`` is
    None the retained features are every non-socket, non-label column in
    file order. Rows with a missing, unparsable or non-finite feature value
    or an unknown category are rejected and listed in ``rejections`` as
    ``"row <n>: <reason>"`` (``n`` counts data rows from 1).
    """
    path = Path(path)
    if not path.is_file():
        raise FlowDataError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FlowDataError(f"{path}: no header row") from None

        label_col = schema.label_column if schema else "Label"
        socket = schema.socket_features if schema else SOCKET_FEATURES
        if label_col not in header:
            raise FlowDataError(f"{path}: missing label column {label_col!r}")
        present = [h for h in header if h not in socket and h != label_col]
        if schema is None:
            schema = FeatureSchema(tuple(present), socket, label_col)
        elif set(present) != set(schema.features):
            missing = [f for f in schema.features if f not in present]
            extra = [h for h in present if h not in schema.features]
            raise FlowDataError(
                f"{path}: header mismatch (missing={missing}, unexpected={extra})"
            )
        col = [header.index(f) for f in schema.features]
        label_idx = header.index(label_col)

        raw_rows, cats, rejections = [], [], []
        for n, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                rejections.append(f"row {n}: expected {len(header)} fields, got {len(row)}")
                continue
            cells = tuple(row[j].strip() for j in col)
            reason = None
            for name, cell in zip(schema.features, cells):
                try:
                    _parse_number(cell)
                except ValueError:
                    reason = f"bad value {cell!r} for {name}"
                    break
            if reason is None:
                try:
                    cat = normalize_category(row[label_idx])
                except FlowDataError as exc:
                    reason = str(exc)
            if reason is not None:
                rejections.append(f"row {n}: {reason}")
                continue
            raw_rows.append(cells)
            cats.append(cat)

    if not raw_rows:
        raise FlowDataError(f"{path}: zero surviving rows")
    return build_dataset(schema, raw_rows, cats, provenance=str(path),
                         rejections=rejections)


def write_flow_csv(dataset: FlowDataset, path) -> None:
    """Write retained features then the label column; raw text verbatim."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*dataset.features, dataset.schema.label_column])
        for row, cat in zip(dataset.raw, dataset.categories):
            writer.writerow([*row, cat])


def write_rejections(dataset: FlowDataset, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in dataset.rejections),
                          encoding="utf-8")


def binarize_labels(dataset: FlowDataset) -> FlowDataset:
    """Recompute binary labels from categories: Normal -> 0, anything else -> 1."""
    cats = tuple(normalize_category(c) for c in dataset.categories)
    labels = np.array([0 if c == "Normal" else 1 for c in cats], dtype=np.int64)
    return FlowDataset(dataset.schema, dataset.raw, dataset.values.copy(), cats,
                       labels, dataset.provenance, dataset.rejections)


# ---------------------------------------------------------------------------
# Synthetic flows
# ---------------------------------------------------------------------------

# Per family, per feature: (mu, sigma) of ln(value + 1) for a log-normal
# draw. Attack families sit at the scale of the InSDN attack rows
# (durations of tens of microseconds, packet rates >= 1e4/s); Normal sits
# at >= 1e3 us and <= 1e3 pkt/s. Init Bwd Win Byts uses ln(value + 2) so
# that -1 is reachable.
_FEATURE_KIND = {
    "Flow Duration": "int",
    "Flow Pkts/s": "float",
    "Flow IAT Mean": "float",
    "Flow IAT Max": "int",
    "Bwd IAT Tot": "int",
    "Bwd IAT Mean": "float",
    "Bwd Header Len": "int",
    "Bwd Pkts/s": "float",
    "Pkt Len Max": "int",
    "Init Bwd Win Byts": "int",
}
_SHIFT = {name: 1.0 for name in TOP10_FEATURES}
_SHIFT["Init Bwd Win Byts"] = 2.0

_L = math.log
SYNTHETIC_PARAMS: dict[str, dict[str, tuple[float, float]]] = {
    "Normal": {
        "Flow Duration": (_L(6e4), 1.2),
        "Flow Pkts/s": (_L(1.5e2), 0.9),
        "Flow IAT Mean": (_L(6e3), 1.0),
        "Flow IAT Max": (_L(3e4), 1.1),
        "Bwd IAT Tot": (_L(4e4), 1.3),
        "Bwd IAT Mean": (_L(8e3), 1.1),
        "Bwd Header Len": (_L(600), 1.0),
        "Bwd Pkts/s": (_L(70), 0.9),
        "Pkt Len Max": (_L(1200), 1.0),
        "Init Bwd Win Byts": (_L(30000), 1.0),
    },
    "DDoS": {
        "Flow Duration": (_L(25), 0.4),
        "Flow Pkts/s": (_L(8e4), 0.4),
        "Flow IAT Mean": (_L(25), 0.4),
        "Flow IAT Max": (_L(25), 0.4),
        "Bwd IAT Tot": (_L(20), 0.5),
        "Bwd IAT Mean": (_L(20), 0.5),
        "Bwd Header Len": (0.0, 0.05),
        "Bwd Pkts/s": (_L(6e4), 0.4),
        "Pkt Len Max": (0.0, 0.05),
        "Init Bwd Win Byts": (_L(1), 0.05),
    },
    "DoS": {
        "Flow Duration": (_L(40), 0.5),
        "Flow Pkts/s": (_L(5e4), 0.5),
        "Flow IAT Mean": (_L(35), 0.5),
        "Flow IAT Max": (_L(40), 0.5),
        "Bwd IAT Tot": (_L(30), 0.6),
        "Bwd IAT Mean": (_L(30), 0.6),
        "Bwd Header Len": (_L(60), 0.5),
        "Bwd Pkts/s": (_L(3e4), 0.5),
        "Pkt Len Max": (_L(200), 0.8),
        "Init Bwd Win Byts": (_L(20000), 1.0),
    },
    "Probe": {
        "Flow Duration": (_L(15), 0.5),
        "Flow Pkts/s": (_L(1.3e5), 0.5),
        "Flow IAT Mean": (_L(15), 0.5),
        "Flow IAT Max": (_L(15), 0.5),
        "Bwd IAT Tot": (0.0, 0.05),
        "Bwd IAT Mean": (0.0, 0.05),
        "Bwd Header Len": (_L(20), 0.2),
        "Bwd Pkts/s": (_L(6e4), 0.5),
        "Pkt Len Max": (0.0, 0.05),
        "Init Bwd Win Byts": (_L(2), 0.05),
    },
    "BFA": {
        "Flow Duration": (_L(60), 0.5),
        "Flow Pkts/s": (_L(3e4), 0.5),
        "Flow IAT Mean": (_L(30), 0.5),
        "Flow IAT Max": (_L(55), 0.5),
        "Bwd IAT Tot": (_L(40), 0.5),
        "Bwd IAT Mean": (_L(25), 0.5),
        "Bwd Header Len": (_L(100), 0.4),
        "Bwd Pkts/s": (_L(1.5e4), 0.5),
        "Pkt Len Max": (_L(80), 0.5),
        "Init Bwd Win Byts": (_L(29000), 0.3),
    },
    "Web": {
        "Flow Duration": (_L(70), 0.5),
        "Flow Pkts/s": (_L(2.5e4), 0.5),
        "Flow IAT Mean": (_L(35), 0.5),
        "Flow IAT Max": (_L(60), 0.5),
        "Bwd IAT Tot": (_L(50), 0.5),
        "Bwd IAT Mean": (_L(30), 0.5),
        "Bwd Header Len": (_L(160), 0.4),
        "Bwd Pkts/s": (_L(1.2e4), 0.5),
        "Pkt Len Max": (_L(500), 0.6),
        "Init Bwd Win Byts": (_L(64000), 0.2),
    },
    "BOTNET": {
        "Flow Duration": (_L(50), 0.6),
        "Flow Pkts/s": (_L(4e4), 0.6),
        "Flow IAT Mean": (_L(50), 0.6),
        "Flow IAT Max": (_L(50), 0.6),
        "Bwd IAT Tot": (_L(10), 0.6),
        "Bwd IAT Mean": (_L(10), 0.6),
        "Bwd Header Len": (_L(40), 0.4),
        "Bwd Pkts/s": (_L(2e4), 0.6),
        "Pkt Len Max": (_L(150), 0.6),
        "Init Bwd Win Byts": (_L(8000), 0.4),
    },
    "U2R": {
        "Flow Duration": (_L(80), 0.5),
        "Flow Pkts/s": (_L(2e4), 0.5),
        "Flow IAT Mean": (_L(40), 0.5),
        "Flow IAT Max": (_L(70), 0.5),
        "Bwd IAT Tot": (_L(60), 0.5),
        "Bwd IAT Mean": (_L(40), 0.5),
        "Bwd Header Len": (_L(200), 0.4),
        "Bwd Pkts/s": (_L(1e4), 0.5),
        "Pkt Len Max": (_L(900), 0.5),
        "Init Bwd Win Byts": (_L(500), 0.5),
    },
}

# Every traffic class contains some one-way flows (no backward packets),
# whose backward-direction features take the sentinel values below, so only
# the whole-flow timing features separate attacks from normal traffic
# consistently. Fractions are per class.
ONE_WAY_FRACTION = {
    "Normal": 0.4, "DDoS": 0.5, "DoS": 0.2, "Probe": 0.5,
    "BFA": 0.1, "Web": 0.1, "BOTNET": 0.3, "U2R": 0.1,
}
ONE_WAY_VALUES = {
    "Bwd IAT Tot": 0.0,
    "Bwd IAT Mean": 0.0,
    "Bwd Header Len": 0.0,
    "Bwd Pkts/s": 0.0,
    "Pkt Len Max": 0.0,
    "Init Bwd Win Byts": -1.0,
}


def _format_value(x: float, kind: str) -> str:
    if kind == "int":
        return str(int(round(x)))
    text = f"{x:.10g}"
    return text if "e" not in text else str(int(round(x)))


def generate_synthetic_flows(
    n_normal: int,
    n_attack_per_family: Mapping[str, int],
    seed: int = 0,
    separation: float = 1.0,
) -> FlowDataset:
    """Draw a labelled flow dataset over the ten top-ranked features.

    Flows are emitted in category blocks (Normal first, then the attack
    families in :data:`ATTACK_FAMILIES` order), the way the public corpus
    is distributed as one capture per traffic type. ``separation`` in
    (0, 1] scales each attack family's log-space means toward Normal's.
    """
    if n_normal < 0 or any(c < 0 for c in n_attack_per_family.values()):
        raise ValueError("counts must be >= 0")
    if n_normal + sum(n_attack_per_family.values()) == 0:
        raise ValueError("at least one class must be nonempty")
    if not 0.0 < separation <= 1.0:
        raise ValueError("separation must lie in (0, 1]")
    families = {normalize_category(k): v for k, v in n_attack_per_family.items()}
    if "Normal" in families:
        raise ValueError("Normal is not an attack family")

    rng = np.random.default_rng(seed)
    normal = SYNTHETIC_PARAMS["Normal"]
    raw_rows: list[tuple[str, ...]] = []
    cats: list[str] = []
    blocks = [("Normal", n_normal)] + [(f, families.get(f, 0)) for f in ATTACK_FAMILIES]
    for cat, count in blocks:
        if count == 0:
            continue
        params = SYNTHETIC_PARAMS[cat]
        one_way = rng.random(count) < ONE_WAY_FRACTION[cat]
        cols = []
        for name in TOP10_FEATURES:
            mu, sigma = params[name]
            if cat != "Normal":
                mu = normal[name][0] + separation * (mu - normal[name][0])
            draw = np.exp(rng.normal(mu, sigma, size=count)) - _SHIFT[name]
            draw = np.maximum(draw, 1.0 - _SHIFT[name])
            if name in ONE_WAY_VALUES:
                draw[one_way] = ONE_WAY_VALUES[name]
            cols.append([_format_value(x, _FEATURE_KIND[name]) for x in draw])
        raw_rows.extend(zip(*cols))
        cats.extend([cat] * count)

    return build_dataset(
        FeatureSchema.top10(), raw_rows, cats,
        provenance=f"synthetic(seed={seed}, separation={separation})",
    )
