"""Flow-to-sentence serialization and consecutive-flow combination."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import FlowDataset, FlowRecord


@dataclass(frozen=True)
class FlowSentence:
    text: str
    label: int
    source_index: int = -1
    category: str = ""


@dataclass(frozen=True)
class CombinedSentence:
    text: str
    label: int
    member_indices: tuple[int, ...]
    group_categories: tuple[str, ...] = ()

    @property
    def category(self) -> str:
        """Category of the last member, the flow whose label the group carries."""
        return self.group_categories[-1] if self.group_categories else ""


def flow_to_sentence(record: FlowRecord, features: Sequence[str], source_index: int = -1) -> FlowSentence:
    """Render ``record`` as ``"Name=raw, Name=raw, ..."`` over ``features``."""
    try:
        parts = [f"{name}={record.raw[name]}" for name in features]
    except KeyError as exc:
        raise KeyError(f"record has no feature {exc.args[0]!r}") from None
    return FlowSentence(", ".join(parts), record.binary_label, source_index,
                        record.attack_category)


def dataset_to_sentences(dataset: FlowDataset, features: Sequence[str] | None = None) -> list[FlowSentence]:
    features = list(features or dataset.features)
    return [flow_to_sentence(rec, features, i) for i, rec in enumerate(dataset)]


def _group(sentences, group_size):
    for start in range(0, len(sentences) - group_size + 1, group_size):
        members = sentences[start:start + group_size]
        yield CombinedSentence(
            " ".join(s.text for s in members),
            members[-1].label,
            tuple(s.source_index for s in members),
            tuple(s.category for s in members),
        )


def combine_flows(
    sentences: Sequence[FlowSentence],
    group_size: int = 4,
    per_category_grouping: bool = False,
) -> list[CombinedSentence]:
    """Join every ``group_size`` consecutive sentences into one input.

    The combined label is the last member's label and an incomplete trailing
    group is dropped. With ``per_category_grouping`` the sentences are first
    cut into maximal runs of one category and each run is grouped on its
    own, so no group straddles a category boundary.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    sentences = list(sentences)
    if not per_category_grouping:
        return list(_group(sentences, group_size))
    out: list[CombinedSentence] = []
    start = 0
    for i in range(1, len(sentences) + 1):
        if i == len(sentences) or sentences[i].category != sentences[start].category:
            out.extend(_group(sentences[start:i], group_size))
            start = i
    return out


def write_sentence_csv(items: Iterable, path) -> None:
    """Write the two-column ``Sentence,label`` file (sentence always quoted)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("Sentence,label\n")
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC, lineterminator="\n")
        for s in items:
            writer.writerow([s.text, int(s.label)])


def read_sentence_csv(path) -> list[tuple[str, int]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:2]] != ["Sentence", "label"]:
            raise ValueError(f"{path}: expected header 'Sentence,label'")
        return [(row[0], int(float(row[1]))) for row in reader if row]


def write_group_meta(groups: Sequence[CombinedSentence], path) -> None:
    """Sidecar file carrying member indices and categories for each group."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["member_indices", "group_categories"])
        for g in groups:
            writer.writerow([" ".join(map(str, g.member_indices)), " ".join(g.group_categories)])


def read_combined(sentence_path, meta_path) -> list[CombinedSentence]:
    pairs = read_sentence_csv(sentence_path)
    with Path(meta_path).open(newline="", encoding="utf-8") as fh:
        meta = list(csv.DictReader(fh))
    if len(meta) != len(pairs):
        raise ValueError("sentence file and group metadata disagree in length")
    return [
        CombinedSentence(text, label,
                         tuple(int(x) for x in m["member_indices"].split()),
                         tuple(m["group_categories"].split()))
        for (text, label), m in zip(pairs, meta)
    ]
