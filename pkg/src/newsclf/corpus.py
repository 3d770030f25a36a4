"""Corpus handling: article/label parsing, dataset construction, splits and merges.

File formats
------------
Articles: one UTF-8 file per article named ``article<ID>.txt``, paragraphs
separated by one or more blank lines. Line breaks inside a paragraph block
are treated as soft wraps and normalized to single spaces, so a paragraph is
always a single line of text.

Labels: UTF-8 TSV. Subtasks S1/S2 use ``article_id<TAB>labels``; S3 uses
``article_id<TAB>paragraph_index<TAB>labels`` with 1-based paragraph indices.
``labels`` is a comma-separated list; an empty list is legal only for
multilabel subtasks.

Label spaces: header line ``subtask<TAB>kind`` followed by one label per line.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CorpusIOError, FormatError, ValidationError

logger = logging.getLogger(__name__)

ARTICLE_FILE_RE = re.compile(r"^article(?P<id>.+)\.txt$")


class Subtask(str, Enum):
    S1 = "S1"  # news genre, multiclass, article level
    S2 = "S2"  # framing, multilabel, article level
    S3 = "S3"  # persuasion techniques, multilabel, paragraph level


class LabelKind(str, Enum):
    MULTICLASS = "multiclass"
    MULTILABEL = "multilabel"


SUBTASK_KIND = {
    Subtask.S1: LabelKind.MULTICLASS,
    Subtask.S2: LabelKind.MULTILABEL,
    Subtask.S3: LabelKind.MULTILABEL,
}

SUBTASK_LABEL_COUNT = {Subtask.S1: 3, Subtask.S2: 14, Subtask.S3: 23}


@dataclass(frozen=True)
class Document:
    """One news article: ordered non-empty paragraphs plus a language tag."""

    id: str
    language: str
    paragraphs: tuple[str, ...]

    def __post_init__(self):
        if not self.paragraphs:
            raise ValidationError(f"article {self.id}: no paragraphs")
        for i, p in enumerate(self.paragraphs, start=1):
            if not p.strip():
                raise ValidationError(f"article {self.id}: paragraph {i} is blank")

    @property
    def text(self) -> str:
        return "\n".join(self.paragraphs)


@dataclass(frozen=True)
class LabelSpace:
    """The label inventory of one subtask."""

    subtask: Subtask
    kind: LabelKind
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.kind is not SUBTASK_KIND[self.subtask]:
            raise ValidationError(
                f"{self.subtask.value} must be {SUBTASK_KIND[self.subtask].value}, got {self.kind.value}"
            )
        expected = SUBTASK_LABEL_COUNT[self.subtask]
        if len(self.labels) != expected:
            raise ValidationError(
                f"{self.subtask.value} label space: expected {expected} labels, got {len(self.labels)}"
            )
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError(f"{self.subtask.value} label space: duplicate labels")

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class LabeledInstance:
    """One classification unit: an article (S1/S2) or a paragraph (S3)."""

    unit_id: str
    text: str
    labels: frozenset[str]


@dataclass(frozen=True)
class Dataset:
    """A subtask-typed instance collection with its label space."""

    subtask: Subtask
    languages: frozenset[str]
    instances: tuple[LabeledInstance, ...]
    label_space: LabelSpace

    def __post_init__(self):
        if self.subtask is not self.label_space.subtask:
            raise ValidationError(
                f"dataset subtask {self.subtask.value} != label space {self.label_space.subtask.value}"
            )
        known = set(self.label_space.labels)
        seen: set[str] = set()
        for inst in self.instances:
            if inst.unit_id in seen:
                raise ValidationError(f"duplicate unit id {inst.unit_id!r}")
            seen.add(inst.unit_id)
            bad = inst.labels - known
            if bad:
                raise ValidationError(
                    f"unit {inst.unit_id!r}: unknown labels {sorted(bad)}"
                )
            if self.label_space.kind is LabelKind.MULTICLASS and len(inst.labels) != 1:
                raise ValidationError(
                    f"unit {inst.unit_id!r}: multiclass instance needs exactly 1 label, got {len(inst.labels)}"
                )

    def __len__(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class SplitConfig:
    """Train/validation split ratio and seed (defaults to the 80-20 rule)."""

    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError(f"train_fraction must be in (0,1), got {self.train_fraction}")


def parse_documents(directory: Path | str, language: str) -> list[Document]:
    """Parse every ``article<ID>.txt`` in `directory`, sorted by file name.

    Paragraphs are blank-line separated; each paragraph is stripped and its
    internal whitespace (including soft line wraps) collapsed to single spaces.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusIOError(f"not a directory: {directory}")
    docs = []
    for path in sorted(directory.iterdir()):
        m = ARTICLE_FILE_RE.match(path.name)
        if not m:
            continue
        article_id = m.group("id")
        try:
            body = path.read_text(encoding="utf-8")
        except OSError as e:
            raise CorpusIOError(f"cannot read {path}: {e}") from e
        paragraphs = tuple(
            " ".join(block.split())
            for block in re.split(r"\n\s*\n", body)
            if block.strip()
        )
        if not paragraphs:
            raise FormatError(f"article {article_id}: file {path} is empty")
        docs.append(Document(id=article_id, language=language, paragraphs=paragraphs))
    return docs


def s3_unit_id(article_id: str, paragraph_index: int) -> str:
    """Unit id for one paragraph: ``<article_id>#<1-based index>``."""
    return f"{article_id}#{paragraph_index}"


def parse_labels(path: Path | str, label_space: LabelSpace) -> dict[str, frozenset[str]]:
    """Parse a label TSV into a map unit_id -> label set."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorpusIOError(f"cannot read {path}: {e}") from e

    want_index = label_space.subtask is Subtask.S3
    n_fields = 3 if want_index else 2
    known = set(label_space.labels)
    out: dict[str, frozenset[str]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != n_fields:
            raise FormatError(
                f"{path}:{lineno}: expected {n_fields} tab-separated fields, got {len(fields)}"
            )
        if want_index:
            article_id, index_str, label_str = fields
            if not index_str.isdigit():
                raise FormatError(f"{path}:{lineno}: bad paragraph index {index_str!r}")
            if int(index_str) < 1:
                raise ValidationError(
                    f"{path}:{lineno}: paragraph index must be >= 1, got {index_str}"
                )
            unit_id = s3_unit_id(article_id, int(index_str))
        else:
            article_id, label_str = fields
            unit_id = article_id
        labels = frozenset(s.strip() for s in label_str.split(",") if s.strip())
        unknown = labels - known
        if unknown:
            raise ValidationError(
                f"{path}:{lineno}: unknown label {sorted(unknown)[0]!r}"
            )
        if label_space.kind is LabelKind.MULTICLASS and len(labels) != 1:
            raise ValidationError(
                f"{path}:{lineno}: multiclass row needs exactly 1 label, got {len(labels)}"
            )
        if unit_id in out:
            raise ValidationError(f"{path}:{lineno}: duplicate unit id {unit_id!r}")
        out[unit_id] = labels
    return out


def bind(
    documents: list[Document],
    label_map: dict[str, frozenset[str]],
    subtask: Subtask,
    label_space: LabelSpace,
) -> Dataset:
    """Join parsed documents with their labels into a Dataset.

    S1/S2 produce one instance per article (paragraphs joined by newline);
    S3 produces one instance per labeled paragraph. Units without labels are
    dropped with a counted warning; labels pointing at a nonexistent document
    or paragraph raise.
    """
    by_id: dict[str, Document] = {}
    for doc in documents:
        if doc.id in by_id:
            raise ValidationError(f"duplicate article id {doc.id!r}")
        by_id[doc.id] = doc

    for unit_id in label_map:
        if subtask is Subtask.S3:
            article_id, sep, index_str = unit_id.rpartition("#")
            if not sep or not index_str.isdigit():
                raise ValidationError(f"bad S3 unit id {unit_id!r}")
            if article_id not in by_id:
                raise ValidationError(f"label for unknown article {article_id!r}")
            if int(index_str) > len(by_id[article_id].paragraphs):
                raise ValidationError(
                    f"label for paragraph {index_str} of article {article_id!r}, "
                    f"which has {len(by_id[article_id].paragraphs)} paragraphs"
                )
        elif unit_id not in by_id:
            raise ValidationError(f"label for unknown article {unit_id!r}")

    instances = []
    dropped = 0
    for doc in documents:
        if subtask is Subtask.S3:
            for i, paragraph in enumerate(doc.paragraphs, start=1):
                unit_id = s3_unit_id(doc.id, i)
                if unit_id in label_map:
                    instances.append(LabeledInstance(unit_id, paragraph, label_map[unit_id]))
                else:
                    dropped += 1
        else:
            if doc.id in label_map:
                instances.append(LabeledInstance(doc.id, doc.text, label_map[doc.id]))
            else:
                dropped += 1
    if dropped:
        logger.warning("bind: dropped %d unlabeled units for %s", dropped, subtask.value)

    return Dataset(
        subtask=subtask,
        languages=frozenset(d.language for d in documents),
        instances=tuple(instances),
        label_space=label_space,
    )


def split(dataset: Dataset, cfg: SplitConfig) -> tuple[Dataset, Dataset]:
    """Deterministic random split; train gets floor(train_fraction * n) instances.

    Both halves keep the original instance order. Driven solely by cfg.seed.
    """
    n = len(dataset.instances)
    if n < 2:
        raise ValidationError(f"cannot split {n} instances into two non-empty parts")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    # round() guards against float artifacts like 0.7 * 10 = 6.999...
    n_train = math.floor(round(cfg.train_fraction * n, 9))
    train_idx = sorted(perm[:n_train].tolist())
    val_idx = sorted(perm[n_train:].tolist())

    def take(indices):
        return Dataset(
            subtask=dataset.subtask,
            languages=dataset.languages,
            instances=tuple(dataset.instances[i] for i in indices),
            label_space=dataset.label_space,
        )

    return take(train_idx), take(val_idx)


def merge_multilingual(datasets: list[Dataset]) -> Dataset:
    """Concatenate per-language datasets, prefixing unit ids with the language."""
    if not datasets:
        raise ValidationError("nothing to merge")
    first = datasets[0]
    instances = []
    languages: set[str] = set()
    for ds in datasets:
        if ds.subtask is not first.subtask:
            raise ValidationError(
                f"cannot merge {ds.subtask.value} into {first.subtask.value}"
            )
        if ds.label_space.labels != first.label_space.labels:
            raise ValidationError("cannot merge datasets with different label spaces")
        if len(ds.languages) != 1:
            raise ValidationError(
                f"merge inputs must be single-language datasets, got {sorted(ds.languages)}"
            )
        (lang,) = ds.languages
        languages.add(lang)
        for inst in ds.instances:
            instances.append(
                LabeledInstance(f"{lang}:{inst.unit_id}", inst.text, inst.labels)
            )
    return Dataset(
        subtask=first.subtask,
        languages=frozenset(languages),
        instances=tuple(instances),
        label_space=first.label_space,
    )


def load_label_space(path: Path | str) -> LabelSpace:
    """Load a label inventory file (header ``subtask<TAB>kind``, one label per line)."""
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except OSError as e:
        raise CorpusIOError(f"cannot read {path}: {e}") from e
    if not lines:
        raise FormatError(f"{path}: empty label space file")
    header = lines[0].split("\t")
    if len(header) != 2:
        raise FormatError(f"{path}:1: expected header 'subtask<TAB>kind'")
    try:
        subtask = Subtask(header[0].strip())
        kind = LabelKind(header[1].strip())
    except ValueError as e:
        raise FormatError(f"{path}:1: {e}") from e
    labels = tuple(ln.strip() for ln in lines[1:])
    expected = SUBTASK_LABEL_COUNT[subtask]
    if len(labels) != expected:
        raise ValidationError(
            f"{path}: expected {expected} labels for {subtask.value}, got {len(labels)}"
        )
    return LabelSpace(subtask=subtask, kind=kind, labels=labels)


def _article_rows(dataset: Dataset):
    """Group instances into (article_id, paragraphs, rows) for serialization."""
    if dataset.subtask is not Subtask.S3:
        for inst in dataset.instances:
            yield inst.unit_id, tuple(inst.text.split("\n")), [(inst.unit_id, None, inst.labels)]
        return

    grouped: dict[str, list[tuple[int, LabeledInstance]]] = {}
    order: list[str] = []
    for inst in dataset.instances:
        article_id, sep, index_str = inst.unit_id.rpartition("#")
        if sep and index_str.isdigit():
            index = int(index_str)
        else:
            # e.g. augmented paragraph ids; serialized as single-paragraph articles
            article_id, index = inst.unit_id, 1
        if article_id not in grouped:
            grouped[article_id] = []
            order.append(article_id)
        grouped[article_id].append((index, inst))

    for article_id in order:
        entries = sorted(grouped[article_id])
        indices = [i for i, _ in entries]
        if indices != list(range(1, len(entries) + 1)):
            raise ValidationError(
                f"article {article_id!r}: paragraph indices {indices} are not contiguous from 1"
            )
        paragraphs = tuple(inst.text for _, inst in entries)
        rows = [(article_id, i, inst.labels) for i, inst in entries]
        yield article_id, paragraphs, rows


def format_label_row(
    subtask: Subtask, unit_id: str, labels, label_space: LabelSpace
) -> str:
    """One labels.tsv/predictions row; labels come out in label-space order."""
    ordered = [l for l in label_space.labels if l in labels]
    if subtask is not Subtask.S3:
        return f"{unit_id}\t{','.join(ordered)}"
    article_id, sep, index_str = unit_id.rpartition("#")
    if not sep or not index_str.isdigit():
        raise ValidationError(f"bad S3 unit id {unit_id!r}")
    return f"{article_id}\t{index_str}\t{','.join(ordered)}"


def write_dataset(dataset: Dataset, directory: Path | str) -> None:
    """Write a dataset as ``articles/article<ID>.txt`` files plus ``labels.tsv``.

    Inverse of parse_documents/parse_labels/bind for parser-normalized corpora.
    """
    directory = Path(directory)
    articles_dir = directory / "articles"
    articles_dir.mkdir(parents=True, exist_ok=True)
    label_lines = []
    for article_id, paragraphs, rows in _article_rows(dataset):
        (articles_dir / f"article{article_id}.txt").write_text(
            "\n\n".join(paragraphs) + "\n", encoding="utf-8"
        )
        for unit, index, labels in rows:
            row_id = unit if index is None else f"{article_id}#{index}"
            label_lines.append(
                format_label_row(dataset.subtask, row_id, labels, dataset.label_space)
            )
    (directory / "labels.tsv").write_text(
        "\n".join(label_lines) + ("\n" if label_lines else ""), encoding="utf-8"
    )


def read_dataset(
    directory: Path | str,
    subtask: Subtask,
    label_space: LabelSpace,
    language: str,
) -> Dataset:
    """Read a dataset directory produced by write_dataset."""
    directory = Path(directory)
    docs = parse_documents(directory / "articles", language)
    label_map = parse_labels(directory / "labels.tsv", label_space)
    return bind(docs, label_map, subtask, label_space)


def dataset_fingerprint(dataset: Dataset) -> str:
    """Stable content hash of a dataset (instances, labels, label space)."""
    h = hashlib.sha256()
    h.update(dataset.subtask.value.encode())
    h.update("\x1e".join(dataset.label_space.labels).encode("utf-8"))
    for inst in dataset.instances:
        h.update(inst.unit_id.encode("utf-8"))
        h.update(b"\x1f")
        h.update(inst.text.encode("utf-8"))
        h.update(b"\x1f")
        h.update(",".join(sorted(inst.labels)).encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()
