"""Synthetic keyword-separable corpus generator.

Builds a full data tree (six training languages with train/dev/test, three
surprise languages with test only), a synonym lexicon, and a ready-to-run
experiment config. Label cues are language-independent tokens, so merged
training transfers to the surprise languages; filler vocabulary is per
language, so languages are still distinguishable.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import yaml

from .corpus import LabelSpace, Subtask, load_label_space
from .pipeline import DEFAULT_ROOT_SEED

TRAINING_LANGUAGES = ("en", "fr", "ge", "it", "po", "ru")
SURPRISE_LANGUAGES = ("ka", "gr", "es")


def _cue(subtask: Subtask, label: str) -> str:
    return f"cue_{subtask.value.lower()}_{label}"


def _spaces() -> dict[Subtask, LabelSpace]:
    root = Path(__file__).parent / "data" / "labels"
    return {s: load_label_space(root / f"{s.value}.tsv") for s in Subtask}


def _language_rng(seed: int, language: str) -> np.random.Generator:
    # hash() is salted per process; a fixed digest keeps reruns identical
    tag = int.from_bytes(hashlib.sha256(language.encode("utf-8")).digest()[:4], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _article(
    rng: np.random.Generator,
    language: str,
    spaces: dict[Subtask, LabelSpace],
) -> tuple[list[str], frozenset, frozenset, list[frozenset]]:
    """One article: paragraphs plus its S1 label, S2 label set, and per-
    paragraph S3 label sets."""
    filler = [f"w{int(k)}{language}" for k in rng.integers(0, 40, size=24)]
    s1_label = spaces[Subtask.S1].labels[int(rng.integers(3))]
    s2_count = int(rng.integers(1, 4))
    s2_indices = rng.choice(len(spaces[Subtask.S2].labels), size=s2_count, replace=False)
    s2_labels = frozenset(spaces[Subtask.S2].labels[int(i)] for i in s2_indices)

    n_paragraphs = int(rng.integers(2, 4))
    paragraphs = []
    s3_sets = []
    filler_iter = iter(filler)
    for _ in range(n_paragraphs):
        s3_mask = rng.random(len(spaces[Subtask.S3].labels)) < 0.06
        s3_labels = frozenset(
            l for l, hit in zip(spaces[Subtask.S3].labels, s3_mask) if hit
        )
        words = [next(filler_iter) for _ in range(5)]
        words += [_cue(Subtask.S1, s1_label)] * 2
        words += [_cue(Subtask.S2, l) for l in sorted(s2_labels)]
        for label in sorted(s3_labels):
            words += [_cue(Subtask.S3, label)] * 3
        rng.shuffle(words)
        paragraphs.append(" ".join(words))
        s3_sets.append(s3_labels)
    return paragraphs, frozenset([s1_label]), s2_labels, s3_sets


def _write_part(
    rng: np.random.Generator,
    part_dir: Path,
    language: str,
    n_articles: int,
    spaces: dict[Subtask, LabelSpace],
    labeled: bool,
) -> None:
    articles_dir = part_dir / "articles"
    articles_dir.mkdir(parents=True, exist_ok=True)
    rows = {s: [] for s in Subtask}
    for i in range(n_articles):
        article_id = f"{i + 1:04d}"
        paragraphs, s1_labels, s2_labels, s3_sets = _article(rng, language, spaces)
        (articles_dir / f"article{article_id}.txt").write_text(
            "\n\n".join(paragraphs) + "\n", encoding="utf-8"
        )
        if not labeled:
            continue
        rows[Subtask.S1].append(f"{article_id}\t{next(iter(s1_labels))}")
        ordered_s2 = [l for l in spaces[Subtask.S2].labels if l in s2_labels]
        rows[Subtask.S2].append(f"{article_id}\t{','.join(ordered_s2)}")
        for index, labels in enumerate(s3_sets, start=1):
            ordered = [l for l in spaces[Subtask.S3].labels if l in labels]
            rows[Subtask.S3].append(f"{article_id}\t{index}\t{','.join(ordered)}")
    if labeled:
        labels_dir = part_dir / "labels"
        labels_dir.mkdir(parents=True, exist_ok=True)
        for subtask, lines in rows.items():
            (labels_dir / f"{subtask.value}.tsv").write_text(
                "\n".join(lines) + "\n", encoding="utf-8"
            )


def _write_lexicon(path: Path, languages) -> None:
    lines = []
    for language in languages:
        for k in range(40):
            lines.append(f"w{k}{language}\tv{k}{language},u{k}{language}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_demo(
    root: Path | str,
    seed: int = 7,
    train_articles: int = 20,
    dev_articles: int = 10,
    test_articles: int = 8,
) -> Path:
    """Create data/, lexicon.tsv, and config.yaml under `root`; returns the
    config path. Deterministic in (root-independent) content for a given seed.
    """
    root = Path(root)
    spaces = _spaces()
    data_root = root / "data"
    for language in TRAINING_LANGUAGES:
        rng = _language_rng(seed, language)
        _write_part(rng, data_root / language / "train", language, train_articles, spaces, labeled=True)
        _write_part(rng, data_root / language / "dev", language, dev_articles, spaces, labeled=True)
        _write_part(rng, data_root / language / "test", language, test_articles, spaces, labeled=False)
    for language in SURPRISE_LANGUAGES:
        rng = _language_rng(seed, language)
        _write_part(rng, data_root / language / "test", language, test_articles, spaces, labeled=False)

    _write_lexicon(root / "lexicon.tsv", TRAINING_LANGUAGES + SURPRISE_LANGUAGES)

    config = {
        "languages": list(TRAINING_LANGUAGES),
        "subtasks": [s.value for s in Subtask],
        "setups": ["mono", "multi", "aug"],
        "paths": {"data_root": "data", "work_root": "work"},
        "root_seed": DEFAULT_ROOT_SEED,
        # desk-scale featurizer: unigrams into a small hash space keep the
        # 355-run matrix inside the demo time budget
        "featurizer": {"hash_dim": 4096, "ngram_max": 1},
        "augment": {
            "ops": ["synonym_replace", "random_swap"],
            "rate": 0.1,
            "copies": 1,
            "lexicon": "lexicon.tsv",
        },
    }
    config_path = root / "config.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return config_path
