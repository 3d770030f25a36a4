"""Deterministic text augmentation over labeled instances.

Token ops work on whitespace-split tokens (punctuation stays attached) and
never change labels. Every variant gets its own RNG stream derived from
(plan seed, instance index, copy index), so the output is byte-identical no
matter how many workers produced it or in what order.

Rounded op counts use half-up rounding: k = floor(rate·n + 0.5).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from math import floor
from pathlib import Path

import numpy as np

from .backend import MASK_SENTINEL, BackendHandle, request_fill
from .corpus import Dataset, LabeledInstance
from .errors import AugmentError, BackendError, FormatError, ValidationError

TOKEN_OPS = ("synonym_replace", "random_insert", "random_delete", "random_swap")
CONTEXTUAL_OPS = ("contextual_insert", "contextual_substitute")
ALL_OPS = TOKEN_OPS + CONTEXTUAL_OPS


@dataclass(frozen=True)
class AugmentPlan:
    ops: tuple[str, ...]
    rate: float = 0.1
    copies: int = 1
    seed: int = 0

    def __post_init__(self):
        unknown = [op for op in self.ops if op not in ALL_OPS]
        if unknown:
            raise ValidationError(f"unknown augmentation ops {unknown}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"rate must be in [0,1], got {self.rate}")
        if self.copies < 1:
            raise ValidationError(f"copies must be >= 1, got {self.copies}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def needs_lexicon(self) -> bool:
        return "synonym_replace" in self.ops

    @property
    def needs_backend(self) -> bool:
        return any(op in CONTEXTUAL_OPS for op in self.ops)


@dataclass(frozen=True)
class SynonymLexicon:
    entries: dict[str, tuple[str, ...]]

    def __post_init__(self):
        for token, synonyms in self.entries.items():
            if token != token.lower():
                raise ValidationError(f"lexicon token {token!r} is not lowercase")
            if not synonyms:
                raise ValidationError(f"lexicon token {token!r} has no synonyms")
            if tuple(synonyms) == (token,):
                raise ValidationError(
                    f"lexicon token {token!r} lists only itself as a synonym"
                )

    def get(self, token: str) -> tuple[str, ...] | None:
        return self.entries.get(token.lower())


def load_lexicon(path: Path | str) -> SynonymLexicon:
    """TSV rows `token<TAB>synonym1,synonym2,...`."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError(f"cannot read lexicon {path}: {e}") from e
    entries: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(
                f"{path}:{lineno}: expected 'token<TAB>synonyms', got {line!r}"
            )
        token, synonyms = fields[0], tuple(s for s in fields[1].split(",") if s)
        if token in entries:
            raise ValidationError(f"{path}:{lineno}: duplicate token {token!r}")
        entries[token] = synonyms
    return SynonymLexicon(entries)


def _count(rate: float, n: int) -> int:
    return floor(rate * n + 0.5)


def synonym_replace(
    tokens: list[str], lexicon: SynonymLexicon, rate: float, rng: np.random.Generator
) -> list[str]:
    """Each in-lexicon token is replaced with probability `rate` by a synonym
    drawn uniformly; lookup is case-insensitive, replacements are verbatim."""
    if rate == 0.0:
        return list(tokens)
    out = []
    for token in tokens:
        synonyms = lexicon.get(token)
        if synonyms is not None and rng.random() < rate:
            out.append(synonyms[int(rng.integers(len(synonyms)))])
        else:
            out.append(token)
    return out


def random_insert(tokens: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    """floor(rate·n + 0.5) insertions, each copying a token already in the
    (growing) list to a uniformly chosen position."""
    out = list(tokens)
    if rate == 0.0 or not tokens:
        return out
    for _ in range(_count(rate, len(tokens))):
        token = out[int(rng.integers(len(out)))]
        out.insert(int(rng.integers(len(out) + 1)), token)
    return out


def random_delete(tokens: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    """Independent per-token deletion; if everything is deleted, one uniformly
    chosen original token survives."""
    if rate == 0.0:
        return list(tokens)
    keep = rng.random(len(tokens)) >= rate
    out = [t for t, k in zip(tokens, keep) if k]
    if not out and tokens:
        out = [tokens[int(rng.integers(len(tokens)))]]
    return out


def random_swap(tokens: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    """floor(rate·n + 0.5) swaps of uniformly chosen distinct positions."""
    out = list(tokens)
    n = len(out)
    if rate == 0.0 or n < 2:
        return out
    for _ in range(_count(rate, n)):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        out[i], out[j] = out[j], out[i]
    return out


def _contextual_tokens(
    tokens: list[str],
    backend: BackendHandle,
    mode: str,
    rate: float,
    rng: np.random.Generator,
) -> list[str]:
    if mode not in ("insert", "substitute"):
        raise ValidationError(f"mode must be insert or substitute, got {mode!r}")
    if rate == 0.0:
        return list(tokens)
    if any(MASK_SENTINEL in token for token in tokens):
        raise AugmentError("text already contains the mask sentinel")
    selected = [i for i in range(len(tokens)) if rng.random() < rate]
    if not selected:
        return list(tokens)
    masked = list(tokens)
    if mode == "substitute":
        for i in selected:
            masked[i] = MASK_SENTINEL
    else:
        # walk right-to-left so earlier indices stay valid
        for i in reversed(selected):
            masked.insert(i + 1, MASK_SENTINEL)
    fills = request_fill(backend, " ".join(masked))
    out = []
    fill_iter = iter(fills)
    for token in masked:
        out.append(next(fill_iter) if token == MASK_SENTINEL else token)
    return out


def contextual_edit(
    instance: LabeledInstance,
    backend: BackendHandle,
    mode: str,
    rate: float,
    rng: np.random.Generator,
) -> LabeledInstance:
    """Mask-and-fill edit of one instance; labels and id are untouched.

    Backend failures surface as AugmentError naming the instance; the input
    instance itself is never modified.
    """
    try:
        tokens = _contextual_tokens(instance.text.split(), backend, mode, rate, rng)
    except BackendError as e:
        raise AugmentError(f"instance {instance.unit_id!r}: {e}") from e
    return replace(instance, text=" ".join(tokens))


def _variant_rng(seed: int, instance_index: int, copy_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, instance_index, copy_index]))


def _make_variant(
    instance: LabeledInstance,
    instance_index: int,
    copy_index: int,
    plan: AugmentPlan,
    lexicon: SynonymLexicon | None,
    backend: BackendHandle | None,
) -> LabeledInstance:
    rng = _variant_rng(plan.seed, instance_index, copy_index)
    tokens = instance.text.split()
    try:
        for op in plan.ops:
            if op == "synonym_replace":
                tokens = synonym_replace(tokens, lexicon, plan.rate, rng)
            elif op == "random_insert":
                tokens = random_insert(tokens, plan.rate, rng)
            elif op == "random_delete":
                tokens = random_delete(tokens, plan.rate, rng)
            elif op == "random_swap":
                tokens = random_swap(tokens, plan.rate, rng)
            else:
                mode = "insert" if op == "contextual_insert" else "substitute"
                tokens = _contextual_tokens(tokens, backend, mode, plan.rate, rng)
    except BackendError as e:
        raise AugmentError(f"instance {instance.unit_id!r}: {e}") from e
    return LabeledInstance(
        unit_id=f"{instance.unit_id}~aug{copy_index}",
        text=" ".join(tokens),
        labels=instance.labels,
    )


def augment_dataset(
    dataset: Dataset,
    plan: AugmentPlan,
    lexicon: SynonymLexicon | None = None,
    backend: BackendHandle | None = None,
    jobs: int = 1,
) -> Dataset:
    """Originals first, then `plan.copies` variants per original in source
    order. Output is identical for any `jobs` value."""
    if plan.needs_lexicon and lexicon is None:
        raise ValidationError("plan includes synonym_replace but no lexicon given")
    if plan.needs_backend and backend is None:
        raise ValidationError("plan includes contextual ops but no backend given")
    if jobs < 1:
        raise ValidationError(f"jobs must be >= 1, got {jobs}")

    tasks = [
        (i, j, instance)
        for i, instance in enumerate(dataset.instances)
        for j in range(1, plan.copies + 1)
    ]
    if jobs == 1 or len(tasks) < 2:
        variants = [
            _make_variant(inst, i, j, plan, lexicon, backend) for i, j, inst in tasks
        ]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            variants = list(
                pool.map(
                    lambda task: _make_variant(
                        task[2], task[0], task[1], plan, lexicon, backend
                    ),
                    tasks,
                )
            )
    return Dataset(
        subtask=dataset.subtask,
        languages=dataset.languages,
        instances=dataset.instances + tuple(variants),
        label_space=dataset.label_space,
    )
