"""Experiment orchestration: setups x subtasks x languages.

The flow per (subtask, language): split train data 80-20, train k seeds per
setup, pick the best seed on validation, pick the best setup on dev, then
produce test predictions with the winner. Languages without training data are
served by the multilingual model chosen on the merged validation split.

Every trained run leaves a manifest under
``runs/<subtask>/<language>/<setup>/seed<k>/`` (the merged-data runs use the
pseudo-language ``multilingual``), and every (subtask, language) cell leaves a
selection record naming the winning setup.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import yaml

from .augment import AugmentPlan, SynonymLexicon, augment_dataset, load_lexicon
from .backend import BackendHandle, request_classify
from .classifier import (
    FeaturizerConfig,
    LinearModel,
    TrainConfig,
    load_model,
    predict_labels,
    save_model,
    train,
)
from .corpus import (
    Dataset,
    Document,
    LabelKind,
    LabelSpace,
    SplitConfig,
    Subtask,
    bind,
    dataset_fingerprint,
    format_label_row,
    load_label_space,
    merge_multilingual,
    parse_documents,
    parse_labels,
    s3_unit_id,
    split,
)
from .errors import (
    FormatError,
    ManifestVersionError,
    NewsclfError,
    PipelineError,
    ValidationError,
)
from .metrics import EvalReport, official_measure, score_multiclass, score_multilabel

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_ROOT_SEED = 20230301
MULTILINGUAL = "multilingual"  # pseudo-language for merged-data runs


class Setup(str, Enum):
    MONO = "mono"
    MULTI = "multi"
    AUG = "aug"


# ties on the dev set go to the earliest entry here
SETUP_TIE_ORDER = (Setup.MULTI, Setup.MONO, Setup.AUG)


@dataclass(frozen=True)
class HyperProfile:
    table: dict[tuple[Subtask, Setup], TrainConfig]

    def get(self, subtask: Subtask, setup: Setup) -> TrainConfig:
        try:
            return self.table[(subtask, setup)]
        except KeyError:
            raise PipelineError(f"no profile for ({subtask.value}, {setup.value})")


def default_profiles() -> HyperProfile:
    """Shipped defaults: the lighter recipe for S3 merged/augmented runs, the
    heavier one everywhere else."""
    light = TrainConfig(epochs=5, k_seeds=5, max_seq_len=256, batch_size=8)
    heavy = TrainConfig(epochs=10, k_seeds=10, max_seq_len=512, batch_size=4)
    table = {}
    for subtask in Subtask:
        for setup in Setup:
            is_light = subtask is Subtask.S3 and setup in (Setup.MULTI, Setup.AUG)
            table[(subtask, setup)] = light if is_light else heavy
    return HyperProfile(table)


def apply_profile_overrides(profile: HyperProfile, overrides: dict) -> HyperProfile:
    """Overrides shaped {subtask: {setup: {field: value}}}."""
    table = dict(profile.table)
    for subtask_name, setups in (overrides or {}).items():
        subtask = Subtask(subtask_name)
        for setup_name, fields in setups.items():
            setup = Setup(setup_name)
            table[(subtask, setup)] = replace(table[(subtask, setup)], **fields)
    return HyperProfile(table)


def derive_seed(
    root_seed: int, subtask: Subtask, language: str, setup: str, index: int
) -> int:
    """Mixing function for per-run seeds: the first 8 bytes (big-endian) of
    sha256 over "root:subtask:language:setup:index". Any run is therefore
    reconstructible from its manifest coordinates alone."""
    text = f"{root_seed}:{subtask.value}:{language}:{setup}:{index}"
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    validation: Dataset


@dataclass(frozen=True)
class RunManifest:
    subtask: str
    language: str
    setup: str
    seed_index: int
    seed: int
    train_cfg: dict
    featurizer: dict
    train_fingerprint: str
    validation_fingerprint: str
    model_path: str | None
    validation_score: float | None
    epoch_losses: tuple[float, ...]
    error: str | None
    created_at: str
    content_hash: str
    dev_score: float | None = None
    best: bool = False

    def __post_init__(self):
        for name in ("validation_score", "dev_score"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0,1], got {value}")


def compute_content_hash(
    subtask: str,
    language: str,
    setup: str,
    seed: int,
    train_cfg: dict,
    featurizer: dict,
    train_fingerprint: str,
    validation_fingerprint: str,
) -> str:
    """Hash of a run's inputs only; timestamps and scores never affect it."""
    payload = json.dumps(
        {
            "subtask": subtask,
            "language": language,
            "setup": setup,
            "seed": seed,
            "train_cfg": train_cfg,
            "featurizer": featurizer,
            "train_fingerprint": train_fingerprint,
            "validation_fingerprint": validation_fingerprint,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def persist_manifest(manifest: RunManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"manifest_version": MANIFEST_VERSION, **asdict(manifest)}
    payload["epoch_losses"] = list(manifest.epoch_losses)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Path | str) -> RunManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(
            f"corrupt manifest {path}: {e.msg} at byte offset {e.pos}"
        ) from e
    version = raw.pop("manifest_version", None)
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"{path}: manifest version {version!r}, this build reads "
            f"{MANIFEST_VERSION}; regenerate or migrate the run"
        )
    raw["epoch_losses"] = tuple(raw.get("epoch_losses", ()))
    try:
        return RunManifest(**raw)
    except TypeError as e:
        raise FormatError(f"manifest {path} has unexpected fields: {e}") from e


def _score_model(model: LinearModel, dataset: Dataset) -> EvalReport:
    predictions = predict_labels(model, [inst.text for inst in dataset.instances])
    if dataset.label_space.kind is LabelKind.MULTICLASS:
        gold = {inst.unit_id: next(iter(inst.labels)) for inst in dataset.instances}
        pred = {
            inst.unit_id: p for inst, p in zip(dataset.instances, predictions)
        }
        return score_multiclass(gold, pred, dataset.label_space)
    gold = {inst.unit_id: set(inst.labels) for inst in dataset.instances}
    pred = {
        inst.unit_id: set(p) for inst, p in zip(dataset.instances, predictions)
    }
    return score_multilabel(gold, pred, dataset.label_space)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_seed_sweep(
    subtask: Subtask,
    language: str,
    setup: Setup,
    data: SplitPair,
    profile: HyperProfile,
    root_seed: int = DEFAULT_ROOT_SEED,
    store_dir: Path | str | None = None,
    featurizer: FeaturizerConfig | None = None,
) -> tuple[RunManifest, list[RunManifest]]:
    """Train k seeds, score each on validation, return (best, all).

    The best run is the max validation score; equal scores go to the lowest
    seed index. A failed seed becomes an error manifest; the sweep itself
    fails only when every seed fails.
    """
    train_cfg = profile.get(subtask, setup)
    fcfg = featurizer or FeaturizerConfig()
    fcfg = replace(fcfg, max_tokens=train_cfg.max_seq_len)
    train_fp = dataset_fingerprint(data.train)
    validation_fp = dataset_fingerprint(data.validation)
    store = Path(store_dir) if store_dir is not None else None
    measure = official_measure(subtask)

    manifests: list[RunManifest] = []
    models: list[LinearModel | None] = []
    for index in range(train_cfg.k_seeds):
        seed = derive_seed(root_seed, subtask, language, setup.value, index)
        seed_dir = store / f"seed{index}" if store else None
        common = dict(
            subtask=subtask.value,
            language=language,
            setup=setup.value,
            seed_index=index,
            seed=seed,
            train_cfg=asdict(train_cfg),
            featurizer=asdict(fcfg),
            train_fingerprint=train_fp,
            validation_fingerprint=validation_fp,
            content_hash=compute_content_hash(
                subtask.value,
                language,
                setup.value,
                seed,
                asdict(train_cfg),
                asdict(fcfg),
                train_fp,
                validation_fp,
            ),
        )
        epoch_losses: list[float] = []
        try:
            model = train(data.train, train_cfg, fcfg, seed, epoch_losses=epoch_losses)
            score = getattr(_score_model(model, data.validation), measure)
            model_path = None
            if seed_dir is not None:
                seed_dir.mkdir(parents=True, exist_ok=True)
                model_path = str(seed_dir / "model.npz")
                save_model(model, model_path)
            manifest = RunManifest(
                **common,
                model_path=model_path,
                validation_score=score,
                epoch_losses=tuple(epoch_losses),
                error=None,
                created_at=_now(),
            )
            models.append(model)
        except NewsclfError as e:
            logger.warning("seed %d of %s/%s/%s failed: %s", index, subtask.value, language, setup.value, e)
            manifest = RunManifest(
                **common,
                model_path=None,
                validation_score=None,
                epoch_losses=tuple(epoch_losses),
                error=str(e),
                created_at=_now(),
            )
            models.append(None)
        manifests.append(manifest)

    best_index = None
    for index, manifest in enumerate(manifests):
        if manifest.validation_score is None:
            continue
        if best_index is None or manifest.validation_score > manifests[best_index].validation_score:
            best_index = index
    if best_index is None:
        raise PipelineError(
            f"all {train_cfg.k_seeds} seeds failed for "
            f"{subtask.value}/{language}/{setup.value}"
        )
    manifests[best_index] = replace(manifests[best_index], best=True)

    if store is not None:
        for index, manifest in enumerate(manifests):
            persist_manifest(manifest, store / f"seed{index}" / "manifest.json")

    return manifests[best_index], manifests


def select_setup(subtask: Subtask, language: str, dev_scores: dict) -> Setup:
    """Argmax over per-setup dev scores; ties resolve multi > mono > aug."""
    if not dev_scores:
        raise PipelineError(f"no dev scores to select from for {subtask.value}/{language}")
    scores = {Setup(k): v for k, v in dev_scores.items()}
    best = None
    for setup in SETUP_TIE_ORDER:
        if setup in scores and (best is None or scores[setup] > scores[best]):
            best = setup
    return best


def route_language(language: str, known_languages) -> Setup | None:
    """Languages with no training data are forced onto the multilingual
    model; everything else is unconstrained (None)."""
    return None if language in set(known_languages) else Setup.MULTI


def units_from_documents(documents: list[Document], subtask: Subtask) -> list[tuple[str, str]]:
    """(unit_id, text) pairs in document order: articles for the article-level
    subtasks, individual paragraphs for S3."""
    units = []
    for doc in documents:
        if subtask is Subtask.S3:
            for i, paragraph in enumerate(doc.paragraphs, start=1):
                units.append((s3_unit_id(doc.id, i), paragraph))
        else:
            units.append((doc.id, doc.text))
    return units


def _predict_units(predictor, texts: list[str], label_space: LabelSpace) -> list:
    """LinearModel or classify-capable BackendHandle → one decision per text."""
    if isinstance(predictor, LinearModel):
        return predict_labels(predictor, texts)
    if isinstance(predictor, BackendHandle):
        vectors = request_classify(predictor, texts, label_space)
        labels = label_space.labels
        if label_space.kind is LabelKind.MULTICLASS:
            return [labels[max(range(len(v)), key=lambda i: (v[i], -i))] for v in vectors]
        return [
            frozenset(l for l, s in zip(labels, v) if s >= 0.5) for v in vectors
        ]
    raise ValidationError(f"cannot predict with {type(predictor).__name__}")


def produce_predictions(
    predictor,
    units,
    label_space: LabelSpace,
    path: Path | str,
) -> int:
    """Write one prediction row per unit, in input order; the file appears
    only after every prediction succeeded. Returns the row count.

    `units` may be a Dataset or a list of (unit_id, text) pairs.
    """
    if isinstance(units, Dataset):
        pairs = [(inst.unit_id, inst.text) for inst in units.instances]
    else:
        pairs = list(units)
    seen = set()
    for unit_id, _ in pairs:
        if unit_id in seen:
            raise ValidationError(f"duplicate test unit id {unit_id!r}")
        seen.add(unit_id)

    decisions = _predict_units(predictor, [text for _, text in pairs], label_space)
    rows = []
    for (unit_id, _), decision in zip(pairs, decisions):
        labels = {decision} if isinstance(decision, str) else decision
        rows.append(format_label_row(label_space.subtask, unit_id, labels, label_space))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return len(rows)


@dataclass(frozen=True)
class ReportRow:
    language: str
    rank: int
    run_name: str
    f1_macro: float
    f1_micro: float


def _report_columns(subtask: Subtask) -> list[tuple[str, str]]:
    macro = ("F1_macro", "f1_macro")
    micro = ("F1_micro", "f1_micro")
    return [macro, micro] if official_measure(subtask) == "f1_macro" else [micro, macro]


def report_rows_from_selection(record: "SelectionRecord", subtask: Subtask) -> list[ReportRow]:
    """Rank one language's dev scores; ties follow the setup preference order
    so the leaderboard agrees with what selection actually chose."""
    measure = official_measure(subtask)
    tie = {s.value: i for i, s in enumerate(SETUP_TIE_ORDER)}
    ranked = sorted(
        record.dev_scores.items(),
        key=lambda kv: (-kv[1][measure], tie.get(kv[0], len(tie))),
    )
    return [
        ReportRow(record.language, rank, name, scores["f1_macro"], scores["f1_micro"])
        for rank, (name, scores) in enumerate(ranked, start=1)
    ]


def render_report(subtask: Subtask, rows: list[ReportRow]) -> str:
    """Per-language blocks, ranked, official measure column first, 3 decimals."""
    columns = _report_columns(subtask)
    header = ["lang", "rank", "run"] + [name for name, _ in columns]
    table = [header]
    languages = []
    for row in rows:
        if row.language not in languages:
            languages.append(row.language)
    for language in languages:
        block = sorted((r for r in rows if r.language == language), key=lambda r: r.rank)
        for row in block:
            table.append(
                [row.language, str(row.rank), row.run_name]
                + [f"{getattr(row, attr):.3f}" for _, attr in columns]
            )
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    rendered = []
    for line_no, line in enumerate(table):
        rendered.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
        if line_no == 0:
            rendered.append("  ".join("-" * w for w in widths))
    return "\n".join(rendered) + "\n"


def render_report_tsv(subtask: Subtask, rows: list[ReportRow]) -> str:
    columns = _report_columns(subtask)
    lines = ["\t".join(["lang", "rank", "run"] + [name for name, _ in columns])]
    for row in rows:
        lines.append(
            "\t".join(
                [row.language, str(row.rank), row.run_name]
                + [f"{getattr(row, attr):.3f}" for _, attr in columns]
            )
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SelectionRecord:
    subtask: str
    language: str
    setup: str
    forced: bool
    dev_scores: dict
    manifest_path: str

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "SelectionRecord":
        try:
            return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise FormatError(
                f"corrupt selection record {path}: {e.msg} at byte offset {e.pos}"
            ) from e


@dataclass(frozen=True)
class ExperimentConfig:
    data_root: Path
    work_root: Path
    languages: tuple[str, ...]
    subtasks: tuple[Subtask, ...]
    setups: tuple[Setup, ...]
    root_seed: int
    profile: HyperProfile
    featurizer: FeaturizerConfig
    augment_ops: tuple[str, ...]
    augment_rate: float
    augment_copies: int
    augment_seed: int | None
    lexicon_path: Path | None
    registry_path: Path | None
    label_space_dir: Path | None = None

    def label_space(self, subtask: Subtask) -> LabelSpace:
        root = self.label_space_dir or Path(__file__).parent / "data" / "labels"
        return load_label_space(Path(root) / f"{subtask.value}.tsv")


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """Parse the YAML experiment file; relative paths resolve against it."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise FormatError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError(f"config {path} must be a mapping")

    def require(key):
        if key not in raw:
            raise ValidationError(f"config {path} is missing required key {key!r}")
        return raw[key]

    base = path.parent

    def as_path(value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    paths = require("paths")
    if not isinstance(paths, dict) or "data_root" not in paths or "work_root" not in paths:
        raise ValidationError(f"config {path}: paths must define data_root and work_root")

    languages = tuple(require("languages"))
    if not languages:
        raise ValidationError(f"config {path}: languages must be non-empty")
    subtasks = tuple(Subtask(s) for s in require("subtasks"))
    setups = tuple(Setup(s) for s in raw.get("setups", [s.value for s in Setup]))

    profile = apply_profile_overrides(default_profiles(), raw.get("profile_overrides", {}))
    featurizer = FeaturizerConfig(**raw.get("featurizer", {}))

    augment = raw.get("augment", {})
    augment_ops = tuple(augment.get("ops", ("synonym_replace", "random_swap")))
    lexicon = augment.get("lexicon")
    registry = raw.get("registry_path")

    return ExperimentConfig(
        data_root=as_path(paths["data_root"]),
        work_root=as_path(paths["work_root"]),
        languages=languages,
        subtasks=subtasks,
        setups=setups,
        root_seed=int(raw.get("root_seed", DEFAULT_ROOT_SEED)),
        profile=profile,
        featurizer=featurizer,
        augment_ops=augment_ops,
        augment_rate=float(augment.get("rate", 0.1)),
        augment_copies=int(augment.get("copies", 1)),
        augment_seed=augment.get("seed"),
        lexicon_path=as_path(lexicon) if lexicon else None,
        registry_path=as_path(registry) if registry else None,
    )


def load_labeled_dataset(
    config: ExperimentConfig, subtask: Subtask, language: str, part: str
) -> Dataset:
    """Read <data_root>/<language>/<part> into a bound dataset."""
    space = config.label_space(subtask)
    root = config.data_root / language / part
    documents = parse_documents(root / "articles", language)
    label_map = parse_labels(root / "labels" / f"{subtask.value}.tsv", space)
    return bind(documents, label_map, subtask, space)


def test_languages(config: ExperimentConfig) -> list[str]:
    """Every language directory holding a test set, training or surprise."""
    found = []
    for child in sorted(config.data_root.iterdir()):
        if (child / "test" / "articles").is_dir():
            found.append(child.name)
    return found


def split_dir(config: ExperimentConfig, subtask: Subtask, language: str) -> Path:
    return config.work_root / "splits" / subtask.value / language


def augmented_dir(config: ExperimentConfig, subtask: Subtask, language: str) -> Path:
    return config.work_root / "augmented" / subtask.value / language


def sweep_dir(config: ExperimentConfig, subtask: Subtask, language: str, setup: Setup) -> Path:
    return config.work_root / "runs" / subtask.value / language / setup.value


def selection_path(config: ExperimentConfig, subtask: Subtask, language: str) -> Path:
    return config.work_root / "selections" / subtask.value / f"{language}.json"


def prediction_path(config: ExperimentConfig, subtask: Subtask, language: str) -> Path:
    return config.work_root / "predictions" / subtask.value / f"{language}.tsv"


def stage_split(config: ExperimentConfig, subtask: Subtask, language: str) -> SplitPair:
    """Disk variant of the 80-20 split: writes train/validation directories
    plus a split.json recording seed and fingerprints."""
    from .corpus import write_dataset

    dataset = load_labeled_dataset(config, subtask, language, "train")
    seed = derive_seed(config.root_seed, subtask, language, "split", 0)
    train_part, validation_part = split(dataset, SplitConfig(seed=seed))
    base = split_dir(config, subtask, language)
    write_dataset(train_part, base / "train")
    write_dataset(validation_part, base / "validation")
    (base / "split.json").write_text(
        json.dumps(
            {
                "seed": seed,
                "train_size": len(train_part),
                "validation_size": len(validation_part),
                "train_fingerprint": dataset_fingerprint(train_part),
                "validation_fingerprint": dataset_fingerprint(validation_part),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return SplitPair(train_part, validation_part)


def read_split_pair(
    config: ExperimentConfig, subtask: Subtask, language: str, augmented: bool = False
) -> SplitPair:
    """Load a staged split back from disk; `augmented` swaps in the augmented
    train set (validation always stays unaugmented)."""
    from .corpus import read_dataset

    space = config.label_space(subtask)
    base = split_dir(config, subtask, language)
    if not base.is_dir():
        raise PipelineError(
            f"no split for {subtask.value}/{language} under {base}; run the split stage first"
        )
    validation = read_dataset(base / "validation", subtask, space, language)
    if augmented:
        aug_base = augmented_dir(config, subtask, language) / "train"
        if not aug_base.is_dir():
            raise PipelineError(
                f"no augmented train set under {aug_base}; run the augment stage first"
            )
        return SplitPair(read_dataset(aug_base, subtask, space, language), validation)
    return SplitPair(read_dataset(base / "train", subtask, space, language), validation)


def read_merged_pair(config: ExperimentConfig, subtask: Subtask) -> SplitPair:
    pairs = [read_split_pair(config, subtask, l) for l in config.languages]
    return SplitPair(
        merge_multilingual([p.train for p in pairs]),
        merge_multilingual([p.validation for p in pairs]),
    )


def stage_augment(
    config: ExperimentConfig, subtask: Subtask, language: str, jobs: int = 1,
    backend: BackendHandle | None = None,
) -> Dataset:
    """Augment the staged train split and write it next to the splits."""
    from .corpus import write_dataset

    pair = read_split_pair(config, subtask, language)
    plan = _augment_plan(config, subtask, language)
    lexicon = None
    if plan.needs_lexicon and config.lexicon_path is not None:
        lexicon = load_lexicon(config.lexicon_path)
    augmented = augment_dataset(pair.train, plan, lexicon=lexicon, backend=backend, jobs=jobs)
    write_dataset(augmented, augmented_dir(config, subtask, language) / "train")
    return augmented


def stage_sweep(
    config: ExperimentConfig, subtask: Subtask, language: str, setup: Setup
) -> tuple[Path, RunManifest]:
    """Run one sweep cell from staged data; returns the best manifest path."""
    if setup is Setup.MULTI:
        language = MULTILINGUAL
        data = read_merged_pair(config, subtask)
    elif setup is Setup.AUG:
        data = read_split_pair(config, subtask, language, augmented=True)
    else:
        data = read_split_pair(config, subtask, language)
    store = sweep_dir(config, subtask, language, setup)
    best, _ = run_seed_sweep(
        subtask,
        language,
        setup,
        data,
        config.profile,
        root_seed=config.root_seed,
        store_dir=store,
        featurizer=config.featurizer,
    )
    return store / f"seed{best.seed_index}" / "manifest.json", best


def find_best_manifest(store_dir: Path | str) -> tuple[Path, RunManifest] | None:
    """Locate the best=true manifest of a completed sweep directory."""
    store_dir = Path(store_dir)
    if not store_dir.is_dir():
        return None
    for path in sorted(store_dir.glob("seed*/manifest.json")):
        manifest = load_manifest(path)
        if manifest.best:
            return path, manifest
    return None


def stage_select(config: ExperimentConfig, subtask: Subtask, language: str) -> SelectionRecord:
    """Pick the setup for one language from completed sweeps on disk."""
    forced = route_language(language, config.languages)
    if forced is Setup.MULTI:
        found = find_best_manifest(sweep_dir(config, subtask, MULTILINGUAL, Setup.MULTI))
        if found is None:
            raise PipelineError(
                f"surprise language {language!r} needs a completed multi sweep"
            )
        path, _ = found
        record = SelectionRecord(
            subtask=subtask.value,
            language=language,
            setup=Setup.MULTI.value,
            forced=True,
            dev_scores={},
            manifest_path=str(path),
        )
    else:
        dev_set = load_labeled_dataset(config, subtask, language, "dev")
        dev_scores: dict[Setup, float] = {}
        dev_reports: dict[str, dict] = {}
        paths: dict[Setup, Path] = {}
        for setup in config.setups:
            cell_language = MULTILINGUAL if setup is Setup.MULTI else language
            found = find_best_manifest(sweep_dir(config, subtask, cell_language, setup))
            if found is None:
                continue
            path, manifest = found
            model = load_model(manifest.model_path)
            report = _score_model(model, dev_set)
            dev_scores[setup] = report.official()
            dev_reports[setup.value] = {
                "f1_macro": report.f1_macro,
                "f1_micro": report.f1_micro,
            }
            paths[setup] = path
        chosen = select_setup(subtask, language, dev_scores)
        record = SelectionRecord(
            subtask=subtask.value,
            language=language,
            setup=chosen.value,
            forced=False,
            dev_scores=dev_reports,
            manifest_path=str(paths[chosen]),
        )
    record.save(selection_path(config, subtask, language))
    return record


def stage_predict(config: ExperimentConfig, subtask: Subtask, language: str) -> Path:
    """Produce the official predictions for one language from its selection."""
    record_path = selection_path(config, subtask, language)
    if not record_path.is_file():
        raise PipelineError(
            f"no selection for {subtask.value}/{language}; run the select stage first"
        )
    record = SelectionRecord.load(record_path)
    manifest = load_manifest(record.manifest_path)
    model = load_model(manifest.model_path)
    documents = parse_documents(config.data_root / language / "test" / "articles", language)
    units = units_from_documents(documents, subtask)
    out = prediction_path(config, subtask, language)
    produce_predictions(model, units, config.label_space(subtask), out)
    return out


def _augment_plan(config: ExperimentConfig, subtask: Subtask, language: str) -> AugmentPlan:
    seed = config.augment_seed
    if seed is None:
        seed = derive_seed(config.root_seed, subtask, language, "augplan", 0)
    return AugmentPlan(
        ops=config.augment_ops,
        rate=config.augment_rate,
        copies=config.augment_copies,
        seed=seed,
    )


@dataclass
class MatrixResult:
    prediction_files: list[Path] = field(default_factory=list)
    selections: list[SelectionRecord] = field(default_factory=list)
    sweeps: int = 0

    def summary(self) -> str:
        forced = sum(1 for s in self.selections if s.forced)
        return (
            f"{self.sweeps} sweeps, {len(self.selections)} selections "
            f"({forced} forced multi), {len(self.prediction_files)} prediction files"
        )


def run_matrix(config: ExperimentConfig, jobs: int = 1) -> MatrixResult:
    """Drive the full experiment grid and leave all artifacts under work_root."""
    if jobs < 1:
        raise ValidationError(f"jobs must be >= 1, got {jobs}")
    lexicon: SynonymLexicon | None = None
    if "synonym_replace" in config.augment_ops and Setup.AUG in config.setups:
        if config.lexicon_path is None:
            raise ValidationError("augment plan needs a lexicon but none is configured")
        lexicon = load_lexicon(config.lexicon_path)
    if any(op.startswith("contextual_") for op in config.augment_ops) and Setup.AUG in config.setups:
        raise PipelineError(
            "contextual augmentation inside the matrix is not wired to a backend; "
            "run the augment stage separately against a live backend"
        )

    result = MatrixResult()
    runs_root = config.work_root / "runs"
    all_test_languages = test_languages(config)

    for subtask in config.subtasks:
        splits: dict[str, SplitPair] = {}
        for language in config.languages:
            dataset = load_labeled_dataset(config, subtask, language, "train")
            seed = derive_seed(config.root_seed, subtask, language, "split", 0)
            train_part, validation_part = split(dataset, SplitConfig(seed=seed))
            splits[language] = SplitPair(train_part, validation_part)

        sweep_tasks: list[tuple[str, Setup, SplitPair]] = []
        if Setup.MONO in config.setups:
            for language in config.languages:
                sweep_tasks.append((language, Setup.MONO, splits[language]))
        if Setup.MULTI in config.setups:
            merged = SplitPair(
                merge_multilingual([splits[l].train for l in config.languages]),
                merge_multilingual([splits[l].validation for l in config.languages]),
            )
            sweep_tasks.append((MULTILINGUAL, Setup.MULTI, merged))
        if Setup.AUG in config.setups:
            for language in config.languages:
                plan = _augment_plan(config, subtask, language)
                augmented = augment_dataset(splits[language].train, plan, lexicon=lexicon)
                sweep_tasks.append((language, Setup.AUG, SplitPair(augmented, splits[language].validation)))

        def run_cell(task):
            language, setup, data = task
            store = runs_root / subtask.value / language / setup.value
            best, _ = run_seed_sweep(
                subtask,
                language,
                setup,
                data,
                config.profile,
                root_seed=config.root_seed,
                store_dir=store,
                featurizer=config.featurizer,
            )
            return (language, setup), best

        if jobs == 1 or len(sweep_tasks) < 2:
            cell_results = [run_cell(t) for t in sweep_tasks]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                cell_results = list(pool.map(run_cell, sweep_tasks))
        result.sweeps += len(cell_results)
        best_by_cell = dict(cell_results)

        multi_model = None
        multi_manifest = best_by_cell.get((MULTILINGUAL, Setup.MULTI))
        if multi_manifest is not None:
            multi_model = load_model(multi_manifest.model_path)

        for language in all_test_languages:
            forced = route_language(language, config.languages)
            if forced is Setup.MULTI:
                if multi_manifest is None:
                    raise PipelineError(
                        f"surprise language {language!r} needs the multi setup, "
                        "which is not enabled"
                    )
                chosen_setup = Setup.MULTI
                chosen_manifest = multi_manifest
                chosen_model = multi_model
                dev_reports: dict[str, dict] = {}
            else:
                dev_set = load_labeled_dataset(config, subtask, language, "dev")
                dev_scores: dict[Setup, float] = {}
                dev_reports = {}
                candidates: dict[Setup, tuple[RunManifest, LinearModel]] = {}
                for setup in config.setups:
                    key = (MULTILINGUAL, Setup.MULTI) if setup is Setup.MULTI else (language, setup)
                    manifest = best_by_cell.get(key)
                    if manifest is None:
                        continue
                    model = multi_model if setup is Setup.MULTI else load_model(manifest.model_path)
                    report = _score_model(model, dev_set)
                    dev_scores[setup] = report.official()
                    dev_reports[setup.value] = {
                        "f1_macro": report.f1_macro,
                        "f1_micro": report.f1_micro,
                    }
                    candidates[setup] = (manifest, model)
                chosen_setup = select_setup(subtask, language, dev_scores)
                chosen_manifest, chosen_model = candidates[chosen_setup]

            test_docs = parse_documents(
                config.data_root / language / "test" / "articles", language
            )
            units = units_from_documents(test_docs, subtask)
            prediction_path = config.work_root / "predictions" / subtask.value / f"{language}.tsv"
            produce_predictions(chosen_model, units, config.label_space(subtask), prediction_path)
            result.prediction_files.append(prediction_path)

            record = SelectionRecord(
                subtask=subtask.value,
                language=language,
                setup=chosen_setup.value,
                forced=forced is Setup.MULTI,
                dev_scores=dev_reports,
                manifest_path=str(
                    runs_root
                    / subtask.value
                    / (MULTILINGUAL if chosen_setup is Setup.MULTI else language)
                    / chosen_setup.value
                    / f"seed{chosen_manifest.seed_index}"
                    / "manifest.json"
                ),
            )
            record.save(config.work_root / "selections" / subtask.value / f"{language}.json")
            result.selections.append(record)

        report_rows = []
        for language in all_test_languages:
            record = next(
                s for s in result.selections
                if s.subtask == subtask.value and s.language == language
            )
            report_rows.extend(report_rows_from_selection(record, subtask))
        reports_dir = config.work_root / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        (reports_dir / f"{subtask.value}.txt").write_text(
            render_report(subtask, report_rows), encoding="utf-8"
        )
        (reports_dir / f"{subtask.value}.tsv").write_text(
            render_report_tsv(subtask, report_rows), encoding="utf-8"
        )

    return result
