"""Patch-size sweeps: one fine-tuning run per (patch size, seed), prediction
fusion per seed, aggregation over seeds, and the result tables."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
import csv
from dataclasses import asdict, dataclass, field, fields, replace
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .adaptation import AdaptationPlan, adapt
from .checkpoint import load_checkpoint, save_checkpoint
from .common import ConfigError, PatchSizeError, PatchSpec, ReporterCallback, ViTConfig
from .cost import PAPER, MODES, ensemble_label, model_flops
from .data import AugmentationPolicy, DatasetBundle, load_dataset, to_three_channels
from .evaluation import (
    MetricsReport,
    PredictionSet,
    aggregate_runs,
    ensemble_average,
    predict,
)
from .model import VisionTransformer
from .training import TrainConfig, fit, write_training_log

logger = logging.getLogger(__name__)

SEED_ENV = "VITLAB_SEED"
DEFAULT_PATCH_SIZES = (1, 2, 4, 7, 14, 28)
DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_ENSEMBLE = (1, 2, 4)
MODEL_KEYS = ("L", "d", "h", "mlp_ratio", "drop_rate")
VOLUME_BATCH_SIZE = 32

CHECKPOINT_FILE = "checkpoint.bin"
LOG_FILE = "log.csv"
METRICS_FILE = "metrics.json"
PREDICTIONS_FILE = "predictions.npy"


def parse_seeds(value: str) -> List[int]:
    try:
        seeds = [int(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be comma-separated integers: {value!r}") from exc
    if not seeds:
        raise ConfigError(f"{SEED_ENV} is set but lists no seeds")
    return seeds


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    name: Optional[str] = None
    dims: int = 2
    edge: int = 28
    model: Union[str, Dict[str, float]] = "vit_small"
    patch_sizes: Tuple[int, ...] = DEFAULT_PATCH_SIZES
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    pretrained: Optional[str] = None
    patch_strategy: str = "resample"
    ensemble: Tuple[int, ...] = DEFAULT_ENSEMBLE
    out_dir: str = "results"
    flops_mode: str = PAPER
    auc_average: str = "macro"

    def __post_init__(self) -> None:
        for name in ("patch_sizes", "seeds", "ensemble"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if not self.patch_sizes:
            raise ConfigError("patch_sizes must not be empty")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        for p in self.patch_sizes:
            try:
                self.patch_spec(p)
            except PatchSizeError as exc:
                raise ConfigError(f"Invalid patch size: {exc}") from exc
        if self.flops_mode not in MODES:
            raise ConfigError(f"flops_mode must be one of {MODES}")
        if self.auc_average not in ("macro", "weighted"):
            raise ConfigError("auc_average must be 'macro' or 'weighted'")
        if isinstance(self.model, str):
            ViTConfig.preset(self.model, self.patch_spec(self.patch_sizes[0]), 2)
        else:
            unknown = sorted(set(self.model) - set(MODEL_KEYS))
            if unknown:
                raise ConfigError(f"Unknown model key(s): {', '.join(unknown)}")
            missing = [k for k in ("L", "d", "h") if k not in self.model]
            if missing:
                raise ConfigError(f"Custom model is missing {', '.join(missing)}")

    @property
    def dataset_name(self) -> str:
        return self.name or Path(self.dataset).stem

    def patch_spec(self, p: int) -> PatchSpec:
        depth = self.edge if self.dims == 3 else None
        return PatchSpec(p=p, H=self.edge, W=self.edge, D=depth, C=3)

    def vit_config(self, p: int, num_classes: int) -> ViTConfig:
        spec = self.patch_spec(p)
        if isinstance(self.model, str):
            return ViTConfig.preset(self.model, spec, num_classes)
        return ViTConfig(num_classes=num_classes, patch=spec, **self.model)

    @classmethod
    def from_dict(
        cls, data: Mapping, environ: Optional[Mapping[str, str]] = None
    ) -> "ExperimentConfig":
        """Build from a JSON-style mapping; unknown keys raise ``ConfigError``.
        ``VITLAB_SEED`` in ``environ`` replaces the configured seeds."""
        environ = os.environ if environ is None else environ
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
        if "dataset" not in data:
            raise ConfigError("Config is missing required key 'dataset'")
        values = dict(data)
        train = dict(data.get("train", {}))
        if data.get("dims") == 3:
            train.setdefault("batch_size", VOLUME_BATCH_SIZE)
        values["train"] = TrainConfig.from_dict(train)
        values["augmentation"] = AugmentationPolicy.from_dict(data.get("augmentation", {}))
        if environ.get(SEED_ENV):
            values["seeds"] = parse_seeds(environ[SEED_ENV])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"Invalid config: {exc}") from exc

    @classmethod
    def from_json(
        cls, path: str | Path, environ: Optional[Mapping[str, str]] = None
    ) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, environ=environ)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["train"] = self.train.to_dict()
        data["augmentation"] = self.augmentation.to_dict()
        for name in ("patch_sizes", "seeds", "ensemble"):
            data[name] = list(data[name])
        return data


@dataclass
class RunRecord:
    patch_size: int
    seed: int
    report: MetricsReport
    gflops: float
    predictions: PredictionSet


@dataclass
class ResultRow:
    dataset: str
    dims: int
    patch_size: str
    seed: int
    acc: float
    bal_acc: float
    auc: float
    gflops: float


@dataclass
class AggregateRow:
    dataset: str
    dims: int
    patch_size: str
    acc_mean: float
    acc_std: float
    bal_acc_mean: float
    bal_acc_std: float
    auc_mean: float
    auc_std: float
    gflops: float


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_results_csv(
    rows: Sequence[Union[ResultRow, AggregateRow, "MergedRow"]], path: str | Path
) -> Path:
    """Write per-run or aggregated rows; floats carry four decimals."""
    rows = list(rows)
    if not rows:
        raise ConfigError("No rows to write")
    kind = type(rows[0])
    if any(type(row) is not kind for row in rows):
        raise ConfigError("Rows do not share one schema")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([fld.name for fld in fields(kind)])
        for row in rows:
            writer.writerow([_format(getattr(row, fld.name)) for fld in fields(kind)])
    return path


def _table_label(patch_size: str) -> str:
    if "+" in patch_size:
        return "(" + ", ".join(patch_size.split("+")) + ")"
    return patch_size


def _percent(mean: float, std: float) -> str:
    return f"{mean * 100:.2f} ± {std * 100:.2f}"


def write_markdown_table(rows: Sequence[AggregateRow], path: str | Path) -> Path:
    """Patch sizes ascending, then the ensemble row, metrics in percent."""
    lines = [
        "| Patch size | Acc. | Bal. Acc. | AUC | GFLOPs |",
        "|---|---|---|---|---|",
    ]
    for row in rows:
        lines.append(
            f"| {_table_label(row.patch_size)} | {_percent(row.acc_mean, row.acc_std)} | "
            f"{_percent(row.bal_acc_mean, row.bal_acc_std)} | "
            f"{_percent(row.auc_mean, row.auc_std)} | {row.gflops:.2f} |"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def prepare_bundle(config: ExperimentConfig) -> DatasetBundle:
    bundle = load_dataset(config.dataset, config.dataset_name)
    if bundle.dims != config.dims:
        raise ConfigError(
            f"Dataset {config.dataset_name} is {bundle.dims}D but the config says "
            f"{config.dims}D"
        )
    expected = config.patch_spec(config.patch_sizes[0]).extents
    if bundle.image_shape[:-1] != expected:
        raise ConfigError(
            f"Dataset images {bundle.image_shape} do not match edge {config.edge}"
        )
    return bundle.map_images(to_three_channels)


def build_model(
    config: ExperimentConfig, p: int, seed: int, num_classes: int
) -> VisionTransformer:
    """Adapt the pretrained checkpoint when one is configured, otherwise
    initialise from scratch."""
    dtype = config.train.dtype
    if config.pretrained:
        plan = AdaptationPlan(
            target=config.patch_spec(p),
            num_classes=num_classes,
            patch_strategy=config.patch_strategy,
        )
        ckpt = adapt(load_checkpoint(config.pretrained), plan, seed=seed)
        return VisionTransformer.from_checkpoint(ckpt, dtype=dtype)
    return VisionTransformer(config.vit_config(p, num_classes), seed=seed, dtype=dtype)


def run_dir(root: Path, p: int, seed: int) -> Path:
    return root / str(p) / str(seed)


def _load_run(directory: Path, p: int, seed: int) -> RunRecord:
    data = json.loads((directory / METRICS_FILE).read_text(encoding="utf-8"))
    preds = np.load(directory / PREDICTIONS_FILE)
    return RunRecord(
        patch_size=p,
        seed=seed,
        report=MetricsReport.from_dict(data["metrics"]),
        gflops=float(data["gflops"]),
        predictions=PredictionSet(
            preds[:, :-2],
            preds[:, -1].astype(np.int64),
            {"patch_size": p, "seed": seed},
            indices=preds[:, -2].astype(np.int64),
        ),
    )


def run_single(
    config: ExperimentConfig,
    p: int,
    seed: int,
    root: Path,
    bundle: Optional[DatasetBundle] = None,
) -> RunRecord:
    """Train, select, evaluate and persist one (patch size, seed) run.

    ``metrics.json`` is written last and marks the run as complete.
    """
    bundle = bundle or prepare_bundle(config)
    directory = run_dir(root, p, seed)
    model = build_model(config, p, seed, bundle.num_classes)
    train_cfg = replace(config.train, seed=seed)

    logger.info("Training %s p=%d seed=%d", config.dataset_name, p, seed)
    result = fit(model, bundle, train_cfg, policy=config.augmentation)
    best = VisionTransformer.from_checkpoint(result.checkpoint, dtype=train_cfg.dtype)
    test = bundle["test"]
    preds = predict(
        best,
        test.images,
        test.labels,
        train_cfg.batch_size,
        indices=np.arange(len(test)),
        patch_size=p,
        seed=seed,
    )
    report = MetricsReport.from_predictions(preds, average=config.auc_average)
    gflops = model_flops(model.config, config.flops_mode).gflops

    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, directory / CHECKPOINT_FILE)
    write_training_log(result.log, directory / LOG_FILE)
    np.save(
        directory / PREDICTIONS_FILE,
        np.column_stack([preds.probabilities, preds.indices, preds.labels]).astype(np.float64),
    )
    payload = {
        "patch_size": p,
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "gflops": gflops,
        "metrics": report.to_dict(),
    }
    (directory / METRICS_FILE).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return RunRecord(p, seed, report, gflops, preds)


def _run_job(config_data: dict, p: int, seed: int, root: str) -> RunRecord:
    config = ExperimentConfig.from_dict(config_data, environ={})
    return run_single(config, p, seed, Path(root))


def _run_rows(config: ExperimentConfig, records: Iterable[RunRecord]) -> List[ResultRow]:
    return [
        ResultRow(
            config.dataset_name,
            config.dims,
            str(r.patch_size),
            r.seed,
            r.report.acc,
            r.report.bal_acc,
            r.report.auc,
            r.gflops,
        )
        for r in sorted(records, key=lambda r: (r.patch_size, r.seed))
    ]


def ensemble_records(
    config: ExperimentConfig, records: Mapping[Tuple[int, int], RunRecord]
) -> List[RunRecord]:
    """Fuse the configured members of each seed by probability averaging."""
    members = [p for p in sorted(config.ensemble) if p in config.patch_sizes]
    skipped = sorted(set(config.ensemble) - set(members))
    if skipped:
        logger.warning("Ensemble members %s are not in the sweep; skipping them", skipped)
    if len(members) < 2:
        return []
    fused = []
    for seed in config.seeds:
        runs = [records[(p, seed)] for p in members]
        preds = ensemble_average([r.predictions for r in runs], seed=seed)
        fused.append(
            RunRecord(
                patch_size=-1,
                seed=seed,
                report=MetricsReport.from_predictions(preds, average=config.auc_average),
                gflops=sum(r.gflops for r in runs),
                predictions=preds,
            )
        )
    return fused


def aggregate_rows(
    config: ExperimentConfig, groups: Sequence[Tuple[str, List[RunRecord]]]
) -> List[AggregateRow]:
    rows = []
    for label, runs in groups:
        summary = aggregate_runs([r.report for r in runs])
        rows.append(
            AggregateRow(
                config.dataset_name,
                config.dims,
                label,
                summary["acc"].mean,
                summary["acc"].std,
                summary["bal_acc"].mean,
                summary["bal_acc"].std,
                summary["auc"].mean,
                summary["auc"].std,
                runs[0].gflops,
            )
        )
    return rows


def run_sweep(
    config: ExperimentConfig,
    parallel: int = 1,
    resume: bool = False,
    out_dir: Optional[str | Path] = None,
    reporter: Optional[ReporterCallback] = None,
) -> Path:
    """Run every (patch size, seed) pair, then fuse, aggregate and write
    ``results.csv``, ``aggregated.csv`` and ``table.md``.

    If a run fails the completed rows are still written before the error
    propagates.
    """
    root = Path(out_dir or config.out_dir) / config.dataset_name
    root.mkdir(parents=True, exist_ok=True)
    pairs = [(p, seed) for p in sorted(config.patch_sizes) for seed in config.seeds]

    records: Dict[Tuple[int, int], RunRecord] = {}
    pending = []
    for p, seed in pairs:
        if resume and (run_dir(root, p, seed) / METRICS_FILE).exists():
            logger.info("Resuming: reusing completed run p=%d seed=%d", p, seed)
            records[(p, seed)] = _load_run(run_dir(root, p, seed), p, seed)
        else:
            pending.append((p, seed))

    def report_progress():
        if reporter:
            reporter(
                "progress", name="runs", current=len(records), total=len(pairs), unit="run"
            )

    report_progress()
    try:
        if parallel > 1 and len(pending) > 1:
            config_data = config.to_dict()
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [
                    pool.submit(_run_job, config_data, p, seed, str(root))
                    for p, seed in pending
                ]
                for future in as_completed(futures):
                    record = future.result()
                    records[(record.patch_size, record.seed)] = record
                    report_progress()
        elif pending:
            bundle = prepare_bundle(config)
            for p, seed in pending:
                if reporter:
                    reporter("status", message=f"Training p={p} seed={seed}")
                records[(p, seed)] = run_single(config, p, seed, root, bundle=bundle)
                report_progress()
    finally:
        if records:
            write_results_csv(_run_rows(config, records.values()), root / "results.csv")

    fused = ensemble_records(config, records)
    label = ensemble_label(p for p in config.ensemble if p in config.patch_sizes)
    write_results_csv(
        _run_rows(config, records.values())
        + [
            replace(row, patch_size=label)
            for row in _run_rows(config, fused)
        ],
        root / "results.csv",
    )

    groups = [
        (str(p), [records[(p, seed)] for seed in config.seeds])
        for p in sorted(config.patch_sizes)
    ]
    if fused:
        groups.append((label, fused))
    aggregated = aggregate_rows(config, groups)
    write_results_csv(aggregated, root / "aggregated.csv")
    write_markdown_table(aggregated, root / "table.md")
    if reporter:
        reporter("status", message=f"Results written to {root}")
    return root


@dataclass
class MergedRow:
    group: str
    patch_size: str
    datasets: int
    acc: float
    bal_acc: float
    auc: float
    gflops: float


MERGE_GROUPS = (("2D", (2,)), ("3D", (3,)), ("all", (2, 3)))


def _patch_order(label: str) -> Tuple[int, ...]:
    # single patch sizes ascending, ensembles after them
    members = tuple(int(p) for p in label.split("+"))
    return (len(members) > 1, *members)


def read_aggregated_csv(path: str | Path) -> List[AggregateRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Aggregated results not found: {path}")
    names = [fld.name for fld in fields(AggregateRow)]
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != names:
            raise ConfigError(f"{path}: expected columns {', '.join(names)}")
        rows = []
        for record in reader:
            values = {
                name: float(record[name]) for name in names if name.endswith(("_mean", "_std"))
            }
            rows.append(
                AggregateRow(
                    dataset=record["dataset"],
                    dims=int(record["dims"]),
                    patch_size=record["patch_size"],
                    gflops=float(record["gflops"]),
                    **values,
                )
            )
    return rows


def merge_results(rows: Iterable[AggregateRow]) -> List[MergedRow]:
    """Average the per-dataset means of each patch size over the 2D
    datasets, the 3D datasets and all datasets.

    Groups without datasets are left out. GFLOPs are averaged like the
    metrics, so the ``all`` group mixes 2D and 3D costs.
    """
    rows = list(rows)
    seen = set()
    for row in rows:
        key = (row.dataset, row.patch_size)
        if key in seen:
            raise ConfigError(f"Dataset {row.dataset} lists patch size {row.patch_size} twice")
        seen.add(key)

    merged = []
    for group, dims in MERGE_GROUPS:
        members = [row for row in rows if row.dims in dims]
        for label in sorted({row.patch_size for row in members}, key=_patch_order):
            same = [row for row in members if row.patch_size == label]
            merged.append(
                MergedRow(
                    group=group,
                    patch_size=label,
                    datasets=len(same),
                    acc=float(np.mean([row.acc_mean for row in same])),
                    bal_acc=float(np.mean([row.bal_acc_mean for row in same])),
                    auc=float(np.mean([row.auc_mean for row in same])),
                    gflops=float(np.mean([row.gflops for row in same])),
                )
            )
    return merged


def write_merged_markdown(rows: Sequence[MergedRow], path: str | Path) -> Path:
    """One table per dataset group, metrics in percent."""
    lines = []
    for group, _ in MERGE_GROUPS:
        section = [row for row in rows if row.group == group]
        if not section:
            continue
        if lines:
            lines.append("")
        lines += [
            f"### {group} datasets",
            "",
            "| Patch size | Datasets | Acc. | Bal. Acc. | AUC |",
            "|---|---|---|---|---|",
        ]
        for row in section:
            lines.append(
                f"| {_table_label(row.patch_size)} | {row.datasets} | {row.acc * 100:.2f} | "
                f"{row.bal_acc * 100:.2f} | {row.auc * 100:.2f} |"
            )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def merge_sweeps(results_root: str | Path, out_dir: Optional[str | Path] = None) -> Path:
    """Merge every ``<dataset>/aggregated.csv`` below ``results_root`` into
    ``merged.csv`` and ``merged.md``."""
    results_root = Path(results_root)
    sources = sorted(results_root.glob("*/aggregated.csv"))
    if not sources:
        raise ConfigError(f"No aggregated.csv found below {results_root}")
    rows = [row for source in sources for row in read_aggregated_csv(source)]
    logger.info("Merging %d datasets from %s", len(sources), results_root)
    merged = merge_results(rows)
    out = Path(out_dir) if out_dir else results_root
    write_results_csv(merged, out / "merged.csv")
    write_merged_markdown(merged, out / "merged.md")
    return out
