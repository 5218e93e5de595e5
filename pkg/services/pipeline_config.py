"""
Pipeline Config - Đọc file cấu hình JSON của CLI
Mỗi section được kiểm tra theo hợp đồng của module sở hữu trước khi chạy (fail-fast)
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

import config
from .data_pipeline import Dataset, load_csv, load_idx, subset
from .errors import ConfigurationError
from .eval_report import EvalConfig
from .haps_trainer import HapsConfig
from .seeding import config_hash

DATASET_FORMATS = ("idx", "csv")


def _check_keys(doc: Any, allowed, where: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return doc


def _field_names(cls) -> Tuple[str, ...]:
    return tuple(f.name for f in fields(cls))


def scaled_value(doc: Any, where: str) -> Tuple[float, float]:
    """{"value": 8, "scale": 255} -> (8.0, 255.0)"""
    if not isinstance(doc, dict) or set(doc) != {"value", "scale"}:
        raise ConfigurationError(f"{where} must be written as {{\"value\": ..., \"scale\": ...}}")
    value, scale = float(doc["value"]), float(doc["scale"])
    if scale <= 0:
        raise ConfigurationError(f"{where}.scale must be positive, got {scale}")
    return value, scale


def scaled_values(doc: Any, where: str) -> Tuple[Tuple[float, ...], float]:
    """{"values": [1, 2], "scale": 255} -> ((1.0, 2.0), 255.0)"""
    if not isinstance(doc, dict) or set(doc) != {"values", "scale"}:
        raise ConfigurationError(f"{where} must be written as {{\"values\": [...], \"scale\": ...}}")
    values, scale = tuple(float(v) for v in doc["values"]), float(doc["scale"])
    if scale <= 0:
        raise ConfigurationError(f"{where}.scale must be positive, got {scale}")
    return values, scale


# ============== SECTIONS ==============

@dataclass(frozen=True)
class DataFiles:
    """Either an IDX pair (images, labels) or a single CSV"""
    images: Optional[str] = None
    labels: Optional[str] = None
    csv: Optional[str] = None

    def paths(self):
        return [p for p in (self.images, self.labels, self.csv) if p]


@dataclass(frozen=True)
class DatasetSection:
    name: str = "dataset"
    format: str = "idx"
    train: DataFiles = field(default_factory=DataFiles)
    test: Optional[DataFiles] = None
    image_shape: Optional[Tuple[int, int, int]] = None
    num_classes: int = 10
    valid_fraction: float = config.VALID_FRACTION
    subset: Optional[int] = None
    test_subset: Optional[int] = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str) -> "DatasetSection":
        doc = _check_keys(doc, _field_names(cls), "dataset")
        values = dict(doc)
        for key in ("train", "test"):
            if values.get(key) is not None:
                files = _check_keys(values[key], _field_names(DataFiles), f"dataset.{key}")
                values[key] = DataFiles(**{k: _resolve(v, base_dir) for k, v in files.items()})
        if values.get("image_shape") is not None:
            values["image_shape"] = tuple(int(v) for v in values["image_shape"])
        section = cls(**values)
        section.validate()
        return section

    def validate(self):
        if self.format not in DATASET_FORMATS:
            raise ConfigurationError(f"dataset.format must be one of {DATASET_FORMATS}, got {self.format!r}")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigurationError(f"dataset.valid_fraction must be in (0, 1), got {self.valid_fraction}")
        if self.num_classes < 1:
            raise ConfigurationError(f"dataset.num_classes must be positive, got {self.num_classes}")
        if self.format == "csv" and self.image_shape is None:
            raise ConfigurationError("dataset.image_shape is required for csv datasets")
        for key, files in (("train", self.train), ("test", self.test)):
            if files is None:
                continue
            if self.format == "idx" and not (files.images and files.labels):
                raise ConfigurationError(f"dataset.{key} needs 'images' and 'labels' for idx")
            if self.format == "csv" and not files.csv:
                raise ConfigurationError(f"dataset.{key} needs 'csv' for csv datasets")
        if not self.train.paths():
            raise ConfigurationError("dataset.train is required")

    def check_paths(self, need_test: bool):
        """Fail before any work when an input file is missing"""
        groups = [("train", self.train)]
        if need_test:
            if self.test is None:
                raise ConfigurationError("dataset.test is required for this command")
            groups.append(("test", self.test))
        for key, files in groups:
            for path in files.paths():
                if not os.path.exists(path):
                    raise ConfigurationError(f"dataset.{key}: file not found: {path}")

    def _load(self, files: DataFiles) -> Dataset:
        if self.format == "idx":
            return load_idx(files.images, files.labels, self.num_classes)
        return load_csv(files.csv, self.image_shape, self.num_classes)

    def load_train(self, seed: int) -> Dataset:
        data = self._load(self.train)
        return subset(data, self.subset, seed) if self.subset else data

    def load_test(self, seed: int) -> Dataset:
        if self.test is None:
            raise ConfigurationError("dataset.test is required for this command")
        data = self._load(self.test)
        return subset(data, self.test_subset, seed) if self.test_subset else data


@dataclass(frozen=True)
class SearchSection:
    space: Dict[str, Any] = field(default_factory=lambda: {"grid": {"depth": [1, 2], "filters": [8],
                                                                   "dense_width": [64]}})
    budget: int = config.SEARCH_BUDGET
    proxy_epochs: int = config.SEARCH_PROXY_EPOCHS
    eta_init: float = config.SEARCH_ETA_INIT
    batch_size: int = config.BATCH_SIZE
    workers: int = config.THREADS

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str) -> "SearchSection":
        doc = dict(_check_keys(doc, _field_names(cls), "search"))
        space = doc.get("space")
        if isinstance(space, str):
            path = _resolve(space, base_dir)
            if not os.path.exists(path):
                raise ConfigurationError(f"search.space: file not found: {path}")
            with open(path, "r", encoding="utf-8") as handle:
                try:
                    doc["space"] = json.load(handle)
                except json.JSONDecodeError as exc:
                    raise ConfigurationError(f"{path}: search space is not valid JSON: {exc}") from exc
        section = cls(**doc)
        if section.budget < 1:
            raise ConfigurationError(f"search.budget must be >= 1, got {section.budget}")
        if section.proxy_epochs < 1:
            raise ConfigurationError(f"search.proxy_epochs must be >= 1, got {section.proxy_epochs}")
        if section.workers < 1:
            raise ConfigurationError(f"search.workers must be >= 1, got {section.workers}")
        return section


HAPS_KEYS = ("eta_init", "T", "M", "nu", "epsilon_ladder", "n_pgd", "momentum", "random_start",
             "epochs_per_stage", "total_iterations", "anneal_nu", "anneal_eta")
EVAL_KEYS = ("epsilon", "n_iter", "epsilon_step", "random_start", "sweep_ladder", "batch_size", "threads")


def haps_from_dict(doc: dict, seed: int) -> HapsConfig:
    doc = dict(_check_keys(doc, HAPS_KEYS, "haps"))
    if "epsilon_ladder" in doc:
        ladder, scale = scaled_values(doc.pop("epsilon_ladder"), "haps.epsilon_ladder")
        doc["epsilon_ladder"], doc["epsilon_scale"] = ladder, scale
    return HapsConfig(seed=seed, **doc)


def eval_from_dict(doc: dict, seed: int) -> EvalConfig:
    doc = dict(_check_keys(doc, EVAL_KEYS, "eval"))
    scale = None
    if "epsilon" in doc:
        doc["epsilon"], scale = scaled_value(doc["epsilon"], "eval.epsilon")
        doc["epsilon_scale"] = scale
    if "sweep_ladder" in doc:
        ladder, ladder_scale = scaled_values(doc["sweep_ladder"], "eval.sweep_ladder")
        if ladder_scale != (scale or config.EPSILON_SCALE):
            raise ConfigurationError(
                f"eval.sweep_ladder scale {ladder_scale:g} differs from eval.epsilon scale "
                f"{scale or config.EPSILON_SCALE:g}")
        doc["sweep_ladder"] = ladder
    if doc.get("epsilon_step") is not None:
        step, step_scale = scaled_value(doc["epsilon_step"], "eval.epsilon_step")
        doc["epsilon_step"] = step / step_scale
    return EvalConfig(seed=seed, **doc)


def _resolve(path: Optional[str], base_dir: str) -> Optional[str]:
    if not path or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


# ============== PIPELINE ==============

@dataclass(frozen=True)
class PipelineConfig:
    """Resolved CLI config: every section validated, paths absolute"""
    dataset: DatasetSection
    search: SearchSection
    haps: HapsConfig
    eval: EvalConfig
    seed: int = config.SEED
    output_dir: str = config.OUTPUT_DIR

    def to_dict(self) -> dict:
        return {
            "dataset": asdict(self.dataset),
            "search": asdict(self.search),
            "haps": self.haps.to_dict(),
            "eval": asdict(self.eval),
            "seed": self.seed,
        }

    def hash(self) -> str:
        """Identifies the run; output_dir and thread counts do not enter it"""
        doc = self.to_dict()
        doc["eval"].pop("threads")
        doc["search"].pop("workers")
        return config_hash(doc)


TOP_KEYS = ("dataset", "search", "haps", "eval", "seed", "output_dir")


def parse_pipeline_config(doc: dict, base_dir: str = ".", seed: Optional[int] = None,
                          output_dir: Optional[str] = None, threads: Optional[int] = None) -> PipelineConfig:
    """
    Build a PipelineConfig from a parsed JSON document.

    Args:
        doc: Top-level JSON object
        base_dir: Directory relative paths are resolved against
        seed: Overrides the file's seed (--seed)
        output_dir: Overrides the file's output_dir (--out)
        threads: Overrides eval.threads (--threads)

    Raises:
        ConfigurationError on unknown keys or any invalid value
    """
    doc = _check_keys(doc, TOP_KEYS, "config")
    if "dataset" not in doc:
        raise ConfigurationError("config needs a 'dataset' section")
    seed = int(doc.get("seed", config.SEED)) if seed is None else int(seed)
    if seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {seed}")
    try:
        dataset = DatasetSection.from_dict(doc["dataset"], base_dir)
        search = SearchSection.from_dict(doc.get("search"), base_dir)
        haps = haps_from_dict(doc.get("haps"), seed)
        eval_doc = dict(doc.get("eval") or {})
        if threads is not None:
            eval_doc["threads"] = threads
        evaluation = eval_from_dict(eval_doc, seed)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from exc
    out = output_dir or doc.get("output_dir") or config.OUTPUT_DIR
    return PipelineConfig(dataset=dataset, search=search, haps=haps, eval=evaluation,
                          seed=seed, output_dir=_resolve(out, base_dir) if output_dir is None else out)


def load_pipeline_config(path: str, seed: Optional[int] = None, output_dir: Optional[str] = None,
                         threads: Optional[int] = None) -> PipelineConfig:
    """Read and validate a JSON pipeline config file"""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    base_dir = os.path.dirname(os.path.abspath(path))
    return parse_pipeline_config(doc, base_dir, seed=seed, output_dir=output_dir, threads=threads)
