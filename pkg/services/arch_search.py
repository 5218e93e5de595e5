"""
Architecture Search Module - Chọn kiến trúc α* theo độ chính xác trên tập valid
Random/grid search trong không gian ứng viên nhỏ, huấn luyện ngắn (proxy epochs)
"""
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from .data_pipeline import BatchSampler, Dataset, split
from .errors import ConfigurationError, TrainingDivergenceError
from .eval_report import accuracy
from .haps_trainer import cosine_gamma, sgd_update
from .nn import SGD, ArchitectureSpec, Model, build
from .seeding import derive_seed, make_rng
from .storage import atomic_write_text

LEDGER_COLUMNS = ["order", "candidate", "spec_id", "validation_accuracy", "seed", "epochs", "parameters"]

GRID_KEYS = {"depth", "filters", "dense_width"}

_ORDER_STREAM = 5
_CANDIDATE_STREAM = 6
_DROPOUT_STREAM = 3


@dataclass(frozen=True)
class SearchSpace:
    """Explicit list of candidate architectures (grids are expanded at load)"""
    candidates: Tuple[ArchitectureSpec, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ConfigurationError("search space is empty")

    def __len__(self):
        return len(self.candidates)

    @classmethod
    def from_dict(cls, doc: dict, input_shape: Sequence[int], num_classes: int) -> "SearchSpace":
        """
        Parse {"candidates": [spec, ...]} or {"grid": {"depth", "filters", "dense_width"}}.

        Candidate specs may omit input_shape/num_classes; the dataset's are used.
        """
        if not isinstance(doc, dict) or len(doc) != 1 or not set(doc) <= {"candidates", "grid"}:
            raise ConfigurationError("search space needs exactly one of 'candidates' or 'grid'")
        if "grid" in doc:
            return cls.from_grid(doc["grid"], input_shape, num_classes)
        specs = []
        for entry in doc["candidates"]:
            entry = dict(entry)
            entry.setdefault("input_shape", list(input_shape))
            entry.setdefault("num_classes", num_classes)
            specs.append(ArchitectureSpec.from_dict(entry))
        return cls(tuple(specs))

    @classmethod
    def from_grid(cls, grid: dict, input_shape: Sequence[int], num_classes: int) -> "SearchSpace":
        unknown = set(grid) - GRID_KEYS
        if unknown:
            raise ConfigurationError(f"unknown grid keys: {sorted(unknown)}")
        missing = GRID_KEYS - set(grid)
        if missing:
            raise ConfigurationError(f"grid needs {sorted(missing)}")
        specs, seen = [], set()
        for depth, filters, width in itertools.product(grid["depth"], grid["filters"], grid["dense_width"]):
            spec = grid_candidate(int(depth), int(filters), int(width), input_shape, num_classes)
            if spec.spec_id not in seen:
                seen.add(spec.spec_id)
                specs.append(spec)
        return cls(tuple(specs))

    @classmethod
    def load(cls, path: str, input_shape: Sequence[int], num_classes: int) -> "SearchSpace":
        with open(path, "r", encoding="utf-8") as handle:
            try:
                doc = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: search space is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, input_shape, num_classes)


def grid_candidate(depth: int, filters: int, dense_width: int,
                   input_shape: Sequence[int], num_classes: int) -> ArchitectureSpec:
    """depth × (conv3×3 same-padding → relu → maxpool2) → flatten → dense → relu → dense"""
    if depth < 0:
        raise ConfigurationError(f"depth must be >= 0, got {depth}")
    layers = []
    for _ in range(depth):
        layers += [{"type": "conv2d", "filters": filters, "kernel": 3, "stride": 1, "padding": 1},
                   {"type": "relu"},
                   {"type": "maxpool2d", "kernel": 2, "stride": 2}]
    layers += [{"type": "flatten"},
               {"type": "dense", "units": dense_width},
               {"type": "relu"},
               {"type": "dense", "units": num_classes}]
    return ArchitectureSpec.from_dict({"layers": layers, "input_shape": list(input_shape),
                                       "num_classes": num_classes})


def train_candidate(spec: ArchitectureSpec, train: Dataset, epochs: int, seed: int,
                    eta_init: float = config.SEARCH_ETA_INIT,
                    batch_size: int = config.BATCH_SIZE, momentum: float = 0.0) -> Model:
    """
    Short proxy training: SGD with one cosine schedule over all steps.

    Raises:
        TrainingDivergenceError with the 1-based iteration of the first
        non-finite loss
    """
    if epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
    model = build(spec, seed)
    optimizer = SGD(model.named_parameters(), momentum=momentum)
    sampler = BatchSampler(train, batch_size, seed)
    total = epochs * sampler.batches_per_epoch
    # Một chu kỳ cosine cho toàn bộ số bước
    for t in range(1, total + 1):
        indices = sampler.next_indices()
        eta = eta_init * cosine_gamma(t, total)
        value, _ = sgd_update(model, optimizer, train.images[indices], train.labels[indices],
                              eta, make_rng(seed, _DROPOUT_STREAM, t))
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"candidate {spec.spec_id} diverged", iteration=t)
    return model.eval()


@dataclass
class LedgerEntry:
    order: int
    candidate: int
    spec_id: str
    validation_accuracy: float
    seed: int
    epochs: int
    parameters: int


@dataclass
class SearchResult:
    best_spec: ArchitectureSpec
    best_validation_accuracy: float
    ledger: List[LedgerEntry] = field(default_factory=list)
    best_model: Optional[Model] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(entry) for entry in self.ledger], columns=LEDGER_COLUMNS)

    def to_csv(self, path: Optional[str] = None) -> str:
        text = self.to_frame().to_csv(index=False, lineterminator="\n")
        if path:
            atomic_write_text(path, text)
        return text


def evaluation_order(space_size: int, budget: int, seed: int) -> np.ndarray:
    """Candidate indices to evaluate; a seeded prefix when the budget is short"""
    if budget >= space_size:
        return np.arange(space_size)
    return make_rng(seed, _ORDER_STREAM).permutation(space_size)[:budget]


def search(space: SearchSpace, dataset: Dataset, budget: int, seed: int,
           epochs: int = config.SEARCH_PROXY_EPOCHS,
           eta_init: float = config.SEARCH_ETA_INIT,
           valid_fraction: float = config.VALID_FRACTION,
           batch_size: int = config.BATCH_SIZE,
           workers: int = 1) -> SearchResult:
    """
    Pick α* = argmax validation accuracy over at most `budget` candidates.

    Each candidate trains from derive_seed(seed, candidate index), so the
    ledger does not depend on how many workers run. Ties go to the
    candidate evaluated first.

    Args:
        space: Candidate architectures
        dataset: Full training data; split stratified into train/valid
        budget: Maximum number of candidates to train
        seed: Base seed (split, order, candidate init)
        epochs: Proxy epochs per candidate
        eta_init: Initial learning rate of the proxy runs
        valid_fraction: Validation share of the split
        batch_size: Proxy minibatch size
        workers: Candidates trained in parallel threads

    Returns:
        SearchResult with the trained best model attached
    """
    if budget < 1:
        raise ConfigurationError(f"search budget must be >= 1, got {budget}")
    if len(space) == 0:
        raise ConfigurationError("search space is empty")
    # Tách valid phân tầng trước khi train bất kỳ ứng viên nào
    train, valid = split(dataset, valid_fraction, seed)
    if batch_size > len(train):
        raise ConfigurationError(
            f"batch size {batch_size} exceeds the {len(train)} training samples left after the split")
    order = evaluation_order(len(space), budget, seed)
    print(f"🔍 Search: {len(order)}/{len(space)} candidates, {epochs} proxy epochs, "
          f"{len(train)} train / {len(valid)} valid")

    def evaluate(candidate: int) -> Tuple[float, Model, int]:
        candidate_seed = derive_seed(seed, _CANDIDATE_STREAM, int(candidate))
        model = train_candidate(space.candidates[candidate], train, epochs, candidate_seed,
                                eta_init, batch_size)
        return accuracy(model, valid), model, candidate_seed

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(evaluate, order))
    else:
        outcomes = [evaluate(candidate) for candidate in order]

    # Ledger theo thứ tự đánh giá; hòa thì giữ ứng viên đầu tiên
    ledger, best = [], None
    for position, (candidate, (acc, model, candidate_seed)) in enumerate(zip(order, outcomes)):
        spec = space.candidates[candidate]
        ledger.append(LedgerEntry(order=position, candidate=int(candidate), spec_id=spec.spec_id,
                                  validation_accuracy=acc, seed=candidate_seed, epochs=epochs,
                                  parameters=model.parameter_count()))
        print(f"   [{position + 1}] {spec.spec_id} acc={acc:.4f}")
        if best is None or acc > best[0]:
            best = (acc, spec, model)

    acc, spec, model = best
    print(f"✅ Best candidate {spec.spec_id} (valid acc {acc:.4f})")
    return SearchResult(best_spec=spec, best_validation_accuracy=acc, ledger=ledger, best_model=model)
