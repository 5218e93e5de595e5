"""
Eval Report Module - Đánh giá độ chính xác (benign / robust) và xuất báo cáo
Robust accuracy dưới PGD l∞ white-box, quét ε, bảng so sánh NC Evolve / HAPS
"""
import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from io import StringIO
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from .attacks import AttackConfig, pgd, with_epsilon
from .data_pipeline import Dataset
from .errors import ConfigurationError, ReportError
from .nn import Model, encode_model, predict

REPORT_COLUMNS = ["dataset", "model_id", "phase", "eps_scale", "eps", "n_iter", "random_start",
                  "seed", "benign_acc", "robust_acc", "n_samples", "wall_clock_s"]
SWEEP_COLUMNS = ["model_id", "eps", "robust_acc"]
PAIRED_COLUMNS = ["dataset", "pre_model_id", "post_model_id",
                  "pre_benign_acc", "pre_robust_acc", "post_benign_acc", "post_robust_acc"]
PHASES = ("pre", "post")


@dataclass(frozen=True)
class EvalConfig:
    """
    Evaluation attack, quoted on epsilon_scale like the report columns.

    epsilon_step is in model space; None means pgd_step_size(ε, n_iter).
    """
    epsilon: float = config.EVAL_EPSILON
    epsilon_scale: float = config.EPSILON_SCALE
    n_iter: int = config.N_PGD_EVAL
    epsilon_step: Optional[float] = None
    random_start: bool = config.EVAL_RANDOM_START
    seed: int = 0
    sweep_ladder: Tuple[float, ...] = tuple(config.SWEEP_LADDER)
    batch_size: int = config.EVAL_BATCH_SIZE
    threads: int = config.THREADS

    def __post_init__(self):
        object.__setattr__(self, "sweep_ladder", tuple(float(e) for e in self.sweep_ladder))
        if self.epsilon_scale <= 0:
            raise ConfigurationError(f"epsilon_scale must be positive, got {self.epsilon_scale}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")
        _check_ladder(self.sweep_ladder)
        _ = self.attack  # raises on invalid attack parameters

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon / self.epsilon_scale, epsilon_step=self.epsilon_step,
                            n_iter=self.n_iter, random_start=self.random_start, seed=self.seed)


def _check_ladder(ladder: Sequence[float]):
    if len(ladder) == 0:
        raise ConfigurationError("sweep ladder must not be empty")
    if any(e < 0 for e in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigurationError(f"sweep ladder must be ascending and >= 0, got {list(ladder)}")


def model_fingerprint(model: Model) -> str:
    """Identifier of a model's spec and parameters (first 12 hex of SHA-256)"""
    return hashlib.sha256(encode_model(model)).hexdigest()[:12]


# ============== ACCURACY ==============

def _batches(n: int, batch_size: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def _map_batches(fn, batches, threads: int) -> List[int]:
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(fn, batches))
    return [fn(batch) for batch in batches]


def accuracy(model: Model, dataset: Dataset, batch_size: int = config.EVAL_BATCH_SIZE) -> float:
    """Fraction of samples whose predicted class equals the label"""
    if len(dataset) == 0:
        raise ConfigurationError("cannot measure accuracy on an empty dataset")
    correct = sum(int(np.sum(predict(model, dataset.images[idx]) == dataset.labels[idx]))
                  for idx in _batches(len(dataset), batch_size))
    return correct / len(dataset)


def robust_correct(model: Model, dataset: Dataset, attack: AttackConfig,
                   sample_indices: Optional[Sequence[int]] = None,
                   batch_size: int = config.EVAL_BATCH_SIZE, threads: int = 1) -> int:
    """
    Number of samples still classified correctly after PGD.

    sample_indices gives each row its global index for the per-sample
    random-start seed (default 0..N-1), so a dataset evaluated in pieces
    gives the same count as in one pass.
    """
    n = len(dataset)
    global_index = np.arange(n) if sample_indices is None else np.asarray(sample_indices)
    if global_index.shape != (n,):
        raise ConfigurationError(f"{global_index.shape[0]} sample indices for {n} samples")

    def attack_batch(idx: np.ndarray) -> int:
        x, y = dataset.images[idx], dataset.labels[idx]
        x_adv = pgd(model, x, y, attack, sample_indices=global_index[idx])
        return int(np.sum(predict(model, x_adv) == y))

    return sum(_map_batches(attack_batch, _batches(n, batch_size), threads))


def robust_accuracy(model: Model, dataset: Dataset, attack: AttackConfig,
                    batch_size: int = config.EVAL_BATCH_SIZE, threads: int = 1) -> float:
    """White-box PGD accuracy on the final iterate"""
    if len(dataset) == 0:
        raise ConfigurationError("cannot measure accuracy on an empty dataset")
    return robust_correct(model, dataset, attack, batch_size=batch_size, threads=threads) / len(dataset)


def epsilon_sweep(model: Model, dataset: Dataset, ladder: Sequence[float], base_attack: AttackConfig,
                  epsilon_scale: float = config.EPSILON_SCALE, step_override: Optional[float] = None,
                  batch_size: int = config.EVAL_BATCH_SIZE, threads: int = 1) -> List[Tuple[float, float]]:
    """
    Robust accuracy at every ladder ε (quoted on epsilon_scale).

    ε_step is recomputed per ε with pgd_step_size unless step_override
    (model space) fixes it.

    Returns:
        [(ε as given, robust accuracy), ...] in ladder order
    """
    _check_ladder(ladder)
    rows = []
    for eps in ladder:
        attack = with_epsilon(base_attack, eps / epsilon_scale, step_override)
        acc = robust_accuracy(model, dataset, attack, batch_size, threads)
        print(f"   ε={eps:g}/{epsilon_scale:g} robust_acc={acc:.4f}")
        rows.append((eps, acc))
    return rows


# ============== REPORTS ==============

@dataclass
class EvalReport:
    """One row of the report table plus optional sweep curve"""
    dataset: str
    model_id: str
    phase: str
    eps_scale: float
    eps: float
    n_iter: int
    random_start: bool
    seed: int
    benign_acc: float
    robust_acc: float
    n_samples: int
    wall_clock_s: float = 0.0
    sweep: List[Tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ReportError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("benign_acc", "robust_acc"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ReportError(f"{name}={value} outside [0, 1]")

    def row(self) -> dict:
        doc = asdict(self)
        doc.pop("sweep")
        return doc


def evaluate(model: Model, dataset: Dataset, cfg: EvalConfig, dataset_name: str,
             phase: str = "pre", sweep: bool = False) -> EvalReport:
    """
    Đo accuracy sạch và robust accuracy của một model, trả về một dòng report

    Args:
        model: Model cần đánh giá
        dataset: Dữ liệu test (pixel trong [0, 1])
        cfg: Cấu hình tấn công khi đánh giá
        dataset_name: Tên dataset ghi vào cột dataset
        phase: "pre" (trước hardening) hoặc "post"
        sweep: Chạy thêm epsilon_sweep trên cfg.sweep_ladder

    Returns:
        EvalReport
    """
    started = time.perf_counter()
    attack = cfg.attack
    print(f"🎯 Evaluating {dataset_name} [{phase}] on {len(dataset)} samples: "
          f"ε={cfg.epsilon:g}/{cfg.epsilon_scale:g}, n={cfg.n_iter}, random_start={cfg.random_start}")
    # Accuracy sạch rồi tới PGD trên cùng tập test
    benign = accuracy(model, dataset, cfg.batch_size)
    robust = robust_accuracy(model, dataset, attack, cfg.batch_size, cfg.threads)
    rows = []
    if sweep:
        rows = epsilon_sweep(model, dataset, cfg.sweep_ladder, attack, cfg.epsilon_scale,
                             cfg.epsilon_step, cfg.batch_size, cfg.threads)
    # wall_clock_s = 0 trừ khi bật HAPS_RECORD_WALL_CLOCK
    elapsed = time.perf_counter() - started if config.RECORD_WALL_CLOCK else 0.0
    print(f"✅ benign_acc={benign:.4f} robust_acc={robust:.4f}")
    return EvalReport(dataset=dataset_name, model_id=model_fingerprint(model), phase=phase,
                      eps_scale=cfg.epsilon_scale, eps=cfg.epsilon, n_iter=cfg.n_iter,
                      random_start=cfg.random_start, seed=cfg.seed, benign_acc=benign,
                      robust_acc=robust, n_samples=len(dataset), wall_clock_s=elapsed, sweep=rows)


def paired_rows(reports: Sequence[EvalReport]) -> List[Tuple[Optional[EvalReport], Optional[EvalReport]]]:
    """
    Group reports into (pre, post) rows.

    A 'pre' report immediately followed by a 'post' one forms a pair; any
    other report stands alone with None on the missing side.
    """
    rows, i = [], 0
    while i < len(reports):
        current = reports[i]
        following = reports[i + 1] if i + 1 < len(reports) else None
        if current.phase == "pre" and following is not None and following.phase == "post":
            if current.dataset != following.dataset:
                raise ReportError(
                    f"cannot pair dataset {current.dataset!r} with {following.dataset!r}")
            rows.append((current, following))
            i += 2
            continue
        rows.append((current, None) if current.phase == "pre" else (None, current))
        i += 1
    return rows


def _percent(value: Optional[float]) -> str:
    return "" if value is None else f"{100.0 * value:.2f}"


def render_report(reports: Sequence[EvalReport], fmt: str = "csv") -> str:
    """
    Render reports as "csv" (full precision), "paired_csv" or "text".

    The text table puts pre/post pairs side by side under NC Evolve / HAPS
    headers with percentages at two decimals.
    """
    if not reports:
        raise ReportError("no reports to render")
    if fmt == "csv":
        df = pd.DataFrame([r.row() for r in reports], columns=REPORT_COLUMNS)
        return df.to_csv(index=False, lineterminator="\n")

    pairs = paired_rows(reports)
    if fmt == "paired_csv":
        records = []
        for pre, post in pairs:
            records.append({
                "dataset": (pre or post).dataset,
                "pre_model_id": pre.model_id if pre else "",
                "post_model_id": post.model_id if post else "",
                "pre_benign_acc": pre.benign_acc if pre else None,
                "pre_robust_acc": pre.robust_acc if pre else None,
                "post_benign_acc": post.benign_acc if post else None,
                "post_robust_acc": post.robust_acc if post else None,
            })
        return pd.DataFrame(records, columns=PAIRED_COLUMNS).to_csv(index=False, lineterminator="\n")

    if fmt == "text":
        header = ["Dataset", "NC Evolve Acc", "NC Evolve R.Acc", "HAPS Acc", "HAPS R.Acc"]
        table = [[(pre or post).dataset,
                  _percent(pre.benign_acc if pre else None), _percent(pre.robust_acc if pre else None),
                  _percent(post.benign_acc if post else None), _percent(post.robust_acc if post else None)]
                 for pre, post in pairs]
        first = reports[0]
        caption = (f"PGD l∞ ε={first.eps:g}/{first.eps_scale:g}, n={first.n_iter}, "
                   f"random_start={first.random_start}, seed={first.seed}")
        return caption + "\n" + pd.DataFrame(table, columns=header).to_string(index=False) + "\n"

    raise ConfigurationError(f"unknown report format {fmt!r} (csv, paired_csv, text)")


def parse_report_csv(text: str) -> List[EvalReport]:
    """Inverse of render_report(..., "csv")"""
    df = pd.read_csv(StringIO(text), float_precision="round_trip", keep_default_na=False,
                     dtype={"dataset": str, "model_id": str, "phase": str})
    missing = set(REPORT_COLUMNS) - set(df.columns)
    if missing:
        raise ReportError(f"report CSV lacks columns {sorted(missing)}")
    reports = []
    for record in df.to_dict("records"):
        random_start = record["random_start"]
        if isinstance(random_start, str):
            random_start = random_start.strip().lower() == "true"
        reports.append(EvalReport(
            dataset=record["dataset"], model_id=record["model_id"], phase=record["phase"],
            eps_scale=float(record["eps_scale"]), eps=float(record["eps"]), n_iter=int(record["n_iter"]),
            random_start=bool(random_start), seed=int(record["seed"]),
            benign_acc=float(record["benign_acc"]), robust_acc=float(record["robust_acc"]),
            n_samples=int(record["n_samples"]), wall_clock_s=float(record["wall_clock_s"])))
    return reports


def render_sweep(model_id: str, rows: Sequence[Tuple[float, float]]) -> str:
    """Sweep CSV: model_id, eps, robust_acc"""
    df = pd.DataFrame([{"model_id": model_id, "eps": eps, "robust_acc": acc} for eps, acc in rows],
                      columns=SWEEP_COLUMNS)
    return df.to_csv(index=False, lineterminator="\n")
