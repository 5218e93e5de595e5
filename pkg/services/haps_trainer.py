"""
HAPS Trainer Module - Hardening As Post-processing Step
Huấn luyện đối kháng sau NAS: η giảm theo cosine, tỉ lệ mẫu đối kháng K tăng dần,
ε tăng theo từng bậc (ladder)
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from io import StringIO
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import config
from . import tensor as T
from .attacks import AttackConfig, pgd
from .data_pipeline import BatchSampler, Dataset
from .errors import ConfigurationError, ContractError, TrainingCollapseError
from .nn import SGD, Model, decode_model, encode_model
from .seeding import config_hash, derive_seed, make_rng
from .storage import atomic_write_bytes, atomic_write_text, ensure_dir

LOG_COLUMNS = ["stage_eps", "t", "gamma", "eta", "K", "loss_adv", "loss_benign"]

# stream tags for make_rng / derive_seed
_DROPOUT_STREAM = 3
_ATTACK_STREAM = 4


# ============== SCHEDULES ==============

def cosine_gamma(t: int, T_stage: int) -> float:
    """γ = ½(1 + cos(t/T·π)) for 1 ≤ t ≤ T"""
    if T_stage < 1 or not 1 <= t <= T_stage:
        raise ContractError(f"t must lie in [1, {T_stage}], got {t}")
    return 0.5 * (1.0 + math.cos(t / T_stage * math.pi))


def adv_count(nu: float, m_actual: int, gamma: float) -> int:
    """
    K = ⌊ν·M·(1−γ)⌋

    Tích được làm tròn tới ADV_COUNT_DIGITS chữ số trước khi lấy floor:
    ν=0.29, M=100, γ=0 cho 28.999999999999996 trong float, K phải là 29.
    """
    return int(math.floor(round(nu * m_actual * (1.0 - gamma), config.ADV_COUNT_DIGITS)))


@dataclass(frozen=True)
class ScheduleState:
    """Position inside the schedule plus the derived γ, η, K"""
    stage: int
    stage_eps: float
    t: int
    gamma: float
    eta: float
    K: int

    @classmethod
    def at(cls, stage: int, stage_eps: float, t: int, T_stage: int,
           eta_init: float, nu: float, m_actual: int,
           anneal_nu: bool = True, anneal_eta: bool = True) -> "ScheduleState":
        gamma = cosine_gamma(t, T_stage)
        # γ is still logged when neither η nor K follows it
        eta = eta_init * gamma if anneal_eta else eta_init
        K = adv_count(nu, m_actual, gamma if anneal_nu else 0.0)
        return cls(stage=stage, stage_eps=stage_eps, t=t, gamma=gamma, eta=eta, K=K)


# ============== CONFIG ==============

@dataclass(frozen=True)
class HapsConfig:
    """
    Inputs of the hardening loop.

    epsilon_ladder is quoted on epsilon_scale (255 for pixel bytes). The
    number of iterations per stage comes from, in order of precedence,
    total_iterations (split evenly over the ladder), epochs_per_stage
    (converted with ⌈N/M⌉) or T.

    anneal_nu=False keeps K at ⌊ν·M⌋ from the first iteration and
    anneal_eta=False keeps η at eta_init; together they give the
    fixed-fraction adversarial training baseline.
    """
    eta_init: float = config.ETA_INIT
    T: int = config.ITERATIONS_PER_STAGE
    M: int = config.BATCH_SIZE
    nu: float = config.NU_MAX
    epsilon_ladder: Tuple[float, ...] = tuple(config.EPSILON_LADDER)
    epsilon_scale: float = config.EPSILON_SCALE
    n_pgd: int = config.N_PGD_TRAIN
    momentum: float = config.MOMENTUM
    anneal_nu: bool = config.ANNEAL_NU
    anneal_eta: bool = config.ANNEAL_ETA
    seed: int = 0
    random_start: bool = config.TRAIN_RANDOM_START
    epochs_per_stage: Optional[int] = None
    total_iterations: Optional[int] = None
    clip_min: float = config.CLIP_MIN
    clip_max: float = config.CLIP_MAX

    def __post_init__(self):
        object.__setattr__(self, "epsilon_ladder", tuple(float(e) for e in self.epsilon_ladder))
        self.validate()

    def validate(self):
        ladder = self.epsilon_ladder
        if not ladder:
            raise ConfigurationError("epsilon_ladder must not be empty")
        if any(e < 0 for e in ladder):
            raise ConfigurationError(f"epsilon_ladder entries must be >= 0, got {list(ladder)}")
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigurationError(f"epsilon_ladder must be strictly ascending, got {list(ladder)}")
        if self.epsilon_scale <= 0:
            raise ConfigurationError(f"epsilon_scale must be positive, got {self.epsilon_scale}")
        width = self.clip_max - self.clip_min
        for eps in ladder:
            if eps / self.epsilon_scale > width:
                raise ConfigurationError(
                    f"ladder entry {eps}/{self.epsilon_scale} exceeds the clip range width {width}")
        if not 0.0 <= self.nu <= 1.0:
            raise ConfigurationError(f"nu must be in [0, 1], got {self.nu}")
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if self.M < 1:
            raise ConfigurationError(f"M must be >= 1, got {self.M}")
        if not self.eta_init > 0:
            raise ConfigurationError(f"eta_init must be positive, got {self.eta_init}")
        if self.n_pgd < 1:
            raise ConfigurationError(f"n_pgd must be >= 1, got {self.n_pgd}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs_per_stage is not None and self.epochs_per_stage < 1:
            raise ConfigurationError(f"epochs_per_stage must be >= 1, got {self.epochs_per_stage}")
        if self.total_iterations is not None and self.total_iterations < len(ladder):
            raise ConfigurationError(
                f"total_iterations {self.total_iterations} leaves no iteration for some of {len(ladder)} stages")

    def iterations_per_stage(self, n_train: int) -> int:
        if self.total_iterations is not None:
            return self.total_iterations // len(self.epsilon_ladder)
        if self.epochs_per_stage is not None:
            return self.epochs_per_stage * -(-n_train // self.M)
        return self.T

    def attack_for_stage(self, stage: int, step_seed: int = 0) -> AttackConfig:
        """PGD for one stage; step size follows pgd_step_size(ε, n_pgd)"""
        return AttackConfig(epsilon=self.epsilon_ladder[stage] / self.epsilon_scale,
                            n_iter=self.n_pgd, clip_min=self.clip_min, clip_max=self.clip_max,
                            random_start=self.random_start, seed=step_seed)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["epsilon_ladder"] = list(self.epsilon_ladder)
        return doc

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ============== LOG ==============

@dataclass
class TrainingLog:
    """Per-iteration records of a hardening run"""
    rows: List[dict] = field(default_factory=list)

    def append(self, state: ScheduleState, loss_adv: float, loss_benign: float):
        self.rows.append({"stage_eps": state.stage_eps, "t": state.t, "gamma": state.gamma,
                          "eta": state.eta, "K": state.K,
                          "loss_adv": loss_adv, "loss_benign": loss_benign})

    def __len__(self):
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def to_csv(self, path: Optional[str] = None) -> str:
        text = self.to_frame().to_csv(index=False, lineterminator="\n")
        if path:
            atomic_write_text(path, text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        df = pd.read_csv(StringIO(text), float_precision="round_trip")
        rows = []
        for record in df.to_dict("records"):
            rows.append({"stage_eps": float(record["stage_eps"]), "t": int(record["t"]),
                         "gamma": float(record["gamma"]), "eta": float(record["eta"]),
                         "K": int(record["K"]), "loss_adv": float(record["loss_adv"]),
                         "loss_benign": float(record["loss_benign"])})
        return cls(rows)


# ============== STEPS ==============

def sgd_update(model: Model, optimizer: SGD, x: np.ndarray, y: np.ndarray, eta: float,
               rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray]:
    """
    One SGD step on the mean cross-entropy of (x, y), training mode.

    Returns:
        (mean loss, per-sample losses); parameters are left untouched when
        the loss is non-finite
    """
    T.reset_tape()
    optimizer.zero_grad()
    logits = model.forward(T.Tensor(x, copy=False), training=True, rng=rng)
    loss = T.softmax_cross_entropy(logits, y)
    value = loss.item()
    per_sample = T.cross_entropy_per_sample(logits.data, y)
    if not math.isfinite(value):
        T.reset_tape()
        return value, per_sample
    T.backward(loss)
    optimizer.step(eta)
    return value, per_sample


def _part_mean(losses: np.ndarray) -> float:
    return float(np.mean(losses)) if losses.size else 0.0


def haps_step(model: Model, optimizer: SGD, batch: Tuple[np.ndarray, np.ndarray],
              schedule: ScheduleState, attack: AttackConfig,
              rng: Optional[np.random.Generator] = None,
              sample_indices: Optional[Sequence[int]] = None) -> Tuple[float, float]:
    """
    Một bước cập nhật trộn mẫu đối kháng và mẫu sạch

    K mẫu đầu được thay bằng bản PGD, M−K mẫu còn lại giữ nguyên,
    θ ← θ − η·∇θ của loss trung bình trên cả M mẫu.

    Args:
        model: Model đang hardening (cập nhật tại chỗ)
        optimizer: SGD giữ trạng thái momentum
        batch: Cặp mảng (x, y)
        schedule: γ, η, K hiện tại
        attack: Cấu hình PGD tại ε của stage
        rng: Generator cho dropout ở chế độ train
        sample_indices: Chỉ số trong dataset của từng dòng batch

    Returns:
        (loss đối kháng trung bình, loss sạch trung bình); phần rỗng trả 0.0
    """
    x, y = batch
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=T.DTYPE)
    y = np.asarray(y)
    K = schedule.K
    if not 0 <= K <= x.shape[0]:
        raise ContractError(f"K={K} outside [0, {x.shape[0]}]")

    # Tấn công K mẫu đầu, ghép với phần còn lại
    if K > 0:
        indices = None if sample_indices is None else np.asarray(sample_indices)[:K]
        x_adv = pgd(model, x[:K], y[:K], attack, sample_indices=indices)
        x_mixed = np.concatenate([x_adv, x[K:]], axis=0)
    else:
        x_mixed = x

    value, per_sample = sgd_update(model, optimizer, x_mixed, y, schedule.eta, rng)
    if not math.isfinite(value):
        raise TrainingCollapseError("non-finite training loss", schedule)
    return _part_mean(per_sample[:K]), _part_mean(per_sample[K:])


# ============== CHECKPOINTS ==============

def _checkpoint_paths(directory: str, stage: int) -> dict:
    prefix = os.path.join(directory, f"stage_{stage:02d}")
    return {"model": f"{prefix}.haps", "velocity": f"{prefix}_velocity.haps",
            "log": f"{prefix}_log.csv", "state": f"{prefix}.json"}


def save_checkpoint(directory: str, stage: int, model: Model, optimizer: SGD,
                    sampler: BatchSampler, log: TrainingLog, cfg: HapsConfig) -> str:
    """
    Write the end-of-stage checkpoint; returns the sidecar JSON path.

    The sidecar is written last so its presence marks a complete checkpoint.
    """
    ensure_dir(directory)
    paths = _checkpoint_paths(directory, stage)
    atomic_write_bytes(paths["model"], encode_model(model))
    has_velocity = cfg.momentum > 0
    if has_velocity:
        velocity = Model(model.spec, {name: T.Tensor(v, copy=False)
                                      for name, v in optimizer.velocity_arrays().items()})
        atomic_write_bytes(paths["velocity"], encode_model(velocity))
    log.to_csv(paths["log"])
    sidecar = {
        "stage": stage,
        "stage_eps": cfg.epsilon_ladder[stage],
        "sampler": sampler.state_dict(),
        "config_hash": cfg.hash(),
        "log_rows": len(log),
        "has_velocity": has_velocity,
    }
    return atomic_write_text(paths["state"], json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    stage: int
    model: Model
    velocity: Optional[dict]
    sampler_state: dict
    log: TrainingLog


def load_checkpoint(sidecar_path: str, cfg: HapsConfig) -> Checkpoint:
    """Read a stage checkpoint written by save_checkpoint for the same config"""
    with open(sidecar_path, "r", encoding="utf-8") as handle:
        sidecar = json.load(handle)
    if sidecar.get("config_hash") != cfg.hash():
        raise ConfigurationError(
            f"{sidecar_path}: checkpoint was written for config {sidecar.get('config_hash')}, "
            f"current config is {cfg.hash()}")
    directory = os.path.dirname(os.path.abspath(sidecar_path))
    stage = int(sidecar["stage"])
    paths = _checkpoint_paths(directory, stage)
    with open(paths["model"], "rb") as handle:
        model = decode_model(handle.read(), source=paths["model"])
    velocity = None
    if sidecar.get("has_velocity"):
        with open(paths["velocity"], "rb") as handle:
            stored = decode_model(handle.read(), source=paths["velocity"])
        velocity = {name: p.data for name, p in stored.params.items()}
    with open(paths["log"], "r", encoding="utf-8") as handle:
        log = TrainingLog.from_csv(handle.read())
    if len(log) != int(sidecar["log_rows"]):
        raise ConfigurationError(f"{paths['log']}: {len(log)} rows, sidecar expects {sidecar['log_rows']}")
    return Checkpoint(stage, model, velocity, dict(sidecar["sampler"]), log)


# ============== RUNS ==============

def _run(model: Model, train: Dataset, cfg: HapsConfig, adversarial: bool,
         checkpoint_dir: Optional[str], resume_from: Optional[str]) -> Tuple[Model, TrainingLog]:
    model = model.copy()
    optimizer = SGD(model.named_parameters(), momentum=cfg.momentum)
    sampler = BatchSampler(train, cfg.M, cfg.seed)
    log = TrainingLog()
    T_stage = cfg.iterations_per_stage(len(train))
    first_stage = 0

    if resume_from:
        checkpoint = load_checkpoint(resume_from, cfg)
        if checkpoint.model.spec.to_dict() != model.spec.to_dict():
            raise ConfigurationError(f"{resume_from}: checkpoint architecture differs from the input model")
        model = checkpoint.model
        optimizer = SGD(model.named_parameters(), momentum=cfg.momentum)
        if checkpoint.velocity is not None:
            optimizer.load_velocity(checkpoint.velocity)
        sampler.load_state(checkpoint.sampler_state)
        log = checkpoint.log
        first_stage = checkpoint.stage + 1
        print(f"🔁 Resuming after stage {checkpoint.stage} ({len(log)} log rows)")

    label = "🛡️ HAPS" if adversarial else "🔧 Fine-tune"
    for stage in range(first_stage, len(cfg.epsilon_ladder)):
        stage_eps = cfg.epsilon_ladder[stage]
        print(f"{label} stage {stage + 1}/{len(cfg.epsilon_ladder)}: ε={stage_eps:g}/{cfg.epsilon_scale:g}, T={T_stage}")
        # γ, η, K chạy lại từ t=1 ở mỗi stage; sampler thì không
        for t in range(1, T_stage + 1):
            indices = sampler.next_indices()
            x = train.images[indices]
            y = train.labels[indices]
            rng = make_rng(cfg.seed, _DROPOUT_STREAM, stage, t)
            nu = cfg.nu if adversarial else 0.0
            state = ScheduleState.at(stage, stage_eps, t, T_stage, cfg.eta_init, nu, len(indices),
                                     cfg.anneal_nu, cfg.anneal_eta)
            if adversarial:
                attack = cfg.attack_for_stage(stage, derive_seed(cfg.seed, _ATTACK_STREAM, stage, t))
                loss_adv, loss_benign = haps_step(model, optimizer, (x, y), state, attack, rng, indices)
            else:
                value, per_sample = sgd_update(model, optimizer, x, y, state.eta, rng)
                if not math.isfinite(value):
                    raise TrainingCollapseError("non-finite fine-tuning loss", state)
                loss_adv, loss_benign = 0.0, _part_mean(per_sample)
            log.append(state, loss_adv, loss_benign)
            if config.LOG_EVERY and t % config.LOG_EVERY == 0:
                print(f"   t={t}/{T_stage} η={state.eta:.5f} K={state.K} "
                      f"loss_adv={loss_adv:.4f} loss_benign={loss_benign:.4f}")
        # Checkpoint cuối mỗi stage
        if checkpoint_dir:
            save_checkpoint(checkpoint_dir, stage, model, optimizer, sampler, log, cfg)
    model.eval()
    return model, log


def haps_run(model: Model, train: Dataset, cfg: HapsConfig,
             checkpoint_dir: Optional[str] = None,
             resume_from: Optional[str] = None) -> Tuple[Model, TrainingLog]:
    """
    Harden a trained model through the ε-ladder.

    Every stage restarts t = 1..T, so γ, η and K restart with it; the
    sampler keeps cycling across stages. The input model is not modified.

    Args:
        model: Trained model m_{α*,θ}
        train: Training dataset
        cfg: Hardening config
        checkpoint_dir: Write a checkpoint after every stage when set
        resume_from: Sidecar JSON of a stage checkpoint to continue from

    Returns:
        (hardened final-iterate model, training log)
    """
    return _run(model, train, cfg, True, checkpoint_dir, resume_from)


def cosine_finetune(model: Model, train: Dataset, cfg: HapsConfig,
                    checkpoint_dir: Optional[str] = None,
                    resume_from: Optional[str] = None) -> Tuple[Model, TrainingLog]:
    """Plain SGD on the same η schedule, stages and batches, no attack"""
    return _run(model, train, cfg, False, checkpoint_dir, resume_from)
