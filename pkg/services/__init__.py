"""
Services Package - HAPS Hardening Pipeline
"""

# Numerics
from .tensor import Tensor, backward, finite_diff_check, no_grad, softmax_cross_entropy
from .nn import ArchitectureSpec, LayerSpec, Model, SGD, build, predict, save, load

# Data
from .data_pipeline import BatchSampler, Dataset, load_csv, load_idx, split, subset, next_batch

# Attacks & Hardening
from .attacks import AttackConfig, fgsm, pgd, pgd_step_size, project_linf
from .haps_trainer import (
    HapsConfig, ScheduleState, TrainingLog, adv_count, cosine_finetune, cosine_gamma,
    haps_run, haps_step,
)

# Search & Evaluation
from .arch_search import SearchResult, SearchSpace, search, train_candidate
from .eval_report import (
    EvalConfig, EvalReport, accuracy, epsilon_sweep, render_report, robust_accuracy,
)
from .pipeline_config import PipelineConfig, load_pipeline_config

# Errors
from .errors import (
    ConfigurationError, ContractError, DimensionError, HapsError, IngestionError,
    LabelRangeError, ModelLoadError, ReportError, SpecError, StratificationError,
    TrainingCollapseError, TrainingDivergenceError,
)


__all__ = [
    # Numerics
    'Tensor',
    'backward',
    'finite_diff_check',
    'no_grad',
    'softmax_cross_entropy',
    'ArchitectureSpec',
    'LayerSpec',
    'Model',
    'SGD',
    'build',
    'predict',
    'save',
    'load',

    # Data
    'BatchSampler',
    'Dataset',
    'load_csv',
    'load_idx',
    'split',
    'subset',
    'next_batch',

    # Attacks & Hardening
    'AttackConfig',
    'fgsm',
    'pgd',
    'pgd_step_size',
    'project_linf',
    'HapsConfig',
    'ScheduleState',
    'TrainingLog',
    'adv_count',
    'cosine_finetune',
    'cosine_gamma',
    'haps_run',
    'haps_step',

    # Search & Evaluation
    'SearchResult',
    'SearchSpace',
    'search',
    'train_candidate',
    'EvalConfig',
    'EvalReport',
    'accuracy',
    'epsilon_sweep',
    'render_report',
    'robust_accuracy',
    'PipelineConfig',
    'load_pipeline_config',

    # Errors
    'ConfigurationError',
    'ContractError',
    'DimensionError',
    'HapsError',
    'IngestionError',
    'LabelRangeError',
    'ModelLoadError',
    'ReportError',
    'SpecError',
    'StratificationError',
    'TrainingCollapseError',
    'TrainingDivergenceError',
]
