"""
Errors Module - Exception hierarchy cho toàn bộ pipeline
Mỗi lỗi mang exit code để main.py chuyển thành mã thoát của CLI
"""
from typing import Optional


class HapsError(Exception):
    """Base error of the pipeline"""
    exit_code = 1


class ConfigurationError(HapsError):
    """Invalid configuration, sizes or budgets"""
    exit_code = 2


class SpecError(ConfigurationError):
    """Architecture spec failed the shape chain-check"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class DimensionError(ConfigurationError, ValueError):
    """Shape mismatch between operands"""


class LabelRangeError(HapsError, IndexError):
    """Class label outside [0, num_classes)"""
    exit_code = 2


class ContractError(HapsError):
    """API used outside its preconditions"""
    exit_code = 2


class StratificationError(ConfigurationError):
    """A class is too small for a stratified split"""


class ReportError(HapsError):
    """Reports cannot be rendered together"""
    exit_code = 2


class IngestionError(HapsError):
    """Dataset file could not be parsed"""
    exit_code = 4


class ModelLoadError(HapsError):
    """Model container is corrupt or inconsistent"""
    exit_code = 4


class TrainingDivergenceError(HapsError):
    """Loss became non-finite during training"""
    exit_code = 3

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingCollapseError(TrainingDivergenceError):
    """Adversarial training collapsed; carries the schedule state"""

    def __init__(self, message: str, state=None):
        if state is not None:
            message = (f"{message} at stage {state.stage} (eps={state.stage_eps}), "
                       f"t={state.t}, gamma={state.gamma!r}, eta={state.eta!r}, K={state.K}")
        super().__init__(message)
        self.state = state
        self.iteration = state.t if state is not None else None
