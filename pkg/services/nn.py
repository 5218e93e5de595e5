"""
NN Core Module - Khai báo kiến trúc (α), khởi tạo tham số (θ), lưu/tải model
Layer vocabulary: conv2d, dense, relu, maxpool2d, flatten, dropout
"""
import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

import config
from . import tensor as T
from .errors import ConfigurationError, DimensionError, ModelLoadError, SpecError
from .seeding import config_hash
from .storage import atomic_write_bytes, atomic_write_text

LAYER_FIELDS = {
    "conv2d": {"filters": None, "kernel": None, "stride": 1, "padding": 0},
    "dense": {"units": None},
    "relu": {},
    "maxpool2d": {"kernel": 2, "stride": None},
    "flatten": {},
    "dropout": {"rate": None},
}


@dataclass(frozen=True)
class LayerSpec:
    """One declarative layer; unused fields stay None"""
    kind: str
    filters: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    units: Optional[int] = None
    rate: Optional[float] = None

    @classmethod
    def from_dict(cls, doc: dict, index: int = None) -> "LayerSpec":
        if not isinstance(doc, dict) or "type" not in doc:
            raise SpecError("layer must be an object with a 'type' field", index)
        kind = doc["type"]
        if kind not in LAYER_FIELDS:
            raise SpecError(f"unknown layer type {kind!r}", index)
        allowed = LAYER_FIELDS[kind]
        unknown = set(doc) - set(allowed) - {"type"}
        if unknown:
            raise SpecError(f"unknown keys for {kind}: {sorted(unknown)}", index)
        values = {}
        for name, default in allowed.items():
            value = doc.get(name, default)
            if value is None and name != "stride":
                raise SpecError(f"{kind} needs '{name}'", index)
            values[name] = value
        if kind == "maxpool2d" and values["stride"] is None:
            values["stride"] = values["kernel"]
        return cls(kind=kind, **values)

    def to_dict(self) -> dict:
        doc = {"type": self.kind}
        for name in LAYER_FIELDS[self.kind]:
            doc[name] = getattr(self, name)
        return doc


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    Declarative model definition.

    Shapes chain-check statically; the final layer must output num_classes.
    """
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    num_classes: int

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSpec":
        if not isinstance(doc, dict):
            raise SpecError("architecture spec must be a JSON object")
        unknown = set(doc) - {"layers", "input_shape", "num_classes"}
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            layers = tuple(LayerSpec.from_dict(layer, i) for i, layer in enumerate(doc["layers"]))
            input_shape = tuple(int(v) for v in doc["input_shape"])
            num_classes = int(doc["num_classes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed architecture spec: {exc}") from exc
        spec = cls(layers=layers, input_shape=input_shape, num_classes=num_classes)
        spec.infer_shapes()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise SpecError(f"architecture spec is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def spec_id(self) -> str:
        return config_hash(self.to_dict())[:12]

    def infer_shapes(self) -> List[Tuple[int, ...]]:
        """
        Chain-check the layer list.

        Returns:
            Output shape (without batch axis) after every layer

        Raises:
            SpecError naming the offending layer index
        """
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be positive C×H×W, got {self.input_shape}")
        if self.num_classes < 1:
            raise SpecError(f"num_classes must be positive, got {self.num_classes}")
        shape: Tuple[int, ...] = tuple(self.input_shape)
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise SpecError(f"final output {shape} does not match num_classes={self.num_classes}",
                            len(self.layers) - 1 if self.layers else None)
        return shapes

    def parameter_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """(name, shape) for every parameter in spec order"""
        shape: Tuple[int, ...] = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                out.append((f"layer{i}.weight", (layer.filters, shape[0], layer.kernel, layer.kernel)))
                out.append((f"layer{i}.bias", (layer.filters,)))
            elif layer.kind == "dense":
                out.append((f"layer{i}.weight", (int(np.prod(shape)), layer.units)))
                out.append((f"layer{i}.bias", (layer.units,)))
            shape = _layer_output_shape(layer, shape, i)
        return out


def _positive(value, name: str, index: int) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise SpecError(f"{name} must be a positive integer, got {value!r}", index)
    return int(value)


def _layer_output_shape(layer: LayerSpec, shape: Tuple[int, ...], index: int) -> Tuple[int, ...]:
    kind = layer.kind
    if kind in ("conv2d", "maxpool2d"):
        if len(shape) != 3:
            raise SpecError(f"{kind} needs a C×H×W input, got {shape}", index)
        kernel = _positive(layer.kernel, "kernel", index)
        stride = _positive(layer.stride, "stride", index)
        try:
            if kind == "conv2d":
                filters = _positive(layer.filters, "filters", index)
                padding = layer.padding
                if not isinstance(padding, (int, np.integer)) or padding < 0:
                    raise SpecError(f"padding must be a non-negative integer, got {padding!r}", index)
                return (filters,
                        T.conv_output_size(shape[1], kernel, stride, padding),
                        T.conv_output_size(shape[2], kernel, stride, padding))
            return (shape[0],
                    T.pool_output_size(shape[1], kernel, stride),
                    T.pool_output_size(shape[2], kernel, stride))
        except SpecError:
            raise
        except ConfigurationError as exc:
            raise SpecError(str(exc), index) from exc
    if kind == "dense":
        return (_positive(layer.units, "units", index),)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dropout":
        rate = layer.rate
        if not isinstance(rate, (int, float)) or not 0.0 <= rate < 1.0:
            raise SpecError(f"dropout rate must be in [0, 1), got {rate!r}", index)
        return shape
    return shape  # relu


class Model:
    """
    m_{α,θ}: an ArchitectureSpec plus its named parameters.

    mode is "training" (dropout active) or "inference".
    """

    def __init__(self, spec: ArchitectureSpec, params: Dict[str, T.Tensor], mode: str = "inference"):
        expected = spec.parameter_shapes()
        if [name for name, _ in expected] != list(params):
            raise SpecError(f"parameter names {list(params)} do not match spec {[n for n, _ in expected]}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {params[name].shape}, spec implies {shape}")
        self.spec = spec
        self.params = params
        self.mode = mode

    def train(self) -> "Model":
        self.mode = "training"
        return self

    def eval(self) -> "Model":
        self.mode = "inference"
        return self

    def named_parameters(self) -> Dict[str, T.Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "Model":
        params = {name: T.Tensor(p.data, requires_grad=p.requires_grad) for name, p in self.params.items()}
        return Model(self.spec, params, self.mode)

    def forward(self, x, training: Optional[bool] = None,
                rng: Optional[np.random.Generator] = None, param_grads: bool = True) -> T.Tensor:
        """
        Compute logits.

        Args:
            x: Tensor or array (N, C, H, W)
            training: Override self.mode (None = use mode)
            rng: Generator for dropout masks in training mode
            param_grads: False records no parameter gradients (attacks)

        Returns:
            Logits tensor (N, num_classes)
        """
        h = T.as_tensor(x)
        if h.ndim != 4 or tuple(h.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"input shape {h.shape} does not match N×{self.spec.input_shape}")
        training = self.mode == "training" if training is None else training

        def param(name):
            p = self.params[name]
            return p if param_grads else T.Tensor(p.data, copy=False)

        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "conv2d":
                h = T.conv2d(h, param(f"layer{i}.weight"), param(f"layer{i}.bias"),
                             stride=layer.stride, padding=layer.padding)
            elif layer.kind == "dense":
                if h.ndim != 2:
                    h = T.flatten(h)
                h = T.add(T.matmul(h, param(f"layer{i}.weight")), param(f"layer{i}.bias"))
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "maxpool2d":
                h = T.maxpool2d(h, layer.kernel, layer.stride)
            elif layer.kind == "flatten":
                h = T.flatten(h)
            elif layer.kind == "dropout":
                h = T.dropout(h, layer.rate, rng, training)
        return h

    def loss(self, x, y) -> T.Tensor:
        """Deterministic (inference-mode) mean cross-entropy"""
        return T.softmax_cross_entropy(self.forward(x, training=False), y)


def build(spec: ArchitectureSpec, seed: int) -> Model:
    """
    Initialize a model deterministically from seed.

    He-uniform U(±sqrt(6/fan_in)) for conv/dense weights, zeros for biases.
    """
    spec.infer_shapes()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.parameter_shapes():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, copy=False)
        else:
            params[name] = T.Tensor(np.zeros(shape), requires_grad=True, copy=False)
    return Model(spec, params)


def predict(model: Model, x) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index"""
    with T.no_grad():
        logits = model.forward(x, training=False, param_grads=False)
    return np.argmax(logits.data, axis=1)


# ============== OPTIMIZER ==============

class SGD:
    """
    Plain SGD with optional momentum (v ← μv + g; θ ← θ − ηv).

    Momentum 0 performs θ ← θ − ηg exactly.
    """

    def __init__(self, params: Dict[str, T.Tensor], momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        self.params = params
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, eta: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.momentum:
                v = self.velocity.get(name)
                v = p.grad.copy() if v is None else self.momentum * v + p.grad
                self.velocity[name] = v
                p.apply_update_(eta * v)
            else:
                p.apply_update_(eta * p.grad)

    def velocity_arrays(self) -> Dict[str, np.ndarray]:
        return {name: self.velocity.get(name, np.zeros_like(p.data)) for name, p in self.params.items()}

    def load_velocity(self, arrays: Dict[str, np.ndarray]):
        self.velocity = {name: np.array(arrays[name], dtype=T.DTYPE) for name in self.params}


# ============== SERIALIZATION ==============

_HEADER = struct.Struct("<4sII")   # magic, version, spec length
_COUNT = struct.Struct("<Q")


def encode_model(model: Model) -> bytes:
    spec_bytes = model.spec.to_json().encode("utf-8")
    chunks = [_HEADER.pack(config.MODEL_MAGIC, config.MODEL_FORMAT_VERSION, len(spec_bytes)), spec_bytes]
    for name, _ in model.spec.parameter_shapes():
        data = model.params[name].data
        chunks.append(_COUNT.pack(data.size))
        chunks.append(data.astype("<f8").tobytes())
    return b"".join(chunks)


def decode_model(blob: bytes, source: str = "<bytes>") -> Model:
    if len(blob) < _HEADER.size:
        raise ModelLoadError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, spec_len = _HEADER.unpack_from(blob, 0)
    if magic != config.MODEL_MAGIC:
        raise ModelLoadError(f"{source}: bad magic {magic!r}")
    if version != config.MODEL_FORMAT_VERSION:
        raise ModelLoadError(f"{source}: format version {version}, expected {config.MODEL_FORMAT_VERSION}")
    offset = _HEADER.size
    if offset + spec_len > len(blob):
        raise ModelLoadError(f"{source}: truncated spec at offset {offset}")
    try:
        spec = ArchitectureSpec.from_json(blob[offset:offset + spec_len].decode("utf-8"))
    except (SpecError, UnicodeDecodeError) as exc:
        raise ModelLoadError(f"{source}: spec/param shape disagreement: {exc}") from exc
    offset += spec_len

    params = {}
    for name, shape in spec.parameter_shapes():
        if offset + _COUNT.size > len(blob):
            raise ModelLoadError(f"{source}: truncated before {name} at offset {offset}")
        (count,) = _COUNT.unpack_from(blob, offset)
        offset += _COUNT.size
        expected = int(np.prod(shape))
        if count != expected:
            raise ModelLoadError(f"{source}: {name} stores {count} values, spec implies {expected}")
        end = offset + 8 * count
        if end > len(blob):
            raise ModelLoadError(f"{source}: truncated {name} at offset {offset}")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(T.DTYPE)
        params[name] = T.Tensor(values.reshape(shape), requires_grad=True, copy=False)
        offset = end
    if offset != len(blob):
        raise ModelLoadError(f"{source}: {len(blob) - offset} trailing bytes")
    return Model(spec, params)


def save(model: Model, path: str) -> str:
    """Write the HAPS model container atomically"""
    return atomic_write_bytes(path, encode_model(model))


def load(path: str) -> Model:
    with open(path, "rb") as handle:
        return decode_model(handle.read(), source=path)


def load_architecture(path: str) -> ArchitectureSpec:
    """Standalone architecture JSON (same schema as the embedded spec)"""
    with open(path, "r", encoding="utf-8") as handle:
        return ArchitectureSpec.from_json(handle.read())


def save_architecture(spec: ArchitectureSpec, path: str) -> str:
    return atomic_write_text(path, json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
