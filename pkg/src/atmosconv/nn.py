"""Layers, model builders and the checkpoint format."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError, ShapeError
from .filters import DEFAULT_EPS, normalize_filter_bank
from .tensor import Tensor

ARCHITECTURES = ("tiny_cnn", "mini_resnet")
CONV_MODES = ("vanilla", "normalized")
NORM_LAYERS = ("none", "batch", "instance")
CKPT_FORMAT = "atmosconv-ckpt-1"


class Layer:
    """Base layer: owns named parameters, buffers and sub-layers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: list[tuple[str, "Layer"]] = []

    def param(self, name: str, shape) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, layer: "Layer") -> "Layer":
        self._children.append((name, layer))
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for n, c in self._children:
            yield from c.named_parameters(f"{prefix}{n}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for n, c in self._children:
            yield from c.named_buffers(f"{prefix}{n}.")

    def named_layers(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        for n, c in self._children:
            yield prefix + n, c
            yield from c.named_layers(f"{prefix}{n}.")

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train)


class Conv2d(Layer):
    """Plain convolution with optional per-channel bias."""

    is_conv = True

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        self.weight = self.param("weight", (cout, cin, k, k))
        self.bias = self.param("bias", (cout,)) if bias else None

    def effective_weight(self) -> Tensor:
        return self.weight

    def forward(self, x, train=False):
        y = F.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, self.cout, 1, 1))
        return y


class NormConv2d(Layer):
    """Convolution whose kernel is rebuilt from raw weights at every call:
    each output-channel block has its positive and negative parts scaled to
    unit L1 mass, then the response gets a learnable per-channel scale and
    shift (omitted when a batch norm follows)."""

    is_conv = True

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 padding: Optional[int] = None, use_affine: bool = True,
                 eps: float = DEFAULT_EPS):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        self.eps = eps
        self.use_affine = use_affine
        self.weight = self.param("weight", (cout, cin, k, k))
        if use_affine:
            self.scale = self.param("scale", (cout,))
            self.scale.data[...] = 1.0
            self.shift = self.param("shift", (cout,))

    def effective_weight(self) -> Tensor:
        return normalize_filter_bank(self.weight, self.eps)

    def forward(self, x, train=False):
        y = F.conv2d(x, self.effective_weight(), self.stride, self.padding)
        if self.use_affine:
            shape = (1, self.cout, 1, 1)
            y = y * T.reshape(self.scale, shape) + T.reshape(self.shift, shape)
        return y


class Norm2d(Layer):
    """Batch or instance normalization with a learnable per-channel affine.

    Batch mode keeps running statistics for evaluation; instance mode always
    standardizes each sample with its own statistics.
    """

    def __init__(self, channels: int, mode: str = "batch", eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        if mode not in ("batch", "instance"):
            raise ConfigError(f"unknown norm mode {mode!r}")
        self.mode, self.eps, self.momentum = mode, eps, momentum
        self.gamma = self.param("gamma", (channels,))
        self.gamma.data[...] = 1.0
        self.beta = self.param("beta", (channels,))
        if mode == "batch":
            self._buffers["running_mean"] = np.zeros(channels)
            self._buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=False):
        if self.mode == "instance":
            return F.standardize(x, self.gamma, self.beta, (2, 3), self.eps)[0]
        if not train:
            return F.standardize(x, self.gamma, self.beta, (0, 2, 3), self.eps,
                                 self._buffers["running_mean"], self._buffers["running_var"])[0]
        n, _, h, w = x.shape
        if n < 2:
            raise ConfigError("batch norm in training mode needs a batch of at least 2")
        y, mu, var = F.standardize(x, self.gamma, self.beta, (0, 2, 3), self.eps)
        m = n * h * w
        mom = self.momentum
        rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
        rm *= 1 - mom
        rm += mom * mu.reshape(-1)
        rv *= 1 - mom
        rv += mom * var.reshape(-1) * (m / max(m - 1, 1))
        return y


class ReLU(Layer):
    def forward(self, x, train=False):
        return T.relu(x)


class MaxPool2(Layer):
    def forward(self, x, train=False):
        return F.max_pool2d(x)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        return F.global_avg_pool(x)


class Linear(Layer):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = self.param("weight", (cin, cout))
        self.bias = self.param("bias", (cout,))

    def forward(self, x, train=False):
        return T.matmul(x, self.weight) + self.bias


def make_conv(cfg: "ModelConfig", cin: int, cout: int, k: int = 3, stride: int = 1) -> Layer:
    if cfg.conv_mode == "normalized":
        return NormConv2d(cin, cout, k, stride, use_affine=cfg.use_affine, eps=cfg.eps)
    return Conv2d(cin, cout, k, stride, bias=cfg.norm_layer == "none")


def make_norm(cfg: "ModelConfig", channels: int) -> Optional[Layer]:
    return None if cfg.norm_layer == "none" else Norm2d(channels, cfg.norm_layer)


class ResidualBlock(Layer):
    """conv-norm-relu-conv-norm plus (projected) shortcut, then relu."""

    def __init__(self, cfg: "ModelConfig", cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv_a = self.child("conv_a", make_conv(cfg, cin, cout, 3, stride))
        self.norm_a = make_norm(cfg, cout)
        if self.norm_a:
            self.child("norm_a", self.norm_a)
        self.conv_b = self.child("conv_b", make_conv(cfg, cout, cout, 3, 1))
        self.norm_b = make_norm(cfg, cout)
        if self.norm_b:
            self.child("norm_b", self.norm_b)
        self.proj = self.proj_norm = None
        if stride != 1 or cin != cout:
            self.proj = self.child("proj", make_conv(cfg, cin, cout, 1, stride))
            self.proj_norm = make_norm(cfg, cout)
            if self.proj_norm:
                self.child("proj_norm", self.proj_norm)

    def forward(self, x, train=False):
        y = self.conv_a(x, train)
        if self.norm_a:
            y = self.norm_a(y, train)
        y = self.conv_b(T.relu(y), train)
        if self.norm_b:
            y = self.norm_b(y, train)
        s = x
        if self.proj is not None:
            s = self.proj(x, train)
            if self.proj_norm:
                s = self.proj_norm(s, train)
        return T.relu(y + s)


@dataclass
class ModelConfig:
    """Experiment knobs for :func:`build_model`.

    ``width`` is the first stage's channel count (doubled per stage).
    ``depth`` is the number of conv pairs for ``tiny_cnn`` and the number of
    residual blocks per stage for ``mini_resnet``. ``affine`` forces the
    normalized conv's scale/shift on or off; ``auto`` drops them only in
    front of batch norm.
    """

    architecture: str = "tiny_cnn"
    conv_mode: str = "vanilla"
    norm_layer: str = "batch"
    width: int = 16
    depth: int = 3
    num_classes: int = 10
    in_channels: int = 3
    seed: int = 0
    eps: float = DEFAULT_EPS
    affine: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if self.norm_layer not in NORM_LAYERS:
            raise ConfigError(f"norm_layer must be one of {NORM_LAYERS}, got {self.norm_layer!r}")
        if self.affine not in ("auto", "on", "off"):
            raise ConfigError(f"affine must be auto/on/off, got {self.affine!r}")
        if min(self.width, self.depth, self.in_channels) < 1 or self.num_classes < 2:
            raise ConfigError("width, depth, in_channels must be >= 1 and num_classes >= 2")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.conv_mode == "normalized" and self.norm_layer == "batch" and self.affine == "on":
            raise ConfigError("normalized conv followed by batch norm must not carry its own scale/shift")

    @property
    def use_affine(self) -> bool:
        if self.affine == "auto":
            return self.norm_layer != "batch"
        return self.affine == "on"

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = _coerce(v, types[k])
        return cls(**kw)

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


def _coerce(v: str, typ) -> object:
    name = typ if isinstance(typ, str) else typ.__name__
    if name == "int":
        return int(v)
    if name == "float":
        return float(v)
    return v


class Model:
    """Ordered list of named top-level layers ending in logits."""

    def __init__(self, layers: list[tuple[str, Layer]], config: ModelConfig):
        self.layers = layers
        self.config = config

    def forward(self, x, train: bool = False, taps: Optional[dict] = None) -> Tensor:
        """Logits for an (N, C, H, W) batch. Outputs of top-level layers are
        stored in ``taps`` when their names are already keys of it."""
        x = T.as_tensor(x)
        for name, layer in self.layers:
            x = layer(x, train)
            if taps is not None and name in taps:
                taps[name] = x
        return x

    __call__ = forward

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for n, layer in self.layers:
            out.update(layer.named_parameters(n + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for n, layer in self.layers:
            out.update(layer.named_buffers(n + "."))
        return out

    def named_layers(self) -> list[tuple[str, Layer]]:
        out = []
        for n, layer in self.layers:
            out.append((n, layer))
            out.extend(layer.named_layers(n + "."))
        return out

    def conv_layers(self) -> list[tuple[str, Layer]]:
        return [(n, l) for n, l in self.named_layers() if getattr(l, "is_conv", False)]

    def effective_kernels(self) -> list[tuple[str, np.ndarray]]:
        with T.no_grad():
            return [(n, l.effective_weight().data.copy()) for n, l in self.conv_layers()]

    def raw_kernels(self) -> list[Tensor]:
        return [l.weight for _, l in self.conv_layers()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) for every parameter, then every buffer."""
        return list(self._arrays())

    def copy_state_from(self, other: "Model") -> None:
        mine = dict((n, v) for n, v in self._arrays())
        for n, v in other._arrays():
            if n not in mine or mine[n].shape != v.shape:
                raise ShapeError(f"state entry {n} does not match")
            mine[n][...] = v

    def _arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for n, p in self.named_parameters().items():
            yield n, p.data
        yield from self.named_buffers().items()


def _tiny_cnn(cfg: ModelConfig) -> list[tuple[str, Layer]]:
    layers: list[tuple[str, Layer]] = []
    cin = cfg.in_channels
    idx = 0
    for stage in range(cfg.depth):
        cout = cfg.width * 2 ** stage
        for _ in range(2):
            idx += 1
            layers.append((f"conv{idx}", make_conv(cfg, cin, cout)))
            norm = make_norm(cfg, cout)
            if norm:
                layers.append((f"norm{idx}", norm))
            layers.append((f"relu{idx}", ReLU()))
            cin = cout
        if stage < cfg.depth - 1:
            layers.append((f"pool{stage + 1}", MaxPool2()))
    layers.append(("gap", GlobalAvgPool()))
    layers.append(("fc", Linear(cin, cfg.num_classes)))
    return layers


def _mini_resnet(cfg: ModelConfig) -> list[tuple[str, Layer]]:
    w = cfg.width
    layers: list[tuple[str, Layer]] = [("stem", make_conv(cfg, cfg.in_channels, w))]
    norm = make_norm(cfg, w)
    if norm:
        layers.append(("stem_norm", norm))
    layers.append(("stem_relu", ReLU()))
    cin = w
    for stage in range(3):
        cout = w * 2 ** stage
        for b in range(cfg.depth):
            stride = 2 if stage > 0 and b == 0 else 1
            layers.append((f"stage{stage + 1}_block{b + 1}", ResidualBlock(cfg, cin, cout, stride)))
            cin = cout
    layers.append(("gap", GlobalAvgPool()))
    layers.append(("fc", Linear(cin, cfg.num_classes)))
    return layers


def build_model(config: ModelConfig, init: bool = True) -> Model:
    """tiny_cnn: ``depth`` pairs of 3x3 convs (width doubling per pair, 2x2
    max pool between pairs), global average pool, linear head.
    mini_resnet: stem conv, three stages of ``depth`` residual blocks, head.
    """
    config.validate()
    builder = _tiny_cnn if config.architecture == "tiny_cnn" else _mini_resnet
    model = Model(builder(config), config)
    if init:
        init_params(model, config.seed)
    return model


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def init_params(model: Model, seed: int) -> None:
    """He-uniform raw weights (bound sqrt(6 / fan_in)), zero biases and
    shifts, unit scales. Each tensor has its own stream keyed by its name, so
    layers shared across conv modes get identical values."""
    for name, p in model.named_parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            bound = math.sqrt(6.0 / fan_in)
            p.data[...] = _layer_rng(seed, name).uniform(-bound, bound, size=p.shape)
        elif leaf in ("scale", "gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.grad = None
    for name, b in model.named_buffers().items():
        b[...] = 1.0 if name.endswith("running_var") else 0.0


def init_std_target(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def affine_parameter_count(model: Model) -> int:
    """Scale + shift parameters that normalized convs carry (or would carry)
    with the affine enabled: two per output channel."""
    return 2 * sum(l.cout for _, l in model.conv_layers())


# ---------------------------------------------------------------------------
# checkpoint: one JSON header line, then little-endian float64 in header order


def save_checkpoint(model: Model, path) -> None:
    entries = model.state()
    header = {
        "format": CKPT_FORMAT,
        "config": asdict(model.config),
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl])
    if header.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    off = nl + 1
    arrays = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = off + 8 * count
        if end > len(raw):
            raise ConfigError(f"{path}: truncated at entry {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
        off = end
    if off != len(raw):
        raise ConfigError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Model:
    """Rebuild a model from a checkpoint. If ``expect`` is given and differs
    from the stored config a ConfigError is raised."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    if expect is not None and asdict(expect) != asdict(cfg):
        raise ConfigError(f"checkpoint config {asdict(cfg)} does not match {asdict(expect)}")
    model = build_model(cfg, init=False)
    state = dict(model._arrays())
    if set(state) != set(arrays):
        raise ConfigError(f"{path}: entries do not match the model built from its config")
    for n, a in arrays.items():
        if state[n].shape != a.shape:
            raise ShapeError(f"{path}: entry {n} has shape {a.shape}, model wants {state[n].shape}")
        state[n][...] = a
    return model
