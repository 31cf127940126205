"""The two classifier architectures: a small ConvNet and a four-block residual net.

Both end in a 256-unit ReLU bottleneck (the latent space) followed by a
3-unit output layer that emits raw logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .engine import (
    RunningStats,
    Tensor,
    add,
    batchnorm2d,
    checkpoint,
    conv2d,
    dense,
    flatten,
    global_avg_pool,
    maxpool2d,
    relu,
)
from .engine.ops import softmax_array
from .errors import ConfigError, ShapeError, StateError

ARCHITECTURES = ("convnet", "miniresnet")
LATENT_DIM = 256
N_CLASSES = 3


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "convnet"
    input_size: tuple[int, int, int] = (3, 64, 64)
    latent_dim: int = LATENT_DIM
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.latent_dim != LATENT_DIM:
            raise ConfigError("latent dimension is fixed at 256")
        if self.n_classes != N_CLASSES:
            raise ConfigError("output layer must have exactly 3 units")
        c, h, w = self.input_size
        if h < 32 or w < 32 or h % 4 or w % 4:
            raise ConfigError(f"input H, W must be >= 32 and divisible by 4, got {h}x{w}")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name: str

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> dict[str, RunningStats]:
        return {}


class Conv(Layer):
    def __init__(self, name, cin, cout, kernel, rng, dtype, stride=1, padding=0):
        self.name, self.stride, self.padding = name, stride, padding
        fan_in = cin * kernel * kernel
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Layer):
    def __init__(self, name, channels, dtype):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running = RunningStats.init(channels, dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {self.name: self.running}

    def __call__(self, x, training):
        return batchnorm2d(x, self.gamma, self.beta, self.running, training)


class Dense(Layer):
    def __init__(self, name, din, dout, rng, dtype):
        self.name = name
        self.weight = Tensor(_kaiming_uniform(rng, (din, dout), din, dtype), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        return dense(x, self.weight, self.bias)


class ReLU(Layer):
    def __init__(self, name):
        self.name = name

    def __call__(self, x, training):
        return relu(x)


class MaxPool(Layer):
    def __init__(self, name, kernel=2):
        self.name, self.kernel = name, kernel

    def __call__(self, x, training):
        return maxpool2d(x, self.kernel, self.kernel)


class Flatten(Layer):
    def __init__(self, name):
        self.name = name

    def __call__(self, x, training):
        return flatten(x)


class GlobalAvgPool(Layer):
    def __init__(self, name):
        self.name = name

    def __call__(self, x, training):
        return global_avg_pool(x)


class ResidualBlock(Layer):
    """conv3x3-BN-ReLU-conv3x3-BN plus shortcut, then ReLU.

    A 1x1 projection (conv + BN) is used when the channel count or
    resolution changes.
    """

    def __init__(self, name, cin, cout, stride, rng, dtype):
        self.name = name
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, rng, dtype, stride=stride, padding=1)
        self.bn1 = BatchNorm(f"{name}.bn1", cout, dtype)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, rng, dtype, stride=1, padding=1)
        self.bn2 = BatchNorm(f"{name}.bn2", cout, dtype)
        self.proj = None
        if cin != cout or stride != 1:
            self.proj = Conv(f"{name}.proj", cin, cout, 1, rng, dtype, stride=stride)
            self.proj_bn = BatchNorm(f"{name}.proj_bn", cout, dtype)

    def _parts(self):
        parts = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj is not None:
            parts += [self.proj, self.proj_bn]
        return parts

    def parameters(self):
        return [p for part in self._parts() for p in part.parameters()]

    def buffers(self):
        out = {}
        for part in self._parts():
            out.update(part.buffers())
        return out

    def __call__(self, x, training):
        h = relu(self.bn1(self.conv1(x, training), training))
        h = self.bn2(self.conv2(h, training), training)
        short = x if self.proj is None else self.proj_bn(self.proj(x, training), training)
        return relu(add(h, short))


def _convnet_features(spec: ModelSpec, rng, dtype) -> tuple[list[Layer], int]:
    c, h, w = spec.input_size
    layers: list[Layer] = []
    for i, (cin, cout, k, pad) in enumerate([(c, 8, 5, 2), (8, 16, 3, 1), (16, 32, 3, 1)], start=1):
        layers += [
            Conv(f"conv{i}", cin, cout, k, rng, dtype, padding=pad),
            ReLU(f"relu{i}"),
            BatchNorm(f"bn{i}", cout, dtype),
            MaxPool(f"pool{i}"),
        ]
        h, w = h // 2, w // 2
    layers.append(Flatten("flatten"))
    return layers, 32 * h * w


def _miniresnet_features(spec: ModelSpec, rng, dtype) -> tuple[list[Layer], int]:
    c = spec.input_size[0]
    layers: list[Layer] = [
        Conv("stem", c, 16, 3, rng, dtype, padding=1),
        BatchNorm("stem_bn", 16, dtype),
        ReLU("stem_relu"),
    ]
    cin = 16
    for i, (cout, stride) in enumerate([(16, 1), (32, 2), (64, 2), (128, 2)], start=1):
        layers.append(ResidualBlock(f"block{i}", cin, cout, stride, rng, dtype))
        cin = cout
    layers.append(GlobalAvgPool("gap"))
    return layers, cin


class ModelState:
    """Architecture, parameters, batch-norm statistics and the train/eval flag.

    The mode starts unset; call :meth:`train` or :meth:`eval` before any
    forward pass.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.mode: Optional[str] = None
        rng = np.random.default_rng(seed)
        build = _convnet_features if spec.arch == "convnet" else _miniresnet_features
        self.features, flat = build(spec, rng, dtype)
        self.flat_dim = flat
        self.bottleneck = Dense("bottleneck", flat, spec.latent_dim, rng, dtype)
        self.output = Dense("output", spec.latent_dim, spec.n_classes, rng, dtype)

    def layers(self) -> Iterator[Layer]:
        yield from self.features
        yield self.bottleneck
        yield self.output

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for layer in self.layers() for p in layer.parameters()}

    def buffers(self) -> dict[str, RunningStats]:
        out = {}
        for layer in self.layers():
            out.update(layer.buffers())
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def train(self) -> "ModelState":
        self.mode = "train"
        return self

    def eval(self) -> "ModelState":
        self.mode = "eval"
        return self

    @property
    def dtype(self):
        return self.bottleneck.weight.data.dtype

    def astype(self, dtype) -> "ModelState":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        for rs in self.buffers().values():
            rs.mean = rs.mean.astype(dtype)
            rs.var = rs.var.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        for name, rs in self.buffers().items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.buffers()
        expected = set(params) | {f"{n}.running_{k}" for n in buffers for k in ("mean", "var")}
        if set(arrays) != expected:
            missing, extra = expected - set(arrays), set(arrays) - expected
            raise ShapeError(f"checkpoint does not match model (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint dims {arrays[name].shape} vs model {p.data.shape}")
            p.data = np.array(arrays[name], dtype=p.data.dtype)
        for name, rs in buffers.items():
            rs.mean = np.array(arrays[f"{name}.running_mean"], dtype=rs.mean.dtype)
            rs.var = np.array(arrays[f"{name}.running_var"], dtype=rs.var.dtype)

    def copy(self) -> "ModelState":
        other = ModelState(self.spec, self.seed, self.dtype)
        other.load_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        other.mode = self.mode
        return other


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelState:
    return ModelState(spec, seed, dtype)


def forward(model: ModelState, batch) -> tuple[Tensor, Tensor]:
    """Full forward pass; returns (latents N x 256, logits N x 3)."""
    if model.mode is None:
        raise StateError("model mode is unset; call model.train() or model.eval() first")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if tuple(x.dims[1:]) != model.spec.input_size:
        raise ShapeError(f"batch dims {x.dims} do not match model input {model.spec.input_size}")
    training = model.mode == "train"
    for layer in model.features:
        x = layer(x, training)
    latent = relu(model.bottleneck(x, training))
    logits = model.output(latent, training)
    return latent, logits


def truncated_head(model: ModelState, latents) -> Tensor:
    """Logits from latents using only the layers after the bottleneck."""
    if model.mode != "eval":
        raise StateError("truncated_head requires eval mode")
    z = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents, dtype=model.dtype))
    if z.dims[-1] != model.spec.latent_dim:
        raise ShapeError(f"latent length {z.dims[-1]} != {model.spec.latent_dim}")
    return model.output(z, False)


def layer_summary(model: ModelState) -> list[tuple[str, tuple[int, ...], int]]:
    """(layer name, per-example output dims, trainable parameter count) for each layer."""
    saved = model.mode
    model.eval()
    x = Tensor(np.zeros((1,) + model.spec.input_size, dtype=model.dtype))
    rows = []
    for layer in model.features:
        x = layer(x, False)
        rows.append((layer.name, x.dims[1:], sum(p.data.size for p in layer.parameters())))
    z = model.bottleneck(x, False)
    rows.append(("bottleneck", z.dims[1:], sum(p.data.size for p in model.bottleneck.parameters())))
    z = model.output(relu(z), False)
    rows.append(("output", z.dims[1:], sum(p.data.size for p in model.output.parameters())))
    model.mode = saved
    return rows


def embed(model: ModelState, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode latents and logits for a stack of images (no graph recorded)."""
    if model.mode != "eval":
        raise StateError("embed requires eval mode")
    lat, log = [], []
    for start in range(0, len(images), batch_size):
        z, y = forward(model, np.asarray(images[start:start + batch_size], dtype=model.dtype))
        lat.append(z.data)
        log.append(y.data)
    if not lat:
        return (np.zeros((0, model.spec.latent_dim), model.dtype), np.zeros((0, model.spec.n_classes), model.dtype))
    return np.concatenate(lat), np.concatenate(log)


def predict_proba(model: ModelState, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return softmax_array(embed(model, images, batch_size)[1].astype(np.float64))


def save_model(model: ModelState, directory, stem: str = "model", **meta) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    checkpoint.save(directory / f"{stem}.ckpt", model.state_arrays())
    sidecar = {"spec": asdict(model.spec), "seed": model.seed, **meta}
    (directory / "model.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(directory, stem: str = "best") -> ModelState:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    spec = meta["spec"]
    model = build_model(ModelSpec(spec["arch"], tuple(spec["input_size"]), spec["latent_dim"], spec["n_classes"]),
                        meta.get("seed", 0))
    model.load_arrays(checkpoint.load(directory / f"{stem}.ckpt"))
    return model.eval()
