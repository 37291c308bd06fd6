"""Micro-scale residual classifiers exposing logits and tapped activations.

Two convolutional variants share the same stem/stage layout:

* ``micro_resnet_fc``: stages of residual blocks, global average pooling,
  then a dense classification head.
* ``micro_resnet_nofc``: the head is removed; the last stage is built with
  as many channels as there are classes and the pooled activations are the
  logits themselves.

``mlp_probe`` is a small dense network on flattened pixels, used as a
sanity probe on synthetic data.

Every forward pass returns the logits together with the activation tensor
of the last convolutional stage (``tapped_activations``), which is the
input the auxiliary losses consume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, DimensionError
from .tensor import Tensor

__all__ = [
    "ModelSpec",
    "ForwardOutput",
    "default_spec",
    "build",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHITECTURES = ("micro_resnet_fc", "micro_resnet_nofc", "mlp_probe")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"DSC1"


@dataclass
class ModelSpec:
    arch: str
    widths: list[int] = field(default_factory=list)
    blocks: list[int] = field(default_factory=list)
    n_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}, expected one of {ARCHITECTURES}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.arch.startswith("micro_resnet"):
            if not self.widths or len(self.widths) != len(self.blocks):
                raise ConfigError("widths and blocks must be non-empty lists of equal length")
            if any(w < 1 for w in self.widths) or any(b < 1 for b in self.blocks):
                raise ConfigError("widths and blocks entries must be >= 1")
            if self.arch == "micro_resnet_nofc" and self.widths[-1] != self.n_classes:
                raise ConfigError(
                    "micro_resnet_nofc needs the last stage width to equal "
                    f"n_classes ({self.n_classes}), got {self.widths[-1]}"
                )
        if any(w < 0 for w in self.widths):
            raise ConfigError("widths must be non-negative")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "n_classes": self.n_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        spec = cls(
            arch=d["arch"],
            widths=list(d.get("widths", [])),
            blocks=list(d.get("blocks", [])),
            n_classes=int(d["n_classes"]),
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
        )
        spec.validate()
        return spec


def default_spec(arch: str, n_classes: int, input_shape=(3, 32, 32)) -> ModelSpec:
    """Desk-scale defaults: [16, 32, 64] widths, two blocks per stage."""
    if arch == "micro_resnet_fc":
        spec = ModelSpec(arch, [16, 32, 64], [2, 2, 2], n_classes, tuple(input_shape))
    elif arch == "micro_resnet_nofc":
        spec = ModelSpec(arch, [16, 32, n_classes], [2, 2, 2], n_classes, tuple(input_shape))
    elif arch == "mlp_probe":
        spec = ModelSpec(arch, [64], [], n_classes, tuple(input_shape))
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    spec.validate()
    return spec


@dataclass
class ForwardOutput:
    logits: Tensor
    tapped_activations: Tensor


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    # fan-in-scaled uniform: U(-sqrt(6/fan_in), +sqrt(6/fan_in))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Conv2d:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, dtype=np.float64):
        self.stride = stride
        self.padding = padding
        self.weight = _uniform_init(rng, (cout, cin, k, k), cin * k * k, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def tensors(self, prefix):
        return [(f"{prefix}.weight", self.weight.data)]

    def params(self):
        return [self.weight]


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            out = T.batch_norm_2d(x, self.gamma, self.beta, eps=BN_EPS)
            batch_mean = x.data.mean(axis=(0, 2, 3))
            batch_var = x.data.var(axis=(0, 2, 3))
            self.running_mean[:] = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * batch_mean
            self.running_var[:] = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * batch_var
            return out
        return T.batch_norm_2d(
            x, self.gamma, self.beta, eps=BN_EPS,
            running_stats=(self.running_mean, self.running_var),
        )

    def tensors(self, prefix):
        return [
            (f"{prefix}.gamma", self.gamma.data),
            (f"{prefix}.beta", self.beta.data),
            (f"{prefix}.running_mean", self.running_mean),
            (f"{prefix}.running_var", self.running_var),
        ]

    def params(self):
        return [self.gamma, self.beta]


class Dense:
    def __init__(self, rng, n_in, n_out, dtype=np.float64):
        self.weight = _uniform_init(rng, (n_in, n_out), n_in, dtype)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def tensors(self, prefix):
        return [(f"{prefix}.weight", self.weight.data), (f"{prefix}.bias", self.bias.data)]

    def params(self):
        return [self.weight, self.bias]


class ResidualBlock:
    """conv-bn-relu-conv-bn plus a shortcut, relu after the sum.

    The first block of a stage may downsample (stride 2) and/or change the
    channel count; the shortcut is then a 1x1 strided projection with its
    own normalization.
    """

    def __init__(self, rng, cin, cout, stride, dtype=np.float64):
        self.conv1 = Conv2d(rng, cin, cout, 3, stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(rng, cout, cout, 3, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(rng, cin, cout, 1, stride=stride, padding=0, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), train))
        h = self.bn2(self.conv2(h), train)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), train)
        return T.relu(h + shortcut)

    def tensors(self, prefix):
        out = self.conv1.tensors(f"{prefix}.conv1") + self.bn1.tensors(f"{prefix}.bn1")
        out += self.conv2.tensors(f"{prefix}.conv2") + self.bn2.tensors(f"{prefix}.bn2")
        if self.proj is not None:
            out += self.proj.tensors(f"{prefix}.proj") + self.proj_bn.tensors(f"{prefix}.proj_bn")
        return out

    def params(self):
        out = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.proj is not None:
            out += self.proj.params() + self.proj_bn.params()
        return out


class MicroResNet:
    def __init__(self, spec: ModelSpec, rng, dtype=np.float64):
        self.spec = spec
        cin = spec.input_shape[0]
        self.stem = Conv2d(rng, cin, spec.widths[0], 3, stride=1, padding=1, dtype=dtype)
        self.stem_bn = BatchNorm2d(spec.widths[0], dtype=dtype)
        self.blocks: list[ResidualBlock] = []
        prev = spec.widths[0]
        for stage, (width, count) in enumerate(zip(spec.widths, spec.blocks)):
            for b in range(count):
                stride = 2 if stage > 0 and b == 0 else 1
                self.blocks.append(ResidualBlock(rng, prev, width, stride, dtype=dtype))
                prev = width
        if spec.arch == "micro_resnet_fc":
            self.head = Dense(rng, spec.widths[-1], spec.n_classes, dtype=dtype)
        else:
            self.head = None

    def forward(self, x: Tensor, train: bool = False) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1:] != tuple(self.spec.input_shape):
            raise DimensionError(
                f"input shape {x.shape} does not match spec {self.spec.input_shape}"
            )
        h = T.relu(self.stem_bn(self.stem(x), train))
        for block in self.blocks:
            h = block(h, train)
        tapped = h
        pooled = T.global_avg_pool(tapped)
        logits = pooled if self.head is None else self.head(pooled)
        return ForwardOutput(logits=logits, tapped_activations=tapped)

    def parameters(self):
        out = self.stem.params() + self.stem_bn.params()
        for block in self.blocks:
            out += block.params()
        if self.head is not None:
            out += self.head.params()
        return out

    def state_arrays(self):
        out = self.stem.tensors("stem") + self.stem_bn.tensors("stem_bn")
        for i, block in enumerate(self.blocks):
            out += block.tensors(f"block{i}")
        if self.head is not None:
            out += self.head.tensors("head")
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class MlpProbe:
    def __init__(self, spec: ModelSpec, rng, dtype=np.float64):
        self.spec = spec
        c, h, w = spec.input_shape
        n_in = c * h * w
        self.hidden: list[Dense] = []
        prev = n_in
        for width in spec.widths:
            self.hidden.append(Dense(rng, prev, width, dtype=dtype))
            prev = width
        self.out = Dense(rng, prev, spec.n_classes, dtype=dtype)

    def forward(self, x: Tensor, train: bool = False) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1:] != tuple(self.spec.input_shape):
            raise DimensionError(
                f"input shape {x.shape} does not match spec {self.spec.input_shape}"
            )
        m = x.shape[0]
        h = T.reshape(x, (m, x.size // m))
        for layer in self.hidden:
            h = T.relu(layer(h))
        tapped = T.reshape(h, (m, h.shape[1], 1, 1))
        logits = self.out(T.reshape(tapped, (m, h.shape[1])))
        return ForwardOutput(logits=logits, tapped_activations=tapped)

    def parameters(self):
        out = []
        for layer in self.hidden:
            out += layer.params()
        return out + self.out.params()

    def state_arrays(self):
        out = []
        for i, layer in enumerate(self.hidden):
            out += layer.tensors(f"hidden{i}")
        return out + self.out.tensors("out")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def build(spec: ModelSpec, seed: int, dtype=np.float64):
    """Deterministically initialized model; same seed, same bits."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if spec.arch == "mlp_probe":
        return MlpProbe(spec, rng, dtype=dtype)
    return MicroResNet(spec, rng, dtype=dtype)


def parameter_count(model) -> int:
    return sum(p.size for p in model.parameters())


def save_checkpoint(model, path) -> None:
    """Binary layout: magic ``DSC1``, little-endian uint32 header length,
    JSON header (model spec plus tensor names and shapes in build order),
    then each tensor as raw little-endian float32."""
    entries = model.state_arrays()
    header = {
        "spec": model.spec.to_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float64):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    (blob_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + blob_len].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        tensor_list = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
    model = build(spec, seed=0, dtype=dtype)
    entries = model.state_arrays()
    if [[n, list(a.shape)] for n, a in entries] != tensor_list:
        raise DataFormatError(f"{path}: checkpoint tensors do not match the spec layout")
    offset = 8 + blob_len
    for _, arr in entries:
        nbytes = arr.size * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataFormatError(f"{path}: truncated checkpoint payload")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape).astype(arr.dtype)
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: trailing bytes after checkpoint payload")
    return model
