"""Small configurable CNNs with the two structural knobs studied here:
the stride of the first convolution and the smoothness of the activation.

Three families are available:

* ``small_cnn``: stem conv + two downsampling conv stages, BN after each conv.
* ``preact_resnet_lite``: stem conv + 3 stages x 2 pre-activation residual
  blocks (widths 32/64/128), a reduced PreActResNet.
* ``patchify_stem_net``: like ``small_cnn`` but the stem uses non-overlapping
  patches (kernel size == stride, no padding).

Whatever the stem stride, the final feature map keeps the size it has at
stride 1: downsampling stages are switched to stride 1 starting from
``compensation_stage``, and an adaptive average pool absorbs any remainder
(stride 3 on 32x32 inputs, for instance).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.functional import conv_output_size

ARCHS = ("small_cnn", "preact_resnet_lite", "patchify_stem_net")


class ConfigError(ValueError):
    """Raised for configurations that cannot be realized."""


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    first_conv_stride: int = 1
    compensation_stage: int = 0
    activation: str = "relu"
    softplus_alpha: float = 2.0
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    width: int = 16
    batch_norm: bool = True

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.first_conv_stride not in (1, 2, 3, 4):
            raise ConfigError("first_conv_stride must be in {1, 2, 3, 4}")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.activation == "softplus_param" and not self.softplus_alpha > 0:
            raise ConfigError("softplus_alpha must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input_shape {self.input_shape}")
        if self.width < 1:
            raise ConfigError("width must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "input_shape" in d:
            d["input_shape"] = tuple(int(v) for v in d["input_shape"])
        return cls(**d)


class Parameter(Tensor):
    """A trainable tensor with a dotted name such as ``conv1.weight``."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, name, c_in, c_out, kernel, stride, padding, bias, rng, dtype):
        fan_in = c_in * kernel * kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.weight = Parameter(w.astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, dtype), f"{name}.bias") if bias else None
        self.stride = stride
        self.padding = padding
        self.kernel = kernel

    def params(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def buffers(self):
        return {}

    def out_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel, self.stride, self.padding)

    def __call__(self, x, train, update_stats):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, name, channels, dtype):
        self.weight = Parameter(np.ones(channels, dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(channels, dtype), f"{name}.bias")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.name = name

    def params(self):
        return [self.weight, self.bias]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def __call__(self, x, train, update_stats):
        return ad.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            train=train, update_stats=update_stats,
        )


class Identity:
    def params(self):
        return []

    def buffers(self):
        return {}

    def __call__(self, x, train, update_stats):
        return x


class Linear:
    def __init__(self, name, n_in, n_out, rng, dtype):
        w = rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_out, n_in))
        self.weight = Parameter(w.astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out, dtype), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def buffers(self):
        return {}

    def __call__(self, x, train, update_stats):
        return ad.linear(x, self.weight, self.bias)


class ConvBlock:
    """conv -> BN -> activation; ``bn=False`` gives the conv a bias instead,
    ``act=None`` skips the activation."""

    def __init__(self, name, c_in, c_out, kernel, stride, padding, act, bn, rng, dtype, bn_name=None):
        self.conv = Conv2d(name, c_in, c_out, kernel, stride, padding, not bn, rng, dtype)
        self.bn = BatchNorm2d(bn_name or f"{name}_bn", c_out, dtype) if bn else Identity()
        self.act = act

    def params(self):
        return self.conv.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def out_size(self, size):
        return self.conv.out_size(size)

    def __call__(self, x, train, update_stats):
        h = self.bn(self.conv(x, train, update_stats), train, update_stats)
        return self.act(h) if self.act is not None else h


class PreActBlock:
    """BN -> act -> conv(stride) -> BN -> act -> conv, plus shortcut."""

    def __init__(self, name, c_in, c_out, stride, act, rng, dtype):
        self.bn1 = BatchNorm2d(f"{name}.bn1", c_in, dtype)
        self.conv1 = Conv2d(f"{name}.conv1", c_in, c_out, 3, stride, 1, False, rng, dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", c_out, dtype)
        self.conv2 = Conv2d(f"{name}.conv2", c_out, c_out, 3, 1, 1, False, rng, dtype)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(f"{name}.shortcut", c_in, c_out, 1, stride, 0, False, rng, dtype)
        self.act = act

    def params(self):
        ps = self.bn1.params() + self.conv1.params() + self.bn2.params() + self.conv2.params()
        if self.shortcut is not None:
            ps += self.shortcut.params()
        return ps

    def buffers(self):
        return {**self.bn1.buffers(), **self.bn2.buffers()}

    def out_size(self, size):
        return self.conv1.out_size(size)

    def __call__(self, x, train, update_stats):
        out = self.act(self.bn1(x, train, update_stats))
        short = self.shortcut(out, train, update_stats) if self.shortcut is not None else x
        out = self.conv1(out, train, update_stats)
        out = self.conv2(self.act(self.bn2(out, train, update_stats)), train, update_stats)
        return out + short


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _plan_strides(stem_out: int, target: int, base: list[int], start: int) -> list[int]:
    """Drop stage strides to 1, beginning at ``start``, until the map is no
    smaller than ``target``."""
    strides = list(base)
    order = [i for i in range(start, len(strides))] + [i for i in range(start)]

    def final(s):
        size = stem_out
        for st in s:
            size = conv_output_size(size, 3, st, 1)
        return size

    for i in order:
        if final(strides) >= target:
            break
        if strides[i] != 1:
            strides[i] = 1
    return strides


class Model:
    """A realized network: ordered parameters, BN buffers and a forward pass."""

    def __init__(self, config: ModelConfig, layers, head_pool: int | None, feature_shape, dtype):
        self.config = config
        self.layers = layers
        self.head_pool = head_pool
        self.feature_shape = feature_shape
        self.dtype = np.dtype(dtype)
        self.final_bn = None
        self.head: Linear | None = None
        self.act = None

    # parameters / buffers ------------------------------------------------
    def _modules(self):
        mods = list(self.layers)
        if self.final_bn is not None:
            mods.append(self.final_bn)
        mods.append(self.head)
        return mods

    def parameters(self) -> list[Parameter]:
        return [p for m in self._modules() for p in m.params()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self._modules():
            out.update(m.buffers())
        return out

    @property
    def first_conv(self) -> Conv2d:
        return self.layers[0].conv

    @property
    def first_conv_weight(self) -> Parameter:
        """Handle to the stem convolution weight (the WeightNorm target)."""
        return self.first_conv.weight

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, v in state.items():
            if k in params:
                if params[k].shape != v.shape:
                    raise ValueError(f"shape mismatch for {k}")
                params[k].data = np.array(v, dtype=self.dtype)
            elif k in bufs:
                bufs[k][...] = v
            else:
                raise KeyError(f"unexpected entry {k}")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # forward ---------------------------------------------------------------
    def features(self, x, train_mode: bool = False, update_stats: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ValueError(f"expected input N x {self.config.input_shape}, got {x.shape}")
        h = x
        for layer in self.layers:
            h = layer(h, train_mode, update_stats)
        if self.head_pool is not None:
            h = ad.adaptive_avg_pool2d(h, self.head_pool)
        if self.final_bn is not None:
            h = self.act(self.final_bn(h, train_mode, update_stats))
        return h

    def forward(self, x, train_mode: bool = False, update_stats: bool = False) -> Tensor:
        h = self.features(x, train_mode, update_stats)
        return self.head(ad.global_avg_pool(h), train_mode, update_stats)

    __call__ = forward


def forward(model: Model, x, train_mode: bool = False, update_stats: bool = False) -> Tensor:
    return model.forward(x, train_mode, update_stats)


def build_model(config: ModelConfig, rng_seed: int = 0, dtype=np.float32) -> Model:
    """Realize ``config`` with deterministic Kaiming fan-in initialization."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    act = ad.activation(config.activation, config.softplus_alpha)
    c, h, w = config.input_shape
    s = config.first_conv_stride
    bn = config.batch_norm

    if config.arch == "preact_resnet_lite":
        widths = [2 * config.width, 4 * config.width, 8 * config.width]
        base = [1, 2, 2]
    else:
        widths = [config.width, 2 * config.width, 4 * config.width]
        base = [2, 2]

    # reference map size: what the stride-1 network produces
    ref = conv_output_size(h, 3, 1, 1)
    for st in base:
        ref = conv_output_size(ref, 3, st, 1)

    if config.arch == "patchify_stem_net":
        kernel, pad = s, 0
    else:
        kernel, pad = (3, 1) if s < 4 else (4, 1)
    stem_out = conv_output_size(h, kernel, s, pad)
    if stem_out < 1:
        raise ConfigError("input too small for the stem")

    if not 0 <= config.compensation_stage < len(base):
        raise ConfigError(f"compensation_stage must be in [0, {len(base)})")
    strides = _plan_strides(stem_out, ref, base, config.compensation_stage)
    final = stem_out
    for st in strides:
        final = conv_output_size(final, 3, st, 1)
    if final < ref:
        raise ConfigError(
            f"stem stride {s} shrinks the final map to {final} < {ref}; no compensation reaches it"
        )
    head_pool = ref if final != ref else None

    layers = []
    if config.arch == "preact_resnet_lite":
        # pre-activation nets have no BN/act right after the stem
        layers.append(ConvBlock("conv1", c, widths[0], kernel, s, pad, None, False, rng, dtype))
        layers[0].conv.bias = None
        c_in = widths[0]
        for i, (width, st) in enumerate(zip(widths, strides)):
            layers.append(PreActBlock(f"layer{i + 1}.0", c_in, width, st, act, rng, dtype))
            layers.append(PreActBlock(f"layer{i + 1}.1", width, width, 1, act, rng, dtype))
            c_in = width
    else:
        layers.append(ConvBlock("conv1", c, widths[0], kernel, s, pad, act, bn, rng, dtype, bn_name="bn1"))
        c_in = widths[0]
        for i, st in enumerate(strides):
            layers.append(ConvBlock(f"stage{i + 1}.conv", c_in, widths[i + 1], 3, st, 1, act, bn, rng, dtype,
                                    bn_name=f"stage{i + 1}.bn"))
            c_in = widths[i + 1]

    model = Model(config, layers, head_pool, (c_in, ref, ref), dtype)
    model.act = act
    if config.arch == "preact_resnet_lite":
        model.final_bn = BatchNorm2d("bn_final", c_in, dtype)
    model.head = Linear("fc", c_in, config.num_classes, rng, dtype)
    model.stage_strides = strides
    names = [p.name for p in model.parameters()]
    if len(names) != len(set(names)):
        raise RuntimeError("duplicate parameter names")
    return model


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      4 bytes  b"FGCK"
#   version    uint32   (currently 1)
#   cfg_len    uint32   length of the UTF-8 JSON blob that follows
#   cfg        cfg_len bytes: {"model": ModelConfig dict, "meta": {...}}
#   count      uint32   number of tensor entries
#   entries    count times:
#       name_len uint16, name (UTF-8)
#       dtype    uint8   (0 = float32, 1 = float64)
#       ndim     uint8, then ndim x uint32 extents
#       data     little-endian row-major values

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: Model, path, meta: dict | None = None) -> Path:
    path = Path(path)
    blob = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.asarray(state[name])
            code = _DTYPE_CODES[arr.dtype]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_CODE_DTYPES[code], copy=False).tobytes(order="C"))
    return path


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    cfg = json.loads(buf[off : off + cfg_len].decode())
    off += cfg_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise ValueError("truncated checkpoint")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        state[name] = arr.astype(dt.newbyteorder("="))
        off += nbytes
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return ModelConfig.from_dict(cfg["model"]), cfg.get("meta", {}), state


def load_checkpoint(path) -> tuple[Model, dict]:
    config, meta, state = read_checkpoint(path)
    dtype = next((v.dtype for k, v in state.items() if k.endswith("weight")), np.float32)
    model = build_model(config, 0, dtype=dtype)
    model.load_state_dict(state)
    return model, meta
