"""ResNet34-UNet: ResNet-34 encoder, five-block upsampling decoder, sigmoid head.

Layout at 512x512 input (channels at width 1.0)::

    conv1    7x7/2 + BN + ReLU        256x256x64
    maxpool  3x3/2                    128x128x64
    encoder1 3 basic blocks           128x128x64
    encoder2 4 basic blocks           64x64x128
    encoder3 6 basic blocks           32x32x256
    encoder4 3 basic blocks           16x16x512
    decoder1 up, [., encoder3] -> 768 32x32x256
    decoder2 up, [., encoder2] -> 384 64x64x128
    decoder3 up, [., encoder1] -> 192 128x128x64
    decoder4 up, [., conv1]    -> 128 256x256x32
    decoder5 up                       512x512x16
    conv2    3x3 -> 1, sigmoid        512x512x1

Weights carry no resolution-dependent state, so a model trained at 256 runs
unchanged at 512.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import BatchNormState, Tensor, ops

BLOCKS = (3, 4, 6, 3)
ENCODER_CHANNELS = (64, 128, 256, 512)
DECODER_CHANNELS = (256, 128, 64, 32, 16)


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported dtype code, or truncated checkpoint file."""


class CheckpointMismatchError(ValueError):
    """Checkpoint tensors do not fit the model; lists every offender."""


@dataclass
class ModelConfig:
    in_channels: int = 3
    width_multiplier: float = 1.0
    include_channel_adapter: bool = False
    encoder1_projection: bool = False  # 1x1 projection on the first Encoder1 block even at stride 1

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        base = self.width_multiplier * 64
        if abs(base - round(base)) > 1e-9 or round(base) < 1:
            raise ValueError(f"width_multiplier*64 must be a positive integer, got {base}")
        if self.include_channel_adapter and self.in_channels != 1:
            raise ValueError("the channel adapter maps 1 channel to 3; in_channels must be 1")

    def scaled(self, channels):
        return max(1, int(round(channels * self.width_multiplier)))


class Module:
    """Minimal container: parameters, buffers, train/eval switch."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self):
        return {}

    def _own_buffers(self):
        return {}

    def named_parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self._own_parameters().items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self._own_buffers().items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
            if isinstance(m, BatchNorm2d):
                m.state.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, bias=False, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        w = rng.standard_normal((cout, cin, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def _own_parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        self.state = BatchNormState(channels, dtype=dtype)

    def _own_parameters(self):
        return {"weight": self.state.gamma, "bias": self.state.beta}

    def _own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x):
        return ops.batchnorm2d(x, self.state)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=1, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cout, kernel, stride, padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    """Two 3x3 conv+BN with a residual add; projection shortcut when shape changes."""

    def __init__(self, cin, cout, stride=1, rng=None, dtype=np.float32, project=False):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if project or stride != 1 or cin != cout:
            self.downsample_conv = Conv2d(cin, cout, 1, stride, 0, rng=rng, dtype=dtype)
            self.downsample_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.downsample_conv = None

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.downsample_conv is None else self.downsample_bn(self.downsample_conv(x))
        return ops.relu(ops.add(out, skip))


class DecoderBlock(Module):
    """Nearest 2x upsample, optional skip concat, two conv+BN+ReLU sets."""

    def __init__(self, cin, skip, cout, rng=None, dtype=np.float32):
        self.skip_channels = skip
        self.block1 = ConvBNReLU(cin + skip, cout, rng=rng, dtype=dtype)
        self.block2 = ConvBNReLU(cout, cout, rng=rng, dtype=dtype)

    def forward(self, x, skip=None, features=None, tag=None):
        x = ops.upsample_nearest_2x(x)
        if features is not None:
            features[f"{tag}_upsample"] = x.shape
        if skip is not None:
            x = ops.concat_channels(x, skip)
            if features is not None:
                features[f"{tag}_concat"] = x.shape
        return self.block2(self.block1(x))


class ResNet34UNet(Module):
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        enc = [config.scaled(c) for c in ENCODER_CHANNELS]
        dec = [config.scaled(c) for c in DECODER_CHANNELS]
        cin = config.in_channels
        if config.include_channel_adapter:
            self.adapter = Conv2d(1, 3, 1, bias=True, rng=rng, dtype=dtype)
            cin = 3
        else:
            self.adapter = None
        self.conv1 = ConvBNReLU(cin, enc[0], kernel=7, stride=2, padding=3, rng=rng, dtype=dtype)
        self.encoders = []
        prev = enc[0]
        for stage, (blocks, ch) in enumerate(zip(BLOCKS, enc)):
            stride = 1 if stage == 0 else 2
            layer = [BasicBlock(prev, ch, stride, rng=rng, dtype=dtype,
                                project=stage == 0 and config.encoder1_projection)]
            layer += [BasicBlock(ch, ch, 1, rng=rng, dtype=dtype) for _ in range(blocks - 1)]
            self.encoders.append(Sequential(layer))
            prev = ch
        skips = [enc[2], enc[1], enc[0], enc[0], 0]
        self.decoders = []
        for skip, ch in zip(skips, dec):
            self.decoders.append(DecoderBlock(prev, skip, ch, rng=rng, dtype=dtype))
            prev = ch
        self.conv2 = Conv2d(prev, 1, 3, 1, 1, bias=True, rng=rng, dtype=dtype)

    def children(self):
        if self.adapter is not None:
            yield "adapter", self.adapter
        yield "conv1", self.conv1
        for i, e in enumerate(self.encoders, 1):
            yield f"encoder{i}", e
        for i, d in enumerate(self.decoders, 1):
            yield f"decoder{i}", d
        yield "conv2", self.conv2

    def batchnorms(self):
        return [m.state for m in self.modules() if isinstance(m, BatchNorm2d)]

    def forward(self, x, features=None):
        """Probabilities in (0, 1), shape N,1,H,W. ``features`` collects layer shapes."""
        if x.ndim != 4:
            raise ValueError(f"expected N,C,H,W input, got shape {x.shape}")
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"input extent {h}x{w} must be divisible by 32")
        if self.adapter is not None:
            x = self.adapter(x)
        c1 = self.conv1(x)
        x = ops.maxpool2d(c1, 3, 2, 1)
        if features is not None:
            features["conv1"] = c1.shape
            features["maxpool"] = x.shape
        skips = []
        for i, enc in enumerate(self.encoders, 1):
            x = enc(x)
            skips.append(x)
            if features is not None:
                features[f"encoder{i}"] = x.shape
        e1, e2, e3, _ = skips
        for i, (dec, skip) in enumerate(zip(self.decoders, [e3, e2, e1, c1, None]), 1):
            x = dec(x, skip, features=features, tag=f"decoder{i}")
            if features is not None:
                features[f"decoder{i}"] = x.shape
        x = self.conv2(x)
        if features is not None:
            features["conv2"] = x.shape
        return ops.sigmoid(x)

    def astype(self, dtype):
        for t in self.named_parameters().values():
            t.data = t.data.astype(dtype)
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def children(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build(config: ModelConfig | None = None, seed=0, dtype=np.float32) -> ResNet34UNet:
    """He-normal convolutions, BN gamma=1 / beta=0."""
    return ResNet34UNet(config or ModelConfig(), seed=seed, dtype=dtype)


def count_parameters(model: Module) -> int:
    return int(sum(t.size for t in model.named_parameters().values()))


def state_dict(model: Module) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in model.named_parameters().items()}
    out.update(model.named_buffers())
    return out


def load_state_dict(model: Module, tensors: dict[str, np.ndarray]):
    """Copy ``tensors`` into the model in place; raise listing every mismatch."""
    params = model.named_parameters()
    buffers = model.named_buffers()
    expected = {k: v.shape for k, v in params.items()}
    expected.update({k: v.shape for k, v in buffers.items()})
    problems = []
    for k in sorted(set(expected) - set(tensors)):
        problems.append(f"missing {k} (expected {expected[k]})")
    for k in sorted(set(tensors) - set(expected)):
        problems.append(f"unexpected {k} {tuple(tensors[k].shape)}")
    for k in sorted(set(expected) & set(tensors)):
        if tuple(tensors[k].shape) != tuple(expected[k]):
            problems.append(f"shape {k}: checkpoint {tuple(tensors[k].shape)} vs model {tuple(expected[k])}")
    if problems:
        raise CheckpointMismatchError("checkpoint does not fit model:\n  " + "\n  ".join(problems))
    for k, t in params.items():
        t.data[...] = tensors[k]
    for k, arr in buffers.items():
        arr[...] = tensors[k]


MAGIC = b"NTS1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensors(tensors: dict[str, np.ndarray], path):
    """Serialize named tensors; the write is atomic (temp file then rename)."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos} (need {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(model: Module, path):
    write_tensors(state_dict(model), path)


def infer_config(tensors: dict[str, np.ndarray]) -> ModelConfig:
    """Recover the ModelConfig from checkpoint tensor shapes."""
    w = tensors["conv1.conv.weight"]
    width = w.shape[0] / 64
    adapter = "adapter.weight" in tensors
    in_channels = 1 if adapter else int(w.shape[1])
    return ModelConfig(in_channels=in_channels, width_multiplier=width, include_channel_adapter=adapter,
                       encoder1_projection="encoder1.0.downsample_conv.weight" in tensors)


def load_checkpoint(path, config: ModelConfig | None = None) -> ResNet34UNet:
    tensors = read_tensors(path)
    config = config or infer_config(tensors)
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    model = build(config, dtype=dtype)
    load_state_dict(model, tensors)
    return model
