"""Layer containers built on the functional ops."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .core import Tensor


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``,
    buffers are numpy arrays registered through ``register_buffer``."""

    def __init__(self):
        self.training = True
        self._buffer_names: List[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [k for k in list(own) + list(bufs) if k not in state]
        if strict and missing:
            raise KeyError(f"missing entries in state: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                _copy_into(p.data, state[name], name)
        for name, buf in bufs.items():
            if name in state:
                _copy_into(buf, state[name], name)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _copy_into(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    src = np.asarray(src)
    if dst.shape != src.shape:
        raise ValueError(f"shape mismatch for {name}: {dst.shape} vs {src.shape}")
    dst[...] = src


def kaiming(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Tensor(kaiming(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=self.training, momentum=self.momentum, eps=self.eps)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class PreActBlock(Module):
    """Pre-activation residual block: BN-ReLU-conv3x3, BN-ReLU-conv3x3, plus shortcut.

    A strided block halves the resolution; a 1x1 projection shortcut is used
    whenever stride or width changes.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, rng=None):
        super().__init__()
        self.bn1 = BatchNorm2d(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, bias=False, rng=rng)
        self.shortcut = (
            Conv2d(in_ch, out_ch, 1, stride, padding=0, bias=False, rng=rng)
            if stride != 1 or in_ch != out_ch else None
        )

    def forward(self, x):
        pre = ops.relu(self.bn1(x))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(ops.relu(self.bn2(out)))
        return out + skip


class ResidualBackbone(Module):
    """Stem conv, stages of pre-activation blocks, BN-ReLU and a 1x1 output conv.

    ``stages`` is a sequence of ``(channels, blocks, stride)``; the first block
    of each stage carries the stride. The default radar layout
    ``stem + (C,1,1) + (2C,3,2) + (4C,3,2) + out`` has 16 conv layers on the
    main path.
    """

    def __init__(self, in_ch: int, stem_ch: int, stages: Sequence[Tuple[int, int, int]],
                 out_ch: int, stem_stride: int = 1, rng=None):
        super().__init__()
        self.stem = Conv2d(in_ch, stem_ch, 3, stem_stride, bias=False, rng=rng)
        blocks = []
        ch = stem_ch
        for width, count, stride in stages:
            for i in range(count):
                blocks.append(PreActBlock(ch, width, stride if i == 0 else 1, rng=rng))
                ch = width
        self.blocks = blocks
        self.out_bn = BatchNorm2d(ch)
        self.out_conv = Conv2d(ch, out_ch, 1, 1, padding=0, bias=True, rng=rng)
        self.total_stride = stem_stride * int(np.prod([s for _, _, s in stages])) if stages else stem_stride

    def conv_layer_count(self) -> int:
        return 2 + 2 * len(self.blocks)

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.out_conv(ops.relu(self.out_bn(x)))

    def zero_output(self) -> None:
        """Zero the final conv so the backbone starts as a constant-zero map."""
        self.out_conv.weight.data[...] = 0
        self.out_conv.bias.data[...] = 0
