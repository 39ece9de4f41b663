"""Parameter containers and the layers the denoiser/encoders are built from.

Modules discover parameters and children by scanning attribute insertion
order, so parameter names are stable across runs — checkpoints, LoRA
targeting and the config-hash contract all rely on that.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    # attributes starting with "_" are invisible to parameter/checkpoint walks;
    # runtime-attached extras (LoRA adapters) live there so base state stays base
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Module):
                yield from value.named_modules(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{name}.{i}")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state dict mismatch; missing={missing[:5]}, unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    """Affine map y = x @ W.T + b; an attached LoRA adapter adds its delta path."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(in_features), (out_features, in_features))
        self.w = _param(w)
        self.b = _param(np.zeros(out_features)) if bias else None
        self._adapter = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.permute(self.w, (1, 0)))
        if self.b is not None:
            y = y + self.b
        if self._adapter is not None:
            y = y + self._adapter.delta(x)
        return y


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
        zero_init: bool = False,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel * kernel
        if zero_init:
            w = np.zeros((out_channels, in_channels, kernel, kernel))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (out_channels, in_channels, kernel, kernel))
        self.w = _param(w)
        self.b = _param(np.zeros(out_channels)) if bias else None
        self._adapter = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        if self.b is not None:
            y = y + T.reshape(self.b, (1, self.out_channels, 1, 1))
        if self._adapter is not None:
            y = y + self._adapter.delta_conv(x, self.stride, self.pad)
        return y


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None, eps: float = 1e-5):
        if groups is None:
            groups = _auto_groups(channels)
        self.groups = groups
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, eps=self.eps)


def _auto_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.vocab = vocab
        self.dim = dim
        self.table = _param(rng.normal(0.0, std, (vocab, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class Mlp2(Module):
    """Two affine layers with a silu between — the stock mixer/time-embed head."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows of (N, K) logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    logp = T.log_softmax(logits, axis=1)
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(T.mul(logp, Tensor(onehot)))
    return T.scale(picked, -1.0 / n)
