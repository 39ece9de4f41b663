"""Low-rank adapters: attach, runtime forward, and merge-into-base."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .denoiser import GenerativeModel
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

LORA_RANK_DEFAULT = 4
LORA_ALPHA_DEFAULT = 4.0
LORA_A_STD = 0.01


class LoraAdapter:
    """Rank-r delta for one linear (or 1x1 conv) layer.

    A is (r, k) small-normal, B is (d, r) zero, so a fresh adapter is an exact
    no-op; the effective delta is (alpha/r) * B @ A."""

    def __init__(self, target: str, r: int, alpha: float, k: int, d: int, rng: np.random.Generator):
        self.target = target
        self.r = r
        self.alpha = alpha
        self.A = Tensor(rng.normal(0.0, LORA_A_STD, (r, k)), requires_grad=True, name=f"{target}.lora_A")
        self.B = Tensor(np.zeros((d, r)), requires_grad=True, name=f"{target}.lora_B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self, x: Tensor) -> Tensor:
        """Adapter path for a Linear host: (alpha/r) * (x @ A^T) @ B^T."""
        low = T.matmul(x, T.permute(self.A, (1, 0)))
        return T.scale(T.matmul(low, T.permute(self.B, (1, 0))), self.scaling)

    def delta_conv(self, x: Tensor, stride: int, pad: int) -> Tensor:
        """Adapter path for a 1x1 conv host, as a composed 1x1 kernel."""
        dw = T.scale(T.matmul(self.B, self.A), self.scaling)
        kernel = T.reshape(dw, (self.B.shape[0], self.A.shape[1], 1, 1))
        return T.conv2d(x, kernel, stride=stride, pad=pad)

    def delta_matrix(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


class LoraSet:
    def __init__(self, adapters: dict[str, LoraAdapter], r: int, alpha: float):
        self.adapters = adapters
        self.r = r
        self.alpha = alpha

    def __len__(self) -> int:
        return len(self.adapters)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for target, ad in sorted(self.adapters.items()):
            out[f"{target}.lora_A"] = ad.A
            out[f"{target}.lora_B"] = ad.B
        return out

    def trainable_groups(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(denoiser-side params, text-encoder-side params) for the two LoRA lrs."""
        unet: dict[str, Tensor] = {}
        text: dict[str, Tensor] = {}
        for name, p in self.named_parameters().items():
            (text if name.startswith("text.") else unet)[name] = p
        return unet, text

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        if set(own) != set(state):
            raise KeyError("LoRA state names do not match attached adapters")
        for name, p in own.items():
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()

    def manifest_entries(self) -> list[dict]:
        return [
            {"target": t, "r": ad.r, "alpha": ad.alpha}
            for t, ad in sorted(self.adapters.items())
        ]


def default_lora_targets(model: GenerativeModel) -> list[str]:
    """Conditioning projections throughout the denoiser (mid-block included)
    plus the prompt-encoder mixer layers."""
    targets = []
    for name, mod in model.named_modules():
        if not isinstance(mod, Linear):
            continue
        if name == "unet.cond_proj" or name.endswith(".emb_proj") or name in ("text.mix1", "text.mix2"):
            targets.append(name)
    return sorted(targets)


def _host_dims(mod) -> tuple[int, int]:
    if isinstance(mod, Linear):
        return mod.in_features, mod.out_features
    if isinstance(mod, Conv2d) and mod.kernel == 1:
        return mod.in_channels, mod.out_channels
    raise TypeError("LoRA hosts must be Linear or 1x1 Conv2d layers")


def lora_attach(
    model: GenerativeModel,
    targets: Optional[Sequence[str]] = None,
    r: int = LORA_RANK_DEFAULT,
    alpha: float = LORA_ALPHA_DEFAULT,
    seed: int = 0,
) -> LoraSet:
    """Register fresh adapters on the named layers; base weights untouched."""
    if targets is None:
        targets = default_lora_targets(model)
    modules = dict(model.named_modules())
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    adapters: dict[str, LoraAdapter] = {}
    for target in targets:
        if target not in modules:
            raise KeyError(f"unknown LoRA target {target!r}")
        mod = modules[target]
        k, d = _host_dims(mod)
        if mod._adapter is not None:
            raise ValueError(f"layer {target!r} already has an adapter attached")
        ad = LoraAdapter(target, r, alpha, k, d, rng)
        mod._adapter = ad
        adapters[target] = ad
    return LoraSet(adapters, r, alpha)


def lora_detach(model: GenerativeModel, lora: LoraSet) -> None:
    modules = dict(model.named_modules())
    for target in lora.adapters:
        if target in modules:
            modules[target]._adapter = None


def lora_attach_existing(model: GenerativeModel, entries: list[dict], state: dict[str, np.ndarray]) -> LoraSet:
    """Re-attach adapters described by a checkpoint manifest and load their weights."""
    targets = [e["target"] for e in entries]
    if not entries:
        return LoraSet({}, LORA_RANK_DEFAULT, LORA_ALPHA_DEFAULT)
    r = entries[0]["r"]
    alpha = entries[0]["alpha"]
    lora = lora_attach(model, targets, r=r, alpha=alpha)
    for entry in entries:
        lora.adapters[entry["target"]].r = entry["r"]
        lora.adapters[entry["target"]].alpha = entry["alpha"]
    lora.load_state_dict(state)
    return lora


def lora_merge_state(state: dict[str, np.ndarray], lora: LoraSet) -> dict[str, np.ndarray]:
    """Fold adapter deltas into a copied base state: W' = W + (alpha/r) B A."""
    merged = {k: v.copy() for k, v in state.items()}
    for target, ad in lora.adapters.items():
        key = f"{target}.w"
        if key not in merged:
            raise KeyError(f"adapter target {target!r} has no weight {key!r} in checkpoint")
        w = merged[key]
        delta = ad.delta_matrix().astype(w.dtype)
        if w.ndim == 4:  # 1x1 conv host
            delta = delta.reshape(w.shape)
        if delta.shape != w.shape:
            raise ValueError(f"delta shape {delta.shape} != weight shape {w.shape} for {target}")
        merged[key] = w + delta
    return merged
