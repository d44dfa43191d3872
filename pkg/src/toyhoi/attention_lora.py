"""Attention with per-projection low-rank adapters and a Q/K/V freeze policy.

A projection keeps its pretrained matrix ``base`` untouched and optionally carries
an adapter whose ``delta()`` is added on the fly, ``W = W_base + A @ B.T``.
No ``alpha / r`` scaling is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import rng

PROJECTIONS = ("q", "k", "v")


class ConfigurationError(ValueError):
    pass


class EmptyContextError(ValueError):
    pass


class LoRAAdapter(nn.Module):
    """Low-rank factor pair; ``A`` is ``[d_out, r]`` and ``B`` is ``[d_in, r]``.

    ``B`` starts at zero so the adapted layer initially reproduces the base layer.
    """

    def __init__(self, d_out: int, d_in: int, rank: int, gen=None, init_std: float = 0.01):
        super().__init__()
        if not 0 < rank <= min(d_out, d_in):
            raise ValueError(f"rank must be in [1, {min(d_out, d_in)}], got {rank}")
        gen = gen if gen is not None else rng.stream(0, "lora")
        self.A = nn.Parameter(rng.normal(gen, (d_out, rank), init_std))
        self.B = nn.Parameter(torch.zeros(d_in, rank))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> torch.Tensor:
        return lora_delta(self)

    def factors(self) -> dict[str, torch.Tensor]:
        return {"lora_A": self.A, "lora_B": self.B}


class DenseDelta(nn.Module):
    """Full-rank additive update (the no-LoRA ablation)."""

    def __init__(self, d_out: int, d_in: int):
        super().__init__()
        self.D = nn.Parameter(torch.zeros(d_out, d_in))

    def delta(self) -> torch.Tensor:
        return self.D

    def factors(self) -> dict[str, torch.Tensor]:
        return {"delta": self.D}


def lora_delta(adapter) -> torch.Tensor:
    A, B = adapter.A, adapter.B
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"incompatible LoRA factors A{tuple(A.shape)} B{tuple(B.shape)}")
    return A @ B.T


class ProjectionWeights(nn.Module):
    """A linear map whose pretrained weight stays frozen under adaptation."""

    def __init__(self, d_out: int, d_in: int, bias: bool = False):
        super().__init__()
        self.base = nn.Parameter(torch.empty(d_out, d_in))
        nn.init.kaiming_uniform_(self.base, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.adapter: nn.Module | None = None

    @property
    def shape(self):
        return tuple(self.base.shape)

    def attach(self, adapter: nn.Module):
        d = adapter.delta()
        if tuple(d.shape) != self.shape:
            raise ValueError(f"adapter shape {tuple(d.shape)} does not match {self.shape}")
        self.adapter = adapter

    def detach_adapter(self):
        self.adapter = None

    def forward(self, x):
        return F.linear(x, effective_weight(self), self.bias)


def effective_weight(p: ProjectionWeights) -> torch.Tensor:
    if p.adapter is None:
        return p.base
    return p.base + p.adapter.delta()


def attention(q, k, v, n_heads: int = 1, return_probs: bool = False):
    """Multi-head scaled dot-product attention.

    ``q`` is ``[..., n_q, h*d_k]``, ``k`` is ``[..., n_k, h*d_k]`` and ``v`` is
    ``[..., n_k, h*d_v]``. Probabilities come back as ``[..., h, n_q, n_k]``.
    """
    if k.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context")
    if q.shape[-1] % n_heads or v.shape[-1] % n_heads:
        raise ValueError(f"feature dims not divisible by {n_heads} heads")

    def split(x):
        return x.unflatten(-1, (n_heads, -1)).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    d_k = qh.shape[-1]
    probs = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d_k), dim=-1)
    out = (probs @ vh).transpose(-3, -2).flatten(-2)
    return (out, probs) if return_probs else out


@dataclass(frozen=True)
class FreezePolicy:
    """Which projections train, as ``(q, k, v)`` flags per attention kind."""

    self_attn: tuple = (False, True, True)
    cross_attn: tuple = (False, True, True)

    @classmethod
    def uniform(cls, q: bool, k: bool, v: bool) -> "FreezePolicy":
        return cls((q, k, v), (q, k, v))

    @classmethod
    def frozen(cls) -> "FreezePolicy":
        return cls.uniform(False, False, False)

    def flags(self, kind: str) -> dict[str, bool]:
        t = self.self_attn if kind == "self" else self.cross_attn
        return dict(zip(PROJECTIONS, (bool(x) for x in t)))


DEFAULT_POLICY = FreezePolicy()


class AttentionLayer(nn.Module):
    """Self- or cross-attention with Q/K/V/out projections.

    Set ``capture = True`` to keep the last attention probabilities in ``last_probs``.
    """

    def __init__(self, dim: int, context_dim: int | None = None, n_heads: int = 1,
                 kind: str = "self", resolution: int | None = None):
        super().__init__()
        if kind not in ("self", "cross"):
            raise ValueError(kind)
        ctx = dim if kind == "self" else context_dim
        self.kind = kind
        self.n_heads = n_heads
        self.resolution = resolution
        self.q_proj = ProjectionWeights(dim, dim)
        self.k_proj = ProjectionWeights(dim, ctx)
        self.v_proj = ProjectionWeights(dim, ctx)
        self.out_proj = ProjectionWeights(dim, dim, bias=True)
        self.capture = False
        self.last_probs = None

    @property
    def head_dim(self) -> int:
        return self.q_proj.shape[0] // self.n_heads

    def projection(self, name: str) -> ProjectionWeights:
        return getattr(self, f"{name}_proj")

    def forward(self, x, context=None):
        ctx = x if self.kind == "self" else context
        if ctx is None:
            raise ValueError("cross-attention needs a context")
        q, k, v = self.q_proj(x), self.k_proj(ctx), self.v_proj(ctx)
        out, probs = attention(q, k, v, self.n_heads, return_probs=True)
        self.last_probs = probs if self.capture else None
        return self.out_proj(out)


def inject_adapters(layers, policy: FreezePolicy, mode: str = "lora", rank: int = 4,
                    gen=None, ranks: dict | None = None) -> list[str]:
    """Attach fresh adapters to every flagged projection. Returns ``layer_path.proj`` names.

    ``layers`` is an iterable of ``(path, AttentionLayer)``. ``ranks`` may override
    the rank per projection letter, e.g. ``{"k": 8, "v": 4}``.
    """
    gen = gen if gen is not None else rng.stream(0, "lora-init")
    attached = []
    for path, layer in layers:
        for name, on in policy.flags(layer.kind).items():
            if not on:
                continue
            proj = layer.projection(name)
            d_out, d_in = proj.shape
            if mode == "lora":
                r = (ranks or {}).get(name, rank)
                adapter = LoRAAdapter(d_out, d_in, min(r, d_out, d_in), gen=gen)
            elif mode == "dense":
                adapter = DenseDelta(d_out, d_in)
            else:
                raise ConfigurationError(f"unknown adapter mode {mode!r}")
            proj.attach(adapter)
            attached.append(f"{path}.{name}")
    return attached


def detach_adapters(layers):
    for _, layer in layers:
        for name in PROJECTIONS:
            layer.projection(name).detach_adapter()


def trainable_parameters(layer: AttentionLayer, policy: FreezePolicy) -> list[torch.Tensor]:
    """Adapter tensors of the projections the policy trains; never a base matrix."""
    params = []
    for name, on in policy.flags(layer.kind).items():
        if not on:
            continue
        adapter = layer.projection(name).adapter
        if adapter is None:
            raise ConfigurationError(f"policy trains {layer.kind}.{name} but it has no adapter")
        params.extend(adapter.factors().values())
    return params


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """Min-max normalise each ``[..., H, W]`` map to [0, 1]; flat maps become 0.5."""
    flat = m.flatten(-2)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    ok = span > 0
    out = torch.where(ok, (flat - lo) / torch.where(ok, span, torch.ones_like(span)),
                      torch.full_like(flat, 0.5))
    return out.view_as(m)


def cross_attention_map(layers, token_index: int, map_res: int) -> torch.Tensor:
    """Averaged, normalised cross-attention map of one context token.

    Uses the probabilities captured on the last forward pass by every cross
    layer operating at ``map_res``; heads and layers are averaged. Returns
    ``[batch, map_res, map_res]``.
    """
    picked = [l for l in layers if l.kind == "cross" and l.resolution == map_res]
    if not picked:
        raise ConfigurationError(f"no cross-attention layer at resolution {map_res}")
    maps = []
    for layer in picked:
        if layer.last_probs is None:
            raise ConfigurationError("cross-attention maps were not captured on the last forward pass")
        p = layer.last_probs  # [B, h, n_q, n_k]
        if not 0 <= token_index < p.shape[-1]:
            raise IndexError(f"token index {token_index} outside context of length {p.shape[-1]}")
        maps.append(p[..., token_index].mean(dim=-2))
    avg = torch.stack(maps).mean(dim=0)
    return normalize_map(avg.unflatten(-1, (map_res, map_res)))
