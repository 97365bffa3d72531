"""Mixture-of-Attack-Experts layer, plain Soft-MoE baseline, transformer block.

Shapes: ``n`` batch, ``p`` tokens, ``d`` width, ``h`` heads, ``dh = d // h``,
``m`` experts, ``s`` slots per expert. Slots are laid out expert-major, so slot
``i`` belongs to expert ``i // s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class MoAEConfig:
    d: int = 32
    h: int = 2
    m: int = 4
    s: int = 1
    p: int = 17
    expert_hidden: int | None = None  # defaults to 2 * dh

    def __post_init__(self):
        if min(self.h, self.m, self.s) < 1:
            raise ConfigError(f"h, m, s must be >= 1 (got h={self.h}, m={self.m}, s={self.s})")
        if self.d % self.h:
            raise ConfigError(f"d={self.d} is not divisible by h={self.h}")

    @property
    def dh(self) -> int:
        return self.d // self.h

    @property
    def hidden(self) -> int:
        return self.expert_hidden or 2 * self.dh

    @property
    def slots(self) -> int:
        return self.m * self.s


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Holds named parameters; children are discovered through attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Experts(Module):
    """``m`` two-layer ReLU MLPs stored as stacked weights, width -> hidden -> width."""

    def __init__(self, m: int, width: int, hidden: int, rng: np.random.Generator):
        self.w1 = uniform_init(rng, (m, width, hidden), width)
        self.b1 = uniform_init(rng, (m, 1, hidden), width)
        self.w2 = uniform_init(rng, (m, hidden, width), hidden)
        self.b2 = uniform_init(rng, (m, 1, width), hidden)

    @property
    def m(self) -> int:
        return self.w1.shape[0]


class MoAELayer(Module):
    def __init__(self, cfg: MoAEConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dh = cfg.d, cfg.dh
        self.w_q = uniform_init(rng, (d, d), d)
        self.w_k = uniform_init(rng, (d, d), d)
        self.w_v = uniform_init(rng, (d, d), d)
        self.slots = uniform_init(rng, (cfg.h, dh, cfg.slots), dh)
        self.experts = Experts(cfg.m, dh, cfg.hidden, rng)
        self.w_out = Tensor(np.zeros((d, d)), requires_grad=True)

    @staticmethod
    def parameter_count(cfg: MoAEConfig) -> int:
        d, dh, hid = cfg.d, cfg.dh, cfg.hidden
        return 4 * d * d + cfg.h * dh * cfg.slots + cfg.m * (2 * dh * hid + hid + dh)


class SoftMoELayer(Module):
    """Soft-MoE on raw tokens: one routing head of width ``d``, no attention stage."""

    def __init__(self, cfg: MoAEConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        hidden = cfg.expert_hidden or 2 * d
        self.slots = uniform_init(rng, (d, cfg.slots), d)
        self.experts = Experts(cfg.m, d, hidden, rng)
        self.w_out = Tensor(np.zeros((d, d)), requires_grad=True)


@dataclass
class RoutingWeights:
    """``dispatch[..., token, slot]`` normalised over tokens; ``combine`` over slots."""

    dispatch: Tensor
    combine: Tensor


def multi_head_attention(x: Tensor, w_q, w_k, w_v, h: int) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v per head; returns (n, h, p, dh)."""
    d = x.shape[-1]
    if d % h:
        raise ConfigError(f"d={d} is not divisible by h={h}")
    q = dc.split_heads(x @ w_q, h)
    k = dc.split_heads(x @ w_k, h)
    v = dc.split_heads(x @ w_v, h)
    scores = (q @ dc.transpose(k)) * (1.0 / math.sqrt(d // h))
    return dc.softmax(scores, axis=-1) @ v


def soft_dispatch(tokens: Tensor, slots: Tensor) -> tuple[Tensor, RoutingWeights]:
    """Mix tokens (..., p, w) into slot inputs (..., slots, w)."""
    if tokens.shape[-1] != slots.shape[-2]:
        raise dc.DimensionError(f"token width {tokens.shape} does not match slots {slots.shape}")
    logits = tokens @ slots
    dispatch = dc.softmax(logits, axis=-2)
    combine = dc.softmax(logits, axis=-1)
    return dc.transpose(dispatch) @ tokens, RoutingWeights(dispatch, combine)


def apply_experts(slot_inputs: Tensor, experts: Experts) -> Tensor:
    """Y_i = f_{i // s}(slot_inputs_i), all experts evaluated in one batched matmul."""
    *lead, n_slots, width = slot_inputs.shape
    m = experts.m
    if n_slots % m:
        raise ConfigError(f"{n_slots} slots cannot be split across {m} experts")
    s = n_slots // m
    x = dc.reshape(slot_inputs, (*lead, m, s, width))
    hidden = dc.relu(x @ experts.w1 + experts.b1)
    y = hidden @ experts.w2 + experts.b2
    return dc.reshape(y, (*lead, n_slots, width))


def soft_combine(y: Tensor, routing: RoutingWeights) -> Tensor:
    return routing.combine @ y


def moae_forward(x: Tensor, layer: MoAELayer, return_routing: bool = False):
    cfg = layer.cfg
    heads = multi_head_attention(x, layer.w_q, layer.w_k, layer.w_v, cfg.h)
    slot_inputs, routing = soft_dispatch(heads, layer.slots)
    y = apply_experts(slot_inputs, layer.experts)
    out = dc.merge_heads(soft_combine(y, routing)) @ layer.w_out
    return (out, routing) if return_routing else out


def softmoe_forward(x: Tensor, layer: SoftMoELayer, return_routing: bool = False):
    slot_inputs, routing = soft_dispatch(x, layer.slots)
    y = apply_experts(slot_inputs, layer.experts)
    out = soft_combine(y, routing) @ layer.w_out
    return (out, routing) if return_routing else out


# ----------------------------------------------------------------- transformer block


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centred = x - dc.mean(x, axis=-1, keepdims=True)
        var = dc.mean(dc.square(centred), axis=-1, keepdims=True)
        return centred / dc.sqrt(var + self.eps) * self.gain + self.bias


class SelfAttention(Module):
    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.h = h
        self.w_q = uniform_init(rng, (d, d), d)
        self.w_k = uniform_init(rng, (d, d), d)
        self.w_v = uniform_init(rng, (d, d), d)
        self.w_o = uniform_init(rng, (d, d), d)

    def __call__(self, x: Tensor) -> Tensor:
        heads = multi_head_attention(x, self.w_q, self.w_k, self.w_v, self.h)
        return dc.merge_heads(heads) @ self.w_o


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.w1 = uniform_init(rng, (d, hidden), d)
        self.b1 = uniform_init(rng, (hidden,), d)
        self.w2 = uniform_init(rng, (hidden, d), hidden)
        self.b2 = uniform_init(rng, (d,), hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


VARIANTS = ("none", "softmoe", "moae")


class Block(Module):
    """Pre-norm transformer block with an optional expert sublayer beside the MLP.

    x1 = x + attn(ln1(x)); out = x1 + mlp(ln2(x1)) + experts(ln2(x1))
    """

    def __init__(self, cfg: MoAEConfig, variant: str, rng: np.random.Generator,
                 attn_heads: int | None = None, mlp_hidden: int | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown sublayer variant {variant!r}; expected one of {VARIANTS}")
        d = cfg.d
        self.variant = variant
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, attn_heads or cfg.h, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_hidden or 2 * d, rng)
        self.moe: Module | None = None
        if variant == "moae":
            self.moe = MoAELayer(cfg, rng)
        elif variant == "softmoe":
            self.moe = SoftMoELayer(cfg, rng)

    def sublayer(self, x: Tensor) -> Tensor:
        if isinstance(self.moe, MoAELayer):
            return moae_forward(x, self.moe)
        return softmoe_forward(x, self.moe)


def block_forward(x: Tensor, block: Block) -> Tensor:
    x1 = x + block.attn(block.ln1(x))
    z = block.ln2(x1)
    out = x1 + block.mlp(z)
    if block.moe is not None:
        out = out + block.sublayer(z)
    return out


def vanilla_block_forward(x: Tensor, block: Block) -> Tensor:
    """The same block with the expert sublayer removed."""
    x1 = x + block.attn(block.ln1(x))
    return x1 + block.mlp(block.ln2(x1))
