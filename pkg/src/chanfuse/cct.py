"""Channel-wise cross fusion transformer.

Encoder maps from the four levels are cut into patches whose size halves with
the level's resolution, so every level yields the same number of tokens ``d``.
Attention then relates *channels* to channels: each query level attends over
the concatenated channel stack of the key levels, giving ``C_i × C_Σ``
similarity maps instead of the usual ``d × d``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .nn import Conv2d, LayerNorm, Linear, Module, parameter
from .tensor import Tensor, swap_last


def tokenize(feature: Tensor, patch: int, pos: Optional[Tensor] = None) -> Tensor:
    """``[N×]C×H×W`` feature map -> ``[N×]d×C`` patch-mean tokens."""
    *lead, c, h, w = feature.shape
    if h % patch or w % patch:
        raise ConfigError(f"feature map {h}×{w} cannot be cut into {patch}×{patch} patches")
    pooled = T.avg_pool2d(feature, patch)
    tokens = swap_last(pooled.reshape(*lead, c, (h // patch) * (w // patch)))
    return tokens + pos if pos is not None else tokens


def concat_tokens(tokens: list[Tensor]) -> Tensor:
    return T.concat(tokens, axis=-1)


def channel_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Attention along the channel axis for token-major projected inputs.

    ``q`` is ``d×C_i``; ``k`` and ``v`` are ``d×C_Σ`` (leading batch axes allowed).
    Returns ``(CA, M)`` with ``CA`` channel-major ``C_i×d`` and ``M`` the
    ``C_i×C_Σ`` row-stochastic similarity map.
    """
    if q.shape[-2] != k.shape[-2] or k.shape != v.shape:
        raise T.ShapeError(f"attention operands disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    c_sigma = k.shape[-1]
    logits = T.matmul(swap_last(q), k) * (1.0 / np.sqrt(c_sigma))
    m = T.softmax(T.instance_norm(logits), axis=-1)
    return T.matmul(m, swap_last(v)), m


def cross_attention_head(t_i: Tensor, t_sigma: Tensor, w_q: Tensor, w_k: Tensor,
                         w_v: Tensor) -> tuple[Tensor, Tensor]:
    """One head: project tokens, then :func:`channel_attention`."""
    if t_i.shape[-1] != w_q.shape[0] or t_sigma.shape[-1] != w_k.shape[0]:
        raise T.ShapeError(
            f"projection mismatch: T_i {t_i.shape} with W_Q {w_q.shape}, "
            f"T_Σ {t_sigma.shape} with W_K {w_k.shape}"
        )
    return channel_attention(T.matmul(t_i, w_q), T.matmul(t_sigma, w_k), T.matmul(t_sigma, w_v))


class AttentionHead(Module):
    def __init__(self, rng, query_channels: dict[str, int], c_sigma: int):
        self.w_q = {lv: Linear(rng, c, c, bias=False) for lv, c in query_channels.items()}
        self.w_k = Linear(rng, c_sigma, c_sigma, bias=False)
        self.w_v = Linear(rng, c_sigma, c_sigma, bias=False)


class MLP(Module):
    def __init__(self, rng, channels: int, ratio: int):
        self.fc1 = Linear(rng, channels, channels * ratio)
        self.fc2 = Linear(rng, channels * ratio, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor, heads: list[AttentionHead],
                         level: str) -> Tensor:
    """Head-averaged cross attention for one query level, token-major ``d×C_i``."""
    total = None
    for head in heads:
        ca, _ = cross_attention_head(q_tokens, kv_tokens, head.w_q[level].weight,
                                     head.w_k.weight, head.w_v.weight)
        total = ca if total is None else total + ca
    return swap_last(total * (1.0 / len(heads)))


class CCTLayer(Module):
    def __init__(self, rng, query_channels: dict[str, int], c_sigma: int, heads: int,
                 mlp_ratio: int, residual_source: str):
        self.query_norm = {lv: LayerNorm(c) for lv, c in query_channels.items()}
        self.kv_norm = LayerNorm(c_sigma)
        self.heads = [AttentionHead(rng, query_channels, c_sigma) for _ in range(heads)]
        self.mlp_norm = {lv: LayerNorm(c) for lv, c in query_channels.items()}
        self.mlp = {lv: MLP(rng, c, mlp_ratio) for lv, c in query_channels.items()}
        self.residual_source = residual_source

    def forward(self, tokens: dict[str, Tensor], kv: Tensor,
                record: Optional[list] = None) -> dict[str, Tensor]:
        kv_n = self.kv_norm(kv)
        keys = [T.matmul(kv_n, h.w_k.weight) for h in self.heads]
        values = [T.matmul(kv_n, h.w_v.weight) for h in self.heads]
        out = {}
        for lv, t in tokens.items():
            t_n = self.query_norm[lv](t)
            mca = None
            q_sum = None
            for n, head in enumerate(self.heads):
                q = T.matmul(t_n, head.w_q[lv].weight)
                ca, m = channel_attention(q, keys[n], values[n])
                if record is not None:
                    record.append((int(lv), n, m.data.copy()))
                mca = ca if mca is None else mca + ca
                q_sum = q if q_sum is None else q_sum + q
            scale = 1.0 / len(self.heads)
            mca = swap_last(mca * scale)
            residual = q_sum * scale if self.residual_source == "projected" else t
            out[lv] = mca + self.mlp[lv](self.mlp_norm[lv](residual + mca))
        return out


class CCT(Module):
    """Tokenize -> L cross-attention layers -> reconstruct, for the query levels."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        chans = config.channels
        self.query_levels = config.active_query_levels
        self.key_levels = config.key_levels
        self.patch = {str(i): config.patch_size_at(i) for i in (1, 2, 3, 4)}
        token_levels = sorted(set(self.query_levels) | set(self.key_levels))
        d = config.tokens
        self.pos = {
            str(i): parameter(np.zeros((d, chans[i - 1]))) for i in token_levels
        } if config.pos_embed else {}
        q_chans = {str(i): chans[i - 1] for i in self.query_levels}
        self.c_sigma = sum(chans[i - 1] for i in self.key_levels)
        self.layers = [
            CCTLayer(rng, q_chans, self.c_sigma, config.heads, config.mlp_ratio, config.residual_source)
            for _ in range(config.cct_layers)
        ]
        self.reconstruct_conv = {lv: Conv2d(rng, c, c, 3) for lv, c in q_chans.items()}
        self.record = False
        self.recorded: list = []

    def embed(self, features: dict[int, Tensor]) -> dict[int, Tensor]:
        return {
            i: tokenize(f, self.patch[str(i)], self.pos.get(str(i)))
            for i, f in features.items()
        }

    def reconstruct(self, tokens: Tensor, level: int, grid_h: int) -> Tensor:
        *lead, d, c = tokens.shape
        grid = swap_last(tokens).reshape(*lead, c, grid_h, d // grid_h)
        up = T.upsample_nearest(grid, self.patch[str(level)])
        return T.relu(self.reconstruct_conv[str(level)](up))

    def forward(self, skips: list[Tensor]) -> dict[int, Tensor]:
        """Map encoder features E1..E4 to reconstructed maps for each query level."""
        needed = sorted(set(self.query_levels) | set(self.key_levels))
        tokens = self.embed({i: skips[i - 1] for i in needed})
        kv_parts = [tokens[i] for i in self.key_levels]
        state = {str(i): tokens[i] for i in self.query_levels}
        if self.record:
            self.recorded = []
        for index, layer in enumerate(self.layers):
            kv = concat_tokens(kv_parts)
            rec = [] if self.record else None
            state = layer(state, kv, rec)
            if rec is not None:
                self.recorded.extend((index,) + r for r in rec)
            # the next layer's keys come from the refreshed query tokens where available
            kv_parts = [state.get(str(i), tokens[i]) for i in self.key_levels]
        grid_h = skips[0].shape[-2] // self.patch["1"]
        return {i: self.reconstruct(state[str(i)], i, grid_h) for i in self.query_levels}
