"""Spatial-aware aggregation rounds: APE self-attention and RPE-biased cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .text import masked_softmax
from .tlm import KernelState, TlmParams, refine_positions

PE_KINDS = ("none", "fourier_ape", "table_rpe", "euclid_rpe_5d")


@dataclass(frozen=True)
class PosEncodingConfig:
    kind: str = "table_rpe"
    dim: int = 32
    rpe_range: float = 4.0
    rpe_bins: int = 17
    # frequency ladder: 2*pi / max_wavelength * 2**k, k = 0 .. num_freqs-1
    max_wavelength: float = 16.0
    num_freqs: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ValueError(f"unknown positional encoding kind {self.kind!r}")
        if self.kind == "euclid_rpe_5d":
            raise NotImplementedError("5D Euclidean RPE is not implemented")
        if self.rpe_bins < 3 or self.rpe_bins % 2 == 0:
            raise ValueError("rpe_bins must be an odd integer >= 3")
        if self.rpe_range <= 0:
            raise ValueError("rpe_range must be positive")

    @property
    def uses_ape(self) -> bool:
        return self.kind in ("fourier_ape", "table_rpe")

    @property
    def uses_rpe(self) -> bool:
        return self.kind == "table_rpe"


def absolute_pos_encoding(P: torch.Tensor, config: PosEncodingConfig) -> torch.Tensor:
    """Sinusoidal features of each coordinate, ordered low to high frequency, width ``config.dim``."""
    D = config.dim
    if not config.uses_ape:
        return P.new_zeros(P.shape[:-1] + (D,))
    n = config.num_freqs or math.ceil(D / 6)
    freqs = 2 * math.pi / config.max_wavelength * 2.0 ** torch.arange(n, dtype=P.dtype, device=P.device)
    angles = P.unsqueeze(-2) * freqs.unsqueeze(-1)  # (..., n, 3)
    enc = torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(-3)  # (..., n*3*2)
    if enc.shape[-1] >= D:
        return enc[..., :D]
    return torch.cat([enc, enc.new_zeros(enc.shape[:-1] + (D - enc.shape[-1],))], dim=-1)


def rpe_bin_index(d: torch.Tensor, config: PosEncodingConfig) -> torch.Tensor:
    R, bins = config.rpe_range, config.rpe_bins
    d = d.clamp(-R, R)
    idx = torch.floor((d + R) / (2 * R) * bins).long()
    return idx.clamp(0, bins - 1)


class SaaParams(nn.Module):
    """Weights of one decoder round."""

    def __init__(self, dim: int, heads: int = 1, rpe_bins: int = 17, ffn_dim: Optional[int] = None):
        super().__init__()
        assert dim % heads == 0
        self.dim, self.heads = dim, heads
        self.self_q = nn.Linear(dim, dim)
        self.self_k = nn.Linear(dim, dim)
        self.self_v = nn.Linear(dim, dim)
        self.self_out = nn.Linear(dim, dim)
        self.norm_self = nn.LayerNorm(dim)
        self.w_query = nn.Linear(2 * dim, 2 * dim, bias=False)
        self.w_key = nn.Linear(2 * dim, 2 * dim, bias=False)
        self.w_val = nn.Linear(dim, dim, bias=False)
        self.norm_cross = nn.LayerNorm(dim)
        ffn_dim = ffn_dim or 2 * dim
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
        self.norm_ffn = nn.LayerNorm(dim)
        self.rpe_table = nn.Parameter(torch.zeros(heads, 3, rpe_bins))
        nn.init.trunc_normal_(self.rpe_table, std=0.02)


def _split(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.view(*lead, n, heads, d // heads).transpose(-2, -3)


def _merge(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, hd = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, h * hd)


def self_attention_weights(E: torch.Tensor, B_t: torch.Tensor, params: SaaParams,
                           token_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Attention (..., H, N_t, N_t) with query = key = E + B_t."""
    x = E + B_t
    q = _split(params.self_q(x), params.heads)
    k = _split(params.self_k(x), params.heads)
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    mask = None if token_mask is None else token_mask[..., None, None, :]
    return masked_softmax(logits, mask)


def spatial_self_attention(E: torch.Tensor, B_t: torch.Tensor, params: SaaParams,
                           token_mask: Optional[torch.Tensor] = None):
    """Returns (post-norm output, attention weights)."""
    attn = self_attention_weights(E, B_t, params, token_mask)
    v = _split(params.self_v(E), params.heads)
    out = params.self_out(_merge(attn @ v))
    return params.norm_self(E + out), attn


def relative_pos_bias(P_t: torch.Tensor, P_s: torch.Tensor, params: SaaParams,
                      config: PosEncodingConfig) -> torch.Tensor:
    """Bias (..., H, N_t, N_s) from quantized per-axis displacements P_t[i] - P_s[j]."""
    shape = P_t.shape[:-2] + (params.heads, P_t.shape[-2], P_s.shape[-2])
    if not config.uses_rpe:
        return P_t.new_zeros(shape)
    d = P_t.unsqueeze(-2) - P_s.unsqueeze(-3)  # (..., N_t, N_s, 3)
    idx = rpe_bin_index(d, config)
    table = params.rpe_table  # (H, 3, bins)
    bias = sum(table[:, axis][:, idx[..., axis]] for axis in range(3))  # (H, ..., N_t, N_s)
    return bias.movedim(0, -3).to(P_t.dtype)


def cross_attention(E_dot, B_t, S, B_s, B_r, params: SaaParams, sp_mask=None):
    """Pre-residual aggregation softmax(QK^T/sqrt(D) + B_r) S W_val; returns (out, attn)."""
    q = _split(params.w_query(torch.cat([E_dot, B_t], -1)), params.heads)
    k = _split(params.w_key(torch.cat([S, B_s], -1)), params.heads)
    v = _split(params.w_val(S), params.heads)
    scale = math.sqrt(params.dim // params.heads)
    logits = q @ k.transpose(-1, -2) / scale + B_r
    mask = None if sp_mask is None else sp_mask[..., None, None, :]
    attn = masked_softmax(logits, mask)
    return _merge(attn @ v), attn


def multimodal_aggregate(E_dot, B_t, S, B_s, B_r, params: SaaParams, sp_mask=None):
    """Cross-attention + residual/norm + feed-forward/norm; returns (new kernels, attn)."""
    out, attn = cross_attention(E_dot, B_t, S, B_s, B_r, params, sp_mask)
    x = params.norm_cross(E_dot + out)
    x = params.norm_ffn(x + params.ffn(x))
    return x, attn


def decoder_round(state: KernelState, S, P_s, params: SaaParams, tlm: TlmParams,
                  config: PosEncodingConfig, token_mask=None, sp_mask=None):
    B_t = absolute_pos_encoding(state.positions, config)
    B_s = absolute_pos_encoding(P_s, config)
    E_dot, _ = spatial_self_attention(state.embeddings, B_t, params, token_mask)
    B_r = relative_pos_bias(state.positions, P_s, params, config)
    E_next, attn = multimodal_aggregate(E_dot, B_t, S, B_s, B_r, params, sp_mask)
    return refine_positions(state, E_next, tlm), attn


def run_decoder(state0: KernelState, S, P_s, layers, tlm: TlmParams, config: PosEncodingConfig,
                rounds: Optional[int] = None, token_mask=None, sp_mask=None,
                return_attention: bool = False):
    """Apply ``rounds`` decoder rounds; returns the states of rounds 1..L."""
    rounds = len(layers) if rounds is None else rounds
    if rounds < 1 or rounds > len(layers):
        raise ValueError(f"rounds must be in [1, {len(layers)}]")
    states, attns = [], []
    state = state0
    for params in list(layers)[:rounds]:
        state, attn = decoder_round(state, S, P_s, params, tlm, config, token_mask, sp_mask)
        states.append(state)
        attns.append(attn)
    return (states, attns) if return_attention else states
