"""Text-driven localization: token positions from cross-modal similarity, refined by offsets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .text import masked_softmax, validating

INIT_SCHEMES = ("ti", "random", "project", "maft")


@dataclass(frozen=True)
class KernelState:
    embeddings: torch.Tensor  # (..., N_t, D)
    positions: torch.Tensor  # (..., N_t, 3)
    round: int = 0


class TlmParams(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.w_e = nn.Linear(dim, dim, bias=False)
        self.w_s = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.offset_net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 3))
        # only used by the "project" initialization ablation
        self.project = nn.Linear(dim, 3)
        nn.init.zeros_(self.offset_net[-1].weight)
        nn.init.zeros_(self.offset_net[-1].bias)


def cross_modal_similarity(E0: torch.Tensor, S: torch.Tensor, params: TlmParams,
                           sp_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Row-stochastic token-to-superpoint distribution A (..., N_t, N_s)."""
    if validating() and not (torch.isfinite(E0).all() and torch.isfinite(S).all()):
        raise ValueError("non-finite input to cross-modal similarity")
    e = params.w_e(E0)
    s = params.w_s(S)
    logits = e @ s.transpose(-1, -2) / math.sqrt(e.shape[-1])
    mask = None if sp_mask is None else sp_mask.unsqueeze(-2)
    return masked_softmax(logits, mask)


def text_driven_init(A: torch.Tensor, S: torch.Tensor, P_s: torch.Tensor, params: TlmParams,
                     sp_mask: Optional[torch.Tensor] = None) -> KernelState:
    if validating():
        rows = A.sum(-1)
        if sp_mask is not None:
            # fully padded rows carry no distribution
            rows = torch.where(sp_mask.any(-1, keepdim=True).expand_as(rows), rows, torch.ones_like(rows))
        if (rows - 1).abs().max() > 1e-4:
            raise ValueError("unnormalized distribution")
    positions = A @ P_s
    embeddings = A @ params.w_v(S)
    return KernelState(embeddings, positions, 0)


def refine_positions(state: KernelState, new_embeddings: torch.Tensor, params: TlmParams) -> KernelState:
    offset = params.offset_net(new_embeddings)
    return KernelState(new_embeddings, state.positions + offset, state.round + 1)


def initialize_kernels(scheme: str, E0: torch.Tensor, S: torch.Tensor, P_s: torch.Tensor,
                       params: TlmParams, sp_mask: Optional[torch.Tensor] = None,
                       uniform: Optional[torch.Tensor] = None,
                       generator: Optional[torch.Generator] = None) -> tuple[KernelState, torch.Tensor]:
    """Round-0 kernels for each initialization scheme; also returns A.

    ``uniform`` optionally supplies the U(0, 1) draws used by the random
    position schemes, shaped like the token positions.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    A = cross_modal_similarity(E0, S, params, sp_mask)
    state = text_driven_init(A, S, P_s, params, sp_mask)
    if scheme == "ti":
        return state, A
    if scheme == "project":
        return KernelState(state.embeddings, params.project(E0), 0), A
    # random positions inside the bounding box of the (valid) superpoints
    if sp_mask is None:
        lo, hi = P_s.amin(-2), P_s.amax(-2)
    else:
        big = torch.finfo(P_s.dtype).max
        m = sp_mask.unsqueeze(-1)
        lo = torch.where(m, P_s, torch.full_like(P_s, big)).amin(-2)
        hi = torch.where(m, P_s, torch.full_like(P_s, -big)).amax(-2)
    u = uniform
    if u is None:
        u = torch.rand(state.positions.shape, generator=generator, dtype=P_s.dtype, device=P_s.device)
    u = u.to(P_s.dtype)
    positions = lo.unsqueeze(-2) + u * (hi - lo).unsqueeze(-2)
    embeddings = state.embeddings if scheme == "random" else torch.zeros_like(state.embeddings)
    return KernelState(embeddings, positions, 0), A
