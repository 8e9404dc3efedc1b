"""Full network: toy encoders, projection, kernel initialization, decoder rounds, heads."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .rws import (LossWeights, average_bundles, bce_loss, dice_loss, mask_iou, position_loss,
                  response_map, score_loss, select_root_index, select_target_index, total_loss)
from .saa import PosEncodingConfig, SaaParams, run_decoder
from .scene import (partition_for, pool_gt_mask, segment_mean, superpoint_centroids)
from .text import ProjectionParams, Vocab, dependency_mask, project_and_ddi
from .tlm import KernelState, TlmParams, initialize_kernels

SUPERVISION = ("rts", "root", "top1")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int = 3
    dim: int = 32
    text_dim: int = 32
    point_dim: int = 32
    heads: int = 1
    rounds: int = 6
    pe_kind: str = "table_rpe"
    rpe_range: float = 4.0
    rpe_bins: int = 17
    init_scheme: str = "ti"
    ffn_dim: Optional[int] = None
    position_scale: float = 4.0
    text_residual: bool = False
    ape_wavelength: float = 16.0
    ape_freqs: Optional[int] = None

    def pe(self) -> PosEncodingConfig:
        return PosEncodingConfig(self.pe_kind, self.dim, self.rpe_range, self.rpe_bins,
                                 self.ape_wavelength, self.ape_freqs)


class PointEncoder(nn.Module):
    """Per-point MLP over auxiliary features and coordinates."""

    def __init__(self, in_dim: int, out_dim: int, position_scale: float = 4.0):
        super().__init__()
        self.position_scale = position_scale
        self.net = nn.Sequential(nn.Linear(in_dim + 3, 2 * out_dim), nn.GELU(),
                                 nn.Linear(2 * out_dim, out_dim))

    def forward(self, features, positions):
        return self.net(torch.cat([features, positions / self.position_scale], -1))


@dataclass
class PreparedSample:
    """Tensors for one sample, independent of batching."""
    sample_id: str
    point_features: np.ndarray
    point_positions: np.ndarray
    assignment: np.ndarray
    num_superpoints: int
    centroids: np.ndarray
    token_ids: list
    tree_mask: torch.Tensor
    gt_superpoints: np.ndarray
    target_centroid: np.ndarray
    target_index: int
    root_index: int
    gt_point_mask: np.ndarray
    stratum: str


def prepare_sample(sample, vocab: Vocab, cell_size: float, max_len: int = 80) -> PreparedSample:
    from .metrics import stratify

    scene = sample.scene
    part = partition_for(scene, cell_size)
    cents = superpoint_centroids(scene, part)
    gt_sp = pool_gt_mask(sample.gt_point_mask, part)
    tokens = list(sample.tree.tokens)[:max_len]
    tgt = select_target_index(sample.tree)
    root = select_root_index(sample.tree)
    if gt_sp.any():
        tgt_c = cents[gt_sp].mean(0)
    elif sample.gt_point_mask.any():
        # the target is smaller than every superpoint it touches
        tgt_c = scene.positions[sample.gt_point_mask].mean(0)
    else:
        tgt_c = np.zeros(3)  # inference: no ground truth
    try:
        stratum = stratify(scene, sample.target_instance)
    except ValueError:
        stratum = "unique"
    return PreparedSample(
        sample_id=sample.sample_id, point_features=scene.features, point_positions=scene.positions,
        assignment=part.assignment, num_superpoints=part.num_superpoints, centroids=cents,
        token_ids=vocab.encode(tokens), tree_mask=dependency_mask(sample.tree, len(tokens)),
        gt_superpoints=gt_sp, target_centroid=tgt_c, target_index=min(tgt, len(tokens) - 1),
        root_index=min(root, len(tokens) - 1), gt_point_mask=sample.gt_point_mask, stratum=stratum)


@dataclass
class Batch:
    point_features: torch.Tensor  # (sum N_p, F)
    point_positions: torch.Tensor  # (sum N_p, 3)
    point_index: torch.Tensor  # flat superpoint slot of every point
    centroids: torch.Tensor  # (B, S, 3)
    sp_mask: torch.Tensor  # (B, S)
    token_ids: torch.Tensor  # (B, T)
    token_mask: torch.Tensor  # (B, T)
    tree_mask: torch.Tensor  # (B, T, T)
    gt_superpoints: torch.Tensor  # (B, S) bool
    target_centroid: torch.Tensor  # (B, 3)
    target_index: torch.Tensor  # (B,)
    root_index: torch.Tensor  # (B,)
    uniform: torch.Tensor  # (B, T, 3) draws for random position init
    items: list

    @property
    def size(self):
        return self.centroids.shape[0]


def _uniform_draws(sample_id: str, n_tokens: int, seed: int, epoch: int) -> torch.Tensor:
    key = zlib.crc32(f"{sample_id}|{seed}|{epoch}".encode())
    g = torch.Generator().manual_seed(key)
    return torch.rand((n_tokens, 3), generator=g, dtype=torch.float64)


def collate(items: Sequence[PreparedSample], dtype=torch.float32, seed: int = 0, epoch: int = -1) -> Batch:
    B = len(items)
    S = max(it.num_superpoints for it in items)
    T = max(len(it.token_ids) for it in items)
    feats, poss, index = [], [], []
    centroids = torch.zeros(B, S, 3, dtype=dtype)
    sp_mask = torch.zeros(B, S, dtype=torch.bool)
    token_ids = torch.zeros(B, T, dtype=torch.long)
    token_mask = torch.zeros(B, T, dtype=torch.bool)
    tree_mask = torch.eye(T, dtype=torch.bool).repeat(B, 1, 1)
    gt = torch.zeros(B, S, dtype=torch.bool)
    uniform = torch.zeros(B, T, 3, dtype=dtype)
    for b, it in enumerate(items):
        n_s, n_t = it.num_superpoints, len(it.token_ids)
        feats.append(torch.tensor(it.point_features, dtype=dtype))
        poss.append(torch.tensor(it.point_positions, dtype=dtype))
        index.append(torch.tensor(it.assignment) + b * S)
        centroids[b, :n_s] = torch.tensor(it.centroids, dtype=dtype)
        sp_mask[b, :n_s] = True
        token_ids[b, :n_t] = torch.as_tensor(it.token_ids)
        token_mask[b, :n_t] = True
        tree_mask[b, :n_t, :n_t] = it.tree_mask
        gt[b, :n_s] = torch.tensor(it.gt_superpoints)
        uniform[b, :n_t] = _uniform_draws(it.sample_id, n_t, seed, epoch).to(dtype)
    return Batch(
        point_features=torch.cat(feats), point_positions=torch.cat(poss), point_index=torch.cat(index),
        centroids=centroids, sp_mask=sp_mask, token_ids=token_ids, token_mask=token_mask,
        tree_mask=tree_mask, gt_superpoints=gt,
        target_centroid=torch.as_tensor(np.stack([it.target_centroid for it in items]), dtype=dtype),
        target_index=torch.tensor([it.target_index for it in items]),
        root_index=torch.tensor([it.root_index for it in items]),
        uniform=uniform, items=list(items))


@dataclass
class Outputs:
    S: torch.Tensor  # projected superpoint features (B, S, D)
    A: torch.Tensor  # token-to-superpoint distribution (B, T, S)
    state0: KernelState
    states: list  # rounds 1..L
    attentions: list  # cross-attention per round (B, H, T, S)


class RGSAN(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.pe = config.pe()
        self.point_encoder = PointEncoder(config.feature_dim, config.point_dim, config.position_scale)
        self.embedding = nn.Embedding(config.vocab_size, config.text_dim)
        self.proj = ProjectionParams(config.text_dim, config.point_dim, config.dim, config.heads)
        self.tlm = TlmParams(config.dim)
        self.layers = nn.ModuleList(
            SaaParams(config.dim, config.heads, config.rpe_bins, config.ffn_dim) for _ in range(config.rounds))
        self.score_head = nn.Linear(config.dim, 1)
        nn.init.zeros_(self.score_head.weight)
        nn.init.zeros_(self.score_head.bias)

    def superpoint_features(self, batch: Batch) -> torch.Tensor:
        point_feats = self.point_encoder(batch.point_features, batch.point_positions)
        B, S = batch.sp_mask.shape
        pooled = segment_mean(point_feats, batch.point_index, B * S)
        return pooled.view(B, S, -1)

    def forward(self, batch: Batch, rounds: Optional[int] = None) -> Outputs:
        S_p = self.superpoint_features(batch)
        E0 = self.embedding(batch.token_ids)
        E_hat0, S_hat = project_and_ddi(E0, S_p, self.proj, batch.tree_mask)
        state0, A = initialize_kernels(self.config.init_scheme, E_hat0, S_hat, batch.centroids, self.tlm,
                                       batch.sp_mask, uniform=batch.uniform)
        if self.config.text_residual:
            state0 = KernelState(state0.embeddings + E_hat0, state0.positions, 0)
        states, attns = run_decoder(state0, S_hat, batch.centroids, self.layers, self.tlm, self.pe,
                                    rounds, batch.token_mask, batch.sp_mask, return_attention=True)
        return Outputs(S_hat, A, state0, states, attns)

    def target_indices(self, batch: Batch, out: Outputs, supervision: str, training: bool) -> torch.Tensor:
        if supervision == "rts":
            return batch.target_index
        if supervision == "root":
            return batch.root_index
        if supervision == "top1":
            if training:
                # token whose final cross-attention puts the most mass on the target superpoints
                attn = out.attentions[-1].mean(-3).detach()
                mass = (attn * batch.gt_superpoints.unsqueeze(-2)).sum(-1)
            else:
                mass = torch.sigmoid(self.score_head(out.states[-1].embeddings)).squeeze(-1).detach()
            mass = mass.masked_fill(~batch.token_mask, float("-inf"))
            return mass.argmax(-1)
        raise ValueError(f"unknown supervision strategy {supervision!r}")

    def round_predictions(self, state: KernelState, S_hat, idx):
        b = torch.arange(len(idx))
        kernel = state.embeddings[b, idx]
        M, mask = response_map(kernel, S_hat)
        score = torch.sigmoid(self.score_head(kernel)).squeeze(-1)
        return M, mask, score, state.positions[b, idx]

    def loss(self, batch: Batch, out: Outputs, weights: LossWeights, supervision: str = "rts",
             deep_supervision: bool = True):
        """Per-round bundles averaged (or the last round only); each term is a batch mean."""
        idx = self.target_indices(batch, out, supervision, training=True)
        states = out.states if deep_supervision else out.states[-1:]
        bundles = []
        for st in states:
            M, mask, score, pos = self.round_predictions(st, out.S, idx)
            valid = batch.sp_mask
            bundles.append(total_loss(
                bce_loss(M, batch.gt_superpoints, valid).mean(),
                dice_loss(M, batch.gt_superpoints, valid).mean(),
                position_loss(pos, batch.target_centroid).mean(),
                score_loss(score, M, mask, batch.gt_superpoints, valid).mean(),
                weights))
        return average_bundles(bundles)

    @torch.no_grad()
    def predict(self, batch: Batch, supervision: str = "rts") -> dict:
        out = self(batch)
        idx = self.target_indices(batch, out, supervision, training=False)
        M, mask, score, pos = self.round_predictions(out.states[-1], out.S, idx)
        mask = mask & batch.sp_mask
        return {"outputs": out, "target_index": idx, "response_map": M, "mask": mask, "score": score,
                "target_position": pos,
                "sp_iou": mask_iou(mask, batch.gt_superpoints, batch.sp_mask)}
