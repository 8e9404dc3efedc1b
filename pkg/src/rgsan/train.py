"""Training, evaluation, inference, checkpoints and the finite-difference gradient check."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .metrics import EvalRecord, aggregate, point_iou
from .model import SUPERVISION, Batch, ModelConfig, RGSAN, collate, prepare_sample
from .rws import LossWeights
from .scene import expand_to_points, partition_for
from .synth import ReferringSample, template_vocabulary
from .text import Vocab, validation
from .tlm import INIT_SCHEMES

log = logging.getLogger(__name__)

SEED_ENV = "RGSAN_SEED"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay_epochs: list = field(default_factory=lambda: [26, 34, 46])
    decay_rate: float = 0.5
    rounds: int = 6
    batch_size: int = 32
    max_len: int = 80
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_pos: float = 0.5
    lambda_score: float = 0.5
    pe_kind: str = "table_rpe"
    init_scheme: str = "ti"
    supervision: str = "rts"
    deep_supervision: bool = True
    seed: int = 0
    epochs: int = 50
    max_steps: Optional[int] = None
    dim: int = 32
    text_dim: int = 32
    point_dim: int = 32
    heads: int = 1
    rpe_range: float = 4.0
    rpe_bins: int = 17
    cell_size: float = 0.5
    text_residual: bool = False
    ape_wavelength: float = 16.0
    ape_freqs: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.supervision not in SUPERVISION:
            raise ValueError(f"supervision must be one of {SUPERVISION}")
        self.decay_epochs = list(self.decay_epochs)
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_bce, self.lambda_dice, self.lambda_pos, self.lambda_score)

    def model_config(self, vocab_size: int, feature_dim: int = 3) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, dim=self.dim,
                           text_dim=self.text_dim, point_dim=self.point_dim, heads=self.heads,
                           rounds=self.rounds, pe_kind=self.pe_kind, rpe_range=self.rpe_range,
                           rpe_bins=self.rpe_bins, init_scheme=self.init_scheme,
                           text_residual=self.text_residual, ape_wavelength=self.ape_wavelength,
                           ape_freqs=self.ape_freqs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, env: Optional[dict] = None) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            doc["seed"] = int(env[SEED_ENV])
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr * config.decay_rate ** n


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: Optional[dict]
    epoch: int
    step: int
    config: dict
    vocab: list
    feature_dim: int = 3
    history: list = field(default_factory=list)

    def build_model(self) -> tuple[RGSAN, TrainConfig, Vocab]:
        cfg = TrainConfig.from_dict(self.config, env={})
        vocab = Vocab(self.vocab[1:])
        model = RGSAN(cfg.model_config(len(vocab), self.feature_dim))
        try:
            model.load_state_dict(self.model_state)
        except RuntimeError as exc:
            raise ValueError(f"checkpoint does not match its config: {exc}") from exc
        model.eval()
        return model, cfg, vocab


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(asdict(ckpt), tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path) -> Checkpoint:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(**doc)


def build_vocab(samples: Sequence[ReferringSample]) -> Vocab:
    vocab = template_vocabulary()
    for s in samples:
        for t in s.expression:
            vocab.add(t)
    return vocab


def _batches(n: int, size: int, order: Sequence[int]):
    for k in range(0, n, size):
        yield list(order[k:k + size])


def _check_finite(bundle, step):
    for name, value in bundle.items():
        if not torch.isfinite(value).all():
            raise TrainingError(f"non-finite loss term '{name}' at step {step}: {value.item()}")


def train(config: TrainConfig, samples: Sequence[ReferringSample], eval_samples=None,
          vocab: Optional[Vocab] = None, log_every: int = 0) -> Checkpoint:
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    vocab = vocab or build_vocab(samples)
    feature_dim = samples[0].scene.features.shape[1]
    model = RGSAN(config.model_config(len(vocab), feature_dim))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    prepared = [prepare_sample(s, vocab, config.cell_size, config.max_len) for s in samples]
    weights = config.weights()
    history = []
    rng = np.random.default_rng(config.seed)
    step = 0
    epoch = 0
    done = False
    while not done and epoch < config.epochs:
        lr = lr_at(epoch, config)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(prepared))
        model.train()
        epoch_losses = []
        for idx in _batches(len(prepared), config.batch_size, order):
            batch = collate([prepared[i] for i in idx], seed=config.seed, epoch=epoch)
            out = model(batch)
            bundle = model.loss(batch, out, weights, config.supervision, config.deep_supervision)
            _check_finite(bundle, step)
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            opt.step()
            epoch_losses.append({k: float(v.detach()) for k, v in bundle.items()})
            step += 1
            if log_every and step % log_every == 0:
                log.info("step %d epoch %d loss %.4f", step, epoch, bundle.total.item())
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        entry = {"epoch": epoch, "step": step, "lr": lr,
                 **{k: float(np.mean([e[k] for e in epoch_losses])) for k in epoch_losses[0]}}
        history.append(entry)
        epoch += 1
    ckpt = Checkpoint(model.state_dict(), opt.state_dict(), epoch, step, config.to_dict(),
                      list(vocab.itos), feature_dim, history)
    if eval_samples is not None:
        history[-1]["eval"] = evaluate(ckpt, eval_samples)["strata"]["overall"]
    return ckpt


def _predict_samples(model: RGSAN, cfg: TrainConfig, vocab: Vocab, samples, batch_size: int = 64):
    """Yields (sample, prepared item, per-sample prediction dict)."""
    prepared = [prepare_sample(s, vocab, cfg.cell_size, cfg.max_len) for s in samples]
    for k in range(0, len(prepared), batch_size):
        items = prepared[k:k + batch_size]
        batch = collate(items, seed=cfg.seed)
        pred = model.predict(batch, cfg.supervision)
        for b, it in enumerate(items):
            yield samples[k + b], it, batch, pred, b


def evaluate(checkpoint: Checkpoint, samples: Sequence[ReferringSample]) -> dict:
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    model, cfg, vocab = checkpoint.build_model()
    records = []
    for sample, it, batch, pred, b in _predict_samples(model, cfg, vocab, samples):
        sp_mask = pred["mask"][b, :it.num_superpoints].numpy()
        point_mask = sp_mask[it.assignment]
        records.append(EvalRecord(sample.sample_id, point_iou(point_mask, sample.gt_point_mask), it.stratum))
    report = aggregate(records)
    report["per_sample"] = {r.sample_id: r.iou for r in records}
    return report


def infer(checkpoint: Checkpoint, scene, tree) -> dict:
    """Prediction for one scene/tree pair, including the per-round token positions."""
    model, cfg, vocab = checkpoint.build_model()
    mask = np.zeros(scene.num_points, dtype=bool)
    sample = ReferringSample(scene, list(tree.tokens), tree, mask, "", -1, 0, sample_id=scene.scene_id or "infer")
    it = prepare_sample(sample, vocab, cfg.cell_size, cfg.max_len)
    batch = collate([it], seed=cfg.seed)
    pred = model.predict(batch, cfg.supervision)
    out = pred["outputs"]
    t = int(pred["target_index"][0])
    n_t = len(it.token_ids)
    sp_mask = pred["mask"][0, :it.num_superpoints].numpy()
    return {
        "target_index": t,
        "target_token": tree.tokens[t],
        "score": float(pred["score"][0]),
        "response_map": pred["response_map"][0, :it.num_superpoints].tolist(),
        "superpoint_mask": sp_mask.astype(int).tolist(),
        "point_mask": expand_to_points(sp_mask, partition_for(scene, cfg.cell_size)).astype(int).tolist(),
        "positions": [out.state0.positions[0, :n_t].tolist()] + [s.positions[0, :n_t].tolist() for s in out.states],
        "target_position": pred["target_position"][0].tolist(),
    }


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    seconds: float

    @property
    def failed(self) -> list:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed


def tiny_problem(seed: int = 0, dim: int = 8, n_tokens: int = 4, n_superpoints: int = 6, rounds: int = 2,
                 lambdas=(1.0, 1.0, 0.5, 0.5), pe_kind: str = "table_rpe"):
    """A float64 model and batch small enough for element-wise finite differences."""
    from .scene import PointCloudScene
    from .synth import ReferringSample
    from .text import DependencyTree, Edge

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    points_per_sp = 2
    n_p = n_superpoints * points_per_sp
    positions = rng.uniform(0, 3, size=(n_p, 3))
    assignment = np.repeat(np.arange(n_superpoints), points_per_sp)
    ids = np.where(assignment < 2, 0, np.where(assignment < 4, 1, -1))
    scene = PointCloudScene(positions, rng.uniform(0, 1, (n_p, 3)), ids, "tiny",
                            {0: "chair", 1: "table"}, assignment)
    tokens = ["the", "chair", "near", "table"][:n_tokens]
    tokens += ["."] * (n_tokens - len(tokens))
    edges = [Edge("det", 1, 0)] + [Edge("dep", 1, k) for k in range(2, n_tokens)]
    tree = DependencyTree(tuple(tokens), tuple(edges), 1)
    sample = ReferringSample(scene, tokens, tree, ids == 0, "chair", 0, 1, sample_id="tiny")
    cfg = TrainConfig(rounds=rounds, dim=dim, text_dim=dim, point_dim=dim, pe_kind=pe_kind,
                      lambda_bce=lambdas[0], lambda_dice=lambdas[1], lambda_pos=lambdas[2],
                      lambda_score=lambdas[3], seed=seed, rpe_range=2.0, rpe_bins=5)
    vocab = Vocab(tokens)
    model = RGSAN(cfg.model_config(len(vocab))).double()
    with torch.no_grad():
        # give zero-initialized layers generic values so every path is exercised
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, dtype=p.dtype))
    batch = collate([prepare_sample(sample, vocab, 1.0)], dtype=torch.float64, seed=seed)
    return model, batch, cfg


class _LossModule(torch.nn.Module):
    def __init__(self, model: RGSAN, cfg: TrainConfig):
        super().__init__()
        self.model = model
        self.cfg = cfg

    def forward(self, batch: Batch) -> torch.Tensor:
        out = self.model(batch)
        return self.model.loss(batch, out, self.cfg.weights(), self.cfg.supervision,
                               self.cfg.deep_supervision).total


def finite_difference_grads(module: torch.nn.Module, batch, step: float = 1e-4, chunk: int = 512) -> dict:
    """Central differences for every element of every parameter of ``module``.

    All perturbed copies of one tensor are evaluated in a single vmapped call.
    """
    from torch.func import functional_call, vmap

    params = {k: v.detach() for k, v in module.named_parameters()}
    grads = {}
    with torch.no_grad(), validation(False):
        for name, p in params.items():
            n = p.numel()
            eye = torch.eye(n, dtype=p.dtype).view(n, *p.shape) * step
            stack = torch.cat([p + eye, p - eye])

            def f(value, name=name):
                return functional_call(module, {**params, name: value}, (batch,))

            vals = torch.cat([vmap(f)(stack[k:k + chunk]) for k in range(0, 2 * n, chunk)])
            grads[name] = ((vals[:n] - vals[n:]) / (2 * step)).view(p.shape)
    return grads


def grad_check(seed: int = 0, step: float = 1e-4, tolerance: float = 1e-4, floor: float = 1e-6,
               **problem) -> GradCheckReport:
    """Max relative error per parameter tensor between autograd and central differences.

    The relative error of a tensor is max|g - g_fd| / max(max|g|, max|g_fd|, floor);
    the floor keeps gradients that vanish identically (e.g. attention key biases,
    which cancel inside the softmax) from dividing rounding noise by itself.
    """
    t0 = time.perf_counter()
    model, batch, cfg = tiny_problem(seed, **problem)
    module = _LossModule(model, cfg)
    module.zero_grad()
    module(batch).backward()
    numeric = finite_difference_grads(module, batch, step)
    errors = {}
    for name, p in module.named_parameters():
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        num = numeric[name]
        scale = max(analytic.abs().max().item(), num.abs().max().item())
        diff = (analytic - num).abs().max().item()
        errors[name.removeprefix("model.")] = diff / max(scale, floor)
    return GradCheckReport(errors, tolerance, time.perf_counter() - t0)
