"""Tokens, vocabulary, dependency trees and the language/vision projection."""
from __future__ import annotations

import contextlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
from torch import nn

MAX_LEN = 80
UNK = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


_VALIDATE = [True]


@contextlib.contextmanager
def validation(enabled: bool):
    """Toggle data-dependent input checks (they cannot run under ``torch.func.vmap``)."""
    prev = _VALIDATE[0]
    _VALIDATE[0] = enabled
    try:
        yield
    finally:
        _VALIDATE[0] = prev


def validating() -> bool:
    return _VALIDATE[0]


class TreeError(ValueError):
    """Malformed dependency-tree document; the message names the location."""


def tokenize(expression: str, max_len: int = MAX_LEN) -> list[str]:
    if not expression or not expression.strip():
        raise ValueError("cannot tokenize an empty expression")
    tokens = _TOKEN_RE.findall(expression.lower())
    return tokens[:max_len]


class Vocab:
    """Word -> row index; row 0 is the shared out-of-vocabulary slot."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos = [UNK]
        self.stoi = {UNK: 0}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 0) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[1:]) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        words = [w for w in Path(path).read_text().splitlines() if w]
        return cls(w for w in words if w != UNK)


def embed_tokens(tokens: Sequence[str], table: nn.Embedding, vocab: Vocab) -> torch.Tensor:
    ids = torch.tensor(vocab.encode(tokens), dtype=torch.long, device=table.weight.device)
    return table(ids)


@dataclass(frozen=True)
class Edge:
    relation: str
    head: int
    tail: int


@dataclass(frozen=True)
class DependencyTree:
    tokens: tuple
    edges: tuple
    root: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "edges", tuple(
            e if isinstance(e, Edge) else Edge(*e) for e in self.edges))
        validate_tree(self)

    def __len__(self):
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "edges": [{"relation": e.relation, "head": e.head, "tail": e.tail} for e in self.edges],
            "root": self.root,
        }


def validate_tree(tree: DependencyTree) -> None:
    n = len(tree.tokens)
    if n == 0:
        raise TreeError("tokens: empty token list")
    for i, tok in enumerate(tree.tokens):
        if not isinstance(tok, str) or not tok:
            raise TreeError(f"tokens[{i}]: empty or non-string token")
    parent = {}
    for k, e in enumerate(tree.edges):
        for name in ("head", "tail"):
            v = getattr(e, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < n:
                raise TreeError(f"edges[{k}].{name}: index {v!r} out of range [0, {n})")
        if e.head == e.tail:
            raise TreeError(f"edges[{k}]: head and tail are both {e.head}")
        if e.tail in parent:
            raise TreeError(f"edges[{k}].tail: token {e.tail} already has a head")
        parent[e.tail] = e.head
    roots = [i for i in range(n) if i not in parent]
    if len(roots) != 1:
        raise TreeError(f"root: expected exactly one root, found {roots}")
    if tree.root != roots[0]:
        raise TreeError(f"root: declared root {tree.root} but inferred {roots[0]}")
    # single root + one head per node: a cycle leaves nodes unreachable from the root
    for start in range(n):
        seen, node = set(), start
        while node in parent:
            if node in seen:
                raise TreeError(f"edges: cycle through token {node}")
            seen.add(node)
            node = parent[node]


def load_dependency_tree(document: dict) -> DependencyTree:
    if not isinstance(document, dict):
        raise TreeError("document: expected an object")
    for key in ("tokens", "edges"):
        if key not in document:
            raise TreeError(f"{key}: missing field")
    if not isinstance(document["tokens"], list):
        raise TreeError("tokens: expected a list")
    edges = []
    for k, e in enumerate(document["edges"]):
        try:
            edges.append(Edge(str(e["relation"]), e["head"], e["tail"]))
        except (KeyError, TypeError) as exc:
            raise TreeError(f"edges[{k}]: malformed edge ({exc})") from exc
    tails = {e.tail for e in edges}
    inferred = [i for i in range(len(document["tokens"])) if i not in tails]
    root = document.get("root", inferred[0] if len(inferred) == 1 else -1)
    return DependencyTree(tuple(document["tokens"]), tuple(edges), root)


def read_tree(path) -> DependencyTree:
    path = Path(path)
    try:
        return load_dependency_tree(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise TreeError(f"{path}: invalid JSON ({exc})") from exc
    except TreeError as exc:
        raise TreeError(f"{path}: {exc}") from exc


def write_tree(tree: DependencyTree, path) -> None:
    Path(path).write_text(json.dumps(tree.to_dict()))


def dependency_mask(tree: Optional[DependencyTree], n: int) -> torch.Tensor:
    """Boolean n x n matrix permitting attention between dependency neighbours and self."""
    mask = torch.eye(n, dtype=torch.bool)
    if tree is not None:
        for e in tree.edges:
            if e.head < n and e.tail < n:
                mask[e.head, e.tail] = mask[e.tail, e.head] = True
    return mask


def masked_softmax(logits: torch.Tensor, mask: Optional[torch.Tensor], dim: int = -1) -> torch.Tensor:
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    logits = logits - logits.amax(dim=dim, keepdim=True).detach()
    weights = logits.exp()
    return weights / weights.sum(dim=dim, keepdim=True)


class DependencyAttention(nn.Module):
    """One residual self-attention block restricted to dependency-adjacent tokens."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def attention(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Attention weights of shape (..., heads, N, N)."""
        *lead, n, d = x.shape
        hd = d // self.heads
        q = self.q(x).view(*lead, n, self.heads, hd).transpose(-2, -3)
        k = self.k(x).view(*lead, n, self.heads, hd).transpose(-2, -3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        return masked_softmax(logits, mask.unsqueeze(-3))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        hd = d // self.heads
        attn = self.attention(x, mask)
        v = self.v(x).view(*lead, n, self.heads, hd).transpose(-2, -3)
        mixed = (attn @ v).transpose(-2, -3).reshape(*lead, n, d)
        return x + self.out(mixed)


class ProjectionParams(nn.Module):
    """Language/vision projections into the shared width plus the dependency block."""

    def __init__(self, text_dim: int, point_dim: int, dim: int, heads: int = 1):
        super().__init__()
        self.w_lang = nn.Linear(text_dim, dim, bias=False)
        self.w_vis = nn.Linear(point_dim, dim, bias=False)
        self.ddi = DependencyAttention(dim, heads)


def project_and_ddi(E0: torch.Tensor, S_p: torch.Tensor, params: ProjectionParams,
                    tree_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if E0.shape[-1] != params.w_lang.in_features:
        raise ValueError(f"text width {E0.shape[-1]} != {params.w_lang.in_features}")
    if S_p.shape[-1] != params.w_vis.in_features:
        raise ValueError(f"point width {S_p.shape[-1]} != {params.w_vis.in_features}")
    if tree_mask.shape[-2:] != (E0.shape[-2], E0.shape[-2]):
        raise ValueError("tree mask does not match the number of tokens")
    return params.ddi(params.w_lang(E0), tree_mask), params.w_vis(S_p)
