"""Point clouds, superpoint partitions and superpoint-level pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch


class SceneError(ValueError):
    pass


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloudScene:
    positions: np.ndarray
    features: np.ndarray
    instance_ids: np.ndarray
    scene_id: str = ""
    # instance id -> class name; needed for unique/multiple stratification
    instance_classes: dict = field(default_factory=dict)
    superpoint_assignment: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise SceneError(f"positions must be N x 3, got {pos.shape}")
        if len(pos) == 0:
            raise SceneError("empty point cloud")
        if not np.isfinite(pos).all():
            raise SceneError("positions must be finite")
        feats = _frozen(self.features, np.float64)
        if feats.ndim == 1 and feats.size == 0:
            feats = _frozen(np.zeros((len(pos), 0)), np.float64)
        if feats.ndim != 2 or len(feats) != len(pos):
            raise SceneError(f"features must be {len(pos)} x F, got {feats.shape}")
        ids = _frozen(self.instance_ids, np.int64)
        if ids.shape != (len(pos),):
            raise SceneError(f"instance_ids must have length {len(pos)}, got {ids.shape}")
        if (ids < -1).any():
            raise SceneError("instance ids must be >= -1")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "instance_ids", ids)
        object.__setattr__(self, "instance_classes",
                           {int(k): str(v) for k, v in self.instance_classes.items()})
        if self.superpoint_assignment is not None:
            sp = _frozen(self.superpoint_assignment, np.int64)
            SuperpointPartition(sp, int(sp.max()) + 1 if len(sp) else 0).check(len(pos))
            object.__setattr__(self, "superpoint_assignment", sp)

    @property
    def num_points(self) -> int:
        return len(self.positions)

    def instances(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.instance_ids) if i >= 0)

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.instance_ids == instance_id

    def instance_centroid(self, instance_id: int) -> np.ndarray:
        return self.positions[self.instance_mask(instance_id)].mean(axis=0)

    def to_dict(self) -> dict:
        doc = {
            "scene_id": self.scene_id,
            "positions": self.positions.tolist(),
            "features": self.features.tolist(),
            "instance_ids": self.instance_ids.tolist(),
        }
        if self.instance_classes:
            doc["instance_classes"] = {str(k): v for k, v in sorted(self.instance_classes.items())}
        if self.superpoint_assignment is not None:
            doc["superpoint_assignment"] = self.superpoint_assignment.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PointCloudScene":
        for key in ("scene_id", "positions", "features", "instance_ids"):
            if key not in doc:
                raise SceneError(f"scene document is missing field '{key}'")
        return cls(
            positions=np.asarray(doc["positions"], dtype=np.float64).reshape(-1, 3),
            features=doc["features"],
            instance_ids=doc["instance_ids"],
            scene_id=str(doc["scene_id"]),
            instance_classes={int(k): v for k, v in doc.get("instance_classes", {}).items()},
            superpoint_assignment=doc.get("superpoint_assignment"),
        )

    def equals(self, other: "PointCloudScene") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)

        return (self.scene_id == other.scene_id
                and same(self.positions, other.positions)
                and same(self.features, other.features)
                and same(self.instance_ids, other.instance_ids)
                and self.instance_classes == other.instance_classes
                and same(self.superpoint_assignment, other.superpoint_assignment))


def save_scene(scene: PointCloudScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict()))


def load_scene(path) -> PointCloudScene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        return PointCloudScene.from_dict(doc)
    except (json.JSONDecodeError, SceneError, ValueError, TypeError) as exc:
        raise SceneError(f"{path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class SuperpointPartition:
    assignment: np.ndarray
    num_superpoints: int

    def __post_init__(self):
        object.__setattr__(self, "assignment", _frozen(self.assignment, np.int64))
        object.__setattr__(self, "num_superpoints", int(self.num_superpoints))
        self.check()

    def check(self, num_points: Optional[int] = None) -> None:
        a = self.assignment
        if a.ndim != 1:
            raise SceneError("superpoint assignment must be one-dimensional")
        if num_points is not None and len(a) != num_points:
            raise SceneError(f"assignment length {len(a)} != number of points {num_points}")
        if len(a) and (a.min() < 0 or a.max() >= self.num_superpoints):
            raise SceneError("superpoint ids out of range")
        counts = np.bincount(a, minlength=self.num_superpoints)
        if (counts == 0).any():
            raise SceneError(f"empty superpoints: {np.flatnonzero(counts == 0).tolist()}")

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_superpoints)


@dataclass(frozen=True, eq=False)
class SuperpointBank:
    features: torch.Tensor  # N_s x C
    centroids: torch.Tensor  # N_s x 3


def build_superpoint_partition(scene: PointCloudScene, cell_size: float) -> SuperpointPartition:
    """Group points by voxel-grid cell; ids are dense and ordered by first occurrence."""
    if cell_size <= 0:
        raise SceneError("cell_size must be positive")
    if scene.num_points == 0:
        raise SceneError("empty point cloud")
    cells = np.floor(scene.positions / cell_size).astype(np.int64)
    _, first, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # np.unique sorts lexicographically; relabel by first occurrence
    order = np.argsort(first, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    return SuperpointPartition(relabel[inverse], len(order))


def partition_for(scene: PointCloudScene, cell_size: float) -> SuperpointPartition:
    """Use the scene's stored assignment when present, voxel clustering otherwise."""
    if scene.superpoint_assignment is not None:
        a = scene.superpoint_assignment
        return SuperpointPartition(a, int(a.max()) + 1)
    return build_superpoint_partition(scene, cell_size)


def segment_mean(values: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Mean of rows of ``values`` grouped by ``index`` (differentiable)."""
    out = values.new_zeros((num_segments,) + values.shape[1:])
    out.index_add_(0, index, values)
    counts = torch.bincount(index, minlength=num_segments).to(values.dtype)
    return out / counts.clamp(min=1).view(-1, *([1] * (values.dim() - 1)))


def superpoint_pool_features(point_features, partition: SuperpointPartition):
    """Average point features inside each superpoint.

    Accepts a numpy array or a torch tensor and returns the same kind.
    """
    as_numpy = isinstance(point_features, np.ndarray)
    x = torch.tensor(point_features) if as_numpy else point_features
    if x.dim() != 2 or x.shape[0] != len(partition.assignment):
        raise SceneError(
            f"point features {tuple(x.shape)} do not match {len(partition.assignment)} points")
    index = torch.tensor(partition.assignment, device=x.device)
    pooled = segment_mean(x, index, partition.num_superpoints)
    return pooled.numpy() if as_numpy else pooled


def superpoint_centroids(scene: PointCloudScene, partition: SuperpointPartition) -> np.ndarray:
    partition.check(scene.num_points)
    return superpoint_pool_features(scene.positions, partition)


def pool_gt_mask(point_mask, partition: SuperpointPartition) -> np.ndarray:
    point_mask = np.asarray(point_mask)
    if point_mask.shape != partition.assignment.shape:
        raise SceneError("mask length does not match the partition")
    sums = np.bincount(partition.assignment, weights=point_mask.astype(np.float64),
                       minlength=partition.num_superpoints)
    frac = sums / partition.counts()
    # strictly more than half of the member points
    return frac > 0.5


def target_centroid_gt(scene: PointCloudScene, partition: SuperpointPartition, point_mask) -> np.ndarray:
    sp_mask = pool_gt_mask(point_mask, partition)
    if not sp_mask.any():
        raise SceneError("degenerate target")
    return superpoint_centroids(scene, partition)[sp_mask].mean(axis=0)


def expand_to_points(sp_values: np.ndarray, partition: SuperpointPartition) -> np.ndarray:
    return np.asarray(sp_values)[partition.assignment]
