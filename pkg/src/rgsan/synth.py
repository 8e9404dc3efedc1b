"""Synthetic rooms of box-shaped objects with templated referring expressions.

Spatial relations are judged on instance centroids projected to the floor
plane; "left" means smaller x.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scene import PointCloudScene, SceneError, load_scene, save_scene
from .text import DependencyTree, Edge, TreeError, Vocab, read_tree, write_tree

DEFAULT_CLASSES = ("chair", "table", "cabinet", "sofa", "desk", "bed", "lamp", "shelf", "door", "bin")

CLASS_SIZES = {
    "chair": (0.5, 0.5, 0.9),
    "table": (1.2, 0.8, 0.75),
    "cabinet": (0.8, 0.5, 1.2),
    "sofa": (1.8, 0.9, 0.8),
    "desk": (1.2, 0.6, 0.75),
    "bed": (2.0, 1.4, 0.5),
    "lamp": (0.3, 0.3, 1.5),
    "shelf": (1.0, 0.35, 1.8),
    "door": (0.9, 0.1, 2.0),
    "bin": (0.35, 0.35, 0.5),
}

RELATIONS = ("left", "right", "closest", "farthest", "between")
_REL_PREP = {"left": "of", "right": "of", "closest": "to", "farthest": "from"}
FRAMES = ("plain", "there", "relcl")

FLOOR_COLOR = (0.5, 0.5, 0.5)
MARGIN_LR = 0.1
MARGIN_DIST = 0.5


class PlacementError(RuntimeError):
    pass


class AmbiguousSceneError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    room_size: tuple = (6.0, 6.0, 3.0)
    n_instances: tuple = (4, 6)
    classes: tuple = DEFAULT_CLASSES
    points_per_instance: tuple = (40, 80)
    floor_points: int = 64
    distractor_prob: float = 0.8
    feature_noise: float = 0.05
    gap: float = 0.3
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "room_size", tuple(float(v) for v in self.room_size))
        object.__setattr__(self, "n_instances", tuple(int(v) for v in self.n_instances))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "points_per_instance", tuple(int(v) for v in self.points_per_instance))
        if len(self.room_size) != 3 or min(self.room_size) <= 0:
            raise ValueError("room_size must be three positive lengths")
        lo, hi = self.n_instances
        if lo < 2 or hi < lo:
            raise ValueError("n_instances must be a range with minimum >= 2")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must lie in [0, 1]")
        if len(set(self.classes)) < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class ReferringSample:
    scene: PointCloudScene
    expression: list
    tree: DependencyTree
    gt_point_mask: np.ndarray
    target_class: str
    target_instance: int
    target_index: int
    sample_id: str = ""
    relation: Optional[str] = None

    def __post_init__(self):
        self.gt_point_mask = np.asarray(self.gt_point_mask, dtype=bool)
        if list(self.tree.tokens) != list(self.expression):
            raise ValueError("tree tokens differ from expression tokens")
        if self.gt_point_mask.shape != (self.scene.num_points,):
            raise ValueError(f"{self.sample_id}: mask length {len(self.gt_point_mask)} "
                             f"!= {self.scene.num_points} points")


def class_color(name: str) -> np.ndarray:
    h = zlib.crc32(name.encode())
    rgb = np.array([(h >> s) & 0xFF for s in (0, 8, 16)], dtype=np.float64) / 255.0
    return 0.15 + 0.7 * rgb


def class_size(name: str) -> tuple:
    return CLASS_SIZES.get(name, (0.6, 0.6, 0.8))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _place_boxes(sizes, config: SynthConfig, rng) -> np.ndarray:
    room = np.array(config.room_size[:2])
    centers = []
    for size in sizes:
        half = np.array(size[:2]) / 2
        if (half * 2 >= room).any():
            raise PlacementError("object larger than the room")
        for _ in range(config.max_retries):
            c = rng.uniform(half, room - half)
            ok = all(
                (np.abs(c - oc) >= half + np.array(os_[:2]) / 2 + config.gap).any()
                for oc, os_ in zip(centers, sizes))
            if ok:
                centers.append(c)
                break
        else:
            raise PlacementError(
                f"could not place {len(sizes)} instances without overlap after {config.max_retries} retries")
    return np.array(centers)


def generate_scene(config: SynthConfig, class_plan: Optional[Sequence[str]] = None,
                   seed=None, scene_id: str = "") -> PointCloudScene:
    """Boxes resting on a floor; instance points inside boxes, floor points get id -1."""
    rng = _rng(config.seed if seed is None else seed)
    if class_plan is None:
        n = int(rng.integers(config.n_instances[0], config.n_instances[1] + 1))
        class_plan = [config.classes[k] for k in rng.integers(0, len(config.classes), n)]
    class_plan = list(class_plan)
    sizes = [class_size(c) for c in class_plan]
    centers = _place_boxes(sizes, config, rng)
    positions, features, ids = [], [], []
    lo_pts, hi_pts = config.points_per_instance
    for k, (cls, size, c) in enumerate(zip(class_plan, sizes, centers)):
        m = int(rng.integers(lo_pts, hi_pts + 1))
        half = np.array(size[:2]) / 2
        xy = rng.uniform(c - half, c + half, size=(m, 2))
        z = rng.uniform(0.05, 0.05 + size[2], size=(m, 1))
        positions.append(np.hstack([xy, z]))
        features.append(class_color(cls) + config.feature_noise * rng.standard_normal((m, 3)))
        ids.append(np.full(m, k))
    f = config.floor_points
    room = np.array(config.room_size)
    positions.append(np.hstack([rng.uniform(0, room[:2], size=(f, 2)), rng.uniform(0, 0.02, size=(f, 1))]))
    features.append(np.array(FLOOR_COLOR) + config.feature_noise * rng.standard_normal((f, 3)))
    ids.append(np.full(f, -1))
    return PointCloudScene(
        positions=np.vstack(positions),
        features=np.clip(np.vstack(features), 0.0, 1.0),
        instance_ids=np.concatenate(ids),
        scene_id=scene_id,
        instance_classes={k: c for k, c in enumerate(class_plan)},
    )


# ---------------------------------------------------------------------------
# expressions


def _centroids_xy(scene: PointCloudScene) -> dict:
    return {i: scene.instance_centroid(i)[:2] for i in scene.instances()}


def relation_holds(relation: str, target_xy, anchors_xy) -> bool:
    """Geometric truth of ``relation`` for a target centroid against anchor centroid(s)."""
    t = np.asarray(target_xy)
    if relation == "between":
        a1, a2 = (np.asarray(a) for a in anchors_xy)
        seg = a2 - a1
        s = float((t - a1) @ seg / (seg @ seg))
        perp = float(np.linalg.norm(t - (a1 + s * seg)))
        return 0.1 < s < 0.9 and perp < 0.75
    a = np.asarray(anchors_xy[0])
    if relation == "left":
        return t[0] < a[0] - MARGIN_LR
    if relation == "right":
        return t[0] > a[0] + MARGIN_LR
    raise ValueError(f"relation {relation!r} is comparative")


def _far_from_between(t, anchors_xy) -> bool:
    a1, a2 = (np.asarray(a) for a in anchors_xy)
    seg = a2 - a1
    s = float((t - a1) @ seg / (seg @ seg))
    perp = float(np.linalg.norm(t - (a1 + s * seg)))
    return s < 0 or s > 1 or perp > 1.5


def identifies(relation: str, target: int, others: Sequence[int], anchors: Sequence[int], cxy: dict) -> bool:
    """True when the relation holds for the target and clearly fails for every same-class distractor."""
    t = cxy[target]
    axy = [cxy[a] for a in anchors]
    if relation in ("closest", "farthest"):
        d_t = np.linalg.norm(t - axy[0])
        d_o = [np.linalg.norm(cxy[o] - axy[0]) for o in others]
        if not d_o:
            return True
        if relation == "closest":
            return d_t + MARGIN_DIST < min(d_o)
        return d_t > max(d_o) + MARGIN_DIST
    if not relation_holds(relation, t, axy):
        return False
    if relation == "between":
        return all(_far_from_between(cxy[o], axy) for o in others)
    opposite = "right" if relation == "left" else "left"
    return all(relation_holds(opposite, cxy[o], axy) for o in others)


def _relation_tokens(relation: str, head: int, start: int, anchors: Sequence[str]):
    """Tokens and edges for a relation phrase attached to token ``head``."""
    toks, edges = [], []
    if relation == "between":
        a1, a2 = anchors
        # between the a1 and the a2
        b, d1, n1, c, d2, n2 = range(start, start + 6)
        toks = ["between", "the", a1, "and", "the", a2]
        edges = [Edge("nmod", head, n1), Edge("case", n1, b), Edge("det", n1, d1),
                 Edge("conj", n1, n2), Edge("cc", n2, c), Edge("det", n2, d2)]
        return toks, edges
    word = {"left": "left", "right": "right", "closest": "closest", "farthest": "farthest"}[relation]
    r, p, d, n = range(start, start + 4)
    toks = [word, _REL_PREP[relation], "the", anchors[0]]
    edges = [Edge("amod", head, r), Edge("obl", r, n), Edge("case", n, p), Edge("det", n, d)]
    return toks, edges


def build_expression(frame: str, target_class: str, relation: Optional[str] = None,
                     anchors: Sequence[str] = ()) -> tuple[list, DependencyTree, int]:
    """Fill a template; returns (tokens, dependency tree, index of the target noun)."""
    if frame == "plain":
        toks = ["the", target_class]
        t = 1
        edges = [Edge("det", t, 0)]
        root = t
        attach = t
    elif frame == "there":
        toks = ["there", "is", "a", target_class]
        t = 3
        edges = [Edge("expl", 1, 0), Edge("nsubj", 1, t), Edge("det", t, 2)]
        root = 1
        attach = t
    elif frame == "relcl":
        if relation is None:
            raise ValueError("relcl frame needs a relation")
        toks = ["the", target_class, "that", "is"]
        t = 1
        edges = [Edge("det", t, 0), Edge("acl:relcl", t, 3), Edge("nsubj", 3, 2)]
        root = t
        attach = 3
    else:
        raise ValueError(f"unknown frame {frame!r}")
    if relation is not None:
        rt, re_ = _relation_tokens(relation, attach, len(toks), anchors)
        toks += rt
        edges += re_
    elif frame == "plain":
        # "the <class> in the room"
        n0 = len(toks)
        toks += ["in", "the", "room"]
        edges += [Edge("nmod", t, n0 + 2), Edge("case", n0 + 2, n0), Edge("det", n0 + 2, n0 + 1)]
    toks.append(".")
    edges.append(Edge("punct", root, len(toks) - 1))
    return toks, DependencyTree(tuple(toks), tuple(edges), root), t


def candidate_descriptions(scene: PointCloudScene, target: int,
                           relations: Sequence[str] = RELATIONS) -> list:
    """All (frame, relation, anchor ids) that truthfully and uniquely describe ``target``."""
    classes = scene.instance_classes
    tcls = classes[target]
    present = scene.instances()
    others = [i for i in present if classes[i] == tcls and i != target]
    counts = {}
    for i in present:
        counts[classes[i]] = counts.get(classes[i], 0) + 1
    unique_anchors = [i for i in present if classes[i] != tcls and counts[classes[i]] == 1]
    cxy = _centroids_xy(scene)
    out = []
    for rel in relations:
        if rel == "between":
            pairs = [(a, b) for a in unique_anchors for b in unique_anchors if a < b]
            anchor_sets = pairs
        else:
            anchor_sets = [(a,) for a in unique_anchors]
        for anchors in anchor_sets:
            if rel in ("closest", "farthest") and not others:
                continue  # superlatives need a comparison set
            if identifies(rel, target, others, anchors, cxy):
                for frame in FRAMES:
                    out.append((frame, rel, anchors))
    if not others:
        for frame in ("plain", "there"):
            out.append((frame, None, ()))
    return out


def generate_expression(scene: PointCloudScene, target: int, seed=None,
                        relations: Sequence[str] = RELATIONS):
    """Returns (tokens, tree, gt point mask, target token index, relation)."""
    if target not in scene.instances():
        raise ValueError(f"target instance {target} not in scene")
    rng = _rng(seed)
    cands = candidate_descriptions(scene, target, relations)
    if not cands:
        raise AmbiguousSceneError("ambiguous scene")
    frame, rel, anchors = cands[int(rng.integers(len(cands)))]
    names = [scene.instance_classes[a] for a in anchors]
    toks, tree, t = build_expression(frame, scene.instance_classes[target], rel, names)
    return toks, tree, scene.instance_mask(target), t, rel


def sample_seed(config: SynthConfig, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, index])


def generate_sample(config: SynthConfig, index: int) -> ReferringSample:
    """Sample ``index`` of the stream defined by ``config``; independent of other indices."""
    rng = np.random.default_rng(sample_seed(config, index))
    for _ in range(config.max_retries):
        tcls = config.classes[int(rng.integers(len(config.classes)))]
        multiple = rng.random() < config.distractor_prob
        n_total = int(rng.integers(config.n_instances[0], config.n_instances[1] + 1))
        n_same = 2 if multiple else 1
        pool = [c for c in config.classes if c != tcls]
        n_other = min(max(n_total - n_same, 1), len(pool))
        others = [pool[k] for k in rng.choice(len(pool), n_other, replace=False)]
        plan = [tcls] * n_same + others
        order = rng.permutation(len(plan))
        plan = [plan[k] for k in order]
        try:
            scene = generate_scene(config, plan, seed=rng, scene_id=f"scene_{index:05d}")
        except PlacementError:
            continue
        target = int(order.tolist().index(0))
        try:
            toks, tree, mask, t, rel = generate_expression(scene, target, seed=rng)
        except AmbiguousSceneError:
            continue
        return ReferringSample(scene, toks, tree, mask, tcls, target, t,
                               sample_id=f"sample_{index:05d}", relation=rel)
    raise AmbiguousSceneError(f"sample {index}: no describable scene after {config.max_retries} attempts")


def generate_dataset(config: SynthConfig, count: int, start: int = 0) -> list:
    return [generate_sample(config, start + k) for k in range(count)]


def template_vocabulary(classes: Sequence[str] = DEFAULT_CLASSES) -> Vocab:
    words = ["the", "a", "there", "is", "that", "in", "room", ".", "and", "between",
             "left", "right", "closest", "farthest", "of", "to", "from"]
    return Vocab(list(words) + list(classes))


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(samples: Sequence[ReferringSample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        sid = s.sample_id or f"sample_{k:05d}"
        files = {"scene": f"{sid}.scene.json", "tree": f"{sid}.tree.json", "mask": f"{sid}.mask.json"}
        save_scene(s.scene, d / files["scene"])
        write_tree(s.tree, d / files["tree"])
        (d / files["mask"]).write_text(json.dumps({"sample_id": sid, "mask": s.gt_point_mask.astype(int).tolist()}))
        entries.append({"id": sid, **files, "expression": list(s.expression),
                        "target_class": s.target_class, "target_instance": s.target_instance,
                        "target_index": s.target_index, "relation": s.relation})
    manifest = {"format": "rgsan-synth", "version": 1, "count": len(entries), "samples": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_dataset(directory) -> list:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{d / 'manifest.json'}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{d / 'manifest.json'}: invalid JSON ({exc})") from exc
    entries = manifest.get("samples", [])
    if manifest.get("count") != len(entries):
        raise DatasetError(f"{d / 'manifest.json'}: count {manifest.get('count')} != {len(entries)} entries")
    samples = []
    for e in entries:
        sid = e.get("id", "?")
        try:
            scene = load_scene(d / e["scene"])
            tree = read_tree(d / e["tree"])
            mask_path = d / e["mask"]
            mask = np.asarray(json.loads(mask_path.read_text())["mask"], dtype=bool)
            if mask.shape != (scene.num_points,):
                raise DatasetError(
                    f"sample {sid}: mask length {len(mask)} != {scene.num_points} points ({mask_path})")
            samples.append(ReferringSample(
                scene, list(e["expression"]), tree, mask, e["target_class"],
                int(e["target_instance"]), int(e["target_index"]), sample_id=sid,
                relation=e.get("relation")))
        except DatasetError:
            raise
        except (KeyError, SceneError, TreeError, ValueError, OSError) as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
    return samples


def config_to_dict(config: SynthConfig) -> dict:
    doc = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in doc.items()}
