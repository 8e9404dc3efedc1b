import json

import numpy as np
import pytest

from rgsan.metrics import stratify
from rgsan.rws import select_target_index
from rgsan.synth import (CLASS_SIZES, AmbiguousSceneError, DatasetError, PlacementError, SynthConfig, build_expression,
                         class_size, generate_dataset, generate_expression, generate_sample, generate_scene,
                         read_dataset, relation_holds, write_dataset)

CONFIG = SynthConfig(seed=7)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(CONFIG, 60)


class TestScene:
    def test_deterministic(self):
        a = generate_scene(CONFIG, seed=3)
        b = generate_scene(CONFIG, seed=3)
        assert a.equals(b)

    def test_fixed_instance_count(self):
        s = generate_scene(SynthConfig(seed=1, n_instances=(3, 3)))
        assert s.instances() == [0, 1, 2]

    def test_containment(self):
        s = generate_scene(CONFIG, ["chair", "table", "bed", "lamp"], seed=0)
        for i in s.instances():
            pts = s.positions[s.instance_mask(i)]
            size = np.array(class_size(s.instance_classes[i]))
            lo, hi = pts.min(0), pts.max(0)
            assert (hi[:2] - lo[:2] <= size[:2] + 1e-12).all()
            assert lo[2] >= 0.05 and hi[2] <= 0.05 + size[2]
        floor = s.positions[s.instance_ids == -1]
        assert (floor[:, 2] <= 0.02).all()
        assert (s.positions[:, :2] >= 0).all() and (s.positions[:, :2] <= 6).all()

    def test_boxes_disjoint(self):
        s = generate_scene(CONFIG, ["bed", "sofa", "table", "desk", "cabinet"], seed=4)
        boxes = [(s.positions[s.instance_mask(i), :2].min(0), s.positions[s.instance_mask(i), :2].max(0))
                 for i in s.instances()]
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                (la, ha), (lb, hb) = boxes[a], boxes[b]
                assert (ha < lb).any() or (hb < la).any()

    def test_overcrowded_room(self):
        tiny = SynthConfig(room_size=(2.5, 2.5, 3), max_retries=5)
        with pytest.raises(PlacementError):
            generate_scene(tiny, ["bed", "bed", "bed", "bed"], seed=0)


class TestExpressions:
    def test_unique_target_may_omit_relation(self):
        s = generate_scene(CONFIG, ["chair", "table", "bed"], seed=2)
        toks, tree, mask, t, rel = generate_expression(s, 0, seed=0, relations=())
        assert rel is None and toks[t] == "chair"
        assert select_target_index(tree) == t

    def test_left_relation_holds(self):
        rng = np.random.default_rng(0)
        checked = 0
        for k in range(200):
            s = generate_scene(CONFIG, ["chair", "chair", "table"], seed=int(rng.integers(1 << 30)))
            try:
                toks, tree, mask, t, rel = generate_expression(s, 0, seed=k, relations=("left",))
            except AmbiguousSceneError:
                continue
            assert "left" in toks
            c = {i: s.instance_centroid(i)[:2] for i in s.instances()}
            assert relation_holds("left", c[0], [c[2]]) and not relation_holds("left", c[1], [c[2]])
            checked += 1
        assert checked > 10

    def test_ambiguous(self):
        s = generate_scene(CONFIG, ["chair", "chair"], seed=0)
        with pytest.raises(AmbiguousSceneError, match="ambiguous scene"):
            generate_expression(s, 0, seed=0)

    @pytest.mark.parametrize("frame", ["plain", "there", "relcl"])
    @pytest.mark.parametrize("relation", ["left", "right", "closest", "farthest", "between"])
    def test_template_wiring(self, frame, relation):
        anchors = ["table", "bed"] if relation == "between" else ["table"]
        toks, tree, t = build_expression(frame, "chair", relation, anchors)
        assert toks[t] == "chair" and select_target_index(tree) == t

    def test_wiring_for_every_sample(self, dataset):
        for s in dataset:
            assert select_target_index(s.tree) == s.target_index
            assert s.expression[s.target_index] == s.target_class

    def test_masks_are_instance_indicators(self, dataset):
        for s in dataset:
            assert np.array_equal(s.gt_point_mask, s.scene.instance_ids == s.target_instance)
            assert s.scene.instance_classes[s.target_instance] == s.target_class


class TestStrata:
    def test_all_multiple(self):
        cfg = SynthConfig(seed=3, distractor_prob=1.0)
        assert all(stratify(s.scene, s.target_instance) == "multiple" for s in generate_dataset(cfg, 20))

    def test_all_unique(self):
        cfg = SynthConfig(seed=3, distractor_prob=0.0)
        assert all(stratify(s.scene, s.target_instance) == "unique" for s in generate_dataset(cfg, 20))


class TestDeterminism:
    def test_samples_independent_of_order(self):
        a = generate_dataset(CONFIG, 5, start=10)
        b = generate_sample(CONFIG, 12)
        assert a[2].scene.equals(b.scene) and a[2].expression == b.expression

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            SynthConfig.from_dict({"seed": 1, "colour": "red"})

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_instances=(1, 3))
        with pytest.raises(ValueError):
            SynthConfig(distractor_prob=1.5)


class TestDatasetFiles:
    def test_round_trip(self, dataset, tmp_path):
        write_dataset(dataset[:8], tmp_path)
        back = read_dataset(tmp_path)
        for a, b in zip(dataset[:8], back):
            assert a.scene.equals(b.scene)
            assert a.tree == b.tree and a.expression == b.expression
            assert np.array_equal(a.gt_point_mask, b.gt_point_mask)
            assert (a.target_class, a.target_instance, a.target_index, a.sample_id, a.relation) == \
                   (b.target_class, b.target_instance, b.target_index, b.sample_id, b.relation)

    def test_manifest_count(self, dataset, tmp_path):
        write_dataset(dataset[:5], tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["count"] == 5 == len(list(tmp_path.glob("*.scene.json")))

    def test_corrupted_mask(self, dataset, tmp_path):
        write_dataset(dataset[:3], tmp_path)
        sid = dataset[1].sample_id
        p = tmp_path / f"{sid}.mask.json"
        doc = json.loads(p.read_text())
        doc["mask"] = doc["mask"][:-4]
        p.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match=sid):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            read_dataset(tmp_path)


def test_class_sizes_fit_default_room():
    for name, size in CLASS_SIZES.items():
        assert max(size[:2]) < min(CONFIG.room_size[:2])
