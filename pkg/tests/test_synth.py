import math

import numpy as np
import pytest

from evifuse.anchors import AnchorConfig
from evifuse.errors import ValidationError
from evifuse.geometry import Box, iou
from evifuse.instance import InstanceRecord
from evifuse.synth import (
    NoiseConfig,
    Scene,
    SceneObject,
    SynthConfig,
    build_dataset,
    generate_dataset,
    generate_scene,
    render_attention,
    render_embeddings,
    render_image,
    render_instance_scores,
    render_local_attention,
    render_proposal_scores,
)


class TestGenerateScene:
    def test_deterministic(self):
        assert generate_scene(5, 4, 96, 96) == generate_scene(5, 4, 96, 96)
        assert generate_scene(5, 4, 96, 96) != generate_scene(6, 4, 96, 96)

    def test_single_object(self):
        scene = generate_scene(3, 2, 64, 48, object_count=(1, 1))
        assert len(scene.objects) == 1
        assert scene.labels.K == 1

    def test_random_scenes_respect_constraints(self):
        for seed in range(1000):
            scene = generate_scene(seed, 4, 96, 80)
            assert 1 <= len(scene.objects) <= 3
            classes = [o.class_id for o in scene.objects]
            assert len(set(classes)) == len(classes)
            for k, obj in enumerate(scene.objects):
                assert obj.box.inside(96, 80)
                assert 24 <= obj.box.width <= 48
                assert 24 <= obj.box.height <= 48
                for other in scene.objects[k + 1:]:
                    assert iou(obj.box, other.box) <= 0.3

    def test_too_small_image(self):
        with pytest.raises(ValidationError):
            generate_scene(0, 2, 3, 3)

    def test_distinct_classes_need_enough_classes(self):
        with pytest.raises(ValidationError):
            generate_scene(0, 1, 64, 64, object_count=(2, 3))

    def test_scene_validation(self):
        with pytest.raises(ValidationError):
            Scene("s", 10, 10, 2, (SceneObject(0, Box(5, 5, 12, 8)),))
        with pytest.raises(ValidationError):
            Scene("s", 10, 10, 2, (SceneObject(2, Box(0, 0, 4, 4)),))

    def test_gt_map_later_objects_win(self):
        scene = Scene("s", 6, 4, 3, (SceneObject(0, Box(0, 0, 4, 4)), SceneObject(2, Box(2, 0, 6, 2))))
        gt = scene.gt_map()
        assert gt.dtype == np.uint16
        assert gt.tolist() == [
            [1, 1, 3, 3, 3, 3],
            [1, 1, 3, 3, 3, 3],
            [1, 1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0, 0],
        ]

    def test_record_roundtrip(self):
        scene = generate_scene(11, 4, 96, 96, image_id="image_0001")
        record = scene.to_record()
        assert record["schema"] == "ground_truth"
        assert Scene.from_record(record) == scene

    def test_record_missing_field(self):
        with pytest.raises(ValidationError):
            Scene.from_record({"image_id": "x"})


class TestDataset:
    def test_ids_and_seeds(self):
        scenes = generate_dataset(SynthConfig(num_images=3), seed=2)
        assert [s.image_id for s in scenes] == ["image_0000", "image_0001", "image_0002"]
        assert [s.seed for s in scenes] == [200006, 200007, 200008]

    def test_build_dataset(self):
        images = build_dataset(SynthConfig(num_images=2, width=48, height=48), seed=1)
        assert [i.scene.image_id for i in images] == ["image_0000", "image_0001"]
        assert all(i.proposals for i in images)
        assert images[0].attention.data.shape == (4, 48, 48)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(min_objects=3, max_objects=2)
        with pytest.raises(ValidationError):
            NoiseConfig(attention_shrink=0.0)
        with pytest.raises(ValidationError):
            NoiseConfig(outlier_rate=1.5)


class TestRenderEvidence:
    def setup_method(self):
        self.scene = Scene(
            "img",
            32,
            24,
            3,
            (SceneObject(0, Box(2, 2, 14, 14)), SceneObject(2, Box(16, 4, 30, 20))),
        )

    def test_proposal_scores(self):
        proposals = [Box(2, 2, 14, 14), Box(0, 16, 2, 24), Box(16, 4, 30, 20)]
        scored = render_proposal_scores(self.scene, proposals, NoiseConfig())
        assert scored[0].scores == (1.0, 0.0, 0.0)
        assert scored[1].scores == (0.0, 0.0, 0.0)
        assert scored[2].scores[2] == 1.0

    def test_noisy_scores_stay_in_range(self):
        proposals = [Box(x, y, x + 8, y + 8) for x in range(0, 24, 4) for y in range(0, 16, 4)]
        scored = render_proposal_scores(self.scene, proposals, NoiseConfig(score_noise=0.5, seed=3))
        values = np.array([p.scores for p in scored])
        assert values.min() >= 0.0 and values.max() <= 1.0
        again = render_proposal_scores(self.scene, proposals, NoiseConfig(score_noise=0.5, seed=3))
        assert [p.scores for p in again] == [p.scores for p in scored]

    def test_clean_attention_is_the_object_indicator(self):
        attention, patches = render_attention(self.scene, NoiseConfig())
        expected = np.zeros((24, 32))
        expected[2:14, 2:14] = 1.0
        assert np.array_equal(attention.data[0], expected)
        assert not attention.data[1].any()
        assert [p.instance_id for p in patches] == ["img:gt0", "img:gt1"]
        assert patches[1].patch.shape == (16, 14)

    def test_shrunk_attention_stays_inside(self):
        attention, _ = render_attention(self.scene, NoiseConfig(attention_shrink=0.5))
        hot = attention.data[0] > 0
        assert hot.any()
        assert not hot[:2].any() and not hot[14:].any()
        assert not hot[:, :3].any() and not hot[:, 13:].any()
        assert hot.sum() < 12 * 12

    def test_blurred_attention_spreads(self):
        attention, _ = render_attention(self.scene, NoiseConfig(attention_blur=2))
        channel = attention.data[0]
        assert channel.max() == pytest.approx(1.0)
        assert channel.min() >= 0.0
        assert channel[1, 1] > 0.0

    def test_local_attention_and_instance_scores(self):
        instances = [
            InstanceRecord("a", "img", Box(2, 2, 14, 14), 0),
            InstanceRecord("b", "img", Box(0, 16, 4, 24), 1),
        ]
        patches = render_local_attention(self.scene, instances, NoiseConfig())
        assert patches[0].patch.shape == (12, 12)
        assert patches[0].patch.min() == 1.0
        assert not patches[1].patch.any()
        scores = render_instance_scores(self.scene, instances, NoiseConfig())
        assert scores[0].scores == (1.0, 0.0, 0.0)
        assert scores[1].scores == (0.0, 0.0, 0.0)
        assert render_instance_scores(self.scene, [], NoiseConfig()) == []

    def test_render_image(self):
        image = render_image(self.scene, AnchorConfig(stride=4), NoiseConfig())
        assert image.proposals
        assert image.attention.data.shape == (3, 24, 32)
        assert all(len(p.scores) == 3 for p in image.proposals)


class TestEmbeddings:
    def setup_method(self):
        self.scene = Scene("img", 32, 32, 4, (SceneObject(1, Box(0, 0, 8, 8)),), seed=9)
        self.instances = [InstanceRecord(f"i{k}", "img", Box(0, 0, 8, 8), k % 4) for k in range(8)]

    def test_clean_embeddings_sit_on_centroids(self):
        vectors, flags = render_embeddings(self.instances, self.scene, NoiseConfig())
        assert not any(flags)
        for instance, vector in zip(self.instances, vectors):
            assert len(vector) == 32
            assert vector[instance.class_id] == 1.0
            assert sum(abs(v) for v in vector) == 1.0

    def test_noisy_embeddings_are_unit_norm(self):
        vectors, _ = render_embeddings(self.instances, self.scene, NoiseConfig(embedding_noise=0.3))
        assert render_embeddings(self.instances, self.scene, NoiseConfig(embedding_noise=0.3))[0] == vectors
        for vector in vectors:
            assert math.isclose(np.linalg.norm(vector), 1.0, rel_tol=1e-9)

    def test_planted_outliers_are_far_from_every_centroid(self):
        vectors, flags = render_embeddings(self.instances, self.scene, NoiseConfig(outlier_rate=1.0))
        assert all(flags)
        for vector in vectors:
            for c in range(4):
                axis = np.zeros(32)
                axis[c] = 1.0
                assert np.linalg.norm(np.array(vector) - axis) > 0.8

    def test_dimension_grows_with_classes(self):
        vectors, _ = render_embeddings(self.instances[:1], self.scene, NoiseConfig(embedding_dim=2))
        assert len(vectors[0]) == 5
