import numpy as np
import pytest

from evifuse.errors import ValidationError
from evifuse.geometry import Box
from evifuse.heatmap import (
    EvidenceStack,
    ImageLabels,
    ScoredProposal,
    accumulate_heatmaps,
    background_channel,
    mask_absent,
    normalize_heatmaps,
)
from tests.oracles import paint_heatmaps


def random_proposals(rng, num_classes, width, height, count):
    proposals = []
    for _ in range(count):
        x0 = int(rng.integers(0, width))
        y0 = int(rng.integers(0, height))
        x1 = int(rng.integers(x0 + 1, width + 1))
        y1 = int(rng.integers(y0 + 1, height + 1))
        proposals.append(ScoredProposal(Box(x0, y0, x1, y1), tuple(rng.random(num_classes))))
    return proposals


class TestAccumulate:
    def test_single_window(self):
        stack = accumulate_heatmaps([ScoredProposal(Box(1, 1, 3, 3), (0.5, 1.0))], 2, 4, 4)
        expected = np.zeros((4, 4))
        expected[1:3, 1:3] = 0.5
        assert np.allclose(stack.data[0], expected)
        assert stack.data[1].sum() == pytest.approx(4.0)

    def test_no_proposals(self):
        stack = accumulate_heatmaps([], 3, 5, 4)
        assert stack.data.shape == (3, 4, 5)
        assert not stack.data.any()

    def test_matches_painting_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            width = int(rng.integers(1, 129))
            height = int(rng.integers(1, 129))
            num_classes = int(rng.integers(1, 9))
            proposals = random_proposals(rng, num_classes, width, height, int(rng.integers(0, 501)))
            fast = accumulate_heatmaps(proposals, num_classes, width, height).data
            slow = paint_heatmaps(proposals, num_classes, width, height)
            np.testing.assert_allclose(fast, slow, rtol=1e-4, atol=1e-8)

    def test_rejects_boxes_outside_image(self):
        with pytest.raises(ValidationError):
            accumulate_heatmaps([ScoredProposal(Box(0, 0, 5, 2), (1.0,))], 1, 4, 4)

    def test_rejects_wrong_score_length(self):
        with pytest.raises(ValidationError):
            accumulate_heatmaps([ScoredProposal(Box(0, 0, 2, 2), (1.0, 0.0))], 3, 4, 4)

    def test_scores_must_be_probabilities(self):
        with pytest.raises(ValidationError):
            ScoredProposal(Box(0, 0, 1, 1), (1.2,))


class TestNormalize:
    def setup_method(self):
        rng = np.random.default_rng(0)
        data = rng.random((3, 6, 7)) * 5 + 1
        data[2] = 4.0
        self.raw = EvidenceStack(data)

    def test_present_channels_span_unit_interval(self):
        labels = ImageLabels((1, 0, 1))
        stack = normalize_heatmaps(self.raw, labels)
        assert stack.data[0].min() == 0.0
        assert stack.data[0].max() == 1.0
        assert not stack.data[1].any()
        assert not stack.data[2].any()

    def test_label_count_must_match(self):
        with pytest.raises(ValidationError):
            normalize_heatmaps(self.raw, ImageLabels((1, 0)))

    def test_mask_absent(self):
        masked = mask_absent(self.raw, ImageLabels((0, 1, 0)))
        assert not masked.data[0].any()
        assert np.array_equal(masked.data[1], self.raw.data[1])

    def test_background_channel(self):
        labels = ImageLabels((1, 1, 0))
        stack = normalize_heatmaps(self.raw, labels)
        with_bg = background_channel(stack, labels)
        assert with_bg.has_background
        assert with_bg.channels == 4
        expected = np.maximum(0.0, 1.0 - stack.data[0] - stack.data[1])
        assert np.allclose(with_bg.data[0], expected)
        assert np.array_equal(with_bg.class_channel(1), stack.data[1])
        with pytest.raises(ValidationError):
            background_channel(with_bg, labels)


class TestImageLabels:
    def test_from_classes(self):
        labels = ImageLabels.from_classes(4, [3, 1])
        assert labels.y == (0, 1, 0, 1)
        assert labels.K == 2
        assert labels.present() == [1, 3]

    def test_require_present(self):
        with pytest.raises(ValidationError):
            ImageLabels((0, 0)).require_present()
        with pytest.raises(ValidationError):
            ImageLabels((0, 2))
