import math

import numpy as np
import pytest

from src.geom import FeatureGraph, Segment
from src.green import integral
from src.feature import (
    FeatureError,
    FeatureSet,
    MollifierConfig,
    eval_feature,
    feature_scale,
    feature_values,
    normal_jump,
    load_feature_set,
    local_weight,
    mollifier,
    save_feature_set,
    support_pairs,
)


def single_segment(a=(0.0, 0.0), b=(0.05, 0.0), radius=0.08) -> FeatureSet:
    return FeatureSet(np.array([a, b]), [[0, 1]], [0], 1, MollifierConfig(radius))


def two_channel_set() -> FeatureSet:
    vertices = np.array([[0.0, 0.0], [0.05, 0.0], [0.5, 0.0], [0.55, 0.02]])
    return FeatureSet(vertices, [[0, 1], [2, 3]], [0, 1], 2, MollifierConfig(0.08))


class TestMollifier:
    @pytest.mark.parametrize("r, expected", [(0.0, 1.0), (1.0, 0.0), (2.0, 0.0), (-1.0, 0.0)])
    def test_values(self, r, expected):
        assert mollifier(r, MollifierConfig()) == pytest.approx(expected)

    def test_flat_at_support_boundary(self):
        cfg = MollifierConfig()
        h = 1e-4
        slope = (mollifier(1.0 + h, cfg) - mollifier(1.0 - h, cfg)) / (2.0 * h)
        assert abs(slope) < 1e-8

    def test_local_weight(self):
        seg = Segment([0.0, 0.0], [0.04, 0.0])
        cfg = MollifierConfig(0.08)
        assert local_weight([0.02, 0.0], seg, cfg) == pytest.approx(1.0)
        assert local_weight([0.02, 0.08], seg, cfg) == pytest.approx(0.0)
        x = np.array([0.02, 0.04])
        h = 1e-6
        fd = (local_weight(x + [0.0, h], seg, cfg) - local_weight(x - [0.0, h], seg, cfg)) / (2.0 * h)
        r = (0.04 / 0.08) ** 2
        exact = mollifier(r, cfg) * (-2.0 * r / (1.0 - r * r) ** 2) * 2.0 * 0.04 / 0.08**2
        assert fd == pytest.approx(exact, rel=1e-6)

    def test_rejects_bad_radius(self):
        with pytest.raises(FeatureError):
            MollifierConfig(radius=0.0)


class TestFeatureSet:
    def test_from_graph_uses_colors(self):
        g = FeatureGraph([[0, 0], [1, 0], [2, 0]], [[0, 1], [1, 2]], colors=[0, 2])
        fs = FeatureSet.from_graph(g)
        assert fs.n_channels == 3
        np.testing.assert_array_equal(fs.reg_edges, g.edges)
        assert fs.learnable.all()
        assert fs.merged().n_channels == 1

    def test_from_graph_rejects_3d(self):
        g = FeatureGraph(np.zeros((2, 3)), [[0, 1]])
        with pytest.raises(FeatureError):
            FeatureSet.from_graph(g)

    @pytest.mark.parametrize(
        "channels, n_channels",
        [([0, 1], 1), ([0], 1), ([0, 0], 0)],
        ids=["channel-out-of-range", "count-mismatch", "no-channels"],
    )
    def test_validation(self, channels, n_channels):
        with pytest.raises(FeatureError):
            FeatureSet(np.zeros((3, 2)), [[0, 1], [1, 2]], channels, n_channels)

    def test_learnable_shape(self):
        with pytest.raises(FeatureError):
            FeatureSet(np.zeros((3, 2)), [[0, 1]], [0], 1, learnable=[True])


class TestFeatureValues:
    def test_zero_outside_support(self):
        fs = single_segment()
        values = feature_values(np.array([[1.0, 1.0], [0.025, 0.2]]), fs)
        np.testing.assert_array_equal(values, 0.0)
        result = eval_feature([1.0, 1.0], fs)
        np.testing.assert_array_equal(result.grad_query, 0.0)
        assert result.grad_vertices == {}

    def test_equals_weight_times_integral(self):
        fs = single_segment()
        seg = fs.element(0)
        x = np.array([0.03, 0.02])
        expected = local_weight(x, seg, fs.mollifier) * integral(x, seg)
        assert feature_values(x[None], fs)[0, 0] == pytest.approx(expected, rel=1e-14)

    def test_channels_are_separate(self):
        fs = two_channel_set()
        values = feature_values(np.array([[0.02, 0.01], [0.52, 0.03]]), fs)
        assert values[0, 0] != 0.0 and values[0, 1] == 0.0
        assert values[1, 0] == 0.0 and values[1, 1] != 0.0

    def test_support_pairs_sorted(self):
        fs = two_channel_set()
        qi, ei = support_pairs(np.array([[0.52, 0.0], [0.02, 0.0]]), fs)
        np.testing.assert_array_equal(qi, [0, 1])
        np.testing.assert_array_equal(ei, [1, 0])

    def test_channel_locality(self):
        fs = two_channel_set()
        x = np.array([0.02, 0.015])
        before = eval_feature(x, fs).values
        moved = fs.vertices.copy()
        moved[3] += [0.1, -0.1]
        after = eval_feature(x, fs.with_vertices(moved)).values
        np.testing.assert_array_equal(before, after)

    def test_gradients_match_finite_differences(self, rng):
        fs = two_channel_set()
        h = 1e-6
        for _ in range(20):
            x = np.array([0.025, 0.0]) + rng.uniform(-0.05, 0.05, size=2)
            if abs(x[1]) < 1e-3:
                continue
            result = eval_feature(x, fs)
            for d in range(2):
                step = np.zeros(2)
                step[d] = h
                fd = (feature_values((x + step)[None], fs) - feature_values((x - step)[None], fs))[0] / (2 * h)
                np.testing.assert_allclose(result.grad_query[:, d], fd, rtol=1e-5, atol=1e-9)
            for v, g in result.grad_vertices.items():
                for d in range(2):
                    plus, minus = fs.vertices.copy(), fs.vertices.copy()
                    plus[v, d] += h
                    minus[v, d] -= h
                    fd = (
                        feature_values(x[None], fs.with_vertices(plus))
                        - feature_values(x[None], fs.with_vertices(minus))
                    )[0] / (2 * h)
                    np.testing.assert_allclose(g[:, d], fd, rtol=1e-5, atol=1e-9)

    def test_on_element_is_one_sided(self):
        fs = single_segment()
        result = eval_feature([0.02, 0.0], fs)
        assert result.one_sided
        assert np.all(np.isfinite(result.values))


class TestJump:
    @pytest.mark.parametrize("eps", [1e-3, 1e-4])
    def test_continuous_across_segment(self, eps):
        fs = single_segment()
        x0 = np.array([0.02, 0.0])
        n = np.array([0.0, 1.0])
        values = feature_values(np.stack([x0 + eps * n, x0 - eps * n]), fs)
        assert abs(values[0, 0] - values[1, 0]) <= 10.0 * eps

    @pytest.mark.parametrize("x0", [[0.025, 0.0], [0.035, 0.0], [0.01, 0.0]])
    def test_jump_equals_local_weight(self, x0):
        fs = single_segment()
        expected = local_weight(x0, fs.element(0), fs.mollifier)
        jump = normal_jump(fs, x0, [0.0, 1.0], 1e-4)
        assert jump == pytest.approx(expected, rel=0.02)

    def test_jump_on_tilted_segment(self):
        fs = single_segment(a=(0.0, 0.0), b=(0.03, 0.04))
        n = np.array([-0.8, 0.6])
        assert normal_jump(fs, [0.015, 0.02], n, 1e-4) == pytest.approx(1.0, rel=0.02)

    def test_direction_independent(self):
        fs = single_segment()
        x0, n = [0.02, 0.0], np.array([0.0, 1.0])
        assert normal_jump(fs, x0, n, 1e-4) == normal_jump(fs, x0, -n, 1e-4)

    def test_off_feature_raises(self):
        with pytest.raises(FeatureError):
            normal_jump(single_segment(), [0.02, 0.01], [0.0, 1.0], 1e-4)


class TestScaleAndFiles:
    def test_scale_normalizes_rms(self, rng):
        fs = two_channel_set()
        points = rng.uniform(-0.05, 0.6, size=(500, 2))
        scale = feature_scale(points, fs)
        values = feature_values(points, fs) * scale
        assert math.sqrt(np.mean(values**2)) == pytest.approx(1.0)

    def test_scale_defaults_to_one(self):
        assert feature_scale(np.array([[5.0, 5.0]]), single_segment()) == 1.0

    def test_2d_file(self, tmp_path):
        fs = FeatureSet.from_graph(
            FeatureGraph([[0, 0], [0.1, 0], [0.2, 0.05]], [[0, 1], [1, 2]], colors=[0, 1]),
            MollifierConfig(0.05),
            learnable=[False, True, False],
        )
        save_feature_set(tmp_path / "f.fg", fs, scale=12.5)
        back, scale = load_feature_set(tmp_path / "f.fg")
        assert scale == 12.5
        assert back.mollifier.radius == 0.05
        np.testing.assert_array_equal(back.learnable, [False, True, False])
        np.testing.assert_array_equal(back.channels, [0, 1])

    def test_3d_file(self, tmp_path):
        vertices = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
        fs = FeatureSet(
            vertices, [[0, 1, 2], [0, 2, 3]], [1, 0], 2, MollifierConfig(0.1), reg_edges=[[0, 1], [2, 3]]
        )
        save_feature_set(tmp_path / "s.obj", fs, scale=3.0)
        back, scale = load_feature_set(tmp_path / "s.obj")
        assert scale == 3.0
        assert back.n_channels == 2
        assert sorted(back.channels.tolist()) == [0, 1]
        np.testing.assert_array_equal(back.reg_edges, [[0, 1], [2, 3]])
