import math

import numpy as np
import pytest

from softtrack.backbone import ConvSpec, embed, init_backbone
from softtrack.imaging import Image
from softtrack.tracker import (
    PseudoBoxConfig,
    SchemaConfig,
    TrackedFrame,
    TrackerConfig,
    evaluate,
    gaussian_pool,
    init_track,
    load_trajectory,
    point_vs_box_speedup,
    pseudo_box_from_top,
    pseudo_boxes_schema,
    response_map,
    save_trajectory,
    schema_cost,
    track_frame,
    track_video,
)

TEST_ARCH = (ConvSpec(3, 8, 5, 2, 0), ConvSpec(8, 8, 3, 2, 0))
TEST_CFG = TrackerConfig(crop_size=32)


def blob_frame(size, cx, cy, w, h, seed=0):
    """Flat background plus one textured elliptical blob."""
    rng = np.random.default_rng(seed)
    px = np.full((size, size, 3), 45, dtype=np.uint8)
    tex = np.clip(
        np.array([190, 150, 90])[None, None]
        + rng.integers(-50, 51, size=(24, 24, 1))
        + np.where((np.add.outer(np.arange(24) // 3, np.arange(24) // 3) % 2)[:, :, None], 30, -30),
        0,
        255,
    ).astype(np.uint8)
    ys, xs = np.mgrid[0:size, 0:size]
    inside = ((xs + 0.5 - cx) / (w / 2)) ** 2 + ((ys + 0.5 - cy) / (h / 2)) ** 2 <= 1
    u = np.clip(((xs + 0.5 - (cx - w / 2)) / w * 23).astype(int), 0, 23)
    v = np.clip(((ys + 0.5 - (cy - h / 2)) / h * 23).astype(int), 0, 23)
    px[inside] = tex[v[inside], u[inside]]
    return Image(px)


@pytest.fixture(scope="module")
def params():
    return init_backbone(TEST_ARCH, seed=5, dtype=np.float64)


class TestInit:
    def test_state_center_is_box_center(self, params):
        frame = blob_frame(96, 40, 50, 24, 24)
        state = init_track(params, frame, (40, 50, 24, 24), TEST_CFG)
        assert state.center == (40.0, 50.0)
        assert state.size == (24.0, 24.0)

    def test_identical_inputs_identical_template(self, params):
        frame = blob_frame(96, 40, 50, 24, 24)
        a = init_track(params, frame, (40, 50, 24, 24), TEST_CFG)
        b = init_track(params, frame, (40, 50, 24, 24), TEST_CFG)
        assert np.array_equal(a.template, b.template)

    def test_template_matches_weighted_mean_oracle(self, params):
        frame = blob_frame(96, 48, 48, 30, 30)
        state = init_track(params, frame, (48, 48, 30, 30), TEST_CFG)
        from softtrack.imaging import crop_region, resize_image

        crop = resize_image(crop_region(frame, 48, 48, 30, 30), 32, 32)
        feature = embed(params, crop).tensor.values
        c, h, w = feature.shape
        sigma = 0.25 * h
        want = np.zeros(c)
        total = 0.0
        for y in range(h):
            for x in range(w):
                wgt = math.exp(
                    -(((y - (h - 1) / 2) ** 2 + (x - (w - 1) / 2) ** 2) / (2 * sigma**2))
                )
                want += wgt * feature[:, y, x]
                total += wgt
        want /= total
        assert np.max(np.abs(state.template - want)) < 1e-9

    def test_degenerate_box_rejected(self, params):
        with pytest.raises(ValueError):
            init_track(params, blob_frame(96, 40, 40, 20, 20), (40, 40, 1, 1), TEST_CFG)


class TestTrackFrame:
    def test_response_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        feature = rng.standard_normal((6, 5, 4))
        template = rng.standard_normal(6)
        got = response_map(feature, template)
        for y in range(5):
            for x in range(4):
                assert got[y, x] == pytest.approx(float(feature[:, y, x] @ template))

    def test_follows_lone_object(self, params):
        f0 = blob_frame(96, 44, 44, 26, 26, seed=3)
        f1 = blob_frame(96, 49, 47, 26, 26, seed=3)
        state = init_track(params, f0, (44, 44, 26, 26), TEST_CFG)
        state, peak = track_frame(params, state, f1, TEST_CFG)
        assert math.hypot(state.center[0] - 49, state.center[1] - 47) <= 4
        assert np.isfinite(peak)

    def test_static_video_no_drift(self, params):
        frame = blob_frame(96, 50, 42, 24, 24, seed=4)
        state = init_track(params, frame, (50, 42, 24, 24), TEST_CFG)
        for _ in range(20):
            state, _ = track_frame(params, state, frame, TEST_CFG)
        assert math.hypot(state.center[0] - 50, state.center[1] - 42) <= 1.0

    def test_search_window_outside_rejected(self, params):
        frame = blob_frame(96, 50, 50, 20, 20)
        state = init_track(params, frame, (50, 50, 20, 20), TEST_CFG)
        bad = type(state)(template=state.template, center=(300.0, 300.0), size=(20.0, 20.0))
        with pytest.raises(ValueError):
            track_frame(params, bad, frame, TEST_CFG)


class TestSchema:
    def test_nominal_snippet_no_corrections(self, params):
        centers = [(40 + 2 * i, 44 + i) for i in range(6)]
        frames = [blob_frame(96, cx, cy, 24, 24, seed=7) for cx, cy in centers]
        points = [(float(cx), float(cy)) for cx, cy in centers]
        schema = SchemaConfig(T=6)
        boxes = pseudo_boxes_schema(
            frames, points, {0: (40, 44, 24, 24)}, params, schema, TEST_CFG
        )
        assert len(boxes) == 6
        assert not any(b.corrected for b in boxes)
        for b, (px, py) in zip(boxes, points):
            assert math.hypot(b.cx - px, b.cy - py) <= schema.fail_dist

    def test_adversarial_points_force_corrections(self, params):
        # static target, but every annotation sits 30 px away from it:
        # the tracker stays on the target, so every frame gets snapped
        frames = [blob_frame(96, 48, 48, 24, 24, seed=8) for _ in range(5)]
        points = [(18.0, 48.0)] * 5
        schema = SchemaConfig(T=5)
        boxes = pseudo_boxes_schema(
            frames, points, {0: (48, 48, 24, 24)}, params, schema, TEST_CFG
        )
        assert all(b.corrected for b in boxes[1:])
        for b in boxes[1:]:
            assert (b.cx, b.cy) == (18.0, 48.0)

    def test_center_always_within_fail_dist_of_point(self, params):
        rng = np.random.default_rng(9)
        centers = [(35 + 3 * i, 40 + 2 * i) for i in range(8)]
        frames = [blob_frame(96, cx, cy, 22, 22, seed=10) for cx, cy in centers]
        points = [
            (cx + float(rng.uniform(-25, 25)), cy + float(rng.uniform(-25, 25)))
            for cx, cy in centers
        ]
        schema = SchemaConfig(T=4)
        sparse = {0: (*centers[0], 22, 22), 4: (*centers[4], 22, 22)}
        boxes = pseudo_boxes_schema(frames, points, sparse, params, schema, TEST_CFG)
        for b, (px, py) in zip(boxes[1:], points[1:]):
            if b.frame % schema.T:  # anchor frames carry the annotated box
                assert math.hypot(b.cx - px, b.cy - py) <= schema.fail_dist + 1e-9

    def test_missing_anchor_rejected(self, params):
        frames = [blob_frame(96, 40, 40, 20, 20) for _ in range(4)]
        with pytest.raises(ValueError):
            pseudo_boxes_schema(frames, [(40.0, 40.0)] * 4, {}, params, SchemaConfig(T=2), TEST_CFG)


class TestPseudoBoxFromTop:
    def test_one_hot(self):
        top = np.zeros((8, 8))
        top[3, 5] = 1.0
        assert pseudo_box_from_top(top, 0.5) == (5.5, 3.5, 1.0, 1.0)

    def test_uniform_matches_prefix_oracle(self):
        top = np.full((4, 4), 1 / 16)
        box = pseudo_box_from_top(top, 0.5)
        # ties resolve by ascending location: the first 8 cells = rows 0-1
        assert box == (2.0, 1.0, 4.0, 2.0)

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(12)
        raw = rng.random((12, 12))
        top = raw / raw.sum()
        small = pseudo_box_from_top(top, 0.3)
        large = pseudo_box_from_top(top, 0.8)
        assert small[0] - small[2] / 2 >= large[0] - large[2] / 2 - 1e-9
        assert small[0] + small[2] / 2 <= large[0] + large[2] / 2 + 1e-9
        assert small[1] - small[3] / 2 >= large[1] - large[3] / 2 - 1e-9
        assert small[1] + small[3] / 2 <= large[1] + large[3] / 2 + 1e-9

    def test_frame_scaling(self):
        top = np.zeros((8, 8))
        top[4, 4] = 1.0
        box = pseudo_box_from_top(top, 0.9, frame_dims=(64, 64))
        assert box == (36.0, 36.0, 8.0, 8.0)

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            PseudoBoxConfig(alpha=1.5)


class TestSchemaCost:
    def test_paper_operating_point(self):
        assert schema_cost(SchemaConfig(T=10)) == pytest.approx(3.163)
        assert f"{schema_cost(SchemaConfig(T=10)):.2f}" == "3.16"

    def test_all_boxes_plus_tracker(self):
        assert schema_cost(SchemaConfig(T=1)) == pytest.approx(10.3)

    def test_large_t_limit(self):
        assert schema_cost(SchemaConfig(T=10_000_000)) == pytest.approx(2.37, abs=1e-5)

    def test_strictly_decreasing_in_t(self):
        costs = [schema_cost(SchemaConfig(T=t)) for t in range(2, 40)]
        assert all(a > b for a, b in zip(costs, costs[1:]))

    def test_speedup_ratio(self):
        assert f"{point_vs_box_speedup():.1f}" == "4.5"


class TestEvaluate:
    def test_perfect_trajectory(self):
        gt = [(10.0 + i, 20.0, 8.0, 8.0) for i in range(10)]
        pred = [TrackedFrame(i, *b, peak=1.0) for i, b in enumerate(gt)]
        metrics = evaluate(pred, gt)
        assert metrics["precision@5"] == 1.0
        assert metrics["success_auc"] == 1.0
        assert metrics["mean_center_error"] == 0.0

    def test_constant_offset(self):
        gt = [(40.0, 40.0, 10.0, 10.0)] * 6
        pred = [(65.0, 40.0, 10.0, 10.0)] * 6  # 25 px off
        metrics = evaluate(pred, gt, radii=(5, 10, 20, 30))
        assert metrics["precision@20"] == 0.0
        assert metrics["precision@30"] == 1.0
        assert metrics["mean_center_error"] == pytest.approx(25.0)

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(13)
        gt = [(float(rng.uniform(20, 80)), float(rng.uniform(20, 80)), 12.0, 12.0) for _ in range(40)]
        pred = [
            (g[0] + float(rng.normal(0, 8)), g[1] + float(rng.normal(0, 8)), 12.0, 12.0) for g in gt
        ]
        metrics = evaluate(pred, gt)
        for r in (5, 10, 20):
            count = sum(
                1 for p, g in zip(pred, gt) if math.hypot(p[0] - g[0], p[1] - g[1]) <= r
            )
            assert metrics[f"precision@{r}"] == pytest.approx(count / 40)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([(0, 0, 1, 1)], [])


class TestTrajectoryIO:
    def test_round_trip(self, params, tmp_path):
        frames = [blob_frame(96, 40 + i, 44, 24, 24, seed=1) for i in range(4)]
        traj = track_video(params, frames, (40, 44, 24, 24), TEST_CFG)
        path = tmp_path / "traj.jsonl"
        save_trajectory(traj, path)
        back = load_trajectory(path)
        assert len(back) == len(traj)
        for a, b in zip(traj, back):
            assert (a.frame, a.cx, a.cy, a.w, a.h) == (b.frame, b.cx, b.cy, b.w, b.h)
            assert (math.isnan(a.peak) and math.isnan(b.peak)) or a.peak == b.peak
