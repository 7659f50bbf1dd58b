import warnings

import numpy as np
import pytest

from keyprop.flow import warp
from keyprop.harness.video import (
    Video,
    VideoError,
    context_frames,
    keyframe_schedule,
    load_video,
    make_video,
    prealign,
    propagate_video,
    save_video,
    video_hole_l1,
)
from keyprop.model import Checkpoint, init_params


@pytest.fixture(scope="module")
def moving():
    return make_video(5, num=12, size=16)


@pytest.fixture(scope="module")
def static():
    return make_video(5, num=12, size=16, static=True)


@pytest.fixture(scope="module")
def tiny_ckpt():
    from keyprop.harness.gradchecks import TINY

    return Checkpoint.from_tensors(TINY, init_params(TINY, 0))


class TestSchedule:
    def test_sixty_frames_chunk_twenty(self):
        assert keyframe_schedule(60, 20) == [0, 20, 40, 59]

    def test_exact_multiple_keeps_last_frame(self):
        assert keyframe_schedule(41, 20) == [0, 20, 40]

    def test_single_frame(self):
        assert keyframe_schedule(1, 20) == [0]

    def test_bad_chunk(self):
        with pytest.raises(VideoError):
            keyframe_schedule(10, 0)

    def test_context_interior(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert context_frames(50, 100, (10, 20)) == [40, 60, 30, 70]

    def test_context_clamps_and_warns(self):
        with pytest.warns(UserWarning, match="clamped"):
            ctx = context_frames(0, 60)
        assert ctx == [10, 20, 40]
        assert 0 not in ctx and len(set(ctx)) == len(ctx)


class TestVideo:
    def test_deterministic(self):
        a, b = make_video(3, num=4, size=16), make_video(3, num=4, size=16)
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_static_frames_identical(self, static):
        assert np.array_equal(static.frames[0], static.frames[-1])
        assert not np.array_equal(static.masks[0], static.masks[1])
        np.testing.assert_allclose(static.flow(0, 7).offsets, 0.0, atol=1e-12)

    def test_analytic_flow_warps_frames(self, moving):
        f = moving.flow(3, 5)
        ok = moving.consistency(3, 5)[..., 0] < 0.5
        assert ok.mean() > 0.5
        err = np.abs(warp(moving.frames[5], f) - moving.frames[3])[ok]
        # the renders are smooth but textured: warp error stays well under
        # the colour contrast of the scene
        assert err.mean() < 0.05

    def test_round_trip(self, moving, tmp_path):
        save_video(moving, tmp_path)
        back = load_video(tmp_path)
        assert back.frames.tobytes() == moving.frames.tobytes()
        assert back.affines.tobytes() == moving.affines.tobytes()

    def test_bad_shapes(self, moving):
        with pytest.raises(VideoError):
            Video(moving.frames, moving.masks[:-1], moving.affines)


class TestPropagation:
    def test_prealign_static_copies_exact_pixels(self, static):
        ctx = context_frames(4, len(static), (1, 2, 3))
        x = prealign(static, 4, ctx)
        before = static.masks[4][..., 0] > 0.5
        filled = before & (x[..., 3] < 0.5)
        assert filled.sum() > 0.5 * before.sum()
        np.testing.assert_allclose(x[filled, :3], static.frames[4][filled], atol=1e-12)
        assert np.all(x[~before, :3] == static.frames[4][~before])

    def test_inference_count(self, tiny_ckpt):
        with pytest.warns(UserWarning):
            video = make_video(1, num=60, size=16)
            res = propagate_video(tiny_ckpt, video, chunk=20, offsets=(10,))
        assert res.keyframes == [0, 20, 40, 59] and res.inferences == 4
        assert res.frames.shape == video.frames.shape
        known = np.broadcast_to(video.masks < 0.5, video.frames.shape)
        np.testing.assert_allclose(res.frames[known], video.frames[known], atol=1e-6)

    def test_prealign_on_static_video(self, tiny_ckpt, static):
        with pytest.warns(UserWarning):
            plain = propagate_video(tiny_ckpt, static, chunk=4, offsets=(1, 2))
            pre = propagate_video(tiny_ckpt, static, chunk=4, offsets=(1, 2), use_prealign=True)
        assert video_hole_l1(pre, static) <= video_hole_l1(plain, static)
