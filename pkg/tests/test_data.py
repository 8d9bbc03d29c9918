"""Tests for clip sampling, base crops, multi-crop views and the loader."""

import numpy as np
import pytest
import torch
from scipy import stats

from vidssl.config import DataConfig
from vidssl.data import (
    ClipDataset,
    ClipExhaustedError,
    ClipLoader,
    ClipSamplingError,
    ClipSpec,
    base_crop,
    build_batch,
    build_clip,
    crosses_cut,
    load_dataset,
    make_views,
    map_from_base,
    map_to_base,
    patch_center,
    sample_clip,
    sample_clip_cut_aware,
    sample_crop,
    valid_starts,
)
from vidssl.frames import DataError, VideoSource
from vidssl.utils import rng_stream


@pytest.mark.unit
@pytest.mark.data
class TestClipSampling:
    """Test cases for sample_clip and valid_starts."""

    def test_clip_indices(self):
        spec = ClipSpec(start=3, T=4, stride=2)
        assert spec.indices == [3, 5, 7, 9]
        assert spec.end == 9

    def test_sampled_clip_fits(self):
        for seed in range(50):
            spec = sample_clip(VideoSource(frame_count=20), 4, 5, seed)
            assert 0 <= spec.start and spec.end < 20

    def test_exact_fit_has_single_start(self):
        assert sample_clip(10, 4, 3, seed=7).start == 0

    def test_deterministic(self):
        assert sample_clip(100, 4, 2, 11) == sample_clip(100, 4, 2, 11)

    def test_too_short_raises(self):
        with pytest.raises(ClipSamplingError):
            sample_clip(9, 4, 3, 0)

    def test_invalid_arguments_raise(self):
        with pytest.raises(ClipSamplingError):
            sample_clip(10, 0, 1, 0)

    def test_starts_are_uniform(self):
        counts = np.zeros(11, dtype=int)
        for seed in range(10_000):
            counts[sample_clip(20, 4, 3, seed).start] += 1
        assert counts.sum() == 10_000
        assert stats.chisquare(counts).pvalue > 0.001, counts

    def test_valid_starts(self):
        assert valid_starts(10, 3, 2) == [0, 1, 2, 3, 4, 5]
        # starts 3 and 4 reach frame 5; a clip may begin on the cut itself
        assert valid_starts(10, 3, 1, cuts=(5,)) == [0, 1, 2, 5, 6, 7]


@pytest.mark.unit
@pytest.mark.data
class TestCutAwareSampling:
    """Test cases for cut-aware clip sampling."""

    def test_clip_across_cut_is_rejected(self):
        assert crosses_cut(ClipSpec(start=0, T=8, stride=30), (100,))
        assert not crosses_cut(ClipSpec(start=100, T=8, stride=30), (100,))

    def test_no_cuts_matches_plain_sampling(self):
        video = VideoSource(frame_count=50)
        for seed in range(10):
            assert sample_clip_cut_aware(video, 4, 2, seed) == sample_clip(video, 4, 2, seed)

    def test_never_crosses_a_cut(self):
        video = VideoSource(frame_count=40, cuts=(7, 15, 16, 30))
        allowed = set(valid_starts(40, 4, 2, video.cuts))
        for seed in range(300):
            spec = sample_clip_cut_aware(video, 4, 2, seed)
            assert spec.start in allowed
            assert not crosses_cut(spec, video.cuts)

    def test_fallback_after_retries(self):
        # only start 0 avoids the cuts; one retry is almost never enough
        video = VideoSource(frame_count=30, cuts=tuple(range(4, 30)))
        for seed in range(20):
            assert sample_clip_cut_aware(video, 4, 1, seed, max_retries=1).start == 0

    def test_exhausted_raises(self):
        video = VideoSource(frame_count=10, cuts=tuple(range(1, 10)))
        with pytest.raises(ClipExhaustedError):
            sample_clip_cut_aware(video, 2, 1, 0)

    @pytest.mark.slow
    def test_cut_avoidance_at_scale(self):
        video = VideoSource(frame_count=120, cuts=(10, 33, 34, 60, 90, 101))
        allowed = set(valid_starts(120, 5, 3, video.cuts))
        seen = set()
        for seed in range(100_000):
            spec = sample_clip_cut_aware(video, 5, 3, seed)
            assert spec.start in allowed
            seen.add(spec.start)
        assert seen == allowed


@pytest.mark.unit
@pytest.mark.data
class TestCrops:
    """Test cases for base crops and crop parameters."""

    def test_base_crop_window(self):
        frame = torch.rand(3, 40, 50)
        crop = base_crop(frame, 32, window=(4, 10))
        assert torch.equal(crop, frame[:, 4:36, 10:42])

    def test_base_crop_seeded_window_is_stable(self):
        frame = torch.rand(3, 40, 50)
        assert torch.equal(base_crop(frame, 32, seed=3), base_crop(frame, 32, seed=3))

    def test_base_crop_too_small_raises(self):
        with pytest.raises(ClipSamplingError):
            base_crop(torch.rand(3, 20, 20), 32)
        with pytest.raises(ClipSamplingError):
            base_crop(torch.rand(3, 40, 40), 32, window=(10, 0))

    def test_sample_crop_in_bounds(self):
        rng = rng_stream(0, "augment")
        for _ in range(200):
            top, left, h, w, scale = sample_crop(64, (0.05, 0.4), rng)
            assert 0 <= top and top + h <= 64
            assert 0 <= left and left + w <= 64
            assert scale == pytest.approx(h * w / 64 ** 2)


@pytest.mark.unit
@pytest.mark.data
class TestViews:
    """Test cases for make_views and view geometry."""

    def test_view_shapes(self):
        cfg = DataConfig(n_local=3)
        views = make_views(torch.rand(3, 64, 64), seed=0, cfg=cfg)
        assert views.global_views.shape == (2, 3, 64, 64)
        assert views.local_views.shape == (3, 3, 32, 32)
        assert len(views.global_geometry) == 2 and len(views.local_geometry) == 3

    def test_no_local_views(self):
        views = make_views(torch.rand(3, 64, 64), seed=0, cfg=DataConfig(n_local=0))
        assert views.local_views.shape == (0, 3, 32, 32)

    def test_same_seed_same_views(self):
        base = torch.rand(3, 64, 64)
        a, b = make_views(base, 5), make_views(base, 5)
        assert torch.equal(a.global_views, b.global_views)
        assert a.global_geometry == b.global_geometry

    def test_values_stay_in_range(self):
        cfg = DataConfig(jitter_p=1.0, gray_p=0.5)
        views = make_views(torch.rand(3, 64, 64), seed=1, cfg=cfg)
        assert views.global_views.min() >= 0 and views.global_views.max() <= 1

    def test_identity_crop_without_augmentation(self):
        cfg = DataConfig(global_scale=(1.0, 1.0), flip_p=0.0, jitter_p=0.0, gray_p=0.0, n_local=0)
        base = torch.rand(3, 32, 32)
        views = make_views(base, seed=2, cfg=cfg, global_size=32, local_size=16)
        geometry = views.global_geometry[0]
        if (geometry.height, geometry.width) == (32, 32):
            assert torch.allclose(views.global_views[0], base, atol=1e-6)

    def test_not_square_rejected(self):
        with pytest.raises(DataError):
            make_views(torch.rand(3, 32, 48), seed=0)

    def test_map_round_trip(self):
        views = make_views(torch.rand(3, 64, 64), seed=3, cfg=DataConfig(flip_p=0.5, n_local=4))
        for geometry in views.global_geometry + views.local_geometry:
            for y, x in [(0.0, 0.0), (3.5, 10.0), (geometry.size - 1.0, 2.0)]:
                yb, xb = map_to_base(geometry, y, x)
                assert map_from_base(geometry, yb, xb) == pytest.approx((y, x))

    def test_flip_mirrors_columns(self):
        views = make_views(torch.rand(3, 64, 64), seed=0, cfg=DataConfig(flip_p=1.0, n_local=0))
        geometry = views.global_geometry[0]
        assert geometry.flipped
        left = map_to_base(geometry, 0.0, 0.0)
        right = map_to_base(geometry, 0.0, geometry.size - 1.0)
        assert left[1] > right[1]

    def test_patch_center(self):
        assert patch_center(1, 2, 8) == (11.5, 19.5)


@pytest.mark.integration
@pytest.mark.data
class TestBatches:
    """Test cases for dataset loading, batch building and the loader thread."""

    def test_load_synthetic_dataset(self, synthetic_root):
        dataset = load_dataset(synthetic_root)
        assert len(dataset) == 2
        assert dataset.videos[0].frame_count == 2

    def test_load_single_video(self, synthetic_root):
        dataset = load_dataset(synthetic_root / "clips" / "clip_0000")
        assert len(dataset) == 1

    def test_load_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_load_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            ClipDataset([])

    def test_clip_frames_share_geometry(self, synthetic_root, tiny_config):
        video = load_dataset(synthetic_root).videos[0]
        clip = build_clip(video, tiny_config, seed=4)
        assert len(clip.views) == tiny_config.data.T
        assert clip.views[0].global_geometry == clip.views[1].global_geometry
        assert clip.views[0].local_geometry == clip.views[1].local_geometry
        assert clip.views[0].global_views.shape == (2, 3, 32, 32)
        assert clip.views[0].local_views.shape == (2, 3, 16, 16)

    def test_batch_is_pure_function_of_step(self, synthetic_root, tiny_config):
        dataset = load_dataset(synthetic_root)
        a = build_batch(dataset, tiny_config, 3)
        b = build_batch(dataset, tiny_config, 3)
        assert len(a.clips) == tiny_config.data.clips_per_step
        for ca, cb in zip(a.clips, b.clips):
            assert ca.spec == cb.spec and ca.video == cb.video
            assert torch.equal(ca.views[1].global_views, cb.views[1].global_views)

    def test_loader_yields_steps_in_order(self, synthetic_root, tiny_config):
        dataset = load_dataset(synthetic_root)
        with ClipLoader(dataset, tiny_config, start_step=2, end_step=5) as loader:
            items = list(loader)
        assert [step for step, _ in items] == [2, 3, 4]
        expected = build_batch(dataset, tiny_config, 3)
        assert torch.equal(items[1][1].clips[0].views[0].global_views, expected.clips[0].views[0].global_views)

    def test_loader_forwards_errors(self, tiny_config):
        dataset = ClipDataset([VideoSource(frame_count=1)])
        with ClipLoader(dataset, tiny_config, 0, 2) as loader:
            with pytest.raises(ClipSamplingError):
                list(loader)
