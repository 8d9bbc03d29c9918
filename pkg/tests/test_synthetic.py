"""Tests for the synthetic moving-shapes generator and dataset writer."""

import numpy as np
import pytest
import torch

from vidssl.evaluation import BoxRect
from vidssl.frames import DataError, read_frame
from vidssl.synthetic import (
    SHAPE_KINDS,
    OvercrowdedError,
    clip_dirs,
    gen_shape_image,
    gen_synthetic_clip,
    mask_box,
    read_clip_masks,
    read_manifest,
    read_shape_split,
    shape_mask,
    write_synthetic_dataset,
)
from vidssl.utils import rng_stream


@pytest.mark.unit
@pytest.mark.data
class TestGenSyntheticClip:
    """Test cases for gen_synthetic_clip."""

    def test_shapes_and_ranges(self):
        clip = gen_synthetic_clip(n_objects=3, size=64, T=4, seed=1)
        assert clip.frames.shape == (4, 3, 64, 64)
        assert clip.masks.shape == (4, 3, 64, 64)
        assert clip.frames.min() >= 0 and clip.frames.max() <= 1
        assert (clip.T, clip.n_objects) == (4, 3)

    def test_masks_disjoint_and_nonempty(self):
        for seed in range(10):
            clip = gen_synthetic_clip(n_objects=3, size=32, T=4, seed=seed)
            assert (clip.masks.sum(axis=1) <= 1).all()
            assert (clip.masks.sum(axis=(2, 3)) > 0).all()

    def test_boxes_are_tight(self):
        clip = gen_synthetic_clip(n_objects=2, size=32, T=3, seed=2)
        for t in range(3):
            for j in range(2):
                ys, xs = np.nonzero(clip.masks[t, j])
                assert clip.boxes[t][j] == BoxRect(xs.min(), ys.min(), xs.max(), ys.max())

    def test_objects_carry_their_color(self):
        clip = gen_synthetic_clip(n_objects=3, size=32, T=2, seed=3)
        for j, motion in enumerate(clip.motions):
            pixels = clip.frames[0][:, torch.from_numpy(clip.masks[0, j])]
            assert torch.allclose(pixels, torch.tensor(motion.color).unsqueeze(1).expand_as(pixels))

    def test_deterministic(self):
        a = gen_synthetic_clip(seed=4)
        b = gen_synthetic_clip(seed=4)
        assert torch.equal(a.frames, b.frames)
        assert np.array_equal(a.masks, b.masks)

    def test_static_masks_do_not_move(self):
        clip = gen_synthetic_clip(n_objects=3, size=32, T=3, seed=5, static=True)
        assert np.array_equal(clip.masks[0], clip.masks[2])

    def test_overcrowded_rejected(self):
        with pytest.raises(OvercrowdedError):
            gen_synthetic_clip(n_objects=8, size=32)

    def test_invalid_counts_rejected(self):
        with pytest.raises(DataError):
            gen_synthetic_clip(n_objects=0)
        with pytest.raises(DataError):
            gen_synthetic_clip(T=0)


@pytest.mark.unit
@pytest.mark.data
class TestShapes:
    """Test cases for single-shape helpers."""

    @pytest.mark.parametrize("kind", SHAPE_KINDS)
    def test_shape_mask_inside_radius(self, kind):
        mask = shape_mask(kind, 21, 10.0, 10.0, 4)
        ys, xs = np.nonzero(mask)
        assert mask[10, 10]
        assert np.abs(ys - 10).max() <= 4
        assert np.abs(xs - 10).max() <= 5

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError):
            shape_mask("star", 8, 4.0, 4.0, 2)
        with pytest.raises(DataError):
            gen_shape_image("star", 32, rng_stream(0, "data"))

    def test_gen_shape_image(self):
        image, mask = gen_shape_image("disc", 32, rng_stream(0, "data"))
        assert image.shape == (3, 32, 32)
        assert mask.any()

    def test_mask_box_empty_raises(self):
        with pytest.raises(DataError):
            mask_box(np.zeros((4, 4), dtype=bool))


@pytest.mark.integration
@pytest.mark.data
class TestSyntheticDataset:
    """Test cases for the on-disk synthetic dataset."""

    def test_layout(self, synthetic_root):
        manifest = read_manifest(synthetic_root)
        assert [e.clip_id for e in manifest] == ["clip_0000", "clip_0001"]
        assert all(e.n_objects == 3 and e.T == 2 for e in manifest)
        clip_dir = synthetic_root / "clips" / "clip_0000"
        assert (clip_dir / "frame_000001.ppm").exists()
        assert (clip_dir / "mask_obj2_000001.pgm").exists()
        assert clip_dirs(synthetic_root) == [synthetic_root / "clips" / "clip_0000",
                                             synthetic_root / "clips" / "clip_0001"]

    def test_files_match_generator(self, synthetic_root):
        entry = read_manifest(synthetic_root)[1]
        clip = gen_synthetic_clip(entry.n_objects, 32, entry.T, entry.seed)
        clip_dir = synthetic_root / "clips" / entry.clip_id
        masks = read_clip_masks(clip_dir, entry.n_objects, entry.T)
        assert np.array_equal(masks, clip.masks)
        assert torch.allclose(read_frame(clip_dir / "frame_000000.ppm"), clip.frames[0], atol=1 / 255)

    def test_written_masks_disjoint(self, synthetic_root):
        for entry, clip_dir in zip(read_manifest(synthetic_root), clip_dirs(synthetic_root)):
            masks = read_clip_masks(clip_dir, entry.n_objects, entry.T)
            assert (masks.sum(axis=1) <= 1).all()

    def test_rewrite_is_byte_identical(self, tmp_path):
        write_synthetic_dataset(tmp_path / "a", n_clips=2, size=32, T=2, seed=9)
        write_synthetic_dataset(tmp_path / "b", n_clips=2, size=32, T=2, seed=9)
        for path in sorted((tmp_path / "a").rglob("*")):
            if path.is_file():
                twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
                assert path.read_bytes() == twin.read_bytes(), path.name

    def test_shape_split_is_balanced(self, synthetic_root):
        images, labels = read_shape_split(synthetic_root / "shapes" / "train")
        assert images.shape == (24, 3, 32, 32)
        assert np.bincount(labels).tolist() == [8, 8, 8]

    def test_splits_differ(self, synthetic_root):
        train, _ = read_shape_split(synthetic_root / "shapes" / "train")
        test, _ = read_shape_split(synthetic_root / "shapes" / "test")
        assert not torch.equal(train, test)

    def test_malformed_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("clip_0000 3 4\n", encoding="utf-8")
        with pytest.raises(DataError, match="manifest.txt:1"):
            read_manifest(tmp_path)

    def test_missing_labels_rejected(self, tmp_path):
        with pytest.raises(DataError):
            read_shape_split(tmp_path)
