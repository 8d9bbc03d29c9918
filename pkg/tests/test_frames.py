"""Tests for frame and mask IO and video sources."""

import pytest
import torch
from PIL import Image

from vidssl.frames import (
    DataError,
    FrameDecodeError,
    VideoSource,
    open_video,
    read_cut_list,
    read_frame,
    read_mask,
    write_frame,
    write_mask,
)


def quantized(shape, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, shape, generator=generator).to(torch.float32) / 255.0


@pytest.mark.unit
@pytest.mark.data
class TestFrameIO:
    """Test cases for PPM/PGM reading and writing."""

    def test_frame_written_as_binary_ppm(self, tmp_path):
        path = tmp_path / "f.ppm"
        write_frame(path, quantized((3, 8, 6)))
        assert path.read_bytes().startswith(b"P6")
        with Image.open(path) as img:
            assert img.size == (6, 8)
            assert img.mode == "RGB"

    def test_frame_values_survive(self, tmp_path):
        frame = quantized((3, 8, 8))
        write_frame(tmp_path / "f.ppm", frame)
        assert torch.equal(read_frame(tmp_path / "f.ppm"), frame)

    def test_mask_written_as_binary_pgm(self, tmp_path):
        path = tmp_path / "m.pgm"
        mask = torch.zeros(4, 4, dtype=torch.bool)
        mask[1:3, 1:3] = True
        write_mask(path, mask)
        assert path.read_bytes().startswith(b"P5")
        assert torch.equal(read_mask(path) > 0.5, mask)

    def test_soft_mask_is_quantized(self, tmp_path):
        write_mask(tmp_path / "m.pgm", torch.full((2, 2), 0.5))
        assert read_mask(tmp_path / "m.pgm")[0, 0].item() == pytest.approx(128 / 255)

    def test_read_frame_rejects_gray(self, tmp_path):
        write_mask(tmp_path / "m.pgm", torch.zeros(4, 4))
        with pytest.raises(FrameDecodeError):
            read_frame(tmp_path / "m.pgm")

    def test_read_frame_rejects_other_formats(self, tmp_path):
        Image.new("RGB", (4, 4)).save(tmp_path / "f.png")
        with pytest.raises(FrameDecodeError, match="PPM"):
            read_frame(tmp_path / "f.png")

    def test_read_garbage_raises(self, tmp_path):
        (tmp_path / "f.ppm").write_bytes(b"not an image")
        with pytest.raises(FrameDecodeError):
            read_frame(tmp_path / "f.ppm")

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FrameDecodeError, match="not found"):
            read_frame(tmp_path / "nope.ppm")

    def test_write_frame_rejects_bad_shape(self, tmp_path):
        with pytest.raises(DataError):
            write_frame(tmp_path / "f.ppm", torch.zeros(1, 4, 4))
        with pytest.raises(DataError):
            write_mask(tmp_path / "m.pgm", torch.zeros(1, 4, 4))


@pytest.mark.unit
@pytest.mark.data
class TestCutList:
    """Test cases for cut list parsing."""

    def test_reads_sorted_indices(self, tmp_path):
        path = tmp_path / "cuts.txt"
        path.write_text("10\n\n25\n40\n", encoding="utf-8")
        assert read_cut_list(path) == (10, 25, 40)

    def test_rejects_unsorted(self, tmp_path):
        path = tmp_path / "cuts.txt"
        path.write_text("10\n5\n", encoding="utf-8")
        with pytest.raises(DataError, match="increasing"):
            read_cut_list(path)

    def test_rejects_non_integer(self, tmp_path):
        path = tmp_path / "cuts.txt"
        path.write_text("ten\n", encoding="utf-8")
        with pytest.raises(DataError, match=":1:"):
            read_cut_list(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(DataError):
            read_cut_list(tmp_path / "cuts.txt")


@pytest.mark.unit
@pytest.mark.data
class TestVideoSource:
    """Test cases for VideoSource and open_video."""

    @staticmethod
    def write_video(directory, n, cuts=None):
        directory.mkdir(parents=True)
        for i in range(n):
            write_frame(directory / f"frame_{i:06d}.ppm", torch.full((3, 8, 8), i / 10))
        if cuts is not None:
            (directory / "cuts.txt").write_text("".join(f"{c}\n" for c in cuts), encoding="utf-8")

    def test_open_video(self, tmp_path):
        self.write_video(tmp_path / "v", 4, cuts=[2])
        video = open_video(tmp_path / "v")
        assert video.frame_count == 4
        assert video.cuts == (2,)
        assert video.name == "v"
        assert video.load(3).shape == (3, 8, 8)

    def test_gap_in_numbering_rejected(self, tmp_path):
        self.write_video(tmp_path / "v", 3)
        (tmp_path / "v" / "frame_000001.ppm").unlink()
        with pytest.raises(DataError, match="contiguous"):
            open_video(tmp_path / "v")

    def test_empty_directory_rejected(self, tmp_path):
        (tmp_path / "v").mkdir()
        with pytest.raises(DataError):
            open_video(tmp_path / "v")

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            open_video(tmp_path / "v")

    def test_cut_outside_video_rejected(self):
        with pytest.raises(DataError):
            VideoSource(frame_count=5, cuts=(5,))

    def test_in_memory_source_has_no_files(self):
        with pytest.raises(DataError):
            VideoSource(frame_count=5).load(0)

    def test_frame_index_checked(self, tmp_path):
        self.write_video(tmp_path / "v", 2)
        with pytest.raises(DataError):
            open_video(tmp_path / "v").frame_path(2)
