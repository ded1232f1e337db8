import numpy as np
import pytest
from PIL import Image

from vidbus.frames import Colorspace, serialize_frame
from vidbus.sources import DirectorySource, SourceFactory, SyntheticSource


def test_synthetic_source_is_deterministic_and_moving():
    source = SyntheticSource("cam0", 64, 48, count=3, seed=5)
    again = SyntheticSource("cam0", 64, 48, count=3, seed=5)
    images = list(source.images())
    assert len(images) == 3
    assert images[0].shape == (48, 64, 3)
    assert images[0].dtype == np.uint8
    assert all(np.array_equal(a, b) for a, b in zip(images, again.images()))
    assert not np.array_equal(images[0], images[1])
    assert np.array_equal(images[0][:, :, 0], images[0][:, :, 2])


def test_frames_get_strictly_increasing_timestamps():
    source = SyntheticSource("cam3", 16, 8, count=5, complexity=0)
    frames = list(source.frames(clock=lambda: 1000))
    assert [f.ts for f in frames] == [1000, 1001, 1002, 1003, 1004]
    assert all(f.camera_id == "cam3" and f.colorspace is Colorspace.BGR for f in frames)


def test_source_argument_validation():
    with pytest.raises(ValueError):
        SyntheticSource("", 16, 8)
    with pytest.raises(ValueError):
        SyntheticSource("cam0", 16, 8, count=-1)
    with pytest.raises(ValueError) as exc:
        SourceFactory.create("webcam", "cam0")
    assert "Unknown frame source" in str(exc.value)
    with pytest.raises(ValueError):
        SourceFactory.create("directory", "cam0")


def test_directory_source_reads_images_as_bgr(tmp_path):
    rgb = np.zeros((6, 10, 3), dtype=np.uint8)
    rgb[:, :, 0] = 200
    Image.fromarray(rgb).save(tmp_path / "b.png")
    Image.fromarray(rgb).save(tmp_path / "a.png")
    (tmp_path / "notes.txt").write_text("ignored")
    source = SourceFactory.create("directory", "cam1", directory=tmp_path)
    assert (source.width, source.height) == (10, 6)
    images = list(source.images())
    assert len(images) == 2
    assert images[0][0, 0].tolist() == [0, 0, 200]


def test_directory_source_reads_frame_files_and_loops(tmp_path):
    frame = next(SyntheticSource("cam0", 8, 4, count=1).frames())
    (tmp_path / "0001.frame").write_bytes(serialize_frame(frame))
    source = DirectorySource(tmp_path, loop=True)
    looped = []
    for image in source.images():
        looped.append(image)
        if len(looped) == 3:
            break
    assert all(np.array_equal(image, frame.as_array()) for image in looped)


def test_directory_source_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        DirectorySource(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        DirectorySource(tmp_path)
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((5, 4, 3), dtype=np.uint8)).save(tmp_path / "b.png")
    source = DirectorySource(tmp_path)
    with pytest.raises(ValueError) as exc:
        list(source.images())
    assert "expected 4x4" in str(exc.value)
