from __future__ import annotations

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, Iterator, List, Optional

import numpy as np
from PIL import Image

from .frames import Colorspace, Frame, deserialize_frame, now_micros

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
FRAME_SUFFIX = ".frame"


class BaseFrameSource(ABC):
    """Yields BGR images for one camera; ``frames`` stamps them with timestamps."""

    def __init__(self, camera_id: str, width: int, height: int):
        if not camera_id:
            raise ValueError("camera_id must be non-empty.")
        self.camera_id = camera_id
        self.width = width
        self.height = height

    @abstractmethod
    def images(self) -> Iterator[np.ndarray]:
        raise NotImplementedError

    def frames(self, clock: Callable[[], int] = now_micros) -> Iterator[Frame]:
        """Timestamps come from ``clock`` at yield time and never repeat."""
        last = -1
        for image in self.images():
            ts = max(clock(), last + 1)
            last = ts
            yield Frame.from_array(ts, image, Colorspace.BGR, self.camera_id)


class SyntheticSource(BaseFrameSource):
    """Deterministic moving scene: luminance gradient, a sliding block, ring texture and noise.

    All three channels carry the same luminance, so every colorspace knob
    removes redundancy instead of adding chroma detail. ``complexity`` is the
    noise amplitude in gray levels.
    """

    def __init__(
        self,
        camera_id: str = "cam0",
        width: int = 1920,
        height: int = 1080,
        count: Optional[int] = None,
        complexity: int = 6,
        seed: int = 0,
    ):
        super().__init__(camera_id, width, height)
        if count is not None and count < 0:
            raise ValueError("count must be >= 0.")
        if complexity < 0:
            raise ValueError("complexity must be >= 0.")
        self.count = count
        self.complexity = complexity
        self.seed = seed
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float32)
        self._base = 40.0 + 120.0 * xs / max(1, width - 1) + 50.0 * ys / max(1, height - 1)
        cx, cy = width / 2.0, height / 2.0
        radius = np.hypot(xs - cx, ys - cy)
        self._texture = 12.0 * np.sin(radius / max(4.0, min(width, height) / 24.0))

    def image_at(self, index: int) -> np.ndarray:
        rng = np.random.default_rng((self.seed, index))
        gray = self._base + self._texture
        block_w, block_h = max(1, self.width // 8), max(1, self.height // 6)
        x0 = (index * max(1, self.width // 40)) % max(1, self.width - block_w)
        y0 = (self.height - block_h) // 2
        gray[y0 : y0 + block_h, x0 : x0 + block_w] = 220.0
        if self.complexity:
            noise = rng.integers(-self.complexity, self.complexity + 1, size=gray.shape)
            gray = gray + noise
        plane = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
        return np.repeat(plane[:, :, np.newaxis], 3, axis=2)

    def images(self) -> Iterator[np.ndarray]:
        index = 0
        while self.count is None or index < self.count:
            yield self.image_at(index)
            index += 1


class DirectorySource(BaseFrameSource):
    """Images (via Pillow) or serialized ``.frame`` files, in file-name order."""

    def __init__(self, root: str | Path, camera_id: str = "cam0", loop: bool = False):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"Frame directory does not exist: {self.root}")
        self.paths: List[Path] = sorted(
            p
            for p in self.root.iterdir()
            if p.is_file() and (p.suffix.lower() in IMAGE_SUFFIXES or p.suffix == FRAME_SUFFIX)
        )
        if not self.paths:
            raise FileNotFoundError(f"No images or .frame files in {self.root}")
        self.loop = loop
        first = self._load(self.paths[0])
        super().__init__(camera_id, first.shape[1], first.shape[0])

    @staticmethod
    def _load(path: Path) -> np.ndarray:
        if path.suffix == FRAME_SUFFIX:
            frame = deserialize_frame(path.read_bytes())
            if frame.colorspace is not Colorspace.BGR:
                raise ValueError(f"{path.name}: stored frames must be BGR.")
            return frame.as_array()
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return np.ascontiguousarray(rgb[:, :, ::-1])

    def images(self) -> Iterator[np.ndarray]:
        while True:
            for path in self.paths:
                image = self._load(path)
                if image.shape[:2] != (self.height, self.width):
                    raise ValueError(
                        f"{path.name} is {image.shape[1]}x{image.shape[0]}, "
                        f"expected {self.width}x{self.height}."
                    )
                yield image
            if not self.loop:
                return


class SourceFactory:
    """Builds frame sources from config/CLI values."""

    @staticmethod
    def create(
        kind: str,
        camera_id: str,
        *,
        width: int = 1920,
        height: int = 1080,
        count: Optional[int] = None,
        directory: Optional[str | Path] = None,
        complexity: int = 6,
        seed: int = 0,
        loop: bool = False,
    ) -> BaseFrameSource:
        name = kind.lower()
        if name == "synthetic":
            return SyntheticSource(camera_id, width, height, count, complexity, seed)
        if name == "directory":
            if directory is None:
                raise ValueError("Directory source needs a directory.")
            return DirectorySource(directory, camera_id, loop=loop)
        raise ValueError(f"Unknown frame source '{kind}'")
