from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from textmotion.errors import LayoutError
from textmotion.rotations import POSE_DIM


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """``frames`` is an ``(N, 135)`` float64 array of pose vectors.

    ``meta`` holds generator labels (family, side, tempo) when known; it is
    carried through file I/O but never required.
    """

    frames: np.ndarray
    fps: float = 20.0
    caption: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != POSE_DIM or frames.shape[0] < 1:
            raise LayoutError(f"motion frames must have shape (N>=1, {POSE_DIM}), got {frames.shape}")
        if not self.fps > 0:
            raise LayoutError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def with_(self, **changes):
        return replace(self, **changes)
