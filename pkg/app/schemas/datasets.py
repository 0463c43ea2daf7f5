from enum import Enum
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


NUM_SPRITE_COLORS = 7
NUM_BALL_COLORS = 5
NUM_BALLS = 4
GRID_SIZE = 4
NUM_POSITIONS = GRID_SIZE * GRID_SIZE


class Task(str, Enum):
    SPRITES = "sprites"
    BALLS = "balls"


class PatternKind(str, Enum):
    LINEAR = "linear"
    REPEAT2 = "repeat2"
    ZIGZAG3 = "zigzag3"
    REPEAT3 = "repeat3"


class Shape(str, Enum):
    STAR = "star"
    SQUARE = "square"
    CIRCLE = "circle"
    TRIANGLE = "triangle"


SHAPES = list(Shape)


class PatternSpec(BaseModel):
    """Color pattern of one Dancing-Sprites sequence.

    Linear params are [start, hop]; the other kinds list their colors in order.
    """

    model_config = ConfigDict(frozen=True)

    kind: PatternKind
    params: List[int]

    @model_validator(mode="after")
    def validate_params(self):
        expected = {
            PatternKind.LINEAR: 2,
            PatternKind.REPEAT2: 2,
            PatternKind.ZIGZAG3: 3,
            PatternKind.REPEAT3: 3,
        }[self.kind]
        if len(self.params) != expected:
            raise ValueError(f"{self.kind.value} expects {expected} params, got {len(self.params)}")

        if self.kind == PatternKind.LINEAR:
            start, hop = self.params
            if not 0 <= start < NUM_SPRITE_COLORS:
                raise ValueError(f"Linear start must be in [0, 6], got {start}")
            if not 1 <= hop < NUM_SPRITE_COLORS:
                raise ValueError(f"Linear hop must be in [1, 6], got {hop}")
            return self

        if any(not 0 <= c < NUM_SPRITE_COLORS for c in self.params):
            raise ValueError(f"Color indices must be in [0, 6], got {self.params}")
        if len(set(self.params)) != len(self.params):
            raise ValueError(f"{self.kind.value} colors must be distinct, got {self.params}")
        return self


class SpriteFrameLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    color_idx: int = Field(..., ge=0, lt=NUM_SPRITE_COLORS)
    shape: Shape
    position: int = Field(..., ge=0, lt=NUM_POSITIONS, description="Row-major cell of the 4x4 grid")


class BlinkingBallSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    position_pattern: List[int]
    color_pattern: List[int]

    @field_validator("position_pattern")
    @classmethod
    def validate_permutation(cls, v):
        if sorted(v) != list(range(NUM_BALLS)):
            raise ValueError(f"position_pattern must be a permutation of 0..3, got {v}")
        return v

    @field_validator("color_pattern")
    @classmethod
    def validate_colors(cls, v):
        if not 1 <= len(v) <= NUM_BALL_COLORS:
            raise ValueError(f"color_pattern length must be in [1, 5], got {len(v)}")
        if any(not 0 <= c < NUM_BALL_COLORS for c in v):
            raise ValueError(f"Ball color indices must be in [0, 4], got {v}")
        if len(set(v)) != len(v):
            raise ValueError(f"color_pattern entries must be distinct, got {v}")
        return v


class BallFrameLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    active_ball: int = Field(..., ge=0, lt=NUM_BALLS)
    color_idx: int = Field(..., ge=0, lt=NUM_BALL_COLORS)


FrameLabel = Union[SpriteFrameLabel, BallFrameLabel]


class ImageSequence(BaseModel):
    """A rendered sequence with its per-frame symbolic ground truth."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: np.ndarray
    labels: List[FrameLabel]
    pattern: Union[PatternSpec, BlinkingBallSpec]
    seed: int

    @model_validator(mode="after")
    def validate_frames(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if len(self.labels) != self.frames.shape[0]:
            raise ValueError("labels length must equal the number of frames")
        return self

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])


class SequenceRecord(BaseModel):
    """Manifest entry for one stored sequence."""

    index: int
    file: str
    sha256: str
    length: int
    seed: int
    pattern: Union[PatternSpec, BlinkingBallSpec]
    shape: Optional[Shape] = None
    position: Optional[int] = None
    colors: List[int]
    active_balls: Optional[List[int]] = None


class ChannelStats(BaseModel):
    mean: List[float] = Field(..., min_length=3, max_length=3)
    std: List[float] = Field(..., min_length=3, max_length=3)


class DatasetManifest(BaseModel):
    format_version: int = 1
    task: Task
    seed: int
    count: int
    length: int
    image_size: int = 64
    grid_size: int = GRID_SIZE
    palette: List[List[int]]
    stats: ChannelStats
    sequences: List[SequenceRecord]


class SyntheticDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: Task
    seed: int
    length: int
    sequences: List[ImageSequence]
    stats: ChannelStats

    def __len__(self) -> int:
        return len(self.sequences)

    def stacked_frames(self) -> np.ndarray:
        """All frames as one (count, T, H, W, 3) uint8 array."""
        return np.stack([seq.frames for seq in self.sequences])
