import logging
import math
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

from app.schemas.datasets import (
    GRID_SIZE,
    NUM_BALLS,
    NUM_BALL_COLORS,
    NUM_SPRITE_COLORS,
    SHAPES,
    BallFrameLabel,
    BlinkingBallSpec,
    ChannelStats,
    FrameLabel,
    ImageSequence,
    PatternKind,
    PatternSpec,
    Shape,
    SpriteFrameLabel,
    SyntheticDataset,
    Task,
)


logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
CELL_SIZE = IMAGE_SIZE // GRID_SIZE

# Sprite colors, indexed 0..6.
SPRITE_PALETTE: List[Tuple[int, int, int]] = [
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (255, 225, 25),   # yellow
    (0, 130, 200),    # blue
    (245, 130, 48),   # orange
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
]

# Non-white ball colors, indexed 0..4.
BALL_PALETTE: List[Tuple[int, int, int]] = [
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
]

BACKGROUND = (0, 0, 0)
WHITE = (255, 255, 255)

# Pixel classes of a Blinking-Ball frame: background, white ball, five ball colors.
PIXEL_CLASS_PALETTE = np.array([BACKGROUND, WHITE, *BALL_PALETTE], dtype=np.uint8)
NUM_PIXEL_CLASSES = len(PIXEL_CLASS_PALETTE)

# (x, y) centers, row-major over a 2x2 layout.
BALL_CENTERS: List[Tuple[int, int]] = [(16, 16), (48, 16), (16, 48), (48, 48)]
BALL_RADIUS = 10

_SPRITE_MARGIN = 2


def gen_color_sequence(spec: PatternSpec, length: int) -> List[int]:
    """Expand a color pattern into its first ``length`` color indices."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")

    if spec.kind == PatternKind.LINEAR:
        start, hop = spec.params
        return [(start + t * hop) % NUM_SPRITE_COLORS for t in range(length)]
    if spec.kind == PatternKind.ZIGZAG3:
        a, b, c = spec.params
        cycle = [a, b, c, b]
    else:
        cycle = list(spec.params)
    return [cycle[t % len(cycle)] for t in range(length)]


def pattern_period(spec: PatternSpec) -> int:
    return {
        PatternKind.LINEAR: NUM_SPRITE_COLORS,
        PatternKind.REPEAT2: 2,
        PatternKind.ZIGZAG3: 4,
        PatternKind.REPEAT3: 3,
    }[spec.kind]


def sample_pattern_spec(kind: PatternKind | str, rng: np.random.Generator) -> PatternSpec:
    kind = PatternKind(kind)
    if kind == PatternKind.LINEAR:
        start = int(rng.integers(0, NUM_SPRITE_COLORS))
        hop = int(rng.integers(1, NUM_SPRITE_COLORS))
        return PatternSpec(kind=kind, params=[start, hop])

    n_colors = 2 if kind == PatternKind.REPEAT2 else 3
    colors = rng.choice(NUM_SPRITE_COLORS, size=n_colors, replace=False)
    return PatternSpec(kind=kind, params=[int(c) for c in colors])


def sample_ball_spec(rng: np.random.Generator) -> BlinkingBallSpec:
    permutation = rng.permutation(NUM_BALLS)
    n_colors = int(rng.integers(1, NUM_BALL_COLORS + 1))
    colors = rng.choice(NUM_BALL_COLORS, size=n_colors, replace=False)
    return BlinkingBallSpec(
        position_pattern=[int(p) for p in permutation],
        color_pattern=[int(c) for c in colors],
    )


@lru_cache(maxsize=None)
def _shape_polygon(shape: Shape) -> List[Tuple[int, int]]:
    """Integer outline of a shape inside a 16x16 cell, before translation."""
    lo, hi = _SPRITE_MARGIN, CELL_SIZE - 1 - _SPRITE_MARGIN
    center = (lo + hi) / 2
    if shape == Shape.SQUARE:
        return [(lo, lo), (hi, lo), (hi, hi), (lo, hi)]
    if shape == Shape.TRIANGLE:
        return [(round(center), lo), (hi, hi), (lo, hi)]
    if shape == Shape.STAR:
        outer, inner = (hi - lo) / 2, (hi - lo) / 4.5
        points = []
        for k in range(10):
            radius = outer if k % 2 == 0 else inner
            angle = -math.pi / 2 + k * math.pi / 5
            points.append((round(center + radius * math.cos(angle)),
                           round(center + radius * math.sin(angle))))
        return points
    raise ValueError(f"Shape {shape} is not polygonal")


def cell_bounding_box(position: int) -> Tuple[int, int, int, int]:
    """(left, top, right, bottom) pixel box, inclusive, of a grid cell."""
    row, col = divmod(position, GRID_SIZE)
    left, top = col * CELL_SIZE, row * CELL_SIZE
    return left, top, left + CELL_SIZE - 1, top + CELL_SIZE - 1


def render_sprite_frame(label: SpriteFrameLabel) -> np.ndarray:
    """Rasterize one sprite on a black 64x64 canvas without anti-aliasing."""
    image = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    draw = ImageDraw.Draw(image)
    left, top, _, _ = cell_bounding_box(label.position)
    color = SPRITE_PALETTE[label.color_idx]

    if label.shape == Shape.CIRCLE:
        lo, hi = _SPRITE_MARGIN, CELL_SIZE - 1 - _SPRITE_MARGIN
        draw.ellipse((left + lo, top + lo, left + hi, top + hi), fill=color)
    else:
        polygon = [(left + x, top + y) for x, y in _shape_polygon(label.shape)]
        draw.polygon(polygon, fill=color)
    return np.asarray(image, dtype=np.uint8).copy()


def ball_frame_label(spec: BlinkingBallSpec, step: int) -> BallFrameLabel:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return BallFrameLabel(
        active_ball=spec.position_pattern[step % NUM_BALLS],
        color_idx=spec.color_pattern[step % len(spec.color_pattern)],
    )


def render_ball_label(label: BallFrameLabel) -> np.ndarray:
    image = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    draw = ImageDraw.Draw(image)
    for ball, (cx, cy) in enumerate(BALL_CENTERS):
        color = BALL_PALETTE[label.color_idx] if ball == label.active_ball else WHITE
        draw.ellipse(
            (cx - BALL_RADIUS, cy - BALL_RADIUS, cx + BALL_RADIUS - 1, cy + BALL_RADIUS - 1),
            fill=color,
        )
    return np.asarray(image, dtype=np.uint8).copy()


def render_ball_frame(spec: BlinkingBallSpec, step: int) -> np.ndarray:
    return render_ball_label(ball_frame_label(spec, step))


def frame_to_class_map(frame: np.ndarray) -> np.ndarray:
    """Map a Blinking-Ball frame (..., H, W, 3) to pixel classes (..., H, W)."""
    matches = (frame[..., None, :] == PIXEL_CLASS_PALETTE).all(axis=-1)
    return matches.argmax(axis=-1).astype(np.int64)


def class_map_to_frame(class_map: np.ndarray) -> np.ndarray:
    return PIXEL_CLASS_PALETTE[np.asarray(class_map)]


def labels_for_horizon(sequence: ImageSequence, total: int) -> List[FrameLabel]:
    """Ground-truth labels for steps 0..total-1, re-derived from the pattern."""
    pattern = sequence.pattern
    if isinstance(pattern, BlinkingBallSpec):
        return [ball_frame_label(pattern, t) for t in range(total)]

    first = sequence.labels[0]
    return [
        SpriteFrameLabel(color_idx=color, shape=first.shape, position=first.position)
        for color in gen_color_sequence(pattern, total)
    ]


def render_labels(labels: Sequence[FrameLabel]) -> np.ndarray:
    """Render frames for a label list, rendering each distinct label once."""
    cache: Dict[FrameLabel, np.ndarray] = {}
    frames = []
    for label in labels:
        if label not in cache:
            if isinstance(label, SpriteFrameLabel):
                cache[label] = render_sprite_frame(label)
            else:
                cache[label] = render_ball_label(label)
        frames.append(cache[label])
    return np.stack(frames)


def sequence_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_sequence(task: Task | str, length: int, seed: int) -> ImageSequence:
    """Generate one sequence from its own seeded generator."""
    task = Task(task)
    rng = np.random.default_rng(seed)

    if task == Task.SPRITES:
        kind = list(PatternKind)[int(rng.integers(len(PatternKind)))]
        pattern = sample_pattern_spec(kind, rng)
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        position = int(rng.integers(GRID_SIZE * GRID_SIZE))
        labels: List[FrameLabel] = [
            SpriteFrameLabel(color_idx=color, shape=shape, position=position)
            for color in gen_color_sequence(pattern, length)
        ]
    else:
        pattern = sample_ball_spec(rng)
        labels = [ball_frame_label(pattern, t) for t in range(length)]

    return ImageSequence(frames=render_labels(labels), labels=labels, pattern=pattern, seed=seed)


def compute_channel_stats(sequences: Sequence[ImageSequence]) -> ChannelStats:
    pixels = np.concatenate([seq.frames.reshape(-1, 3) for seq in sequences]).astype(np.float64) / 255.0
    mean = pixels.mean(axis=0)
    std = np.maximum(pixels.std(axis=0), 1e-6)
    return ChannelStats(mean=[float(m) for m in mean], std=[float(s) for s in std])


def gen_dataset(task: Task | str, count: int, length: int, seed: int,
                progress: bool = False) -> SyntheticDataset:
    """Generate ``count`` sequences; content is a pure function of the arguments."""
    task = Task(task)
    if count < 1 or length < 1:
        raise ValueError(f"count and length must be >= 1, got count={count}, length={length}")

    logger.info(f"Generating {count} {task.value} sequences of length {length} (seed={seed})")
    sequences = [
        gen_sequence(task, length, sequence_seed(seed, index))
        for index in tqdm(range(count), desc=f"generate {task.value}", disable=not progress)
    ]
    return SyntheticDataset(
        task=task,
        seed=seed,
        length=length,
        sequences=sequences,
        stats=compute_channel_stats(sequences),
    )


def palette_for(task: Task | str) -> List[List[int]]:
    palette = SPRITE_PALETTE if Task(task) == Task.SPRITES else BALL_PALETTE
    return [list(color) for color in palette]
