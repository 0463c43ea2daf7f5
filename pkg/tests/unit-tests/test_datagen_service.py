import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas.datasets import (
    NUM_SPRITE_COLORS,
    BallFrameLabel,
    BlinkingBallSpec,
    PatternKind,
    PatternSpec,
    Shape,
    SpriteFrameLabel,
    Task,
)
from app.services.datagen_service import (
    BALL_PALETTE,
    NUM_PIXEL_CLASSES,
    SPRITE_PALETTE,
    ball_frame_label,
    class_map_to_frame,
    frame_to_class_map,
    gen_color_sequence,
    gen_dataset,
    gen_sequence,
    labels_for_horizon,
    pattern_period,
    render_ball_frame,
    render_sprite_frame,
    sample_ball_spec,
    sample_pattern_spec,
)


class TestColorPatterns:
    """Color sequence generation for every Dancing-Sprites pattern."""

    def test_linear_worked_example(self):
        spec = PatternSpec(kind=PatternKind.LINEAR, params=[0, 2])
        assert gen_color_sequence(spec, 8) == [0, 2, 4, 6, 1, 3, 5, 0]

    @pytest.mark.parametrize(
        "kind,params,period",
        [
            (PatternKind.REPEAT2, [1, 5], 2),
            (PatternKind.REPEAT3, [0, 3, 6], 3),
            (PatternKind.ZIGZAG3, [2, 4, 6], 4),
            (PatternKind.LINEAR, [3, 4], 7),
        ],
    )
    def test_sequences_are_periodic(self, kind, params, period):
        spec = PatternSpec(kind=kind, params=params)
        colors = gen_color_sequence(spec, 60)
        assert pattern_period(spec) == period
        assert all(colors[t] == colors[t + period] for t in range(60 - period))
        assert colors[:period] != colors[1:period + 1]

    def test_zigzag_bounces(self):
        spec = PatternSpec(kind=PatternKind.ZIGZAG3, params=[2, 4, 6])
        assert gen_color_sequence(spec, 6) == [2, 4, 6, 4, 2, 4]

    @pytest.mark.parametrize("hop", range(1, NUM_SPRITE_COLORS))
    def test_linear_covers_every_color_in_any_window(self, hop):
        colors = gen_color_sequence(PatternSpec(kind=PatternKind.LINEAR, params=[5, hop]), 40)
        for start in range(40 - NUM_SPRITE_COLORS + 1):
            assert set(colors[start:start + NUM_SPRITE_COLORS]) == set(range(NUM_SPRITE_COLORS))

    def test_invalid_patterns_are_rejected(self):
        with pytest.raises(ValidationError):
            PatternSpec(kind=PatternKind.LINEAR, params=[0, 0])
        with pytest.raises(ValidationError):
            PatternSpec(kind=PatternKind.REPEAT2, params=[3, 3])
        with pytest.raises(ValidationError):
            PatternSpec(kind=PatternKind.REPEAT3, params=[0, 1, 7])

    def test_length_must_be_positive(self):
        with pytest.raises(ValueError):
            gen_color_sequence(PatternSpec(kind=PatternKind.REPEAT2, params=[0, 1]), 0)

    @pytest.mark.parametrize("kind", list(PatternKind))
    def test_sampled_specs_are_valid(self, kind):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_pattern_spec(kind, rng).kind == kind


class TestRendering:
    def test_sprite_frame_uses_palette_color_inside_its_cell(self):
        label = SpriteFrameLabel(color_idx=3, shape=Shape.SQUARE, position=5)
        frame = render_sprite_frame(label)
        assert frame.shape == (64, 64, 3) and frame.dtype == np.uint8
        colored = np.argwhere((frame != 0).any(axis=-1))
        assert len(colored) > 0
        rows, cols = colored[:, 0], colored[:, 1]
        assert rows.min() >= 16 and rows.max() < 32
        assert cols.min() >= 16 and cols.max() < 32
        assert (frame[rows, cols] == SPRITE_PALETTE[3]).all()

    @pytest.mark.parametrize("shape", list(Shape))
    def test_each_shape_renders_differently(self, shape):
        frames = {
            s: render_sprite_frame(SpriteFrameLabel(color_idx=0, shape=s, position=0)) for s in Shape
        }
        others = [s for s in Shape if s != shape]
        assert all(not np.array_equal(frames[shape], frames[o]) for o in others)

    def test_ball_frame_has_one_colored_ball(self):
        spec = BlinkingBallSpec(position_pattern=[2, 0, 3, 1], color_pattern=[4, 1])
        frame = render_ball_frame(spec, 1)
        classes = frame_to_class_map(frame)
        assert set(np.unique(classes)) == {0, 1, 2 + 1}
        assert ball_frame_label(spec, 1) == BallFrameLabel(active_ball=0, color_idx=1)

    def test_ball_positions_and_colors_cycle(self):
        spec = BlinkingBallSpec(position_pattern=[1, 3, 0, 2], color_pattern=[0, 2, 4])
        labels = [ball_frame_label(spec, t) for t in range(24)]
        assert [label.active_ball for label in labels[:8]] == [1, 3, 0, 2, 1, 3, 0, 2]
        assert [label.color_idx for label in labels[:6]] == [0, 2, 4, 0, 2, 4]
        assert labels[0] == labels[12]

    def test_ball_step_must_be_non_negative(self):
        spec = sample_ball_spec(np.random.default_rng(1))
        with pytest.raises(ValueError):
            ball_frame_label(spec, -1)

    def test_class_map_inverts_rendering(self):
        spec = BlinkingBallSpec(position_pattern=[0, 1, 2, 3], color_pattern=[0, 1, 2, 3, 4])
        frames = np.stack([render_ball_frame(spec, t) for t in range(5)])
        classes = frame_to_class_map(frames)
        assert classes.max() < NUM_PIXEL_CLASSES
        np.testing.assert_array_equal(class_map_to_frame(classes), frames)

    def test_invalid_ball_specs_are_rejected(self):
        with pytest.raises(ValidationError):
            BlinkingBallSpec(position_pattern=[0, 1, 1, 3], color_pattern=[0])
        with pytest.raises(ValidationError):
            BlinkingBallSpec(position_pattern=[0, 1, 2, 3], color_pattern=[])
        with pytest.raises(ValidationError):
            BlinkingBallSpec(position_pattern=[0, 1, 2, 3], color_pattern=[len(BALL_PALETTE)])


class TestSequences:
    def test_same_seed_same_content(self):
        a = gen_dataset(Task.SPRITES, count=3, length=6, seed=11)
        b = gen_dataset(Task.SPRITES, count=3, length=6, seed=11)
        for x, y in zip(a.sequences, b.sequences):
            np.testing.assert_array_equal(x.frames, y.frames)
            assert x.labels == y.labels

    def test_different_seed_different_content(self):
        a = gen_dataset(Task.BALLS, count=4, length=6, seed=1)
        b = gen_dataset(Task.BALLS, count=4, length=6, seed=2)
        assert any(not np.array_equal(x.frames, y.frames) for x, y in zip(a.sequences, b.sequences))

    def test_sprite_sequence_keeps_shape_and_position(self):
        sequence = gen_sequence(Task.SPRITES, 12, seed=7)
        assert len({(label.shape, label.position) for label in sequence.labels}) == 1
        assert sequence.frames.shape == (12, 64, 64, 3)

    def test_labels_extend_beyond_stored_length(self):
        sequence = gen_sequence(Task.SPRITES, 5, seed=9)
        extended = labels_for_horizon(sequence, 40)
        assert extended[:5] == sequence.labels
        assert [label.color_idx for label in extended] == gen_color_sequence(sequence.pattern, 40)

    def test_ball_labels_extend_beyond_stored_length(self):
        sequence = gen_sequence(Task.BALLS, 4, seed=9)
        extended = labels_for_horizon(sequence, 30)
        assert extended[:4] == sequence.labels
        assert extended[29] == ball_frame_label(sequence.pattern, 29)

    def test_channel_stats_are_positive(self):
        dataset = gen_dataset(Task.SPRITES, count=2, length=3, seed=0)
        assert all(s > 0 for s in dataset.stats.std)
        assert all(0 <= m <= 1 for m in dataset.stats.mean)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            gen_dataset(Task.SPRITES, count=0, length=3, seed=0)
