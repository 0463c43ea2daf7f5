import hashlib
import json
import logging
from types import SimpleNamespace
from typing import Dict

import numpy as np
import pytest
import torch

from app.core.config import get_settings
from app.core.exceptions import CheckpointError, ConfigurationError
from app.models.heads import ProbeHead
from app.models.worldmodel import RolloutTrace
from app.schemas.configs import (
    DecoderConfig,
    EvaluationManifest,
    MethodArtifacts,
    ProbeConfig,
    ProbeProperty,
    TokenView,
    WMVariant,
    WorldModelConfig,
)
from app.schemas.datasets import (
    NUM_SPRITE_COLORS,
    ImageSequence,
    PatternKind,
    PatternSpec,
    Shape,
    SpriteFrameLabel,
    SyntheticDataset,
    Task,
)
from app.schemas.results import MetricCurve
from app.services.datagen_service import compute_channel_stats, gen_color_sequence, render_labels
from app.services.evaluation_service import (
    SUMMARY_STEPS,
    EvaluationService,
    FrameStrip,
    emit_csv,
    emit_frame_strips,
    emit_plots,
    eval_dancing,
    parse_csv,
    strip_steps,
    summary_rows,
)
from app.services.heads_service import HeadsService, LoadedProbe
from app.services.worldmodel_service import LoadedWorldModel, WorldModelService

HORIZON = 12
VARIANTS = ((WMVariant.I2I, TokenView.SEMANTIC), (WMVariant.R2R_AVGPOOL, TokenView.POOLED))


def tiny_worldmodel(variant: WMVariant, output_dir) -> WorldModelConfig:
    return WorldModelConfig(variant=variant, output_dir=output_dir, context_frames=2, predict_frames=2, width=16,
                            depth=1, num_heads=2, batch_size=4, total_steps=2, log_every=1)


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def sprites_methods(trained_sprites, tmp_path_factory):
    """An I2I and an R2R-avgpool method with probes in the matching views."""
    root = tmp_path_factory.mktemp("sprites_methods")
    tokenizer, train = trained_sprites["djepa"], trained_sprites["train"]
    methods = []
    with pytest.MonkeyPatch.context() as patch:
        patch.setenv("DJEPA_CACHE_DIR", str(root / "cache"))
        get_settings.cache_clear()
        for variant, view in VARIANTS:
            methods.append(_train_method(variant, view, tokenizer, train, root))
    get_settings.cache_clear()
    return methods


def _train_method(variant, view, tokenizer, train, root) -> MethodArtifacts:
    worldmodel = WorldModelService().train_worldmodel(tiny_worldmodel(variant, root / variant.value), tokenizer, train)
    probes = {
        prop: HeadsService().train_probe(tokenizer, train,
                                         ProbeConfig(property=prop, view=view, total_steps=3, batch_size=8),
                                         root / f"{view.value}_{prop.value}.pt")
        for prop in ProbeProperty
    }
    return MethodArtifacts(name=variant.value, tokenizer=tokenizer, worldmodel=worldmodel, probes=probes)


class TestCurveEmission:
    @pytest.fixture
    def curves(self):
        return [
            MetricCurve(method="i2i", metric="color_accuracy", seed=0, values=list(np.linspace(1.0, 0.5, 12))),
            MetricCurve(method="r2i", metric="color_accuracy", seed=0, values=[0.25] * 12),
            MetricCurve(method="r2i", metric="drift", seed=0, values=[float(v) for v in range(12)]),
        ]

    def test_csv_round_trip(self, curves, tmp_path):
        path = emit_csv(curves, tmp_path / "curves.csv")
        assert len(path.read_text().splitlines()) == 1 + 3 * 12
        assert parse_csv(path) == curves

    def test_one_plot_per_metric(self, curves, tmp_path):
        paths = emit_plots(curves, tmp_path / "plots")
        assert sorted(p.name for p in paths) == ["color_accuracy.png", "drift.png"]
        assert all(p.stat().st_size > 0 for p in paths)

    def test_summary_only_covers_reached_steps(self, curves):
        rows = summary_rows(curves)
        assert rows[0]["step_10"] == curves[0].values[9]
        assert "step_20" not in rows[0]
        assert rows[2] == {"method": "r2i", "metric": "drift", "seed": 0, "step_10": 9.0}
        assert SUMMARY_STEPS[0] == 10


class TestEvalDancing:
    def test_per_step_outcomes(self, sprites_methods, trained_sprites):
        from app.repositories.dataset_repository import DatasetRepository

        method = sprites_methods[0]
        loaded = WorldModelService().load_worldmodel(method.worldmodel)
        probes = {prop: HeadsService().load_probe(path) for prop, path in method.probes.items()}
        result = eval_dancing(loaded, probes, DatasetRepository().load(trained_sprites["test"]), horizon=HORIZON,
                              num_sequences=2, method=method.name)
        assert sorted(result.outcomes) == ["color_accuracy", "position_accuracy", "shape_accuracy"]
        for outcomes in result.outcomes.values():
            assert outcomes.shape == (2, HORIZON)
            assert set(np.unique(outcomes)) <= {0.0, 1.0}
        assert all(curve.horizon == HORIZON for curve in result.curves)
        assert result.feedback_violations == 0

    def test_horizon_shorter_than_prediction(self, sprites_methods, trained_sprites):
        from app.repositories.dataset_repository import DatasetRepository

        method = sprites_methods[0]
        loaded = WorldModelService().load_worldmodel(method.worldmodel)
        probes = {prop: HeadsService().load_probe(path) for prop, path in method.probes.items()}
        with pytest.raises(ValueError):
            eval_dancing(loaded, probes, DatasetRepository().load(trained_sprites["test"]), horizon=1)


class TestEvaluationService:
    @pytest.fixture
    def service(self):
        return EvaluationService()

    def test_sprites_report(self, service, sprites_methods, trained_sprites, tmp_path):
        checkpoints = [trained_sprites["djepa"]] + [m.worldmodel for m in sprites_methods]
        checkpoints += [p for m in sprites_methods for p in m.probes.values()]
        before = {path: digest(path) for path in checkpoints}

        manifest = EvaluationManifest(task=Task.SPRITES, test_set=trained_sprites["test"], methods=sprites_methods,
                                      horizon=HORIZON, num_sequences=2)
        out = service.evaluate(manifest, tmp_path / "report", flags={"run": "unit"})

        curves = parse_csv(out / "curves.csv")
        # three probe accuracies per method plus drift for the continuous one
        assert len(curves) == 3 + 4
        assert {c.metric for c in curves if c.method == "r2r-avgpool"} >= {"drift"}
        assert len((out / "curves.csv").read_text().splitlines()) == 1 + 7 * HORIZON
        assert np.load(out / "outcomes_i2i_color_accuracy.npy").shape == (2, HORIZON)
        assert (out / "summary.csv").read_text().splitlines()[0] == "method,metric,seed,step_10"
        assert sorted(p.name for p in (out / "plots").iterdir()) == [
            "color_accuracy.png", "drift.png", "position_accuracy.png", "shape_accuracy.png",
        ]
        flags = json.loads((out / "flags.json").read_text())
        assert flags["run"] == "unit"
        assert flags["horizon"] == HORIZON
        assert flags["feedback_membership"]["i2i"]["violations"] == 0
        assert {path: digest(path) for path in checkpoints} == before

    def test_head_view_must_match_variant(self, service, sprites_methods, trained_sprites, tmp_path):
        i2i, avgpool = sprites_methods
        mixed = MethodArtifacts(name="mixed", tokenizer=i2i.tokenizer, worldmodel=avgpool.worldmodel,
                                probes=i2i.probes)
        manifest = EvaluationManifest(task=Task.SPRITES, test_set=trained_sprites["test"], methods=[mixed],
                                      horizon=HORIZON, num_sequences=2)
        with pytest.raises(ConfigurationError):
            service.evaluate(manifest, tmp_path / "report", flags=None)

    def test_test_set_task_must_match(self, service, sprites_methods, trained_balls, tmp_path):
        manifest = EvaluationManifest(task=Task.SPRITES, test_set=trained_balls["test"], methods=sprites_methods,
                                      horizon=HORIZON, num_sequences=2)
        with pytest.raises(ConfigurationError):
            service.evaluate(manifest, tmp_path / "report")

    def test_sprites_method_needs_probes(self, service, sprites_methods, trained_sprites, tmp_path):
        bare = sprites_methods[0].model_copy(update={"probes": {}})
        manifest = EvaluationManifest(task=Task.SPRITES, test_set=trained_sprites["test"], methods=[bare],
                                      horizon=HORIZON, num_sequences=2)
        with pytest.raises(ConfigurationError):
            service.evaluate(manifest, tmp_path / "report")

    def test_balls_report(self, service, trained_balls, tmp_path, caplog):
        tokenizer, train = trained_balls["djepa"], trained_balls["train"]
        worldmodel = WorldModelService().train_worldmodel(tiny_worldmodel(WMVariant.R2I, tmp_path / "wm"),
                                                          tokenizer, train)
        decoder = HeadsService().train_decoder(
            tokenizer, train, DecoderConfig(width=16, depth=1, num_heads=2, total_steps=2, batch_size=2, log_every=1),
            tmp_path / "decoder.pt",
        )
        method = MethodArtifacts(name="r2i", tokenizer=tokenizer, worldmodel=worldmodel, decoder=decoder)
        manifest = EvaluationManifest(task=Task.BALLS, test_set=trained_balls["test"], methods=[method],
                                      horizon=HORIZON, num_sequences=2)
        with caplog.at_level(logging.WARNING, logger="app.services.evaluation_service"):
            out = service.evaluate(manifest, tmp_path / "report")
        assert "reported for 6 / 6" in caplog.text

        curves = {c.metric: c for c in parse_csv(out / "curves.csv")}
        assert sorted(curves) == ["mse_x100", "pixel_accuracy"]
        assert all(0.0 <= v <= 1.0 for v in curves["pixel_accuracy"].values)
        assert all(v >= 0.0 for v in curves["mse_x100"].values)
        assert np.load(out / "outcomes_r2i_pixel_accuracy.npy").shape == (2, HORIZON)
        strip = out / "strips" / "r2i.png"
        assert strip.is_file() and strip.stat().st_size > 0

    def test_missing_worldmodel_checkpoint(self, service, trained_balls, tmp_path):
        method = MethodArtifacts(name="r2i", tokenizer=trained_balls["djepa"], worldmodel=tmp_path / "wm.pt",
                                 decoder=tmp_path / "decoder.pt")
        manifest = EvaluationManifest(task=Task.BALLS, test_set=trained_balls["test"], methods=[method],
                                      horizon=HORIZON)
        with pytest.raises(CheckpointError):
            service.evaluate(manifest, tmp_path / "report")


def repeat2_dataset(*pairs, length=4) -> SyntheticDataset:
    sequences = []
    for seed, (a, b) in enumerate(pairs):
        pattern = PatternSpec(kind=PatternKind.REPEAT2, params=[a, b])
        labels = [SpriteFrameLabel(color_idx=c, shape=Shape.SQUARE, position=5)
                  for c in gen_color_sequence(pattern, length)]
        sequences.append(ImageSequence(frames=render_labels(labels), labels=labels, pattern=pattern, seed=seed))
    return SyntheticDataset(task=Task.SPRITES, seed=0, length=length, sequences=sequences,
                            stats=compute_channel_stats(sequences))


class ScriptedRollouts:
    """Stands in for the world-model service and replays fixed code indices."""

    def __init__(self, indices: torch.Tensor):
        self.indices = indices

    def rollout_frames(self, loaded, frames, total_steps, seed=0):
        assert frames.shape[1] == loaded.model.context_frames
        return RolloutTrace(variant=WMVariant.I2I, context_frames=loaded.model.context_frames,
                            predict_frames=loaded.model.predict_frames, total_steps=total_steps,
                            indices=self.indices[:, :total_steps])


def one_hot_world(context_frames=2, predict_frames=2) -> LoadedWorldModel:
    """Seven codes, one per color, each a one-hot row; one token per frame."""
    codebook = SimpleNamespace(codes=torch.eye(NUM_SPRITE_COLORS))
    return LoadedWorldModel(
        model=SimpleNamespace(context_frames=context_frames, predict_frames=predict_frames),
        config=WorldModelConfig(context_frames=context_frames, predict_frames=predict_frames),
        tokenizer=SimpleNamespace(model=SimpleNamespace(codebook=codebook)),
    )


def color_reader() -> Dict[ProbeProperty, LoadedProbe]:
    head = ProbeHead(NUM_SPRITE_COLORS, NUM_SPRITE_COLORS)
    with torch.no_grad():
        head.linear.weight.copy_(torch.eye(NUM_SPRITE_COLORS))
        head.linear.bias.zero_()
    return {ProbeProperty.COLOR: LoadedProbe(head=head, config=ProbeConfig(view=TokenView.SEMANTIC))}


class TestScriptedRollouts:
    PAIRS = ((0, 3), (5, 1))

    def colors(self, start, steps):
        return torch.tensor([[(a, b)[(start + t) % 2] for t in range(steps)] for a, b in self.PAIRS])

    def test_memorized_period_two_rollout_is_flat(self):
        dataset = repeat2_dataset(*self.PAIRS)
        # steps after two conditioning frames continue the a, b, a, b alternation
        service = ScriptedRollouts(self.colors(0, HORIZON)[..., None])
        result = eval_dancing(one_hot_world(), color_reader(), dataset, horizon=HORIZON, num_sequences=2,
                              service=service)
        assert result.curves[0].values == [1.0] * HORIZON
        assert result.outcomes["color_accuracy"].shape == (2, HORIZON)

    def test_copying_the_last_frame_alternates(self):
        dataset = repeat2_dataset(*self.PAIRS)
        stuck = torch.tensor([[b] * HORIZON for _, b in self.PAIRS])[..., None]
        result = eval_dancing(one_hot_world(), color_reader(), dataset, horizon=HORIZON, num_sequences=2,
                              service=ScriptedRollouts(stuck))
        assert result.curves[0].values == [0.0, 1.0] * (HORIZON // 2)

    def test_off_task_horizons_are_logged(self, caplog):
        dataset = repeat2_dataset(*self.PAIRS)
        service = ScriptedRollouts(self.colors(0, HORIZON)[..., None])
        with caplog.at_level(logging.WARNING, logger="app.services.evaluation_service"):
            eval_dancing(one_hot_world(2, 2), color_reader(), dataset, horizon=HORIZON, service=service)
        assert "reported for 4 / 4" in caplog.text

        caplog.clear()
        dataset = repeat2_dataset(*self.PAIRS, length=6)
        with caplog.at_level(logging.WARNING, logger="app.services.evaluation_service"):
            eval_dancing(one_hot_world(4, 4), color_reader(), dataset, horizon=HORIZON, service=service)
        assert caplog.text == ""


class TestFrameStrips:
    def test_strip_steps_cover_the_horizon(self):
        assert strip_steps(1000) == [1, 144, 286, 429, 572, 715, 857, 1000]
        assert strip_steps(3) == [1, 2, 3]

    def test_one_image_per_method(self, tmp_path):
        frames = np.zeros((3, 64, 64, 3), dtype=np.uint8)
        frames[:, 10:20, 10:20] = 255
        strips = {
            "i2i": FrameStrip([1, 6, 12], frames, frames[::-1]),
            "r2i": FrameStrip([1, 6, 12], frames, np.zeros_like(frames)),
        }
        paths = emit_frame_strips(strips, tmp_path / "strips")
        assert sorted(p.name for p in paths) == ["i2i.png", "r2i.png"]
        assert all(p.stat().st_size > 0 for p in paths)
