"""Long-horizon rollout evaluation for both tasks, plus CSV, plot and summary emission."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from matplotlib.figure import Figure

from app.core.exceptions import ArtifactWriteError, ConfigurationError
from app.models.heads import decode_pixels, probe_predict, white_reset_patches
from app.models.worldmodel import RolloutTrace
from app.repositories.checkpoint_repository import atomic_write_bytes
from app.repositories.dataset_repository import DatasetRepository
from app.repositories.metrics_repository import MetricsRepository
from app.schemas.configs import WORLDMODEL_HORIZONS, EvaluationManifest, ProbeProperty, WMVariant
from app.schemas.datasets import FrameLabel, SyntheticDataset, Task
from app.schemas.results import MetricCurve
from app.services.datagen_service import (
    class_map_to_frame,
    frame_to_class_map,
    labels_for_horizon,
    render_labels,
)
from app.services.heads_service import HeadsService, LoadedDecoder, LoadedProbe, label_class
from app.services.worldmodel_service import LoadedWorldModel, WorldModelService, encode_frames, token_distance


logger = logging.getLogger(__name__)

DANCING_HORIZON = 200
BLINKING_HORIZON = 1000
SUMMARY_STEPS = [10, 20, 50, 100, 200, 400, 800, 1000]
STRIP_FRAMES = 8


@dataclass
class FrameStrip:
    """Ground-truth and decoded frames of the first sequence at sampled rollout steps (1-based)."""

    steps: List[int]
    truth: np.ndarray      # (n, H, W, 3) uint8
    predicted: np.ndarray  # (n, H, W, 3) uint8


@dataclass
class EvaluationResult:
    curves: List[MetricCurve]
    outcomes: Dict[str, np.ndarray] = field(default_factory=dict)  # metric -> (sequences, steps)
    feedback_checks: int = 0
    feedback_violations: int = 0
    strip: Optional[FrameStrip] = None


def strip_steps(horizon: int, count: int = STRIP_FRAMES) -> List[int]:
    return sorted({int(round(s)) for s in np.linspace(1, horizon, min(count, horizon))})


def report_metrics(task: Task, variant: WMVariant) -> List[str]:
    """Metric names ``evaluate`` writes outcome arrays for."""
    if task == Task.SPRITES:
        metrics = [f"{prop.value}_accuracy" for prop in ProbeProperty]
    else:
        metrics = ["pixel_accuracy", "mse_x100"]
    return metrics if variant.is_discrete else metrics + ["drift"]


def _check_horizons(loaded: LoadedWorldModel, task: Task, method: str) -> None:
    expected = WORLDMODEL_HORIZONS[task]
    actual = {"context_frames": loaded.model.context_frames, "predict_frames": loaded.model.predict_frames}
    if actual != expected:
        logger.warning(
            f"{method}: world model uses {actual['context_frames']} context / {actual['predict_frames']} "
            f"predicted frames, {task.value} results are reported for "
            f"{expected['context_frames']} / {expected['predict_frames']}"
        )


def _curve(method: str, metric: str, seed: int, outcomes: np.ndarray) -> MetricCurve:
    return MetricCurve(method=method, metric=metric, seed=seed, values=outcomes.mean(axis=0).tolist())


def rollout_tokens(loaded: LoadedWorldModel, trace: RolloutTrace, step: int) -> torch.Tensor:
    """Tokens predicted at ``step`` in the view the matching heads consume."""
    if trace.variant == WMVariant.I2I:
        return loaded.codes[trace.indices[:, step]]
    return trace.vectors[:, step]


class _FrameRenderer:
    """Renders ground-truth frames for arbitrary steps, caching by label."""

    def __init__(self, sequences: Sequence, total: int):
        self.labels: List[List[FrameLabel]] = [labels_for_horizon(seq, total) for seq in sequences]
        self._cache: Dict[FrameLabel, np.ndarray] = {}

    def frames(self, t: int) -> np.ndarray:
        out = []
        for labels in self.labels:
            label = labels[t]
            if label not in self._cache:
                self._cache[label] = render_labels([label])[0]
            out.append(self._cache[label])
        return np.stack(out)


def _drift_step(loaded: LoadedWorldModel, trace: RolloutTrace, t: int, frames: np.ndarray) -> np.ndarray:
    truth = encode_frames(loaded.tokenizer, frames, loaded.view).vectors
    return token_distance(trace.vectors[:, t], truth).mean(dim=-1).numpy()


def _check_views(loaded: LoadedWorldModel, heads: Sequence) -> None:
    for head in heads:
        if head.config.view != loaded.view:
            raise ConfigurationError(
                f"Head trained on {head.config.view.value} tokens cannot read {loaded.config.variant.value} rollouts"
            )


def eval_dancing(
    loaded: LoadedWorldModel,
    probes: Dict[ProbeProperty, LoadedProbe],
    dataset: SyntheticDataset,
    horizon: int = DANCING_HORIZON,
    num_sequences: int = 64,
    method: str = "method",
    seed: int = 0,
    service: Optional[WorldModelService] = None,
) -> EvaluationResult:
    """Probe every rolled-out step for color, shape and position; per-step accuracy over sequences."""
    service = service or WorldModelService()
    model = loaded.model
    if horizon < model.predict_frames:
        raise ValueError(f"horizon {horizon} is shorter than the prediction horizon {model.predict_frames}")
    _check_views(loaded, probes.values())
    _check_horizons(loaded, Task.SPRITES, method)

    sequences = dataset.sequences[:num_sequences]
    H_c = model.context_frames
    frames = np.stack([seq.frames[:H_c] for seq in sequences])
    trace = service.rollout_frames(loaded, frames, horizon, seed=seed)
    truth = [labels_for_horizon(seq, H_c + horizon) for seq in sequences]

    outcomes = {f"{prop.value}_accuracy": np.zeros((len(sequences), horizon)) for prop in probes}
    renderer = _FrameRenderer(sequences, H_c + horizon) if not trace.variant.is_discrete else None
    drift = np.zeros((len(sequences), horizon)) if renderer is not None else None

    for t in range(horizon):
        tokens = rollout_tokens(loaded, trace, t)
        for prop, probe in probes.items():
            predicted = probe_predict(probe.head, tokens.to(next(probe.head.parameters()).dtype)).numpy()
            expected = np.array([label_class(labels[H_c + t], prop) for labels in truth])
            outcomes[f"{prop.value}_accuracy"][:, t] = predicted == expected
        if drift is not None:
            drift[:, t] = _drift_step(loaded, trace, t, renderer.frames(H_c + t))

    if drift is not None:
        outcomes["drift"] = drift
    curves = [_curve(method, metric, seed, values) for metric, values in outcomes.items()]
    logger.info(f"{method}: evaluated {len(sequences)} Dancing-Sprites sequences over {horizon} steps")
    return EvaluationResult(curves, outcomes, trace.feedback_checks, trace.feedback_violations)


def eval_blinking(
    loaded: LoadedWorldModel,
    decoder: LoadedDecoder,
    dataset: SyntheticDataset,
    horizon: int = BLINKING_HORIZON,
    num_sequences: int = 64,
    method: str = "method",
    seed: int = 0,
    service: Optional[WorldModelService] = None,
) -> EvaluationResult:
    """Decode every rolled-out step to a pixel-class map; per-step pixel accuracy and MSE (×10⁻²)."""
    service = service or WorldModelService()
    model = loaded.model
    if horizon < model.predict_frames:
        raise ValueError(f"horizon {horizon} is shorter than the prediction horizon {model.predict_frames}")
    _check_views(loaded, [decoder])
    _check_horizons(loaded, Task.BALLS, method)

    sequences = dataset.sequences[:num_sequences]
    H_c = model.context_frames
    frames = np.stack([seq.frames[:H_c] for seq in sequences])
    trace = service.rollout_frames(loaded, frames, horizon, seed=seed)
    renderer = _FrameRenderer(sequences, H_c + horizon)

    dtype = next(decoder.decoder.parameters()).dtype
    accuracy = np.zeros((len(sequences), horizon))
    mse = np.zeros((len(sequences), horizon))
    drift = np.zeros((len(sequences), horizon)) if not trace.variant.is_discrete else None
    sampled = strip_steps(horizon)
    strip_truth, strip_predicted = [], []

    for t in range(horizon):
        truth_frames = renderer.frames(H_c + t)
        queries = white_reset_patches(truth_frames, decoder.patch_size, dtype)
        tokens = rollout_tokens(loaded, trace, t).to(dtype)
        class_map = decode_pixels(decoder.decoder, tokens, queries).numpy()

        accuracy[:, t] = (class_map == frame_to_class_map(truth_frames)).mean(axis=(1, 2))
        decoded = class_map_to_frame(class_map)
        predicted = decoded.astype(np.float64) / 255.0
        mse[:, t] = ((predicted - truth_frames.astype(np.float64) / 255.0) ** 2).mean(axis=(1, 2, 3)) * 100.0
        if drift is not None:
            drift[:, t] = _drift_step(loaded, trace, t, truth_frames)
        if t + 1 in sampled:
            strip_truth.append(truth_frames[0])
            strip_predicted.append(decoded[0])

    outcomes = {"pixel_accuracy": accuracy, "mse_x100": mse}
    if drift is not None:
        outcomes["drift"] = drift
    curves = [_curve(method, metric, seed, values) for metric, values in outcomes.items()]
    strip = FrameStrip(sampled, np.stack(strip_truth), np.stack(strip_predicted))
    logger.info(f"{method}: evaluated {len(sequences)} Blinking-Ball sequences over {horizon} steps")
    return EvaluationResult(curves, outcomes, trace.feedback_checks, trace.feedback_violations, strip)


def emit_csv(curves: Sequence[MetricCurve], path: Path) -> Path:
    return MetricsRepository().write_curves(curves, path)


def parse_csv(path: Path) -> List[MetricCurve]:
    return MetricsRepository().read_curves(path)


def emit_plots(curves: Sequence[MetricCurve], out_dir: Path) -> List[Path]:
    """One line chart per metric with a line per method (seeds averaged)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactWriteError(out_dir, "Could not create plot directory") from e

    paths = []
    for metric in dict.fromkeys(c.metric for c in curves):
        by_method: Dict[str, List[List[float]]] = {}
        for curve in curves:
            if curve.metric == metric:
                by_method.setdefault(curve.method, []).append(curve.values)

        fig = Figure(figsize=(8, 5))
        ax = fig.subplots()
        for method, runs in by_method.items():
            values = np.mean(np.array(runs), axis=0)
            ax.plot(np.arange(1, len(values) + 1), values, linewidth=2, label=method)
        ax.set_xlabel("Rollout step")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} over rollout steps")
        ax.grid(True, alpha=0.3)
        ax.legend()

        path = out_dir / f"{metric}.png"
        try:
            fig.savefig(path, dpi=120, bbox_inches="tight")
        except OSError as e:
            raise ArtifactWriteError(path, "Could not write plot") from e
        paths.append(path)
    return paths


def emit_frame_strips(strips: Dict[str, FrameStrip], out_dir: Path) -> List[Path]:
    """One image per method: ground truth on top, decoded prediction below, a column per sampled step."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactWriteError(out_dir, "Could not create strip directory") from e

    paths = []
    for method, strip in strips.items():
        n = len(strip.steps)
        fig = Figure(figsize=(1.6 * n, 3.6))
        axes = fig.subplots(2, n, squeeze=False)
        for col, step in enumerate(strip.steps):
            axes[0, col].imshow(strip.truth[col])
            axes[1, col].imshow(strip.predicted[col])
            axes[0, col].set_title(f"t={step}", fontsize=9)
            for ax in axes[:, col]:
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0, 0].set_ylabel("truth")
        axes[1, 0].set_ylabel("predicted")
        fig.suptitle(method)

        path = out_dir / f"{method}.png"
        try:
            fig.savefig(path, dpi=100, bbox_inches="tight")
        except OSError as e:
            raise ArtifactWriteError(path, "Could not write frame strip") from e
        paths.append(path)
    return paths


def summary_rows(curves: Sequence[MetricCurve]) -> List[Dict[str, object]]:
    rows = []
    for curve in curves:
        row: Dict[str, object] = {"method": curve.method, "metric": curve.metric, "seed": curve.seed}
        for step in SUMMARY_STEPS:
            if step <= curve.horizon:
                row[f"step_{step}"] = curve.values[step - 1]
        rows.append(row)
    return rows


class EvaluationService:
    """Runs an evaluation manifest and writes the report directory."""

    def __init__(self):
        self.dataset_repository = DatasetRepository()
        self.metrics_repository = MetricsRepository()
        self.worldmodel_service = WorldModelService()
        self.heads_service = HeadsService()

    def evaluate(self, manifest: EvaluationManifest, out_dir: Path, flags: Optional[Dict] = None) -> Path:
        out_dir = Path(out_dir)
        dataset = self.dataset_repository.load(manifest.test_set)
        if dataset.task != manifest.task:
            raise ConfigurationError(f"Test set is {dataset.task.value}, manifest asks for {manifest.task.value}")

        horizon = manifest.resolved_horizon
        curves: List[MetricCurve] = []
        strips: Dict[str, FrameStrip] = {}
        membership = {}
        for method in manifest.methods:
            loaded = self.worldmodel_service.load_worldmodel(method.worldmodel)
            if manifest.task == Task.SPRITES:
                probes = {prop: self.heads_service.load_probe(path) for prop, path in method.probes.items()}
                if not probes:
                    raise ConfigurationError(f"Method '{method.name}' lists no probes")
                result = eval_dancing(loaded, probes, dataset, horizon, manifest.num_sequences,
                                      method.name, manifest.seed, self.worldmodel_service)
            else:
                if method.decoder is None:
                    raise ConfigurationError(f"Method '{method.name}' lists no decoder")
                decoder = self.heads_service.load_decoder(method.decoder)
                result = eval_blinking(loaded, decoder, dataset, horizon, manifest.num_sequences,
                                       method.name, manifest.seed, self.worldmodel_service)

            curves.extend(result.curves)
            if result.strip is not None:
                strips[method.name] = result.strip
            membership[method.name] = {
                "checks": result.feedback_checks,
                "violations": result.feedback_violations,
            }
            for metric, values in result.outcomes.items():
                path = out_dir / f"outcomes_{method.name}_{metric}.npy"
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, values, allow_pickle=False)

        emit_csv(curves, out_dir / "curves.csv")
        rows = summary_rows(curves)
        fieldnames = ["method", "metric", "seed"] + [f"step_{s}" for s in SUMMARY_STEPS if s <= horizon]
        self.metrics_repository.write_table(rows, fieldnames, out_dir / "summary.csv")
        emit_plots(curves, out_dir / "plots")
        if strips:
            emit_frame_strips(strips, out_dir / "strips")

        echo = {
            "manifest": manifest.model_dump(mode="json"),
            "horizon": horizon,
            "feedback_membership": membership,
            **(flags or {}),
        }
        atomic_write_bytes(out_dir / "flags.json", json.dumps(echo, indent=2, default=str).encode())
        logger.info(f"Evaluation report written to {out_dir}")
        return out_dir
