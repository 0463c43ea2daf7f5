"""End-to-end pipeline runner with a resumable, fingerprinted stage registry."""
import asyncio
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from sqlalchemy.ext.asyncio import AsyncSession

from app.core.exceptions import StageFailedError
from app.database.database import StageRecord
from app.repositories.dataset_repository import MANIFEST_NAME
from app.repositories.stage_repository import StageRepository
from app.schemas.configs import (
    VARIANT_VIEWS,
    EvaluationManifest,
    ExperimentManifest,
    MethodArtifacts,
    ProbeProperty,
    apply_task_horizons,
    build_train_config,
)
from app.schemas.datasets import Task
from app.schemas.results import StageStatus
from app.services.dataset_service import DatasetService
from app.services.evaluation_service import EvaluationService, report_metrics
from app.services.heads_service import HeadsService
from app.services.tokenizer_service import TOKENIZER_FILE, TokenizerService
from app.services.worldmodel_service import WorldModelService


logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = {Task.SPRITES: 32, Task.BALLS: 48}
TEST_SEED_OFFSET = 1


@dataclass
class Stage:
    name: str
    config: Dict[str, Any]
    artifact: Path
    run: Callable[[], Any]
    outputs: List[Path] = field(default_factory=list)

    def materialized(self) -> bool:
        """True when the artifact and every extra output are on disk; directories must be non-empty."""
        for path in [self.artifact, *self.outputs]:
            if path.is_dir():
                if not any(path.iterdir()):
                    return False
            elif not path.is_file():
                return False
        return True


def fingerprint(config: Dict[str, Any], upstream: str = "") -> str:
    blob = json.dumps({"config": config, "upstream": upstream}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


class ExperimentService:
    """Runs generate -> tokenizers -> world models -> heads -> evaluate, skipping cached stages."""

    def __init__(self):
        self.stage_repository = StageRepository()
        self.dataset_service = DatasetService()
        self.tokenizer_service = TokenizerService()
        self.worldmodel_service = WorldModelService()
        self.heads_service = HeadsService()
        self.evaluation_service = EvaluationService()

    def plan(self, manifest: ExperimentManifest) -> List[Stage]:
        root = Path(manifest.output_dir) / manifest.name
        task = manifest.task
        data = manifest.data
        train_dir, test_dir = root / "data" / "train", root / "data" / "test"
        train_length = data.train_length or DEFAULT_LENGTHS[task]
        test_length = data.test_length or train_length

        stages = [
            Stage(
                name="data:train",
                config={"task": task.value, "count": data.train_count, "length": train_length, "seed": manifest.seed},
                artifact=train_dir / MANIFEST_NAME,
                run=lambda: self.dataset_service.generate(task, data.train_count, train_length, manifest.seed, train_dir),
            ),
            Stage(
                name="data:test",
                config={"task": task.value, "count": data.test_count, "length": test_length,
                        "seed": manifest.seed + TEST_SEED_OFFSET},
                artifact=test_dir / MANIFEST_NAME,
                run=lambda: self.dataset_service.generate(
                    task, data.test_count, test_length, manifest.seed + TEST_SEED_OFFSET, test_dir
                ),
            ),
        ]

        tokenizer_paths: Dict[str, Path] = {}
        for name, values in manifest.tokenizers.items():
            config = build_train_config({
                "task": task,
                "seed": manifest.seed,
                **values,
                "dataset_path": train_dir,
                "output_dir": root / "tokenizers" / name,
            })
            tokenizer_paths[name] = config.output_dir / TOKENIZER_FILE
            stages.append(Stage(
                name=f"tokenizer:{name}",
                config=config.model_dump(mode="json"),
                artifact=tokenizer_paths[name],
                run=lambda config=config: self.tokenizer_service.train_tokenizer(config),
            ))

        worldmodel_paths: Dict[str, Path] = {}
        for method in manifest.methods:
            config = apply_task_horizons(method.worldmodel, manifest.task).model_copy(
                update={"output_dir": root / "worldmodels" / method.name}
            )
            tokenizer_path = tokenizer_paths[method.tokenizer]
            worldmodel_paths[method.name] = config.output_dir / "worldmodel.pt"
            stages.append(Stage(
                name=f"worldmodel:{method.name}",
                config={"tokenizer": method.tokenizer, **config.model_dump(mode="json")},
                artifact=worldmodel_paths[method.name],
                run=lambda config=config, tokenizer_path=tokenizer_path: self.worldmodel_service.train_worldmodel(
                    config, tokenizer_path, train_dir
                ),
            ))

        heads: Dict[tuple, Dict[str, Path]] = {}
        for method in manifest.methods:
            view = VARIANT_VIEWS[method.worldmodel.variant]
            key = (method.tokenizer, view)
            if key in heads:
                continue
            heads[key] = {}
            stages.extend(self._head_stages(manifest, root, key, tokenizer_paths, train_dir, heads[key]))

        evaluation = EvaluationManifest(
            task=task,
            test_set=test_dir,
            methods=[
                MethodArtifacts(
                    name=method.name,
                    tokenizer=tokenizer_paths[method.tokenizer],
                    worldmodel=worldmodel_paths[method.name],
                    probes={
                        ProbeProperty(prop): path
                        for prop, path in heads[(method.tokenizer, VARIANT_VIEWS[method.worldmodel.variant])].items()
                        if prop != "decoder"
                    },
                    decoder=heads[(method.tokenizer, VARIANT_VIEWS[method.worldmodel.variant])].get("decoder"),
                )
                for method in manifest.methods
            ],
            horizon=manifest.horizon,
            num_sequences=manifest.num_sequences,
            seed=manifest.seed,
        )
        report_dir = root / "report"
        outputs = [report_dir / name for name in ("summary.csv", "flags.json", "plots")]
        if task == Task.BALLS:
            outputs.append(report_dir / "strips")
        outputs.extend(
            report_dir / f"outcomes_{method.name}_{metric}.npy"
            for method in manifest.methods
            for metric in report_metrics(task, method.worldmodel.variant)
        )
        stages.append(Stage(
            name="evaluate",
            config=evaluation.model_dump(mode="json"),
            artifact=report_dir / "curves.csv",
            run=lambda: self.evaluation_service.evaluate(
                evaluation, report_dir, flags={"experiment": manifest.name}
            ),
            outputs=outputs,
        ))
        return stages

    def _head_stages(self, manifest: ExperimentManifest, root: Path, key: tuple, tokenizer_paths: Dict[str, Path],
                     train_dir: Path, artifacts: Dict[str, Path]) -> List[Stage]:
        tokenizer, view = key
        tokenizer_path = tokenizer_paths[tokenizer]
        head_dir = root / "heads" / f"{tokenizer}_{view.value}"
        if manifest.task == Task.BALLS:
            config = manifest.decoder.model_copy(update={"view": view})
            artifacts["decoder"] = head_dir / "decoder.pt"
            return [Stage(
                name=f"decoder:{tokenizer}:{view.value}",
                config={"tokenizer": tokenizer, **config.model_dump(mode="json")},
                artifact=artifacts["decoder"],
                run=lambda: self.heads_service.train_decoder(tokenizer_path, train_dir, config, artifacts["decoder"]),
            )]

        stages = []
        for prop in ProbeProperty:
            config = manifest.probe.model_copy(update={"view": view, "property": prop})
            artifacts[prop.value] = head_dir / f"probe_{prop.value}.pt"
            stages.append(Stage(
                name=f"probe:{tokenizer}:{view.value}:{prop.value}",
                config={"tokenizer": tokenizer, **config.model_dump(mode="json")},
                artifact=artifacts[prop.value],
                run=lambda config=config, out=artifacts[prop.value]: self.heads_service.train_probe(
                    tokenizer_path, train_dir, config, out
                ),
            ))
        return stages

    async def run_experiment(self, manifest: ExperimentManifest, db: AsyncSession) -> Path:
        """Execute every stage; return the report directory."""
        stages = self.plan(manifest)
        upstream = ""
        rerun = False
        last_good: Optional[str] = None

        for stage in stages:
            current = fingerprint(stage.config, upstream)
            upstream = current
            record = await self.stage_repository.get(db, manifest.name, stage.name)
            cached = (
                record is not None
                and record.status == StageStatus.COMPLETED.value
                and record.fingerprint == current
                and stage.materialized()
            )
            if cached and not rerun:
                logger.info(f"[{manifest.name}] skipping cached stage {stage.name}")
                last_good = str(stage.artifact)
                continue

            rerun = True
            logger.info(f"[{manifest.name}] running stage {stage.name}")
            await self.stage_repository.upsert(db, manifest.name, stage.name, StageStatus.RUNNING, current)
            try:
                await asyncio.to_thread(stage.run)
            except Exception as e:
                logger.error(f"[{manifest.name}] stage {stage.name} failed: {e}")
                await self.stage_repository.upsert(
                    db, manifest.name, stage.name, StageStatus.FAILED, current, error=str(e)
                )
                raise StageFailedError(stage.name, last_good, e) from e

            await self.stage_repository.upsert(
                db, manifest.name, stage.name, StageStatus.COMPLETED, current, artifact=str(stage.artifact)
            )
            last_good = str(stage.artifact)

        report_dir = Path(manifest.output_dir) / manifest.name / "report"
        logger.info(f"[{manifest.name}] experiment complete: {report_dir}")
        return report_dir

    async def list_stages(self, db: AsyncSession, experiment: str) -> List[StageRecord]:
        return await self.stage_repository.list_for(db, experiment)

