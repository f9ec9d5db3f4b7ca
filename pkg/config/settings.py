"""Experiment configuration: one strict JSON document per run plus environment settings"""

import json
import os
from pathlib import Path
from typing import List, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from metrics import MetricsConfig
from polish import PolishNetConfig
from sample import PolishLearnConfig
from scene import FeatureConfig, ProposalConfig, SceneGenConfig, TeacherOracleConfig
from ssod import SsodConfig
from utils.errors import ConfigError

DEFAULT_SEED = 42
DEFAULT_OUT_DIR = "runs/default"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_annotated: int = Field(20, ge=0)
    n_unannotated: int = Field(200, ge=0)
    split_file: str = "split.json"


class PolishTrainConfig(BaseModel):
    """Standalone dual polishing learning (train-polish)"""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(2000, ge=0)
    eval_scenes: int = Field(100, ge=1)


class McStatsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thetas: List[float] = Field(default_factory=lambda: [0.15, 0.2, 0.25])
    n: int = Field(100_000, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = DEFAULT_SEED
    out_dir: str = DEFAULT_OUT_DIR
    scene: SceneGenConfig = Field(default_factory=SceneGenConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    proposals: ProposalConfig = Field(default_factory=ProposalConfig)
    oracle: TeacherOracleConfig = Field(default_factory=TeacherOracleConfig)
    sample: PolishLearnConfig = Field(default_factory=PolishLearnConfig)
    polish: PolishNetConfig = Field(default_factory=PolishNetConfig)
    polish_train: PolishTrainConfig = Field(default_factory=PolishTrainConfig)
    ssod: SsodConfig = Field(default_factory=SsodConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    mc_stats: McStatsConfig = Field(default_factory=McStatsConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]]) -> "RunConfig":
        """
        Parse a JSON config file; no path gives the built-in defaults

        Raises:
            ConfigError: file missing, not JSON, or failing validation
        """
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None) -> "RunConfig":
        """Command-line values win over the file"""
        update = {}
        if seed is not None:
            update["seed"] = seed
        if out_dir is not None:
            update["out_dir"] = out_dir
        return self.model_copy(update=update)

    def split_path(self) -> Path:
        return Path(self.out_dir) / self.data.split_file


def load_environment():
    """Load .env once at start-up; existing environment variables win"""
    load_dotenv(override=False)


def worker_threads() -> int:
    """POLISH_THREADS, at least 1"""
    raw = os.getenv("POLISH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as e:
        raise ConfigError(f"POLISH_THREADS must be an integer, got {raw!r}") from e
