"""Run configuration: one JSON document with a section per concern.

Unknown keys are rejected at every level. Command-line flags are merged on
top of the file before validation, and the resolved config is what every
report embeds.
"""

import copy
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from services.errors import ConfigError
from services.lshaped_service import LShapedOptions
from services.policy_service import EvaluationOptions, PolicyOptions
from services.rhs_sampling_service import RhsGeneratorConfig
from services.sd_service import SdOptions
from services.sequential_service import SequentialConfig
from utils import json_utils


class InstanceSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str | None = None
    preset: str | None = None
    d_x: int | None = Field(default=None, gt=0)
    m1: int | None = Field(default=None, gt=0)
    m2: int | None = Field(default=None, gt=0)
    recourse_columns: int | None = Field(default=None, gt=0)
    scenarios: int | None = Field(default=None, ge=1)
    mean_value: bool = False


class SolverSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["lshaped", "sd", "extensive"] = "lshaped"
    lshaped: LShapedOptions = Field(default_factory=LShapedOptions)
    sd: SdOptions = Field(default_factory=SdOptions)
    oos_samples: int = Field(default=2000, ge=1)


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str | None = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0)
    threads: int | None = Field(default=None, ge=1)
    instance: InstanceSection = Field(default_factory=InstanceSection)
    rhs: RhsGeneratorConfig = Field(default_factory=RhsGeneratorConfig)
    solver: SolverSection = Field(default_factory=SolverSection)
    policy: PolicyOptions = Field(default_factory=PolicyOptions)
    evaluation: EvaluationOptions = Field(default_factory=EvaluationOptions)
    sequential: SequentialConfig = Field(default_factory=SequentialConfig)
    output: OutputSection = Field(default_factory=OutputSection)


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = _merge(current if isinstance(current, dict) else {}, value)
        elif value is not None:
            merged[key] = value
    return merged


def _propagate_seed(document: dict) -> dict:
    """Sections without their own seed inherit the top-level one."""
    seed = document.get("seed", 0)
    for path in (("rhs",), ("sequential",), ("solver", "sd")):
        section = document
        for key in path:
            section = section.setdefault(key, {})
            if not isinstance(section, dict):
                break
        else:
            section.setdefault("seed", seed)
    return document


def build_config(document: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Validates ``document`` with ``overrides`` (None values skipped) merged on top.

    Raises:
        ConfigError: On unknown keys or out-of-range values.
    """
    merged = _propagate_seed(_merge(copy.deepcopy(document or {}), overrides or {}))
    try:
        return RunConfig.model_validate(merged)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    document = json_utils.read_json(path) if path else {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return build_config(document, overrides)


def config_document(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")
