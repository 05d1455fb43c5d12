"""Run configuration schema for the command-line front end."""
from __future__ import annotations

from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .sde import DEFAULT_EPS_GRID, DEFAULT_T_GRID

Command = Literal["validate", "average", "simulate", "study", "example"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSpec(_Strict):
    name: str = "paper_example"
    params: dict = Field(default_factory=dict)


class StepRule(_Strict):
    kind: Literal["fixed", "eps_scaled"] = "eps_scaled"
    c: float = Field(0.1, gt=0)


class SimSection(_Strict):
    eps: float = Field(0.05, gt=0, le=1)
    T: float = Field(1.0, ge=0)
    h_slow: float = Field(1e-3, gt=0)
    step_rule: StepRule = Field(default_factory=StepRule)
    M: int = Field(1000, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    t_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_T_GRID))


class StudySection(_Strict):
    eps_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_EPS_GRID))
    phi: str = "coordinate(0)"
    t_grid: Optional[List[float]] = None


class AverageSection(_Strict):
    lo: Union[float, List[float]] = -2.0
    hi: Union[float, List[float]] = 2.0
    num: int = Field(21, ge=1)


class OutputSection(_Strict):
    directory: str = "out"
    format: Literal["csv", "json"] = "csv"


class RunConfig(_Strict):
    command: Command = "study"
    model: ModelSpec = Field(default_factory=ModelSpec)
    sim: SimSection = Field(default_factory=SimSection)
    study: StudySection = Field(default_factory=StudySection)
    average: AverageSection = Field(default_factory=AverageSection)
    output: OutputSection = Field(default_factory=OutputSection)
    x0: Optional[List[float]] = None
    alpha0: int = Field(0, ge=0)

    @field_validator("study")
    @classmethod
    def _eps_grid_decreasing(cls, v):
        g = v.eps_grid
        if not g or any(not (0 < e <= 1) for e in g) or any(
            b >= a for a, b in zip(g, g[1:])
        ):
            raise ValueError("eps_grid must be strictly decreasing within (0, 1]")
        return v
