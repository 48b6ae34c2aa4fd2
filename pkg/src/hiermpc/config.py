"""Run configuration: strict JSON schema and construction of the run objects."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import presets
from .coordinator import CoordinatorConfig, default_beta_grid
from .local import CentralCostConfig, LocalMpcConfig
from .model import CoupledPlant, load_plant
from .simulator import ControlSetup, ScenarioScript
from .surrogate import make_surrogate_plant

Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlantSource(_Strict):
    """Either a plant JSON file or the surrogate generator."""

    file: Optional[str] = None
    seed: int = presets.SURROGATE_SEED
    gamma: float = Field(presets.SURROGATE_GAMMA, ge=0)

    @field_validator("file")
    @classmethod
    def _exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"plant file {v!r} does not exist")
        return v


class LocalWeights(_Strict):
    Q: Matrix
    R: Matrix


class CentralWeights(_Strict):
    Qc1: Matrix
    Qc2: Matrix
    Rc1: Matrix
    Rc2: Matrix


class CoordinatorSettings(_Strict):
    beta: Optional[float] = Field(None, gt=0, le=1)
    beta_step: float = Field(0.05, gt=0, le=1)
    delta: float = Field(presets.DELTA, gt=0)
    m: int = Field(presets.NODES_PER_AXIS, ge=3)
    tol: float = Field(presets.TOL, gt=0)
    max_iter: int = Field(presets.MAX_ITER, ge=1)
    warm_start: bool = True

    @field_validator("m")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("m must be odd so the grid contains r_d")
        return v


class NegotiateSettings(_Strict):
    count: int = Field(50, ge=0)
    init_scale: float = Field(1.0, ge=0)
    r: Optional[list[float]] = None


class RunConfig(_Strict):
    plant: PlantSource = Field(default_factory=PlantSource)
    horizon: int = Field(presets.HORIZON, ge=1)
    tail_q: int = Field(presets.TAIL_Q, ge=0)
    local: Optional[list[LocalWeights]] = None
    weight_mode: str = "default"
    weight_modes: dict[str, CentralWeights] = Field(default_factory=dict)
    r_d: Optional[list[list[float]]] = None
    coordinator: CoordinatorSettings = Field(default_factory=CoordinatorSettings)
    negotiate: NegotiateSettings = Field(default_factory=NegotiateSettings)
    scenario_file: Optional[str] = None
    scenario: Optional[ScenarioScript] = None
    out: str = "out"
    transport: str = "inproc"
    seed: int = 0

    @field_validator("local", "r_d")
    @classmethod
    def _pair(cls, v):
        if v is not None and len(v) != 2:
            raise ValueError("expected one entry per subsystem (2)")
        return v

    @field_validator("transport")
    @classmethod
    def _transport(cls, v):
        if v != "inproc" and not v.startswith("wire:"):
            raise ValueError("transport must be 'inproc' or 'wire:<host>:<port>'")
        return v

    @field_validator("scenario_file")
    @classmethod
    def _scenario_exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"scenario file {v!r} does not exist")
        return v

    @model_validator(mode="after")
    def _mode_known(self):
        if self.weight_mode not in self.weight_modes and self.weight_mode not in presets.QC_MODES:
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.scenario is not None and self.scenario_file is not None:
            raise ValueError("give either scenario or scenario_file, not both")
        return self

    # -- io ------------------------------------------------------------------

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(path, text, exc) from None

    def dumps(self) -> str:
        return self.model_dump_json(indent=2, exclude_none=True)

    # -- construction ----------------------------------------------------------

    def build_plant(self) -> CoupledPlant:
        if self.plant.file is not None:
            return load_plant(self.plant.file)
        return make_surrogate_plant(self.plant.seed, self.plant.gamma)

    def central_weights(self, plant: CoupledPlant, mode: str | None = None):
        mode = mode or self.weight_mode
        if mode in self.weight_modes:
            w = self.weight_modes[mode]
            return (np.array(w.Qc1), np.array(w.Rc1)), (np.array(w.Qc2), np.array(w.Rc2))
        if _surrogate_sized(plant):
            return presets.central_weights(mode)
        if mode != "default":
            raise ValueError(f"weight mode {mode!r} has no preset for this plant size")
        return tuple((np.eye(s.n_y), np.zeros((s.n_u, s.n_u))) for s in plant.subsystems)

    def local_weights(self, plant: CoupledPlant):
        if self.local is not None:
            return tuple((np.array(w.Q), np.array(w.R)) for w in self.local)
        if _surrogate_sized(plant):
            return presets.local_weights()
        return tuple((np.eye(s.n_x), np.eye(s.n_u)) for s in plant.subsystems)

    def targets(self, plant: CoupledPlant):
        if self.r_d is None:
            return [np.zeros(s.n_y) for s in plant.subsystems]
        return [np.asarray(r, dtype=float) for r in self.r_d]

    def coordinator_config(self, beta: float | None = None) -> CoordinatorConfig:
        c = self.coordinator
        b = beta if beta is not None else (c.beta if c.beta is not None else 0.5)
        return CoordinatorConfig(beta=b, tol=c.tol, max_iter=c.max_iter, delta=c.delta, m=c.m,
                                 warm_start=c.warm_start, seed=self.seed)

    def control_setup(self, plant: CoupledPlant, mode: str | None = None) -> ControlSetup:
        lw = self.local_weights(plant)
        cw = self.central_weights(plant, mode)
        r_d = self.targets(plant)
        local = tuple(LocalMpcConfig(Q, R, self.horizon) for Q, R in lw)
        central = tuple(CentralCostConfig(Qc, Rc, self.tail_q, r) for (Qc, Rc), r in zip(cw, r_d))
        return ControlSetup(local=local, central=central, coordinator=self.coordinator_config(),
                            beta=self.coordinator.beta, beta_grid=self.beta_grid())

    def beta_grid(self) -> list:
        return default_beta_grid(self.coordinator.beta_step)

    def load_scenario(self) -> ScenarioScript:
        if self.scenario is not None:
            scenario = self.scenario
        elif self.scenario_file is not None:
            scenario = ScenarioScript.load(self.scenario_file)
        else:
            scenario = ScenarioScript(duration=0)
        # every random draw of the run derives from the single config seed
        return scenario.model_copy(update={"seed": self.seed})


def _surrogate_sized(plant: CoupledPlant) -> bool:
    s1, s2 = plant.subsystems
    return (s1.n_x, s1.n_u, s1.n_y, s2.n_x, s2.n_u, s2.n_y) == (10, 2, 2, 14, 1, 1)


class ConfigError(ValueError):
    """Invalid configuration; the message names the file line of each problem."""

    def __init__(self, path, text: str, exc: ValidationError):
        lines = text.splitlines()
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            line = _locate(lines, err["loc"])
            where = f"{path}:{line}" if line else str(path)
            msgs.append(f"{where}: {loc or '<root>'}: {err['msg']}")
        self.messages = msgs
        super().__init__("\n".join(msgs))


def _locate(lines, loc) -> int | None:
    """First line mentioning the innermost string key of ``loc`` (1-based)."""
    keys = [p for p in loc if isinstance(p, str)]
    if not keys:
        return 1 if lines else None
    needle = json.dumps(keys[-1])
    for i, line in enumerate(lines, start=1):
        if needle in line:
            return i
    return None
