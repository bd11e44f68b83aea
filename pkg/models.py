"""
Configuration schema for leafheat experiments.

A config file names one hyperbolic system, the rectangle to build on it, how the
SRB tables are estimated, and per-experiment parameters. Unknown keys are rejected.
"""

import logging
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

LIBRARY_VERSION = "1.0.0"

EXPERIMENTS = (
    "srb-estimate",
    "spectrum",
    "heat",
    "quasi-invariance",
    "varadhan",
    "walk",
    "domains",
    "zero-energy",
)

ExperimentName = Literal[
    "srb-estimate", "spectrum", "heat", "quasi-invariance", "varadhan", "walk", "domains",
    "zero-energy",
]


def check_hyperbolic_matrix(v: List[List[int]]) -> List[List[int]]:
    if len(v) != 2 or any(len(row) != 2 for row in v):
        raise ValueError("matrix must be 2x2")
    det = v[0][0] * v[1][1] - v[0][1] * v[1][0]
    if abs(det) != 1:
        raise ValueError(f"matrix must be unimodular, determinant is {det}")
    trace = v[0][0] + v[1][1]
    if (det == 1 and abs(trace) <= 2) or (det == -1 and trace == 0):
        raise ValueError("matrix has an eigenvalue on the unit circle")
    return v


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ToralSystem(StrictModel):
    kind: Literal["toral-automorphism"] = "toral-automorphism"
    matrix: List[List[int]] = Field(default=[[2, 1], [1, 1]],
                                    description="Integer 2x2 matrix with determinant +-1")
    delta: float = Field(default=0.2, gt=0, le=0.5, description="Local product scale")
    eps: float = Field(default=0.25, gt=0, le=0.5, description="Local leaf half-length")

    @field_validator("matrix")
    @classmethod
    def validate_matrix(cls, v):
        return check_hyperbolic_matrix(v)


class SolenoidSystem(StrictModel):
    kind: Literal["solenoid"] = "solenoid"
    r: float = Field(default=0.4, gt=0, lt=1, description="Radius of the wound circle")
    alpha: float = Field(default=0.2, gt=0, lt=0.5, description="Contraction in x")
    beta: float = Field(default=0.3, gt=0, lt=0.5, description="Contraction in y")
    major_radius: float = Field(default=4.0, gt=1, le=100, description="Torus major radius R0")
    delta: float = Field(default=0.3, gt=0, le=1)
    eps: float = Field(default=0.3, gt=0, le=1)

    @model_validator(mode="after")
    def check_trapping(self):
        bound = min(self.r, 1.0 - self.r)
        if max(self.alpha, self.beta) >= bound:
            raise ValueError(f"alpha and beta must be < min(r, 1 - r) = {bound}")
        if self.major_radius <= 2.0 * self.r / (1.0 - max(self.alpha, self.beta)):
            raise ValueError("major_radius must exceed twice the trapping radius")
        return self


class DASystem(StrictModel):
    kind: Literal["da-map"] = "da-map"
    matrix: List[List[int]] = Field(default=[[2, 1], [1, 1]])
    r0: float = Field(default=0.2, gt=0, le=0.25, description="Radius of the surgery disk")
    tau: Optional[float] = Field(default=None, gt=0, description="Flow time at the fixed point")
    n_steps: int = Field(default=16, ge=2, le=1024, description="RK4 steps of the stable flow")
    delta: float = Field(default=0.15, gt=0, le=0.5)
    eps: float = Field(default=0.15, gt=0, le=0.5)

    @field_validator("matrix")
    @classmethod
    def validate_matrix(cls, v):
        return check_hyperbolic_matrix(v)


SystemConfig = Annotated[Union[ToralSystem, SolenoidSystem, DASystem], Field(discriminator="kind")]


class RectangleConfig(StrictModel):
    base: Optional[List[float]] = Field(
        default=None, description="Base point; picked from the attractor if absent"
    )
    n_leaves: int = Field(
        default=32, ge=1, le=4096, description="Number of transversal leaves J"
    )
    stable_radius: float = Field(default=0.1, gt=0, le=1)
    eps: Optional[float] = Field(default=None, gt=0, le=1, description="Leaf half-length")
    h: Optional[float] = Field(default=None, gt=0, description="Arc-length grid spacing")
    n_back: Optional[int] = Field(default=None, ge=1, le=200, description="Backward history depth")
    mode: Literal["uniform", "orbit"] = "uniform"
    orbit_length: int = Field(default=200_000, ge=1000)

    @model_validator(mode="after")
    def check_grid(self):
        if self.h is not None and self.eps is not None and self.h > self.eps / 16:
            raise ValueError(f"h={self.h} must be <= eps/16 (eps={self.eps})")
        return self


class SRBConfig(StrictModel):
    n: Optional[int] = Field(default=None, ge=0, le=200,
                             description="Truncation order; adaptive when absent")
    n_samples: int = Field(default=1_000_000, ge=1, le=10**9)
    n_iter: int = Field(default=10_000, ge=1,
                        description="Orbit length per chain when multi_chain is set")
    multi_chain: bool = Field(default=False,
                              description="Side-by-side chains instead of one long orbit")
    burn_in: int = Field(default=1000, ge=0)
    holder_pairs: int = Field(default=2000, ge=10, le=10**6)
    seed: Optional[int] = Field(default=None, ge=0)


class SpectrumParams(StrictModel):
    max_per_leaf: Optional[int] = Field(default=None, ge=1, description="Eigenvalues kept per leaf")


class HeatParams(StrictModel):
    times: List[float] = Field(default=[0.001, 0.01, 0.1, 1.0])
    observable: Literal["sin", "indicator", "arc"] = "sin"

    @field_validator("times")
    @classmethod
    def validate_times(cls, v):
        if not v or any(t < 0 for t in v):
            raise ValueError("times must be a non-empty list of non-negative numbers")
        return v


class QuasiInvarianceParams(StrictModel):
    n: int = Field(default=1, ge=0, le=20, description="Number of forward iterates")
    observable: Literal["sin", "cos"] = "sin"
    times: List[float] = Field(default=[1e-4, 1e-3, 1e-2])


class VaradhanParams(StrictModel):
    A: List[float] = Field(default=[-1.0, -0.4],
                          description="Arc interval of A on the base leaf, in units of eps")
    B: List[float] = Field(default=[0.4, 1.0],
                          description="Arc interval of B on the base leaf, in units of eps")
    times: Optional[List[float]] = None
    form_scale: float = Field(default=0.5, gt=0)

    @field_validator("A", "B")
    @classmethod
    def validate_interval(cls, v):
        if len(v) != 2 or v[0] > v[1]:
            raise ValueError("intervals are [lo, hi] with lo <= hi")
        return v


class WalkParams(StrictModel):
    n_paths: int = Field(default=10_000, ge=1000, le=10**7,
                         description="At least 1000 for an empirical law")
    times: List[float] = Field(default=[0.05, 0.5])
    start: Optional[int] = Field(default=None, ge=0, description="Start node; base node if absent")
    block: int = Field(default=1000, ge=1)


class DomainParams(StrictModel):
    leaves: Optional[List[int]] = Field(default=None, description="Leaves meeting O; all if absent")
    arc_interval: List[float] = Field(
        default=[-0.5, 0.5], description="Arc interval in units of eps"
    )
    times: List[float] = Field(default=[0.001, 0.01])


class ZeroEnergyParams(StrictModel):
    leaves: List[int] = Field(default=[0])
    times: List[float] = Field(default=[0.01, 0.1, 1.0])


class OutputConfig(StrictModel):
    path: Optional[str] = Field(default=None, description="CSV path; stdout when absent")


class ExperimentConfig(StrictModel):
    system: SystemConfig = Field(default_factory=ToralSystem)
    rectangle: RectangleConfig = Field(default_factory=RectangleConfig)
    srb: SRBConfig = Field(default_factory=SRBConfig)
    experiment: Optional[ExperimentName] = None
    seed: int = Field(default=0, ge=0)
    threads: Optional[int] = Field(default=None, ge=1, le=1024)
    cache_dir: Optional[str] = None
    output: OutputConfig = Field(default_factory=OutputConfig)

    spectrum: SpectrumParams = Field(default_factory=SpectrumParams)
    heat: HeatParams = Field(default_factory=HeatParams)
    quasi_invariance: QuasiInvarianceParams = Field(default_factory=QuasiInvarianceParams)
    varadhan: VaradhanParams = Field(default_factory=VaradhanParams)
    walk: WalkParams = Field(default_factory=WalkParams)
    domains: DomainParams = Field(default_factory=DomainParams)
    zero_energy: ZeroEnergyParams = Field(default_factory=ZeroEnergyParams)

    @model_validator(mode="after")
    def check_effective_grid(self):
        eps = self.rectangle.eps if self.rectangle.eps is not None else self.system.eps
        h = self.rectangle.h
        if h is not None and h > eps / 16:
            raise ValueError(f"rectangle.h={h} must be <= eps/16 (effective eps={eps})")
        return self

    @property
    def srb_seed(self) -> int:
        return self.seed if self.srb.seed is None else self.srb.seed

    def descriptor(self) -> Dict[str, Any]:
        """Canonical description of what determines the SRB tables."""
        return {
            "system": self.system.model_dump(),
            "rectangle": self.rectangle.model_dump(),
            "srb": {**self.srb.model_dump(), "seed": self.srb_seed},
        }

