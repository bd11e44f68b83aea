"""
Configuration schema and soft parameter checks.
"""

import logging

import pytest
from pydantic import ValidationError

from models import DASystem, ExperimentConfig, SolenoidSystem, ToralSystem
from parameter_validator import ConfigReporter, ParameterValidator


def test_defaults():
    config = ExperimentConfig()
    assert isinstance(config.system, ToralSystem)
    assert config.system.matrix == [[2, 1], [1, 1]]
    assert config.rectangle.n_leaves == 32
    assert config.srb.n_samples == 1_000_000
    assert config.srb.multi_chain is False
    assert config.srb_seed == config.seed == 0
    assert ExperimentConfig(seed=3, srb={"seed": 11}).srb_seed == 11


def test_system_kind_selects_the_model():
    assert isinstance(ExperimentConfig(system={"kind": "solenoid"}).system, SolenoidSystem)
    da = ExperimentConfig(system={"kind": "da-map", "r0": 0.1}).system
    assert isinstance(da, DASystem) and da.r0 == 0.1
    with pytest.raises(ValidationError):
        ExperimentConfig(system={"kind": "henon"})


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig(rectangle={"leaves": 4})
    with pytest.raises(ValidationError):
        ExperimentConfig(colour="blue")


@pytest.mark.parametrize("matrix", [[[1, 1], [0, 1]], [[2, 0], [0, 1]], [[0, 1], [-1, 0]],
                                    [[1, 2, 3], [4, 5, 6]]])
def test_non_hyperbolic_matrices_are_rejected(matrix):
    with pytest.raises(ValidationError):
        ToralSystem(matrix=matrix)


def test_solenoid_must_trap():
    with pytest.raises(ValidationError):
        SolenoidSystem(r=0.4, alpha=0.45)
    with pytest.raises(ValidationError):
        SolenoidSystem(major_radius=1.1)
    assert SolenoidSystem(r=0.5, alpha=0.3, beta=0.3).r == 0.5


def test_grid_must_resolve_the_leaf():
    with pytest.raises(ValidationError):
        ExperimentConfig(rectangle={"eps": 0.25, "h": 0.25 / 8})
    assert ExperimentConfig(rectangle={"eps": 0.25, "h": 0.25 / 16}).rectangle.h == 0.015625
    # eps falls back to the system default
    with pytest.raises(ValidationError):
        ExperimentConfig(rectangle={"h": 0.05})
    with pytest.raises(ValidationError):
        ExperimentConfig(system={"kind": "da-map"}, rectangle={"h": 0.15 / 8})


def test_varadhan_intervals_are_ordered():
    with pytest.raises(ValidationError):
        ExperimentConfig(varadhan={"A": [0.5, -0.5]})
    with pytest.raises(ValidationError):
        ExperimentConfig(heat={"times": [-1.0]})


def test_descriptor_ignores_experiment_parameters():
    a = ExperimentConfig(walk={"n_paths": 5000}, experiment="walk")
    b = ExperimentConfig(heat={"times": [0.5]}, experiment="heat")
    c = ExperimentConfig(rectangle={"n_leaves": 8})
    assert a.descriptor() == b.descriptor()
    assert a.descriptor() != c.descriptor()
    assert a.descriptor()["srb"]["seed"] == 0


def test_soft_checks_log_and_report(caplog):
    config = ExperimentConfig(srb={"n_samples": 100, "n": 2},
                              rectangle={"eps": 0.25, "h": 0.25 / 20})
    with caplog.at_level(logging.WARNING):
        failed = ParameterValidator.check(config)
    assert failed == ["srb.n_samples", "rectangle.h", "srb.n"]
    assert "outside recommended range" in caplog.text
    assert ParameterValidator.check(ExperimentConfig()) == []


def test_report_flags_non_conformal_quasi_invariance():
    config = ExperimentConfig(system={"kind": "da-map"}, experiment="quasi-invariance")
    report = ConfigReporter.generate_report(config)
    assert "system da-map" in report["supported"]
    assert any("conformal" in w for w in report["warnings"])
    assert any("srb.n" in s for s in report["suggestions"])
