"""
Soft range checks for experiment configurations.

Hard limits live in the pydantic models; values here are accepted but logged when
they fall outside the range the estimates are known to behave well in.
"""

import logging
from typing import Any, Dict, List

from models import ExperimentConfig, SolenoidSystem

logger = logging.getLogger(__name__)


class ParameterValidator:
    """Recommended ranges for the numerical parameters of a run."""

    RECOMMENDED_SAMPLES = (10_000, 10_000_000)
    RECOMMENDED_LEAVES = (4, 256)
    RECOMMENDED_PATHS = (1000, 1_000_000)
    RECOMMENDED_ORDER = (5, 60)
    MAX_NODES = 200_000

    @classmethod
    def validate_samples(cls, n_samples: int) -> bool:
        lo, hi = cls.RECOMMENDED_SAMPLES
        if not lo <= n_samples <= hi:
            logger.warning(f"srb.n_samples={n_samples} is outside recommended range ({lo}-{hi})")
            return False
        return True

    @classmethod
    def validate_leaves(cls, n_leaves: int) -> bool:
        lo, hi = cls.RECOMMENDED_LEAVES
        if not lo <= n_leaves <= hi:
            logger.warning(
                f"rectangle.n_leaves={n_leaves} is outside recommended range ({lo}-{hi})"
            )
            return False
        return True

    @classmethod
    def validate_grid(cls, eps: float, h: float) -> bool:
        if h > eps / 32:
            logger.warning(f"rectangle.h={h} is coarser than eps/32 (eps={eps}); "
                           f"second-order errors will be visible")
            return False
        return True

    @classmethod
    def validate_order(cls, n: int) -> bool:
        lo, hi = cls.RECOMMENDED_ORDER
        if not lo <= n <= hi:
            logger.warning(f"srb.n={n} is outside recommended range ({lo}-{hi})")
            return False
        return True

    @classmethod
    def validate_paths(cls, n_paths: int) -> bool:
        lo, hi = cls.RECOMMENDED_PATHS
        if not lo <= n_paths <= hi:
            logger.warning(f"walk.n_paths={n_paths} is outside recommended range ({lo}-{hi})")
            return False
        return True

    @classmethod
    def validate_size(cls, n_leaves: int, eps: float, h: float) -> bool:
        nodes = n_leaves * (2 * int(eps / h) + 1)
        if nodes > cls.MAX_NODES:
            logger.warning(f"rectangle has about {nodes} nodes; dense transition matrices "
                           f"will not fit in memory")
            return False
        return True

    @classmethod
    def check(cls, config: ExperimentConfig) -> List[str]:
        """Run every soft check and return the names of the ones that failed."""
        eps = config.rectangle.eps or config.system.eps
        h = config.rectangle.h or eps / 64
        failed = []
        if not cls.validate_samples(config.srb.n_samples):
            failed.append("srb.n_samples")
        if not cls.validate_leaves(config.rectangle.n_leaves):
            failed.append("rectangle.n_leaves")
        if not cls.validate_grid(eps, h):
            failed.append("rectangle.h")
        if config.srb.n is not None and not cls.validate_order(config.srb.n):
            failed.append("srb.n")
        if config.experiment == "walk" and not cls.validate_paths(config.walk.n_paths):
            failed.append("walk.n_paths")
        if not cls.validate_size(config.rectangle.n_leaves, eps, h):
            failed.append("rectangle size")
        return failed


class ConfigReporter:
    """Summarizes what a configuration will do and what could be improved."""

    @classmethod
    def generate_report(cls, config: ExperimentConfig) -> Dict[str, Any]:
        report = {
            "supported": [],
            "warnings": [],
            "suggestions": [],
        }
        report["supported"].append(f"system {config.system.kind}")
        if config.experiment:
            report["supported"].append(f"experiment {config.experiment}")

        for name in ParameterValidator.check(config):
            report["warnings"].append(f"{name} outside recommended range")

        if config.rectangle.mode == "uniform" and isinstance(config.system, SolenoidSystem):
            report["warnings"].append("uniform transversals need a linear stable foliation")
            report["suggestions"].append("Use rectangle.mode: orbit for the solenoid.")
        if config.experiment == "quasi-invariance" and config.system.kind == "da-map":
            report["warnings"].append("quasi-invariance needs conformal leaf expansion")
            report["suggestions"].append("The DA map has no conformal factor; use the cat map "
                                         "or the solenoid.")
        if config.srb.n is None:
            report["suggestions"].append("srb.n is chosen adaptively from the distortion "
                                         "bound; set it to pin the truncation order.")
        if config.srb.n_samples < 100_000:
            report["suggestions"].append("Quotient weights carry about 1/sqrt(n_samples) "
                                         "relative noise; 10^6 samples give 3 digits.")
        return report
