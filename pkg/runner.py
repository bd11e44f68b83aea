"""
Experiment runner: builds the SRB stage once (through the table cache) and runs
one experiment per subcommand, each producing a table plus diagnostics.
"""

import logging
import math
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cache_manager import CachedTable, SRBTableCache, content_key
from dirichlet import (
    DiscreteForm,
    DiscreteMeasure,
    HeatOperator,
    assemble,
    dirichlet_domain,
    laplacian,
    quasi_invariance_report,
    varadhan_check,
    zero_energy_indicator,
)
from dynamics import HyperbolicSystem, attractor_sample, system_from_descriptor
from errors import ConfigError, NonConformalError
from leafgeom import build_rectangle
from models import LIBRARY_VERSION, ExperimentConfig
from parameter_validator import ConfigReporter
from srb import (
    distortion_constants,
    estimate_holder,
    estimate_quotient_weights,
    sample_holder_pairs,
    srb_tables,
)
from stochastic import (
    compare_to_heat,
    detailed_balance_defect,
    empirical_law,
    leaf_confined,
    sample_positions,
    tv_band,
)
from table_writer import TableWriter

logger = logging.getLogger(__name__)

Table = Tuple[List[str], List[List[Any]], Dict[str, Any]]


def observable(sys: HyperbolicSystem, name: str) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth ambient test function on the phase space of `sys`."""
    if sys.phase_dim == 2:
        if name == "sin":
            return lambda p: np.sin(2 * np.pi * p[..., 0]) * np.cos(2 * np.pi * p[..., 1])
        return lambda p: np.cos(2 * np.pi * (p[..., 0] - p[..., 1]))
    if name == "sin":
        return lambda p: np.sin(p[..., 2]) + 0.5 * p[..., 0]
    return lambda p: np.cos(2 * p[..., 2]) + 0.5 * p[..., 1]


class ExperimentRunner:
    """Runs the experiments of one validated configuration."""

    def __init__(self, config: ExperimentConfig, cache: Optional[SRBTableCache] = None):
        self.config = config
        self.cache = cache or SRBTableCache(config.cache_dir)
        self.report = ConfigReporter.generate_report(config)
        self.threads = config.threads or 1
        try:
            self.system = system_from_descriptor(config.system.model_dump())
        except ValueError as e:
            raise ConfigError(f"invalid system: {e}", system=config.system.kind) from e
        self._stage: Optional[CachedTable] = None
        self._form: Optional[Tuple[DiscreteForm, DiscreteMeasure]] = None
        self._heat: Optional[HeatOperator] = None

    # -- SRB stage -----------------------------------------------------------------------

    def _base_point(self) -> np.ndarray:
        base = self.config.rectangle.base
        if base is not None:
            if len(base) != self.system.phase_dim:
                raise ConfigError("rectangle.base has the wrong dimension",
                                  expected=self.system.phase_dim, got=len(base))
            return np.asarray(base, dtype=float)
        return attractor_sample(self.system, 1, seed=self.config.srb_seed)[0]

    def _compute_stage(self, key: str) -> CachedTable:
        cfg, sys, seed = self.config, self.system, self.config.srb_seed
        rect = build_rectangle(sys, self._base_point(), cfg.rectangle.n_leaves,
                               cfg.rectangle.stable_radius, eps=cfg.rectangle.eps,
                               h=cfg.rectangle.h, n_back=cfg.rectangle.n_back,
                               mode=cfg.rectangle.mode, seed=seed,
                               orbit_length=cfg.rectangle.orbit_length)
        L, alpha = estimate_holder(sys, sample_holder_pairs(sys, cfg.srb.holder_pairs, seed))
        dc = distortion_constants(sys, L, alpha, rect.eps)
        estimate = estimate_quotient_weights(sys, rect, cfg.srb.n_iter, cfg.srb.n_samples,
                                             seed=seed, burn_in=cfg.srb.burn_in,
                                             multi_chain=cfg.srb.multi_chain)
        rect = rect.with_weights(estimate.weights)
        tables = srb_tables(sys, rect, cfg.srb.n, dc)
        provenance = {**estimate.provenance(), "L": L, "alpha": alpha, "order": tables[0].order}
        return CachedTable(key=key, rectangle=rect, tables=tables, distortion=dc,
                           provenance=provenance)

    @property
    def stage(self) -> CachedTable:
        if self._stage is None:
            self._stage = self.cache.get_or_compute(self.config.descriptor(), self._compute_stage)
        return self._stage

    @property
    def form(self) -> Tuple[DiscreteForm, DiscreteMeasure]:
        if self._form is None:
            self._form = assemble(self.stage.rectangle, self.stage.tables)
        return self._form

    @property
    def heat_operator(self) -> HeatOperator:
        if self._heat is None:
            self._heat = HeatOperator.from_form(*self.form)
        return self._heat

    def _base_node(self) -> int:
        rect = self.stage.rectangle
        return rect.leaf_slices[rect.base_leaf].start + rect.leaves[rect.base_leaf].base_index

    def _arc_set(self, leaves: Sequence[int], interval: Sequence[float]) -> np.ndarray:
        """Nodes on `leaves` with arc in interval * eps."""
        rect = self.stage.rectangle
        mask = np.zeros(rect.n_nodes, dtype=bool)
        for j in leaves:
            if not 0 <= j < rect.n_leaves:
                raise ConfigError("leaf index out of range", leaf=j, n_leaves=rect.n_leaves)
            leaf, sl = rect.leaves[j], rect.leaf_slices[j]
            lo, hi = interval[0] * leaf.eps, interval[1] * leaf.eps
            tol = 1e-9 * leaf.h
            mask[sl] = (leaf.arc >= lo - tol) & (leaf.arc <= hi + tol)
        return mask

    # -- experiments ---------------------------------------------------------------------

    def srb_estimate(self) -> Table:
        stage = self.stage
        rect, hits = stage.rectangle, stage.provenance.get("hits", 0)
        rows = []
        for j, table in enumerate(stage.tables):
            w = float(rect.quotient_weights[j])
            se = math.sqrt(w * (1.0 - w) / hits) if hits else math.nan
            rows.append([j, w, se, table.order, table.error_bound,
                         float(np.min(table.normalized)), float(np.max(table.normalized))])
        diagnostics = {**stage.provenance, "K0": stage.distortion.K0,
                       "weight_sum": float(np.sum(rect.quotient_weights))}
        return (["leaf", "weight", "standard_error", "order", "tail_bound", "density_min",
                 "density_max"], rows, diagnostics)

    def spectrum(self) -> Table:
        keep = self.config.spectrum.max_per_leaf
        rows = []
        for j, theta in enumerate(self.heat_operator.spectrum()):
            theta = np.sort(theta)
            for k, value in enumerate(theta[:keep] if keep else theta):
                rows.append([j, k, float(value)])
        zero_modes = sum(1 for th in self.heat_operator.spectrum() if np.min(th) == 0.0)
        return ["leaf", "k", "theta"], rows, {"zero_modes": zero_modes}

    def heat(self) -> Table:
        form, measure = self.form
        rect = self.stage.rectangle
        eps = np.repeat([leaf.eps for leaf in rect.leaves], rect.leaf_sizes)
        s = rect.arc
        name = self.config.heat.observable
        u = {"sin": np.sin(np.pi * s / eps), "indicator": (s > 0).astype(float), "arc": s}[name]
        rows = []
        for t in self.config.heat.times:
            v = self.heat_operator.heat(t, u)
            rows.append([t, measure.integrate(v), math.sqrt(measure.inner(v, v)), form.energy(v),
                         float(np.max(np.abs(v)))])
        return (["t", "integral", "l2_norm", "energy", "sup"], rows,
                {"observable": name, "initial_integral": measure.integrate(u),
                 "initial_energy": form.energy(u)})

    def quasi_invariance(self) -> Table:
        params = self.config.quasi_invariance
        if self.system.conformal_factor is None:
            raise NonConformalError(f"{self.system.kind} has no conformal leaf expansion")
        phi = observable(self.system, params.observable)
        report = quasi_invariance_report(self.system, self.stage.rectangle, phi, params.n,
                                         self.stage.distortion, order=self.config.srb.n,
                                         t_list=params.times)
        data = report.to_dict()
        columns = list(data.keys())
        return columns, [[data[c] for c in columns]], {"observable": params.observable}

    def varadhan(self) -> Table:
        params = self.config.varadhan
        form, measure = self.form
        j0 = self.stage.rectangle.base_leaf
        A = self._arc_set([j0], params.A)
        B = self._arc_set([j0], params.B)
        result = varadhan_check(self.heat_operator, measure, A, B, params.times, form,
                                form_scale=params.form_scale)
        rows = [[r["t"], r["integral"], r["t_log_integral"], r["gaffney_ratio"]]
                for r in result.rows()]
        return (["t", "integral", "t_log_integral", "gaffney_ratio"], rows,
                {"distance": result.distance, "expected_limit": result.expected_limit,
                 "extrapolated_limit": result.extrapolated_limit,
                 "gaffney_ok": result.gaffney_ok, "form_scale": params.form_scale})

    def walk(self) -> Table:
        params = self.config.walk
        form, measure = self.form
        gen = laplacian(form, measure)
        x0 = self._base_node() if params.start is None else params.start
        if x0 >= form.n_nodes:
            raise ConfigError("walk.start is not a node of the rectangle", start=x0)
        positions = sample_positions(gen, x0, params.times, params.n_paths, self.config.seed,
                                     threads=self.threads, block=params.block)
        leaf_index = self.stage.rectangle.leaf_index
        rows = []
        for t, pos in zip(params.times, positions):
            law = empirical_law(pos, form.n_nodes)
            p = self.heat_operator.transition_row(x0, t)
            tv = compare_to_heat(self.heat_operator, x0, t, law)
            rows.append([t, tv, tv_band(p, pos.size), pos.size, leaf_confined(pos, leaf_index, x0)])
        return (["t", "total_variation", "tv_band", "n_paths", "leaf_confined"], rows,
                {"start": x0, "detailed_balance": detailed_balance_defect(gen, measure.masses)})

    def domains(self) -> Table:
        params = self.config.domains
        form, measure = self.form
        leaves = params.leaves if params.leaves is not None else range(form.n_leaves)
        O = self._arc_set(leaves, params.arc_interval)
        restriction = dirichlet_domain(form, measure, O)
        u = O.astype(float)
        rows = []
        for t in params.times:
            killed = restriction.heat(t, u)
            free = self.heat_operator.heat(t, u)
            split = restriction.leafwise_heat(t, u)
            rows.append([t, float(np.max(killed - free)), float(np.max(np.abs(killed - split))),
                         measure.integrate(killed), measure.integrate(free)])
        return (["t", "domination_excess", "leafwise_defect", "killed_mass", "free_mass"], rows,
                {"nodes": int(O.sum()), "interior": int(restriction.interior.sum()),
                 "runs": len(restriction.heat_operator.blocks)})

    def zero_energy(self) -> Table:
        params = self.config.zero_energy
        form, measure = self.form
        u = zero_energy_indicator(form, params.leaves)
        weight = measure.integrate(u) / measure.total
        rows = []
        for t in params.times:
            v = self.heat_operator.heat(t, u)
            rows.append([t, form.energy(v), float(np.max(np.abs(v - u)))])
        return (["t", "energy", "max_change"], rows,
                {"leaves": sorted(set(params.leaves)), "energy": form.energy(u),
                 "weight": weight, "variance": measure.variance(u),
                 "expected_variance": weight * (1.0 - weight)})

    EXPERIMENTS = {
        "srb-estimate": srb_estimate,
        "spectrum": spectrum,
        "heat": heat,
        "quasi-invariance": quasi_invariance,
        "varadhan": varadhan,
        "walk": walk,
        "domains": domains,
        "zero-energy": zero_energy,
    }

    # -- output --------------------------------------------------------------------------

    def metadata(self, experiment: str, diagnostics: Dict[str, Any]) -> Dict[str, Any]:
        cfg = self.config
        rect = self.stage.rectangle
        hashed = cfg.model_dump(exclude={"output", "cache_dir", "threads"})
        return {
            "library": "leafheat",
            "version": LIBRARY_VERSION,
            "experiment": experiment,
            "config_hash": content_key(hashed),
            "system_hash": content_key(cfg.system.model_dump()),
            "system": self.system.descriptor(),
            "grid": {"n_leaves": rect.n_leaves, "eps": rect.eps, "h": rect.h,
                     "nodes": rect.n_nodes},
            "seed": cfg.seed,
            "srb_seed": cfg.srb_seed,
            "diagnostics": diagnostics,
            "warnings": self.report["warnings"],
        }

    def run(self, experiment: Optional[str] = None, output: Optional[str] = None) -> str:
        experiment = experiment or self.config.experiment
        if experiment not in self.EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}", experiment=experiment)
        for message in self.report["warnings"]:
            logger.warning(message)
        logger.info(f"Running {experiment} on {self.system.kind}")
        columns, rows, diagnostics = self.EXPERIMENTS[experiment](self)
        path = output if output is not None else self.config.output.path
        return TableWriter.write(path, self.metadata(experiment, diagnostics), columns, rows)


def default_threads() -> Optional[int]:
    value = os.getenv("LEAFHEAT_THREADS")
    if value is None:
        return None
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning(f"Ignoring invalid LEAFHEAT_THREADS={value!r}")
        return None
