"""
Continuous-time random walk generated by the leafwise Laplacian.

Holding times are exponential with the total off-diagonal rate of the current
node; jumps pick a neighbour proportionally to its rate. Every path (or block of
paths) draws from its own Philox stream spawned from the run seed, so results do
not depend on the thread count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from dirichlet import HeatOperator, Laplacian
from errors import InsufficientSamplesError

logger = logging.getLogger(__name__)

MIN_PATHS = 1000
DEFAULT_BLOCK = 1000

Generator = Union[Laplacian, sparse.spmatrix]


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for path (or block) `index` of a run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


@dataclass
class JumpTable:
    """Padded neighbour lists with cumulative jump probabilities."""
    neighbours: np.ndarray
    cumulative: np.ndarray
    rate: np.ndarray

    @classmethod
    def from_generator(cls, L: Generator) -> "JumpTable":
        mat = sparse.csr_matrix(L.matrix() if isinstance(L, Laplacian) else L)
        n = mat.shape[0]
        rows = [[] for _ in range(n)]
        rates = [[] for _ in range(n)]
        coo = mat.tocoo()
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if i != j and v != 0.0:
                if v < 0.0:
                    raise ValueError(f"negative jump rate {v} from node {i} to {j}")
                rows[i].append(j)
                rates[i].append(v)
        width = max(1, max(len(r) for r in rows))
        neighbours = np.tile(np.arange(n)[:, None], (1, width))
        weight = np.zeros((n, width))
        for i in range(n):
            k = len(rows[i])
            neighbours[i, :k] = rows[i]
            weight[i, :k] = rates[i]
        total = weight.sum(axis=1)
        safe = np.where(total > 0.0, total, 1.0)
        cumulative = np.cumsum(weight, axis=1) / safe[:, None]
        cumulative[:, -1] = 1.0
        return cls(neighbours=neighbours, cumulative=cumulative, rate=total)

    @property
    def n_nodes(self) -> int:
        return self.rate.size

    def jump(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        col = (u[:, None] >= self.cumulative[states]).sum(axis=1)
        col = np.minimum(col, self.neighbours.shape[1] - 1)
        return self.neighbours[states, col]


@dataclass
class WalkPath:
    times: np.ndarray
    states: np.ndarray
    horizon: float

    def position(self, t: float) -> int:
        if t < 0 or t > self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        return int(self.states[np.searchsorted(self.times, t, side="right") - 1])

    @property
    def n_jumps(self) -> int:
        return self.times.size - 1


def simulate(L: Generator, x0: int, T: float, seed: int, path_index: int = 0,
             table: Optional[JumpTable] = None) -> WalkPath:
    """One Gillespie path on [0, T] started at node x0."""
    if T < 0:
        raise ValueError("horizon must be non-negative")
    table = JumpTable.from_generator(L) if table is None else table
    if not 0 <= x0 < table.n_nodes:
        raise ValueError(f"start node {x0} out of range")
    rng = path_rng(seed, path_index)
    times, states = [0.0], [int(x0)]
    t, x = 0.0, int(x0)
    while True:
        rate = table.rate[x]
        if rate <= 0.0:
            break
        t += rng.exponential() / rate
        if t > T:
            break
        x = int(table.jump(np.array([x]), np.array([rng.random()]))[0])
        times.append(t)
        states.append(x)
    return WalkPath(times=np.array(times), states=np.array(states), horizon=float(T))


def _sample_block(table: JumpTable, x0: int, times: np.ndarray, n: int, rng: np.random.Generator):
    state = np.full(n, x0, dtype=int)
    clock = np.zeros(n)
    out = np.empty((times.size, n), dtype=int)
    for k, tau in enumerate(times):
        active = np.arange(n)
        while active.size:
            rate = table.rate[state[active]]
            with np.errstate(divide="ignore"):
                dt = rng.exponential(size=active.size) / rate
            arrive = clock[active] + dt
            jumps = arrive <= tau
            # overshooting paths wait until tau; the holding time restarts there
            clock[active[~jumps]] = tau
            active = active[jumps]
            if active.size:
                clock[active] = arrive[jumps]
                state[active] = table.jump(state[active], rng.random(active.size))
        out[k] = state
    return out


def sample_positions(L: Generator, x0: int, times: Sequence[float], n_paths: int, seed: int,
                     threads: int = 1, block: int = DEFAULT_BLOCK) -> np.ndarray:
    """Positions at the observation times, shape (len(times), n_paths)."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("observation times must be non-negative and increasing")
    table = JumpTable.from_generator(L)
    if not 0 <= x0 < table.n_nodes:
        raise ValueError(f"start node {x0} out of range")
    sizes = [min(block, n_paths - s) for s in range(0, n_paths, block)]

    def run(b):
        return _sample_block(table, x0, times, sizes[b], path_rng(seed, b))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(run, range(len(sizes))))
    logger.debug(f"Sampled {n_paths} walks in {len(sizes)} blocks on {threads} threads")
    return np.concatenate(parts, axis=1) if parts else np.empty((times.size, 0), dtype=int)


def empirical_law(samples: Union[np.ndarray, List[WalkPath]], n_nodes: int,
                  t: Optional[float] = None) -> np.ndarray:
    """Normalized histogram of walker positions over the nodes."""
    if len(samples) and isinstance(samples[0], WalkPath):
        if t is None:
            raise ValueError("an observation time is needed for walk paths")
        samples = np.array([p.position(t) for p in samples])
    samples = np.asarray(samples, dtype=int)
    if samples.size < MIN_PATHS:
        raise InsufficientSamplesError(f"need at least {MIN_PATHS} paths, got {samples.size}",
                                       n_paths=int(samples.size))
    return np.bincount(samples, minlength=n_nodes) / samples.size


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def compare_to_heat(hop: HeatOperator, x0: int, t: float, law: np.ndarray) -> float:
    """Total variation between the empirical law and the row P_t(x0, .)."""
    return total_variation(law, hop.transition_row(x0, t))


def tv_band(p: np.ndarray, n_paths: int, z: float = 3.0) -> float:
    """z-sigma band for the total variation of an n-sample empirical law of p."""
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    return 0.5 * z * float(np.sum(np.sqrt(p * (1.0 - p) / n_paths)))


def detailed_balance_defect(L: Generator, masses: np.ndarray) -> float:
    """max |m_i L_ij - m_j L_ji| relative to the largest flux."""
    mat = sparse.csr_matrix(L.matrix() if isinstance(L, Laplacian) else L)
    flux = sparse.diags(np.asarray(masses, dtype=float)) @ mat
    diff = abs(flux - flux.T)
    scale = abs(flux).max()
    return float(diff.max() / scale) if scale > 0 else 0.0


def leaf_confined(positions: np.ndarray, leaf_index: np.ndarray, x0: int) -> bool:
    """True when every observed position lies on the leaf of the start node."""
    return bool(np.all(leaf_index[np.asarray(positions)] == leaf_index[x0]))
