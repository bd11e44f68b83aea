"""
SRB conditional densities on unstable leaves, quotient weights and empirical
disintegration over a rectangle.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from dynamics import (
    HyperbolicSystem,
    attractor_sample,
    backward_orbit,
    unstable_jacobian,
)
from errors import RectangleError, SRBError
from leafgeom import LeafSegment, Rectangle, image_rectangle, locate, slide_along_leaf

logger = logging.getLogger(__name__)

TAIL_TARGET = 1e-6


@dataclass
class DistortionConstants:
    """Constants of the bounded-distortion estimate for the unstable Jacobian."""
    L: float
    alpha: float
    C: float
    lam: float
    diam: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"Hoelder exponent alpha={self.alpha} must lie in (0, 1]")
        if self.L < 0.0:
            raise ValueError("Hoelder constant L must be nonnegative")

    @property
    def _geometric(self) -> float:
        return 1.0 - self.lam**self.alpha

    @property
    def K0(self) -> float:
        a = self.alpha
        return math.exp(self.L * self.C**a * self.lam**a * self.diam**a / self._geometric)

    def tail(self, n: int) -> float:
        """Certified bound on |rho - rho_n| after truncation at order n."""
        a = self.alpha
        return (self.L * self.C**a * self.lam ** (n * a) * self.diam**a * self.K0
                / self._geometric)

    def log_ratio_bound(self, d: np.ndarray) -> np.ndarray:
        """Bound on |log rho_n(x, y) - log rho_n(x, z)| for d(y, z) = d."""
        a = self.alpha
        return self.L * self.C**a * self.lam**a * np.asarray(d) ** a / self._geometric

    def density_holder_bound(self, d: np.ndarray) -> np.ndarray:
        """C' K0 d^alpha bound on |rho_n(x, y) - rho_n(x, z)|."""
        b = self.log_ratio_bound(d)
        return self.K0 * b * np.exp(b)

    def adaptive_order(self, n_max: int, target: float = TAIL_TARGET) -> int:
        n = 1
        while self.tail(n) >= target and n < n_max:
            n += 1
        if self.tail(n) >= target:
            logger.warning(f"Truncation order capped at n={n_max}; tail bound {self.tail(n):.3e}")
        return n

    def to_dict(self) -> Dict[str, float]:
        return {"L": self.L, "alpha": self.alpha, "C": self.C, "lam": self.lam,
                "diam": self.diam, "K0": self.K0}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "DistortionConstants":
        return cls(L=data["L"], alpha=data["alpha"], C=data["C"], lam=data["lam"],
                   diam=data["diam"])


@dataclass
class SRBLeafDensity:
    order: int
    raw: np.ndarray
    normalized: np.ndarray
    error_bound: float
    distortion: DistortionConstants

    def to_dict(self) -> Dict[str, Any]:
        return {"order": self.order, "raw": self.raw.tolist(),
                "normalized": self.normalized.tolist(), "error_bound": self.error_bound,
                "distortion": self.distortion.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SRBLeafDensity":
        return cls(order=int(data["order"]), raw=np.asarray(data["raw"], dtype=float),
                   normalized=np.asarray(data["normalized"], dtype=float),
                   error_bound=float(data["error_bound"]),
                   distortion=DistortionConstants.from_dict(data["distortion"]))


# -- Hoelder fit ---------------------------------------------------------------

def fit_holder(distances: np.ndarray, deltas: np.ndarray,
               safety: float = 1.5) -> Tuple[float, float]:
    """Fit |delta| <= L d^alpha by least squares on log-log data, L inflated by `safety`."""
    d = np.asarray(distances, dtype=float)
    delta = np.abs(np.asarray(deltas, dtype=float))
    keep = (d > 0.0) & (delta > 0.0) & np.isfinite(delta)
    scale = max(float(np.max(delta)) if delta.size else 0.0, 0.0)
    if np.count_nonzero(keep) < 2 or scale <= 1e-13:
        logger.info("Degenerate Hoelder fit (constant Jacobian); using L=0, alpha=1")
        return 0.0, 1.0
    slope, _ = np.polyfit(np.log(d[keep]), np.log(delta[keep]), 1)
    alpha = float(np.clip(slope, 0.05, 1.0))
    L = safety * float(np.max(delta[keep] / d[keep] ** alpha))
    return L, alpha


def sample_holder_pairs(sys: HyperbolicSystem, n_pairs: int, seed: int,
                        burn_in: int = 1000) -> np.ndarray:
    """Pairs (y, z) of attractor points on a common unstable leaf, shape (n, 2, d)."""
    rng = np.random.default_rng(seed)
    y = attractor_sample(sys, n_pairs, seed=int(rng.integers(2**31)), burn_in=burn_in)
    arcs = rng.uniform(0.05 * sys.eps, sys.eps, n_pairs) * rng.choice([-1.0, 1.0], n_pairs)
    z = slide_along_leaf(sys, y, arcs)
    return np.stack([y, z], axis=1)


def estimate_holder(sys: HyperbolicSystem, samples: np.ndarray) -> Tuple[float, float]:
    """Hoelder constants (L, alpha) of log J^u from pairs of nearby attractor points."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 1000:
        logger.warning(f"Hoelder fit from only {samples.shape[0]} pairs; 1000 or more recommended")
    y, z = samples[:, 0], samples[:, 1]
    deltas = np.log(unstable_jacobian(sys, y)) - np.log(unstable_jacobian(sys, z))
    return fit_holder(sys.distance(y, z), deltas)


def distortion_constants(sys: HyperbolicSystem, L: float, alpha: float,
                         eps: Optional[float] = None) -> DistortionConstants:
    eps = sys.eps if eps is None else eps
    return DistortionConstants(L=L, alpha=alpha, C=sys.C, lam=sys.lam, diam=2.0 * eps)


# -- densities -------------------------------------------------------------------

def log_density(leaf: LeafSegment, n: int) -> np.ndarray:
    """log rho_n(base, y_i) = sum_{j<=n} log J^u(f^{-j} base) - log J^u(f^{-j} y_i)."""
    diffs = leaf.log_jacobians[leaf.base_index, :n][None, :] - leaf.log_jacobians[:, :n]
    return np.sum(diffs, axis=1)


def srb_density(sys: HyperbolicSystem, leaf: LeafSegment, n: Optional[int],
                dc: DistortionConstants) -> SRBLeafDensity:
    """Truncated product density on a leaf, trapezoid-normalized in arc length."""
    if n is None:
        n = dc.adaptive_order(leaf.n_back)
    if n < 0:
        raise ValueError("srb_density needs n >= 0")
    if n > leaf.n_back:
        raise SRBError("truncation order exceeds the traced leaf history",
                       order=n, history=leaf.n_back)
    if leaf.backward_distance.size and np.max(leaf.backward_distance) >= leaf.eps * (1 + 1e-9):
        raise SRBError("backward orbit left the local leaf; trace with a finer grid or smaller eps",
                       worst=float(np.max(leaf.backward_distance)), eps=leaf.eps)
    raw = np.exp(log_density(leaf, n))
    if not np.all(np.isfinite(raw)):
        raise SRBError("non-finite density values", order=n)
    normalized = raw / trapezoid(raw, leaf.arc)
    return SRBLeafDensity(order=n, raw=raw, normalized=normalized,
                          error_bound=dc.tail(n), distortion=dc)


def srb_tables(sys: HyperbolicSystem, rect: Rectangle, n: Optional[int],
               dc: DistortionConstants) -> List[SRBLeafDensity]:
    tables = [srb_density(sys, leaf, n, dc) for leaf in rect.leaves]
    logger.info(f"SRB densities on {len(tables)} leaves, order n={tables[0].order}, "
                f"tail bound {tables[0].error_bound:.3e}")
    return tables


def cauchy_differences(leaf: LeafSegment, orders: Sequence[int]) -> np.ndarray:
    """sup_i |rho_{n+1}(y_i) - rho_n(y_i)| for each n in `orders`."""
    return np.array([
        np.max(np.abs(np.exp(log_density(leaf, n + 1)) - np.exp(log_density(leaf, n))))
        for n in orders
    ])


def geometric_rate(values: np.ndarray, orders: Sequence[int]) -> float:
    """Per-step rate of the monotone envelope of `values`, fitted in log space."""
    values = np.asarray(values, dtype=float)
    envelope = np.maximum.accumulate(values[::-1])[::-1]
    slope, _ = np.polyfit(np.asarray(orders, dtype=float), np.log(envelope), 1)
    return float(np.exp(slope))


def direct_density_product(sys: HyperbolicSystem, leaf: LeafSegment, indices: Sequence[int],
                           n: int) -> np.ndarray:
    """rho_n recomputed from true backward orbits and power-iteration Jacobians."""
    points = np.vstack([leaf.base[None, :], leaf.nodes[list(indices)]])
    orbit = backward_orbit(sys, points, n)
    logj = np.log(unstable_jacobian(sys, orbit[1:]))
    return np.exp(np.sum(logj[:, :1] - logj[:, 1:], axis=0))


# -- quotient weights -----------------------------------------------------------------

@dataclass
class QuotientEstimate:
    weights: np.ndarray
    counts: np.ndarray
    hits: int
    n_samples: int
    seed: int
    burn_in: int
    n_chains: int
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def standard_error(self) -> np.ndarray:
        return np.sqrt(self.weights * (1.0 - self.weights) / max(self.hits, 1))

    def provenance(self) -> Dict[str, Any]:
        return {"hits": self.hits, "n_samples": self.n_samples, "seed": self.seed,
                "burn_in": self.burn_in, "n_chains": self.n_chains}


def estimate_quotient_weights(sys: HyperbolicSystem, rect: Rectangle, n_iter: int,
                              n_samples: int, seed: int = 0, burn_in: int = 1000,
                              keep_samples: bool = False,
                              multi_chain: bool = False) -> QuotientEstimate:
    """Quotient weights from forward-orbit averages binned by stable projection.

    By default one orbit from a uniform initial point records `n_samples` consecutive
    iterates after `burn_in` steps. With `multi_chain`, ceil(n_samples / n_iter) orbit
    segments of length n_iter run side by side instead.
    """
    if n_iter < 1 or n_samples < 1:
        raise ValueError("n_iter and n_samples must be positive")
    n_chains = int(math.ceil(n_samples / n_iter)) if multi_chain else 1
    n_steps = n_iter if multi_chain else n_samples
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    x = sys.sample_initial(rng, n_chains)
    for _ in range(burn_in):
        x = sys.apply(x)
    counts = np.zeros(rect.n_leaves, dtype=np.int64)
    kept: List[np.ndarray] = []
    batch: List[np.ndarray] = []
    recorded = 0

    def flush():
        pts = np.concatenate(batch)
        batch.clear()
        loc = locate(sys, rect, pts)
        np.add.at(counts, loc.leaf[loc.inside], 1)
        if keep_samples:
            kept.append(pts[loc.inside])

    pending = 0
    for _ in range(n_steps):
        x = sys.apply(x)
        take = min(n_chains, n_samples - recorded)
        if take <= 0:
            break
        batch.append(x[:take])
        recorded += take
        pending += take
        if pending >= 100_000:
            flush()
            pending = 0
    if batch:
        flush()
    hits = int(counts.sum())
    if hits == 0:
        raise RectangleError("rectangle never hit by the sampled orbit",
                             n_samples=n_samples, seed=seed)
    logger.info(f"Quotient weights from {hits} hits out of {recorded} samples ({n_chains} chains)")
    return QuotientEstimate(weights=counts / hits, counts=counts, hits=hits,
                            n_samples=recorded, seed=seed, burn_in=burn_in, n_chains=n_chains,
                            samples=np.concatenate(kept) if keep_samples and kept else None)


@dataclass
class Disintegration:
    weights: np.ndarray
    counts: np.ndarray
    bin_edges: np.ndarray

    @property
    def conditionals(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    def mass(self, mask: np.ndarray) -> float:
        """Empirical mass of a union of (leaf, arc-bin) cells."""
        return float(self.counts[mask].sum() / self.counts.sum())

    def reconstructed_mass(self, mask: np.ndarray) -> float:
        """sum_j w_j * conditional_j(cells of leaf j in mask)."""
        return float(np.sum(self.weights * np.sum(self.conditionals * mask, axis=1)))


def disintegrate(sys: HyperbolicSystem, samples: np.ndarray, rect: Rectangle,
                 n_arc_bins: int = 16) -> Disintegration:
    """Bin samples by leaf (stable projection) and arc coordinate within the leaf."""
    loc = locate(sys, rect, samples)
    if not np.all(loc.inside):
        bad = int(np.nonzero(~loc.inside)[0][0])
        raise RectangleError("sample outside rectangle", index=bad)
    edges = np.linspace(-rect.eps, rect.eps, n_arc_bins + 1)
    arc_bin = np.clip(np.searchsorted(edges, loc.arc, side="right") - 1, 0, n_arc_bins - 1)
    counts = np.zeros((rect.n_leaves, n_arc_bins), dtype=np.int64)
    np.add.at(counts, (loc.leaf, arc_bin), 1)
    weights = counts.sum(axis=1) / counts.sum()
    return Disintegration(weights=weights, counts=counts, bin_edges=edges)


def invariance_defect(sys: HyperbolicSystem, rect: Rectangle, estimate: QuotientEstimate) -> float:
    """Largest |w'_j - w_j| / standard error after pushing the samples forward by f."""
    if estimate.samples is None:
        raise SRBError("invariance check needs the recorded samples (keep_samples=True)")
    image, _lo, _hi = image_rectangle(sys, rect, 1)
    pushed = sys.apply(estimate.samples)
    loc = locate(sys, image, pushed)
    counts = np.bincount(loc.leaf[loc.inside], minlength=rect.n_leaves)
    pushed_weights = counts / max(counts.sum(), 1)
    se = np.maximum(estimate.standard_error, 1.0 / max(estimate.hits, 1))
    return float(np.max(np.abs(pushed_weights - estimate.weights) / se))
