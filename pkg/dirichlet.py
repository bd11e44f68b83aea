"""
Leafwise Dirichlet form on a rectangle, its Laplacian and heat semigroup.

The form is a weighted block sum over leaves; there are no edges between leaves.
Everything is evaluated leaf by leaf in leaf order so that the assembled form
and the sum of independently assembled per-leaf forms agree bit for bit.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import linprog
from scipy.special import ndtr
from scipy.stats import poisson

from dynamics import HyperbolicSystem, forward_orbit
from errors import DomainError, NonConformalError, SRBError
from leafgeom import Rectangle, image_rectangle, project_to_leaves
from srb import DistortionConstants, SRBLeafDensity, srb_tables

logger = logging.getLogger(__name__)

NodeSet = Union[np.ndarray, Sequence[int]]


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def poisson_cutoff(rate: float, tol: float) -> int:
    """Smallest k with P(N > k) <= tol for N ~ Poisson(rate).

    Searched on the log tail, which stays finite where the inverse tail does not.
    """
    if rate < 0 or not 0 < tol < 1:
        raise ValueError(f"poisson_cutoff needs rate >= 0 and 0 < tol < 1, got {rate}, {tol}")
    log_tol = math.log(tol)
    hi = max(1, int(math.ceil(rate)))
    while poisson.logsf(hi, rate) > log_tol:
        hi *= 2
    tail = poisson.logsf(np.arange(hi + 1), rate)
    return int(np.argmax(tail <= log_tol))


@dataclass
class DiscreteMeasure:
    """Node masses m_{j,i} = w_j * rho_{j,i} * (trapezoid weight)."""
    masses: np.ndarray
    leaf_slices: List[slice]

    @property
    def total(self) -> float:
        return float(sum(np.sum(self.masses[sl]) for sl in self.leaf_slices))

    def integrate(self, u: np.ndarray) -> float:
        return float(sum(np.sum(self.masses[sl] * u[sl]) for sl in self.leaf_slices))

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.integrate(u * v)

    def mass_of(self, mask: np.ndarray) -> float:
        return self.integrate(np.asarray(mask, dtype=float))

    def variance(self, u: np.ndarray) -> float:
        total = self.total
        mean = self.integrate(u) / total
        return self.integrate((u - mean) ** 2) / total

    def leaf(self, j: int) -> "DiscreteMeasure":
        sl = self.leaf_slices[j]
        return DiscreteMeasure(masses=self.masses[sl].copy(),
                               leaf_slices=[slice(0, sl.stop - sl.start)])


@dataclass
class DiscreteForm:
    """E(u) = sum_leaves sum_edges c (u_{i+1} - u_i)^2 with within-leaf edges only."""
    conductances: List[np.ndarray]
    leaf_slices: List[slice]
    hs: List[float]
    arc: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.leaf_slices[-1].stop

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_slices)

    def _diffs(self, u: np.ndarray, j: int) -> np.ndarray:
        return np.diff(u[self.leaf_slices[j]])

    def bilinear(self, u: np.ndarray, v: np.ndarray) -> float:
        total = 0.0
        for j, c in enumerate(self.conductances):
            total += float(np.sum(c * self._diffs(u, j) * self._diffs(v, j)))
        return total

    def energy(self, u: np.ndarray) -> float:
        return self.bilinear(u, u)

    def energy_on(self, u: np.ndarray, node_mask: np.ndarray) -> float:
        """Energy of the edges whose two endpoints are both in `node_mask`."""
        total = 0.0
        for j, c in enumerate(self.conductances):
            sl = self.leaf_slices[j]
            inside = node_mask[sl]
            keep = inside[:-1] & inside[1:]
            total += float(np.sum((c * self._diffs(u, j) ** 2)[keep]))
        return total

    def apply(self, u: np.ndarray) -> np.ndarray:
        """A u, computed from edge fluxes so constants map to exactly zero."""
        out = np.zeros(self.n_nodes)
        for j, c in enumerate(self.conductances):
            sl = self.leaf_slices[j]
            flux = c * self._diffs(u, j)
            block = np.zeros(sl.stop - sl.start)
            block[:-1] -= flux
            block[1:] += flux
            out[sl] = block
        return out

    def diagonal(self) -> np.ndarray:
        out = np.zeros(self.n_nodes)
        for j, c in enumerate(self.conductances):
            sl = self.leaf_slices[j]
            block = np.zeros(sl.stop - sl.start)
            block[:-1] += c
            block[1:] += c
            out[sl] = block
        return out

    def matrix(self) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        diag = self.diagonal()
        for j, c in enumerate(self.conductances):
            start = self.leaf_slices[j].start
            left = start + np.arange(len(c))
            rows += [left, left + 1]
            cols += [left + 1, left]
            vals += [-c, -c]
        idx = np.arange(self.n_nodes)
        rows.append(idx)
        cols.append(idx)
        vals.append(diag)
        entries = (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols)))
        return sparse.csr_matrix(entries, shape=(self.n_nodes, self.n_nodes))

    def leaf_form(self, j: int) -> "DiscreteForm":
        sl = self.leaf_slices[j]
        return DiscreteForm(conductances=[self.conductances[j].copy()],
                            leaf_slices=[slice(0, sl.stop - sl.start)], hs=[self.hs[j]],
                            arc=self.arc[sl].copy())

    def interior(self, mask: np.ndarray) -> np.ndarray:
        """Nodes of `mask` whose graph neighbours all lie in `mask`."""
        mask = np.asarray(mask, dtype=bool)
        out = np.zeros_like(mask)
        for sl in self.leaf_slices:
            m = mask[sl]
            ok = m.copy()
            ok[1:] &= m[:-1]
            ok[:-1] &= m[1:]
            out[sl] = ok
        return out


def _assemble(hs: Sequence[float], densities: Sequence[np.ndarray], weights: np.ndarray,
              arcs: Optional[Sequence[np.ndarray]] = None) -> Tuple[DiscreteForm, DiscreteMeasure]:
    conductances, masses, slices, arc_parts = [], [], [], []
    start = 0
    for j, (h, rho) in enumerate(zip(hs, densities)):
        rho = np.asarray(rho, dtype=float)
        if rho.size < 2:
            raise ValueError("every leaf needs at least two nodes")
        if np.any(rho <= 0.0):
            raise SRBError("densities must be positive", leaf=j)
        w = float(weights[j])
        conductances.append(w * 0.5 * (rho[:-1] + rho[1:]) / h)
        masses.append(w * rho * trapezoid_weights(rho.size, h))
        slices.append(slice(start, start + rho.size))
        if arcs is None:
            half = (rho.size - 1) / 2.0
            arc_parts.append((np.arange(rho.size) - half) * h)
        else:
            arc_parts.append(np.asarray(arcs[j], dtype=float))
        start += rho.size
    form = DiscreteForm(conductances=conductances, leaf_slices=slices, hs=list(map(float, hs)),
                        arc=np.concatenate(arc_parts))
    return form, DiscreteMeasure(masses=np.concatenate(masses), leaf_slices=slices)


def assemble(
    rect: Rectangle, tables: Sequence[SRBLeafDensity]
) -> Tuple[DiscreteForm, DiscreteMeasure]:
    """Discrete form and measure of a rectangle with quotient weights and SRB tables."""
    if len(tables) != rect.n_leaves:
        raise SRBError("SRB tables do not cover every leaf", leaves=rect.n_leaves,
                       tables=len(tables))
    if rect.quotient_weights is None:
        raise SRBError("rectangle has no quotient weights")
    form, measure = _assemble([leaf.h for leaf in rect.leaves],
                              [t.normalized for t in tables], rect.quotient_weights,
                              [leaf.arc for leaf in rect.leaves])
    logger.debug(f"Assembled form on {form.n_nodes} nodes, total mass {measure.total:.15f}")
    return form, measure


def assemble_leaves(
    h: Union[float, Sequence[float]],
    densities: Sequence[np.ndarray],
    weights: Optional[Sequence[float]] = None,
) -> Tuple[DiscreteForm, DiscreteMeasure]:
    """Form and measure for explicit leaves; each density is trapezoid-normalized."""
    hs = [float(h)] * len(densities) if np.isscalar(h) else [float(x) for x in h]
    if weights is None:
        weights = np.full(len(densities), 1.0 / len(densities))
    weights = np.asarray(weights, dtype=float)
    normalized = []
    for hj, rho in zip(hs, densities):
        rho = np.asarray(rho, dtype=float)
        normalized.append(rho / np.sum(rho * trapezoid_weights(rho.size, hj)))
    return _assemble(hs, normalized, weights)


# -- Laplacian -------------------------------------------------------------------------------

@dataclass
class Laplacian:
    """L = -M^{-1} A, the Markov generator of the form."""
    form: DiscreteForm
    measure: DiscreteMeasure

    def apply(self, u: np.ndarray) -> np.ndarray:
        return -self.form.apply(u) / self.measure.masses

    def __matmul__(self, u: np.ndarray) -> np.ndarray:
        return self.apply(u)

    def matrix(self) -> sparse.csr_matrix:
        """Sparse generator; each diagonal entry is minus its row's off-diagonal sum."""
        A = self.form.matrix().tocoo()
        off = A.row != A.col
        rows, cols = A.row[off], A.col[off]
        vals = -A.data[off] / self.measure.masses[rows]
        diag = np.zeros(self.form.n_nodes)
        np.add.at(diag, rows, -vals)
        idx = np.arange(self.form.n_nodes)
        return sparse.csr_matrix((np.concatenate([vals, diag]),
                                  (np.concatenate([rows, idx]), np.concatenate([cols, idx]))),
                                 shape=(self.form.n_nodes, self.form.n_nodes))


def laplacian(form: DiscreteForm, measure: DiscreteMeasure) -> Laplacian:
    if np.any(measure.masses <= 0.0):
        raise SRBError("singular mass matrix")
    return Laplacian(form=form, measure=measure)


# -- heat semigroup ---------------------------------------------------------------------------

@dataclass
class _Block:
    indices: np.ndarray
    masses: np.ndarray
    theta: np.ndarray
    vectors: np.ndarray

    @property
    def sqrt_m(self) -> np.ndarray:
        return np.sqrt(self.masses)


def _solve_block(indices: np.ndarray, diag: np.ndarray, offdiag: np.ndarray,
                 masses: np.ndarray, conservative: bool) -> _Block:
    d = 1.0 / np.sqrt(masses)
    if indices.size == 1:
        theta = np.array([diag[0] / masses[0]])
        vectors = np.ones((1, 1))
    else:
        theta, vectors = eigh_tridiagonal(diag * d * d, offdiag * d[:-1] * d[1:])
    if conservative:
        # the kernel of a Neumann block is exactly the constants: v0 = M^{1/2} 1
        v0 = np.sqrt(masses)
        v0 = v0 / np.linalg.norm(v0)
        k0 = int(np.argmin(theta))
        vectors = vectors - np.outer(v0, v0 @ vectors)
        vectors[:, k0] = v0
        others = np.arange(theta.size) != k0
        vectors[:, others] /= np.linalg.norm(vectors[:, others], axis=0)
        theta = theta.copy()
        theta[k0] = 0.0
    theta = np.maximum(theta, 0.0)
    return _Block(indices=indices, masses=masses, theta=theta, vectors=vectors)


class HeatOperator:
    """Spectral representation of P_t, one symmetric tridiagonal eigenproblem per block."""

    def __init__(self, blocks: List[_Block], n_nodes: int,
                 generator: Optional[sparse.csr_matrix] = None):
        self.blocks = blocks
        self.n_nodes = n_nodes
        self.generator = generator

    @classmethod
    def from_form(cls, form: DiscreteForm, measure: DiscreteMeasure) -> "HeatOperator":
        blocks = []
        diag = form.diagonal()
        for sl, c in zip(form.leaf_slices, form.conductances):
            idx = np.arange(sl.start, sl.stop)
            blocks.append(_solve_block(idx, diag[sl], -c, measure.masses[sl], conservative=True))
        logger.debug(f"Heat operator with {len(blocks)} blocks on {form.n_nodes} nodes")
        return cls(blocks, form.n_nodes, generator=laplacian(form, measure).matrix())

    def spectrum(self) -> List[np.ndarray]:
        return [b.theta for b in self.blocks]

    def eigenfunctions(self, j: int) -> np.ndarray:
        """M-orthonormal eigenfunctions psi_k of block j (columns)."""
        b = self.blocks[j]
        return b.vectors / b.sqrt_m[:, None]

    def _coefficients(self, b: _Block, u: np.ndarray) -> np.ndarray:
        return b.vectors.T @ (b.sqrt_m.reshape((-1,) + (1,) * (u.ndim - 1)) * u[b.indices])

    def _synthesize(self, b: _Block, coeffs: np.ndarray) -> np.ndarray:
        return (b.vectors @ coeffs) / b.sqrt_m.reshape((-1,) + (1,) * (coeffs.ndim - 1))

    def _spectral_map(
        self, u: np.ndarray, multiplier: Callable[[np.ndarray], np.ndarray]
    ) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros((self.n_nodes,) + u.shape[1:])
        for b in self.blocks:
            c = self._coefficients(b, u)
            mult = multiplier(b.theta).reshape((-1,) + (1,) * (u.ndim - 1))
            out[b.indices] = self._synthesize(b, mult * c)
        return out

    def heat(self, t: float, u: np.ndarray) -> np.ndarray:
        """P_t u = sum_k exp(-theta_k t) <u, psi_k>_M psi_k."""
        if t < 0:
            raise ValueError(f"heat semigroup needs t >= 0, got {t}")
        u = np.asarray(u, dtype=float)
        if t == 0:
            return u.copy()
        return self._spectral_map(u, lambda th: np.exp(-th * t))

    def uniformized_heat(self, t: float, u: np.ndarray, tol: float = 1e-17) -> np.ndarray:
        """P_t u as a Poisson mixture of powers of the jump chain I + L/q.

        Every term is nonnegative for nonnegative u, so entries far below the
        round-off level of the spectral sum keep full relative accuracy.
        """
        if t < 0:
            raise ValueError(f"heat semigroup needs t >= 0, got {t}")
        if self.generator is None:
            raise ValueError("uniformization needs the generator of the form")
        u = np.asarray(u, dtype=float)
        q = float(np.max(-self.generator.diagonal()))
        if t == 0 or q == 0.0:
            return u.copy()
        K = sparse.identity(self.n_nodes, format="csr") + self.generator / q
        rate = q * t
        k_max = poisson_cutoff(rate, tol)
        weights = poisson.pmf(np.arange(k_max + 1), rate)
        v = u.copy()
        out = weights[0] * v
        for k in range(1, k_max + 1):
            v = K @ v
            out += weights[k] * v
        logger.debug(f"Uniformized heat at t={t:.3e}: rate {rate:.1f}, {k_max} jumps")
        return out

    def transition_matrix(self, t: float) -> np.ndarray:
        """Dense P_t; entry (i, j) is the probability of moving from i to j."""
        if t < 0:
            raise ValueError(f"heat semigroup needs t >= 0, got {t}")
        P = np.zeros((self.n_nodes, self.n_nodes))
        for b in self.blocks:
            left = b.vectors / b.sqrt_m[:, None]
            right = b.vectors * b.sqrt_m[:, None]
            P[np.ix_(b.indices, b.indices)] = (left * np.exp(-b.theta * t)) @ right.T
        return P

    def transition_row(self, x0: int, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"heat semigroup needs t >= 0, got {t}")
        row = np.zeros(self.n_nodes)
        for b in self.blocks:
            pos = np.nonzero(b.indices == x0)[0]
            if pos.size:
                k = pos[0]
                left = b.vectors[k] / b.sqrt_m[k]
                row[b.indices] = (b.vectors * b.sqrt_m[:, None]) @ (np.exp(-b.theta * t) * left)
        return row

    def occupation(self, T: float, u: np.ndarray) -> np.ndarray:
        """int_0^T P_t u dt."""
        def integral(th):
            small = th * T < 1e-12
            return np.where(small, T, -np.expm1(-th * T) / np.where(small, 1.0, th))
        return self._spectral_map(u, integral)

    def form_quotient(self, u: np.ndarray, t: float) -> float:
        """t^{-1} <u - P_t u, u>_M, evaluated spectrally."""
        total = 0.0
        for b in self.blocks:
            c = self._coefficients(b, np.asarray(u, dtype=float))
            total += float(np.sum(-np.expm1(-b.theta * t) / t * c**2))
        return total

    def variational_energy(self, u: np.ndarray, rtol: float = 1e-15) -> float:
        """sup_{t>0} t^{-1} <u - P_t u, u>_M via the monotone limit t -> 0."""
        theta_max = max(float(np.max(b.theta)) for b in self.blocks)
        t = 1.0 / max(theta_max, 1.0)
        value = self.form_quotient(u, t)
        for _ in range(80):
            t *= 0.1
            nxt = self.form_quotient(u, t)
            if abs(nxt - value) <= rtol * max(abs(nxt), 1e-300):
                return nxt
            value = nxt
        return value


def heat_operator(form: DiscreteForm, measure: DiscreteMeasure) -> HeatOperator:
    return HeatOperator.from_form(form, measure)


def heat(hop: HeatOperator, t: float, u: np.ndarray) -> np.ndarray:
    return hop.heat(t, u)


# -- leafwise calculus ------------------------------------------------------------------------

Layout = Union[Rectangle, DiscreteForm]


def _leaf_grid(layout: Layout) -> Tuple[List[slice], np.ndarray, List[float]]:
    if isinstance(layout, Rectangle):
        return layout.leaf_slices, layout.arc, [leaf.h for leaf in layout.leaves]
    return layout.leaf_slices, layout.arc, layout.hs


def _as_mask(n_nodes: int, nodes: NodeSet) -> np.ndarray:
    nodes = np.asarray(nodes)
    if nodes.dtype == bool:
        if nodes.shape != (n_nodes,):
            raise ValueError("node mask has the wrong length")
        return nodes.copy()
    mask = np.zeros(n_nodes, dtype=bool)
    mask[nodes.astype(int)] = True
    return mask


def leafwise_gradient(phi: np.ndarray, layout: Layout) -> np.ndarray:
    """Derivative along each leaf: central differences inside, second-order one-sided at ends."""
    slices, _arc, hs = _leaf_grid(layout)
    phi = np.asarray(phi, dtype=float)
    out = np.empty_like(phi)
    for sl, h in zip(slices, hs):
        if sl.stop - sl.start < 3:
            raise ValueError("leafwise gradient needs at least three nodes per leaf")
        out[sl] = np.gradient(phi[sl], h, edge_order=2)
    return out


def carre_du_champ(phi: np.ndarray, layout: Layout, psi: Optional[np.ndarray] = None) -> np.ndarray:
    """Nodewise Gamma(phi, psi) = D^u phi * D^u psi."""
    g = leafwise_gradient(phi, layout)
    return g * g if psi is None else g * leafwise_gradient(psi, layout)


def intrinsic_distance(layout: Layout, A: NodeSet, B: NodeSet) -> float:
    """Smallest within-leaf arc gap between A and B; +inf when no leaf meets both."""
    slices, arc, _hs = _leaf_grid(layout)
    n = slices[-1].stop
    A, B = _as_mask(n, A), _as_mask(n, B)
    if not A.any() or not B.any():
        raise ValueError("intrinsic distance needs non-empty node sets")
    best = math.inf
    for sl in slices:
        a, b = arc[sl][A[sl]], arc[sl][B[sl]]
        if a.size == 0 or b.size == 0:
            continue
        b = np.sort(b)
        pos = np.clip(np.searchsorted(b, a), 1, b.size - 1) if b.size > 1 else np.zeros(a.size, int)
        gap = np.abs(a - b[pos])
        if b.size > 1:
            gap = np.minimum(gap, np.abs(a - b[pos - 1]))
        best = min(best, float(np.min(gap)))
    return best


def intrinsic_distance_lp(layout: Layout, A: NodeSet, B: NodeSet) -> float:
    """sup { min_B u - max_A u : u 1-Lipschitz along leaves } as a linear program."""
    slices, arc, _hs = _leaf_grid(layout)
    n = slices[-1].stop
    A, B = _as_mask(n, A), _as_mask(n, B)
    if not A.any() or not B.any():
        raise ValueError("intrinsic distance needs non-empty node sets")
    # variables: u_0..u_{n-1}, z; maximize z
    rows, rhs = [], []
    for sl in slices:
        for i in range(sl.start, sl.stop - 1):
            gap = arc[i + 1] - arc[i]
            for sign in (1.0, -1.0):
                row = np.zeros(n + 1)
                row[i + 1], row[i] = sign, -sign
                rows.append(row)
                rhs.append(gap)
    for i in np.nonzero(A)[0]:
        row = np.zeros(n + 1)
        row[i] = 1.0
        rows.append(row)
        rhs.append(0.0)
    for i in np.nonzero(B)[0]:
        row = np.zeros(n + 1)
        row[n], row[i] = 1.0, -1.0
        rows.append(row)
        rhs.append(0.0)
    cost = np.zeros(n + 1)
    cost[n] = -1.0
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(None, None)] * (n + 1), method="highs")
    if res.status == 3:
        return math.inf
    if not res.success:
        raise DomainError(f"distance LP failed: {res.message}")
    return float(-res.fun)


# -- small-time asymptotics -------------------------------------------------------------------

def heat_flux(hop: HeatOperator, measure: DiscreteMeasure, A: NodeSet, B: NodeSet,
              t: float, method: str = "spectral") -> float:
    """int_A P_t 1_B dmu."""
    A = _as_mask(hop.n_nodes, A)
    B = _as_mask(hop.n_nodes, B)
    if method == "spectral":
        moved = hop.heat(t, B.astype(float))
    elif method == "uniformized":
        moved = hop.uniformized_heat(t, B.astype(float))
    else:
        raise ValueError(f"unknown heat flux method {method!r}")
    return measure.integrate(A * moved)


@dataclass
class VaradhanResult:
    t: np.ndarray
    integral: np.ndarray
    value: np.ndarray
    gaffney_ratio: np.ndarray
    distance: float
    form_scale: float
    expected_limit: float
    extrapolated_limit: float
    coefficients: np.ndarray

    @property
    def gaffney_ok(self) -> bool:
        return bool(np.all(self.gaffney_ratio <= 1.0 + 1e-6))

    def rows(self) -> List[Dict[str, float]]:
        return [{"t": float(t), "integral": float(i), "t_log_integral": float(v),
                 "gaffney_ratio": float(g), "expected_limit": self.expected_limit}
                for t, i, v, g in zip(self.t, self.integral, self.value, self.gaffney_ratio)]


def varadhan_times(distance: float, form_scale: float = 1.0,
                   exponents: Sequence[float] = (24.0, 32.0, 40.0, 48.0, 64.0, 80.0)) -> np.ndarray:
    """Times t with d^2 / (4 * form_scale * t) running through `exponents`."""
    return np.array([distance**2 / (4.0 * form_scale * e) for e in exponents])


def varadhan_check(hop: HeatOperator, measure: DiscreteMeasure, A: NodeSet, B: NodeSet,
                   t_list: Optional[Sequence[float]], layout: Layout,
                   form_scale: float = 1.0) -> VaradhanResult:
    """t log int_A P_{scale t} 1_B dmu against -d(A,B)^2 / (4 scale), with the Gaffney bound."""
    A = _as_mask(hop.n_nodes, A)
    B = _as_mask(hop.n_nodes, B)
    d = intrinsic_distance(layout, A, B)
    if not math.isfinite(d):
        raise DomainError("A and B share no leaf; the heat flux between them vanishes")
    t = varadhan_times(d, form_scale) if t_list is None else np.asarray(t_list, dtype=float)
    if np.any(t <= 0):
        raise ValueError("Varadhan times must be positive")
    integral = np.array([heat_flux(hop, measure, A, B, form_scale * tk, method="uniformized")
                         for tk in t])
    if np.any(integral <= 0.0):
        raise DomainError("heat flux underflowed; use larger times", t=t[integral <= 0.0])
    value = t * np.log(integral)
    mass = math.sqrt(measure.mass_of(A) * measure.mass_of(B))
    gaffney = integral / (mass * np.exp(-d**2 / (4.0 * form_scale * t)))
    coefficients = np.full(3, math.nan)
    limit = math.nan
    if t.size >= 3:
        basis = np.column_stack([np.ones_like(t), t * np.log(t), t])
        coefficients = np.linalg.lstsq(basis, value, rcond=None)[0]
        limit = float(coefficients[0])
    expected = -d**2 / (4.0 * form_scale)
    logger.info(f"Varadhan: d={d:.6f}, expected {expected:.6f}, extrapolated {limit:.6f}, "
                f"max Gaffney ratio {np.max(gaffney):.4f}")
    return VaradhanResult(t=t, integral=integral, value=value, gaffney_ratio=gaffney, distance=d,
                          form_scale=form_scale, expected_limit=expected,
                          extrapolated_limit=limit, coefficients=coefficients)


def _gaussian_antiderivative2(z: np.ndarray, sigma: float) -> np.ndarray:
    """F with F'' = Gaussian density of variance sigma^2."""
    u = z / sigma
    return z * ndtr(u) + sigma * np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


def neumann_interval_flux(a: float, b: float, A: Tuple[float, float], B: Tuple[float, float],
                          t: float, images: int = 4) -> float:
    """int_A int_B p_t(x, y) dy dx for the Neumann heat kernel of d^2/ds^2 on [a, b]."""
    sigma = math.sqrt(2.0 * t)
    ell = b - a
    (x1, x2), (y1, y2) = A, B

    def box(lo, hi, c):
        F = lambda z: _gaussian_antiderivative2(np.asarray(z, dtype=float), sigma)
        return float(F(x2 - lo + c) - F(x1 - lo + c) - F(x2 - hi + c) + F(x1 - hi + c))

    total = 0.0
    for k in range(-images, images + 1):
        total += box(y1, y2, -2.0 * k * ell)
        total += box(-y2, -y1, -2.0 * a - 2.0 * k * ell)
    return total


def dirichlet_interval_kernel(n_interior: int, h: float, t: float) -> np.ndarray:
    """Exact P_t of the Dirichlet graph Laplacian with unit masses on n interior nodes."""
    k = np.arange(1, n_interior + 1)
    theta = (4.0 / h**2) * np.sin(k * math.pi / (2.0 * (n_interior + 1))) ** 2
    S = math.sqrt(2.0 / (n_interior + 1)) * np.sin(np.outer(k, k) * math.pi / (n_interior + 1))
    return (S * np.exp(-theta * t)) @ S.T


# -- pullback and quasi-invariance ------------------------------------------------------------

@dataclass
class PullbackMap:
    """Where f^n sends each node of a source rectangle on a target rectangle."""
    target: Rectangle
    leaf: np.ndarray
    arc: np.ndarray
    node: np.ndarray
    aligned: bool

    def apply(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape[0] != self.target.n_nodes:
            raise ValueError("node function does not live on the target rectangle")
        if self.aligned:
            return phi[self.node]
        out = np.empty(self.leaf.size)
        for j, sl in enumerate(self.target.leaf_slices):
            sel = self.leaf == j
            if sel.any():
                out[sel] = np.interp(self.arc[sel], self.target.leaves[j].arc, phi[sl])
        return out

    @property
    def bijective(self) -> bool:
        return self.aligned and np.unique(self.node).size == self.target.n_nodes == self.node.size


def pullback_map(sys: HyperbolicSystem, rect: Rectangle, target: Rectangle, n: int,
                 tol: float = 1e-7) -> PullbackMap:
    if n < 0:
        raise ValueError("pullback needs n >= 0")
    images = forward_orbit(sys, rect.nodes, n)[-1]
    proj = project_to_leaves(sys, target, images)
    eps = np.array([target.leaves[j].eps for j in proj.leaf])
    h = np.array([target.leaves[j].h for j in proj.leaf])
    uncovered = (proj.distance > tol) | (np.abs(proj.arc) > eps + 1e-9 * h)
    if np.any(uncovered):
        i = int(np.argmax(uncovered))
        raise DomainError("f^n of a node falls outside the target rectangle", node=i,
                          distance=float(proj.distance[i]), arc=float(proj.arc[i]))
    aligned = bool(np.all(np.abs(proj.arc - target.arc[proj.node]) <= 1e-6 * h))
    return PullbackMap(target=target, leaf=proj.leaf, arc=proj.arc, node=proj.node,
                       aligned=aligned)


def pullback(sys: HyperbolicSystem, rect: Rectangle, phi: Union[Callable, np.ndarray], n: int,
             target: Optional[Rectangle] = None) -> np.ndarray:
    """(phi o f^n) on the nodes of `rect`.

    An ambient callable is evaluated exactly at f^n of the nodes; a node function on
    `target` is read off by leaf projection and linear interpolation along the leaf.
    """
    if n < 0:
        raise ValueError("pullback needs n >= 0")
    if callable(phi):
        return np.asarray(phi(forward_orbit(sys, rect.nodes, n)[-1]), dtype=float)
    target = rect if target is None else target
    if n == 0 and target is rect:
        return np.asarray(phi, dtype=float).copy()
    return pullback_map(sys, rect, target, n).apply(phi)


@dataclass
class QuasiInvarianceReport:
    n: int
    pulled_energy: float
    image_energy: float
    weighted_integral: float
    ratio: float
    expected_ratio: Optional[float]
    lower_bound: float
    upper_bound: float
    a_lo: float
    a_hi: float
    aligned: bool
    semigroup_defect: Optional[float] = None
    spectral_defect: Optional[float] = None
    carre_defect: Optional[float] = None

    @property
    def weighted_defect(self) -> float:
        gap = abs(self.pulled_energy - self.weighted_integral)
        return gap / max(abs(self.pulled_energy), 1e-300)

    @property
    def sandwich_ok(self) -> bool:
        slack = 1e-3 * self.pulled_energy
        return self.lower_bound - slack <= self.pulled_energy <= self.upper_bound + slack

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n, "pulled_energy": self.pulled_energy, "image_energy": self.image_energy,
            "weighted_integral": self.weighted_integral, "ratio": self.ratio,
            "expected_ratio": self.expected_ratio, "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound, "a_lo": self.a_lo, "a_hi": self.a_hi,
            "aligned": self.aligned, "weighted_defect": self.weighted_defect,
            "sandwich_ok": self.sandwich_ok, "semigroup_defect": self.semigroup_defect,
            "spectral_defect": self.spectral_defect, "carre_defect": self.carre_defect,
        }


def _range_weights(image: Rectangle, tables: Sequence[SRBLeafDensity],
                   pmap: PullbackMap) -> Tuple[np.ndarray, np.ndarray]:
    """Image nodes covered by f^n of the source leaves, and leaf weights renormalized to them."""
    in_range = np.zeros(image.n_nodes, dtype=bool)
    weights = np.array(image.quotient_weights, dtype=float)
    for j, sl in enumerate(image.leaf_slices):
        sel = pmap.leaf == j
        if not sel.any():
            weights[j] = 0.0
            continue
        leaf = image.leaves[j]
        tol = 1e-6 * leaf.h
        inside = (leaf.arc >= pmap.arc[sel].min() - tol) & (leaf.arc <= pmap.arc[sel].max() + tol)
        in_range[sl] = inside
        rho = tables[j].normalized[inside]
        mass = float(np.sum(rho * trapezoid_weights(rho.size, leaf.h))) if rho.size > 1 else 0.0
        if mass <= 0.0:
            raise DomainError("image leaf range too short to carry mass", leaf=j)
        weights[j] = weights[j] / mass
    return in_range, weights


def quasi_invariance_report(sys: HyperbolicSystem, rect: Rectangle, phi: Callable, n: int,
                            dc: DistortionConstants, order: Optional[int] = None,
                            t_list: Sequence[float] = (1e-4, 1e-3, 1e-2)) -> QuasiInvarianceReport:
    """Compare E(phi o f^n) on `rect` with the energy of phi on the image rectangle."""
    if sys.conformal_factor is None:
        raise NonConformalError(f"{sys.kind} has no conformal leaf expansion")
    if n < 0:
        raise ValueError("quasi-invariance needs n >= 0")
    if rect.quotient_weights is None:
        raise SRBError("rectangle has no quotient weights")
    form_R, meas_R = assemble(rect, srb_tables(sys, rect, order, dc))
    u = pullback(sys, rect, phi, n)
    pulled = form_R.energy(u)

    image, a_lo, a_hi = image_rectangle(sys, rect, n)
    tables_T = srb_tables(sys, image, order, dc)
    pmap = pullback_map(sys, rect, image, n)
    in_range, weights = _range_weights(image, tables_T, pmap)
    form_T, meas_T = assemble(image.with_weights(weights), tables_T)
    v = np.asarray(phi(image.nodes), dtype=float)
    image_energy = form_T.energy_on(v, in_range)

    log_prod = np.concatenate([2.0 * np.sum(leaf.log_jacobians[:, :n], axis=1)
                               for leaf in image.leaves])
    prod = np.exp(log_prod)
    gamma_T = carre_du_champ(v, form_T)
    weighted = meas_T.integrate(np.where(in_range, gamma_T * prod, 0.0))
    ratio = pulled / image_energy if image_energy > 0 else math.nan
    const = sys.conformal_constant
    expected = None if const is None else float(const) ** (2 * n)
    lower = a_lo ** (2 * n) * image_energy
    upper = a_hi ** (2 * n) * image_energy

    report = QuasiInvarianceReport(n=n, pulled_energy=pulled, image_energy=image_energy,
                                   weighted_integral=weighted, ratio=ratio,
                                   expected_ratio=expected, lower_bound=lower, upper_bound=upper,
                                   a_lo=a_lo, a_hi=a_hi, aligned=pmap.aligned)
    if pmap.aligned:
        gamma_R = carre_du_champ(u, form_R)
        interior = np.ones(rect.n_nodes, dtype=bool)
        for sl in rect.leaf_slices:
            interior[sl.start] = interior[sl.stop - 1] = False
        diff = gamma_R - (prod * gamma_T)[pmap.node]
        report.carre_defect = float(np.max(np.abs(diff[interior])) /
                                    max(float(np.max(np.abs(gamma_R))), 1e-300))
    if pmap.bijective and expected is not None:
        hop_R = HeatOperator.from_form(form_R, meas_R)
        hop_T = HeatOperator.from_form(form_T, meas_T)
        scale = max(float(np.max(np.abs(v))), 1e-300)
        gaps = [
            hop_R.heat(t, v[pmap.node]) - hop_T.heat(expected * t, v)[pmap.node] for t in t_list
        ]
        report.semigroup_defect = max(float(np.max(np.abs(g))) for g in gaps) / scale
        th_R = np.sort(np.concatenate(hop_R.spectrum()))
        th_T = np.sort(np.concatenate(hop_T.spectrum())) * expected
        report.spectral_defect = float(np.max(np.abs(th_R - th_T)) / np.max(th_R))
    logger.info(f"Quasi-invariance n={n}: ratio {ratio:.6f}"
                + (f" (expected {expected:.6f})" if expected is not None else "")
                + f", bounds [{lower:.6g}, {upper:.6g}]")
    return report


# -- harmonicity, invariant sets and domains --------------------------------------------------

def _residual_scale(form: DiscreteForm, phi: np.ndarray) -> float:
    return max(float(np.max(form.diagonal())) * float(np.max(np.abs(phi))), 1e-300)


def harmonicity(form: DiscreteForm, phi: np.ndarray, O: NodeSet, tol: float = 1e-10) -> str:
    """Classify phi on the interior of O as harmonic, superharmonic, subharmonic or neither."""
    mask = _as_mask(form.n_nodes, O)
    interior = form.interior(mask)
    if not interior.any():
        raise DomainError("O has no interior nodes")
    residual = form.apply(np.asarray(phi, dtype=float))[interior]
    bound = tol * _residual_scale(form, phi)
    sup = bool(np.all(residual >= -bound))
    sub = bool(np.all(residual <= bound))
    if sup and sub:
        return "harmonic"
    if sup:
        return "superharmonic"
    if sub:
        return "subharmonic"
    return "neither"


def superharmonic_test(form: DiscreteForm, phi: np.ndarray, O: NodeSet, tol: float = 1e-10) -> bool:
    """(A phi)_i >= 0 at every node of O whose neighbours all lie in O."""
    return harmonicity(form, phi, O, tol) in ("harmonic", "superharmonic")


def zero_energy_indicator(layout: Layout, leaf_subset: Sequence[int]) -> np.ndarray:
    """Indicator of a union of whole leaves; its energy is exactly zero."""
    slices, _arc, _hs = _leaf_grid(layout)
    subset = sorted(set(int(j) for j in leaf_subset))
    if not subset:
        raise DomainError("leaf subset is empty")
    if subset[0] < 0 or subset[-1] >= len(slices):
        raise DomainError("leaf index out of range", leaves=subset, n_leaves=len(slices))
    u = np.zeros(slices[-1].stop)
    for j in subset:
        u[slices[j]] = 1.0
    return u


def _restricted_blocks(form: DiscreteForm, measure: DiscreteMeasure, mask: np.ndarray,
                       offset: int = 0) -> List[_Block]:
    """Eigenblocks of the principal submatrix on each maximal run of `mask` within a leaf."""
    blocks = []
    diag = form.diagonal()
    for sl, c in zip(form.leaf_slices, form.conductances):
        local = np.nonzero(mask[sl])[0]
        if local.size == 0:
            continue
        breaks = np.nonzero(np.diff(local) != 1)[0] + 1
        for run in np.split(local, breaks):
            idx = sl.start + run
            whole = run.size == sl.stop - sl.start
            blocks.append(_solve_block(idx + offset, diag[idx], -c[run[:-1]], measure.masses[idx],
                                       conservative=whole))
    return blocks


@dataclass
class DomainRestriction:
    """Killed semigroup on O, globally and as the direct sum of per-leaf restrictions."""
    mask: np.ndarray
    interior: np.ndarray
    heat_operator: HeatOperator
    leafwise_operator: HeatOperator

    def heat(self, t: float, u: np.ndarray) -> np.ndarray:
        return self.heat_operator.heat(t, np.where(self.mask, u, 0.0))

    def leafwise_heat(self, t: float, u: np.ndarray) -> np.ndarray:
        return self.leafwise_operator.heat(t, np.where(self.mask, u, 0.0))

    def transition_matrix(self, t: float) -> np.ndarray:
        return self.heat_operator.transition_matrix(t)


def dirichlet_domain(form: DiscreteForm, measure: DiscreteMeasure, O: NodeSet) -> DomainRestriction:
    mask = _as_mask(form.n_nodes, O)
    interior = form.interior(mask)
    if not interior.any():
        raise DomainError("O has no interior nodes")
    global_op = HeatOperator(_restricted_blocks(form, measure, mask), form.n_nodes)
    leaf_blocks: List[_Block] = []
    for j, sl in enumerate(form.leaf_slices):
        leaf_blocks += _restricted_blocks(form.leaf_form(j), measure.leaf(j), mask[sl],
                                          offset=sl.start)
    logger.debug(
        f"Dirichlet restriction to {int(mask.sum())} nodes in {len(global_op.blocks)} runs"
    )
    return DomainRestriction(mask=mask, interior=interior, heat_operator=global_op,
                             leafwise_operator=HeatOperator(leaf_blocks, form.n_nodes))
