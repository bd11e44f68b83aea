"""
Local unstable leaves, rectangles with product structure, and the bracket.

Leaves are traced as images of short straight segments: offsets from a backward
pseudo-orbit of the base point are pushed forward with ``step_offset`` so the
base point is reproduced exactly and tiny segments keep full relative precision.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from dynamics import (
    HyperbolicSystem,
    ToralAutomorphism,
    backward_orbit,
    conformal_bounds,
    matvec,
    orient,
    unstable_direction,
)
from errors import BracketError, LeafTracingError, RectangleError

logger = logging.getLogger(__name__)

DEFAULT_CHECK_DEPTH = 12
SLIDE_DEPTH = 20
LOCATE_CHUNK = 100_000


@dataclass
class LeafSegment:
    """Arc-length gridded piece of W^u_eps(base).

    ``log_jacobians[i, k-1]`` is log J^u at f^{-k}(node i) along the leaf tangent,
    ``backward_distance[i, k-1]`` is d(f^{-k}(node i), f^{-k}(base)).
    """
    base: np.ndarray
    eps: float
    h: float
    nodes: np.ndarray
    tangents: np.ndarray
    arc: np.ndarray
    base_index: int
    log_jacobians: np.ndarray
    backward_distance: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_back(self) -> int:
        return int(self.log_jacobians.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base.tolist(),
            "eps": self.eps,
            "h": self.h,
            "nodes": self.nodes.tolist(),
            "tangents": self.tangents.tolist(),
            "arc": self.arc.tolist(),
            "base_index": self.base_index,
            "log_jacobians": self.log_jacobians.tolist(),
            "backward_distance": self.backward_distance.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LeafSegment":
        return cls(
            base=np.asarray(data["base"], dtype=float),
            eps=float(data["eps"]),
            h=float(data["h"]),
            nodes=np.asarray(data["nodes"], dtype=float),
            tangents=np.asarray(data["tangents"], dtype=float),
            arc=np.asarray(data["arc"], dtype=float),
            base_index=int(data["base_index"]),
            log_jacobians=np.asarray(data["log_jacobians"], dtype=float).reshape(
                len(data["nodes"]), -1),
            backward_distance=np.asarray(data["backward_distance"], dtype=float).reshape(
                len(data["nodes"]), -1),
        )


@dataclass
class PushResult:
    offsets: np.ndarray
    tangents: np.ndarray
    speed: np.ndarray
    log_jacobians: np.ndarray
    backward_distance: np.ndarray


def push_segment(sys: HyperbolicSystem, ys: np.ndarray, e: np.ndarray, t: np.ndarray,
                 n_check: int = 0) -> PushResult:
    """Push the offsets t * e at depth n = len(ys) - 1 forward to depth 0.

    ``ys`` has shape (n + 1, ..., d); ``t`` broadcasts against the middle axes.
    Tangents are renormalized each step and the log growth recorded per depth.
    """
    n = ys.shape[0] - 1
    t = np.asarray(t, dtype=float)
    z = t[..., None] * e
    w = np.broadcast_to(e, z.shape).copy()
    p = ys[n] + z
    norm_w = sys.norm(p, w)
    log_speed = np.log(norm_w)
    w = w / norm_w[..., None]
    logs = np.zeros(z.shape[:-1] + (n,))
    dists = np.zeros(z.shape[:-1] + (min(n_check, n),))
    for k in range(n, 0, -1):
        if k <= n_check:
            dists[..., k - 1] = sys.norm(ys[k], z)
        dw = matvec(sys.differential(p), w)
        z = sys.step_offset(ys[k], z)
        p = ys[k - 1] + z
        g = sys.norm(p, dw)
        logs[..., k - 1] = np.log(g)
        log_speed = log_speed + np.log(g)
        w = dw / g[..., None]
    return PushResult(offsets=z, tangents=w, speed=np.exp(log_speed),
                      log_jacobians=logs, backward_distance=dists)


def trace_leaf(sys: HyperbolicSystem, x: np.ndarray, eps: Optional[float] = None,
               h: Optional[float] = None, n_back: Optional[int] = None,
               n_check: int = DEFAULT_CHECK_DEPTH, oversample: int = 8) -> LeafSegment:
    """Trace W^u_eps(x) on the arc-length grid s_i = i h, |s_i| <= eps."""
    eps = sys.eps if eps is None else float(eps)
    h = eps / 64.0 if h is None else float(h)
    n_back = sys.default_n_back if n_back is None else int(n_back)
    if h > eps / 16.0 * (1.0 + 1e-12):
        raise ValueError(f"grid spacing h={h} must be <= eps/16 (eps={eps})")
    if n_back < 1:
        raise ValueError("trace_leaf needs n_back >= 1")
    x = sys.wrap(np.asarray(x, dtype=float))
    m = int(np.floor(eps / h + 1e-9))
    targets = np.arange(-m, m + 1) * h

    ys = backward_orbit(sys, x, n_back)
    e = unstable_direction(sys, ys[n_back])
    growth = push_segment(sys, ys, e, np.zeros(1)).speed[0]

    k = oversample * m
    T = 2.0 * eps / growth
    for attempt in range(8):
        tgrid = T * (np.arange(-k, k + 1) / k)
        res = push_segment(sys, ys, e, tgrid)
        if np.any(~np.isfinite(res.speed)) or np.any(res.speed <= 0.0):
            raise LeafTracingError("non-finite leaf speed", base=x, eps=eps)
        speed = CubicSpline(tgrid, res.speed)
        S = speed.antiderivative()
        s_grid = S(tgrid) - S(0.0)
        if s_grid[0] <= -eps and s_grid[-1] >= eps:
            break
        T *= 2.0
    else:
        raise LeafTracingError("could not cover the requested arc length", base=x, eps=eps)

    s0 = S(0.0)
    t = np.interp(targets, s_grid, tgrid)
    for _ in range(8):
        t = t - (S(t) - s0 - targets) / speed(t)
    t[m] = 0.0

    res = push_segment(sys, ys, e, t, n_check=n_check)
    nodes = sys.wrap(x + res.offsets)
    nodes[m] = x
    tangents = orient(sys, nodes, res.tangents)

    dots = sys.inner(nodes[:-1], tangents[:-1], tangents[1:])
    if np.any(dots <= 0.0) or np.any(np.diff(t) <= 0.0):
        bad = int(np.argmin(dots))
        raise LeafTracingError("leaf folds over; eps too large for this system",
                               base=x, eps=eps, node=bad)

    logger.debug(f"Traced leaf with {2 * m + 1} nodes, n_back={n_back}, growth={growth:.3e}")
    return LeafSegment(
        base=x,
        eps=m * h,
        h=h,
        nodes=nodes,
        tangents=tangents,
        arc=targets,
        base_index=m,
        log_jacobians=res.log_jacobians,
        backward_distance=res.backward_distance,
    )


def check_backward_contraction(leaf: LeafSegment, eps: Optional[float] = None) -> float:
    """Largest d(f^{-k} y, f^{-k} base) over nodes and recorded depths, relative to eps."""
    eps = leaf.eps if eps is None else eps
    if leaf.backward_distance.size == 0:
        return 0.0
    return float(np.max(leaf.backward_distance) / eps)


# -- sliding and bracket ---------------------------------------------------

@dataclass
class _SlideFrame:
    ys: np.ndarray
    e: np.ndarray
    growth: np.ndarray
    origin: np.ndarray


def _slide_frame(sys: HyperbolicSystem, x: np.ndarray, m: int) -> _SlideFrame:
    ys = backward_orbit(sys, x, m)
    e = unstable_direction(sys, ys[m])
    growth = push_segment(sys, ys, e, np.zeros(x.shape[:-1])).speed
    return _SlideFrame(ys=ys, e=e, growth=growth, origin=x)


def _slide(sys: HyperbolicSystem, frame: _SlideFrame, arc: np.ndarray):
    res = push_segment(sys, frame.ys, frame.e, arc / frame.growth)
    point = sys.wrap(frame.origin + res.offsets)
    # d point / d arc
    velocity = res.tangents * (res.speed / frame.growth)[..., None]
    return point, velocity


def slide_along_leaf(sys: HyperbolicSystem, x: np.ndarray, arc: np.ndarray,
                     m: int = SLIDE_DEPTH) -> np.ndarray:
    """Move x along its own unstable leaf by (approximately) the signed arc length."""
    x = np.asarray(x, dtype=float)
    frame = _slide_frame(sys, x, m)
    point, _ = _slide(sys, frame, np.broadcast_to(np.asarray(arc, dtype=float), x.shape[:-1]))
    return point


def bracket_with_arc(sys: HyperbolicSystem, p: np.ndarray, q: np.ndarray,
                     max_iter: int = 100, tol: float = 1e-10, m: int = SLIDE_DEPTH,
                     strict: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """[p, q] = W^s(p) cap W^u(q) by Newton's method along the unstable leaf of q.

    Returns (r, c, converged) where r is reached from q by sliding a leaf parameter c.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p, q = np.broadcast_arrays(p, q)
    frame = _slide_frame(sys, q, m)
    c = np.zeros(q.shape[:-1])
    r = q.copy()
    converged = np.zeros(q.shape[:-1], dtype=bool)
    limit = 4.0 * max(sys.delta, sys.eps)
    for it in range(max_iter):
        r, velocity = _slide(sys, frame, c)
        resid = sys.transverse_coordinate(r, p)
        converged = np.abs(resid) < tol
        if np.all(converged):
            break
        slope = np.sum(sys.transverse_gradient(r) * velocity, axis=-1)
        step = np.where(converged, 0.0, resid / np.where(slope == 0.0, 1.0, slope))
        c = np.clip(c - step, -limit, limit)
    if strict and not np.all(converged):
        raise BracketError("bracket did not converge; points are probably farther apart than delta",
                           iterations=max_iter, unconverged=int(np.sum(~converged)))
    return r, c, converged


def bracket(sys: HyperbolicSystem, p: np.ndarray, q: np.ndarray, max_iter: int = 100,
            tol: float = 1e-10) -> np.ndarray:
    """The point [p, q] of W^s_eps(p) cap W^u_eps(q)."""
    r, _c, _ok = bracket_with_arc(sys, p, q, max_iter=max_iter, tol=tol)
    return r


# -- rectangles --------------------------------------------------------------

@dataclass
class Rectangle:
    base: np.ndarray
    transversals: np.ndarray
    leaves: List[LeafSegment]
    stable_radius: float
    mode: str = "uniform"
    base_leaf: int = 0
    quotient_weights: Optional[np.ndarray] = None
    _cache: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def eps(self) -> float:
        return self.leaves[0].eps

    @property
    def h(self) -> float:
        return self.leaves[0].h

    @property
    def leaf_sizes(self) -> List[int]:
        return [leaf.n_nodes for leaf in self.leaves]

    @property
    def leaf_slices(self) -> List[slice]:
        out, start = [], 0
        for size in self.leaf_sizes:
            out.append(slice(start, start + size))
            start += size
        return out

    @property
    def n_nodes(self) -> int:
        return int(sum(self.leaf_sizes))

    @property
    def nodes(self) -> np.ndarray:
        return np.concatenate([leaf.nodes for leaf in self.leaves])

    @property
    def arc(self) -> np.ndarray:
        return np.concatenate([leaf.arc for leaf in self.leaves])

    @property
    def leaf_index(self) -> np.ndarray:
        return np.concatenate([np.full(leaf.n_nodes, j) for j, leaf in enumerate(self.leaves)])

    @property
    def spacing(self) -> float:
        """Stable spacing of uniform transversals."""
        return 2.0 * self.stable_radius / self.n_leaves

    def with_weights(self, weights: np.ndarray) -> "Rectangle":
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.n_leaves,):
            raise RectangleError("quotient weights do not match the leaf count",
                                 expected=self.n_leaves, got=list(weights.shape))
        return replace(self, quotient_weights=weights, _cache={})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base.tolist(),
            "transversals": self.transversals.tolist(),
            "stable_radius": self.stable_radius,
            "mode": self.mode,
            "base_leaf": self.base_leaf,
            "quotient_weights": None if self.quotient_weights is None
            else self.quotient_weights.tolist(),
            "leaves": [leaf.to_dict() for leaf in self.leaves],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Rectangle":
        weights = data.get("quotient_weights")
        return cls(
            base=np.asarray(data["base"], dtype=float),
            transversals=np.asarray(data["transversals"], dtype=float),
            leaves=[LeafSegment.from_dict(d) for d in data["leaves"]],
            stable_radius=float(data["stable_radius"]),
            mode=data["mode"],
            base_leaf=int(data["base_leaf"]),
            quotient_weights=None if weights is None else np.asarray(weights, dtype=float),
        )


def uniform_transversals(sys: HyperbolicSystem, base: np.ndarray, n_leaves: int,
                         stable_radius: float) -> Tuple[np.ndarray, int]:
    """Equally spaced points on the stable line of a toral base point; base included."""
    if not isinstance(sys, ToralAutomorphism):
        raise RectangleError("uniform transversals need a linear stable foliation",
                             system=sys.kind)
    spacing = 2.0 * stable_radius / n_leaves
    j0 = n_leaves // 2
    offsets = (np.arange(n_leaves) - j0) * spacing
    points = sys.wrap(base + offsets[:, None] * sys.v_s)
    points[j0] = base
    return points, j0


def orbit_transversals(sys: HyperbolicSystem, base: np.ndarray, n_leaves: int,
                       stable_radius: float, orbit_length: int = 200_000,
                       seed: int = 0) -> Tuple[np.ndarray, int]:
    """Stable projections [base, f^k y] of a long orbit; base is always one of them."""
    rng = np.random.default_rng(seed)
    y = sys.sample_initial(rng, 1)[0]
    for _ in range(1000):
        y = sys.apply(y)
    chunk = 5000
    found = [np.zeros(sys.stable_dim)]
    points = [base]
    reach = sys.eps + stable_radius
    produced = 0
    while produced < orbit_length and len(points) < n_leaves:
        orbit = np.empty((chunk, sys.phase_dim))
        for i in range(chunk):
            y = sys.apply(y)
            orbit[i] = y
        produced += chunk
        near = orbit[sys.distance(base, orbit) < reach]
        if near.size == 0:
            continue
        r, _c, ok = bracket_with_arc(sys, np.broadcast_to(base, near.shape), near, strict=False)
        sc = sys.stable_coordinate(r[ok], base)
        for point, coord in zip(r[ok], sc):
            if np.linalg.norm(coord) > stable_radius:
                continue
            if min(np.linalg.norm(coord - f) for f in found) < 1e-9:
                continue
            found.append(coord)
            points.append(point)
            if len(points) == n_leaves:
                break
    if len(points) < n_leaves:
        raise RectangleError("orbit produced too few transversals",
                             wanted=n_leaves, found=len(points))
    coords = np.asarray(found)
    order = np.lexsort(coords.T[::-1])
    points = np.asarray(points)[order]
    base_leaf = int(np.nonzero(order == 0)[0][0])
    return points, base_leaf


def build_rectangle(sys: HyperbolicSystem, base: np.ndarray, n_leaves: int,
                    stable_radius: float, eps: Optional[float] = None,
                    h: Optional[float] = None, n_back: Optional[int] = None,
                    mode: str = "uniform", seed: int = 0,
                    orbit_length: int = 200_000) -> Rectangle:
    """Rectangle whose leaves pass through J transversal points on W^s(base)."""
    base = sys.wrap(np.asarray(base, dtype=float))
    if n_leaves < 1:
        raise ValueError("a rectangle needs at least one leaf")
    if mode == "uniform":
        transversals, base_leaf = uniform_transversals(sys, base, n_leaves, stable_radius)
    elif mode == "orbit":
        transversals, base_leaf = orbit_transversals(sys, base, n_leaves, stable_radius,
                                                     orbit_length=orbit_length, seed=seed)
    else:
        raise ValueError(f"unknown transversal mode {mode!r}")
    leaves = [trace_leaf(sys, z, eps=eps, h=h, n_back=n_back) for z in transversals]
    logger.info(f"Built {mode} rectangle: {n_leaves} leaves x {leaves[0].n_nodes} nodes")
    return Rectangle(base=base, transversals=transversals, leaves=leaves,
                     stable_radius=float(stable_radius), mode=mode, base_leaf=base_leaf)


@dataclass
class Location:
    leaf: np.ndarray
    arc: np.ndarray
    inside: np.ndarray
    stable: np.ndarray


def _nearest_transversal(sys: HyperbolicSystem, rect: Rectangle, sc: np.ndarray):
    if rect.mode == "uniform":
        j0 = rect.base_leaf
        raw = sc[..., 0] / rect.spacing + j0
        j = np.clip(np.floor(raw + 0.5), 0, rect.n_leaves - 1).astype(int)
        lo = -j0 - 0.5
        hi = rect.n_leaves - j0 - 0.5
        in_range = (sc[..., 0] / rect.spacing >= lo) & (sc[..., 0] / rect.spacing < hi)
        return j, in_range
    coords = rect._cache.get("stable_coords")
    if coords is None:
        coords = sys.stable_coordinate(rect.transversals, rect.base)
        rect._cache["stable_coords"] = coords
        rect._cache["stable_tree"] = cKDTree(coords)
    _, j = rect._cache["stable_tree"].query(sc)
    in_range = np.linalg.norm(sc, axis=-1) <= rect.stable_radius
    return np.asarray(j, dtype=int), in_range


def locate(sys: HyperbolicSystem, rect: Rectangle, q: np.ndarray) -> Location:
    """Leaf index (stable projection) and arc coordinate of points q."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = q.shape[0]
    leaf = np.zeros(n, dtype=int)
    arc = np.full(n, np.nan)
    inside = np.zeros(n, dtype=bool)
    stable = np.full((n, sys.stable_dim), np.nan)
    reach = rect.eps + rect.stable_radius + 2.0 * rect.h
    for start in range(0, n, LOCATE_CHUNK):
        block = q[start:start + LOCATE_CHUNK]
        near = np.nonzero(sys.distance(rect.base, block) <= 1.05 * reach)[0]
        if near.size == 0:
            continue
        pts = block[near]
        r, c, ok = bracket_with_arc(sys, np.broadcast_to(rect.base, pts.shape), pts,
                                    strict=False)
        sc = sys.stable_coordinate(r, rect.base)
        j, in_range = _nearest_transversal(sys, rect, sc)
        s = -c
        idx = start + near
        leaf[idx] = j
        arc[idx] = s
        stable[idx] = sc
        inside[idx] = ok & in_range & (np.abs(s) <= rect.eps)
    return Location(leaf=leaf, arc=arc, inside=inside, stable=stable)


def stable_projection(sys: HyperbolicSystem, rect: Rectangle, q: np.ndarray) -> np.ndarray:
    """Index of the leaf whose transversal is nearest to [base, q]."""
    single = np.asarray(q).ndim == 1
    loc = locate(sys, rect, q)
    if not np.all(loc.inside):
        bad = int(np.nonzero(~loc.inside)[0][0])
        raise RectangleError("point outside rectangle", index=bad,
                             point=np.atleast_2d(q)[bad])
    return int(loc.leaf[0]) if single else loc.leaf


def bracket_closure_defect(sys: HyperbolicSystem, rect: Rectangle, n_pairs: int = 200,
                           seed: int = 0, margin: float = 0.9) -> float:
    """Fraction of node pairs p', q' (from the inner part of rect) whose bracket leaves rect."""
    rng = np.random.default_rng(seed)
    nodes = rect.nodes
    arc = rect.arc
    pool = np.nonzero(np.abs(arc) <= margin * rect.eps)[0]
    a = nodes[rng.choice(pool, n_pairs)]
    b = nodes[rng.choice(pool, n_pairs)]
    r, _c, ok = bracket_with_arc(sys, a, b, strict=False)
    loc = locate(sys, rect, r)
    return float(np.mean(~(ok & loc.inside)))


# -- projection onto traced leaves ---------------------------------------------

@dataclass
class LeafProjection:
    leaf: np.ndarray
    arc: np.ndarray
    distance: np.ndarray
    node: np.ndarray


def project_to_leaves(sys: HyperbolicSystem, rect: Rectangle, points: np.ndarray,
                      n_candidates: int = 32, n_steps: int = 4) -> LeafProjection:
    """Closest point on the traced leaves.

    The nearest nodes in the embedding give candidate leaves; on each the foot point is
    refined by Gauss-Newton on the cubic Hermite interpolant through the nodes and unit
    tangents, and the candidate with the smallest perpendicular distance wins.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tree = rect._cache.get("node_tree")
    if tree is None:
        tree = cKDTree(sys.embed(rect.nodes), boxsize=sys.embed_boxsize())
        rect._cache["node_tree"] = tree
    n_nodes = len(rect.nodes)
    k = min(n_candidates, n_nodes)
    _, idx = tree.query(sys.embed(points), k=k)
    idx = np.asarray(idx, dtype=int).reshape(len(points), k)

    nodes = rect.nodes
    arc = rect.arc
    leaf_index = rect.leaf_index
    tangents = np.concatenate([leaf.tangents for leaf in rect.leaves])
    starts = np.array([s.start for s in rect.leaf_slices])
    sizes = np.array(rect.leaf_sizes)
    steps = np.array([leaf.h for leaf in rect.leaves])

    cand = idx.ravel()
    q = np.repeat(points, k, axis=0)
    leaf = leaf_index[cand]
    start, size, h = starts[leaf], sizes[leaf], steps[leaf]
    d = sys.displacement(nodes[cand], q)
    s = arc[cand] + sys.inner(nodes[cand], d, tangents[cand])

    def hermite(s):
        i = np.clip(np.floor((s - arc[start]) / h).astype(int), 0, size - 2)
        g = start + i
        p0, t0, t1 = nodes[g], tangents[g], tangents[g + 1]
        chord = sys.displacement(p0, nodes[g + 1])
        tau = ((s - arc[g]) / h)[:, None]
        h_ = h[:, None]
        offset = ((tau**3 - 2 * tau**2 + tau) * h_ * t0 + (-2 * tau**3 + 3 * tau**2) * chord
                  + (tau**3 - tau**2) * h_ * t1)
        deriv = ((3 * tau**2 - 4 * tau + 1) * h_ * t0 + (-6 * tau**2 + 6 * tau) * chord
                 + (3 * tau**2 - 2 * tau) * h_ * t1) / h_
        return sys.wrap(p0 + offset), deriv

    for _ in range(n_steps):
        foot, deriv = hermite(s)
        d = sys.displacement(foot, q)
        s = s + sys.inner(foot, d, deriv) / sys.inner(foot, deriv, deriv)
    foot, _ = hermite(s)
    perp = sys.norm(foot, sys.displacement(foot, q)).reshape(len(points), k)

    best = np.argmin(perp, axis=1)
    rows = np.arange(len(points))
    pick = rows * k + best
    leaf, s = leaf[pick], s[pick]
    local = np.clip(np.rint((s - arc[start[pick]]) / h[pick]).astype(int), 0, size[pick] - 1)
    return LeafProjection(leaf=leaf, arc=s, distance=perp[rows, best],
                          node=start[pick] + local)


def image_rectangle(sys: HyperbolicSystem, rect: Rectangle, n: int,
                    n_back: Optional[int] = None) -> Tuple[Rectangle, float, float]:
    """Rectangle through f^n of the transversals whose leaves contain f^n of rect's leaves.

    Returns (image, a_lo, a_hi) where a_lo, a_hi bound the per-step leaf expansion;
    for constant expansion the image grid is exactly aligned with f^n of the nodes.
    """
    if n < 0:
        raise ValueError("image_rectangle needs n >= 0")
    if sys.conformal_constant is not None:
        a_lo = a_hi = float(sys.conformal_constant)
        margin = 1.0
    else:
        a_lo, a_hi = conformal_bounds(sys, rect.nodes, max(n, 1))
        margin = 1.05
    transversals = rect.transversals
    base = rect.base
    for _ in range(n):
        transversals = sys.apply(transversals)
        base = sys.apply(base)
    eps = rect.eps * a_hi**n * margin
    h = rect.h * a_lo**n
    leaves = [trace_leaf(sys, z, eps=eps, h=h, n_back=n_back or rect.leaves[0].n_back)
              for z in transversals]
    extent = rect.stable_radius
    if rect.mode == "uniform":
        extent += 0.5 * rect.spacing
    image = Rectangle(base=transversals[rect.base_leaf].copy(), transversals=transversals,
                      leaves=leaves, stable_radius=extent * sys.lam**n,
                      mode="image", base_leaf=rect.base_leaf,
                      quotient_weights=rect.quotient_weights)
    return image, a_lo, a_hi
