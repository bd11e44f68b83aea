"""
Concrete uniformly hyperbolic systems.

Every method is vectorized over leading axes: a point array has shape ``(..., d)``
and a differential has shape ``(..., d, d)``.  Systems are immutable descriptors
and are safe to share between worker threads.
"""

import logging
import math
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Generic seeds for the forward power iteration; tried in order when a seed
# turns out to be aligned with the stable space.
_SEEDS = {
    2: (np.array([0.6, 0.8]), np.array([-0.28, 0.96]), np.array([1.0, 0.0])),
    3: (
        np.array([0.2, 0.3, 0.9327379053088815]),
        np.array([-0.5, 0.4, 0.7681145747868608]),
        np.array([0.0, 0.0, 1.0]),
    ),
}


def matvec(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mat, v)


class HyperbolicSystem:
    """Base class for the built-in systems.

    Subclasses provide the map, its inverse and differential, the geometry of
    phase space and the affine description of their stable foliation.
    """

    kind = "abstract"
    phase_dim = 2
    unstable_dim = 1
    stable_dim = 1

    def __init__(self, C: float, lam: float, delta: float, eps: float):
        if C < 1.0:
            raise ValueError(f"hyperbolicity constant C={C} must be >= 1")
        if not 0.0 < lam < 1.0:
            raise ValueError(f"contraction rate lambda={lam} must lie in (0, 1)")
        self.C = float(C)
        self.lam = float(lam)
        self.delta = float(delta)
        self.eps = float(eps)

    # -- map -------------------------------------------------------------
    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def differential(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step_offset(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Return f(y + z) - f(y) as a phase displacement, without cancellation."""
        raise NotImplementedError

    # -- geometry --------------------------------------------------------
    def wrap(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def displacement(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Minimal phase displacement from x to y."""
        raise NotImplementedError

    def metric(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.phase_dim), x.shape + (self.phase_dim,))

    def inner(self, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...ij,...j->...", u, self.metric(x), v)

    def norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sqrt(self.inner(x, v, v))

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Coordinates used for nearest-neighbour searches."""
        return np.asarray(x, dtype=float)

    def embed_boxsize(self) -> Optional[float]:
        return None

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.displacement(x, y), axis=-1)

    def retract(self, x: np.ndarray) -> np.ndarray:
        """Project a pseudo-orbit point back into the trapping region."""
        return self.wrap(x)

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def orientation(self, x: np.ndarray) -> np.ndarray:
        """Reference vector fixing the sign of unstable directions."""
        raise NotImplementedError

    # -- stable foliation ------------------------------------------------
    def transverse_coordinate(self, r: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Signed coordinate of r across the local stable leaf of p; zero iff r is on it."""
        raise NotImplementedError

    def transverse_gradient(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stable_coordinate(self, r: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Position of r along the stable leaf of p, shape (..., stable_dim)."""
        raise NotImplementedError

    # -- conformality ----------------------------------------------------
    conformal_constant: Optional[float] = None

    @property
    def conformal_factor(self) -> Optional[Callable[[np.ndarray], np.ndarray]]:
        return None

    # -- bookkeeping -----------------------------------------------------
    @property
    def default_n_back(self) -> int:
        n = math.ceil(math.log(1e-14 / self.eps) / math.log(self.lam))
        return int(min(max(n, 16), 60))

    def descriptor(self) -> Dict[str, Any]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.descriptor()})"


class ToralAutomorphism(HyperbolicSystem):
    """Hyperbolic toral automorphism x -> A x (mod 1)."""

    kind = "toral-automorphism"
    phase_dim = 2

    def __init__(self, matrix: Sequence[Sequence[int]] = ((2, 1), (1, 1)),
                 delta: float = 0.2, eps: float = 0.25):
        A = np.asarray(matrix, dtype=float)
        if A.shape != (2, 2) or not np.all(A == np.round(A)):
            raise ValueError("toral automorphism needs a 2x2 integer matrix")
        det = int(round(np.linalg.det(A)))
        if abs(det) != 1:
            raise ValueError(f"|det A| must be 1, got {det}")
        eigvals, eigvecs = np.linalg.eig(A)
        if np.iscomplexobj(eigvals) or np.any(np.isclose(np.abs(eigvals), 1.0)):
            raise ValueError("A has an eigenvalue of modulus 1; not hyperbolic")
        iu = int(np.argmax(np.abs(eigvals)))
        is_ = 1 - iu
        v_u = eigvecs[:, iu] / np.linalg.norm(eigvecs[:, iu])
        v_s = eigvecs[:, is_] / np.linalg.norm(eigvecs[:, is_])
        if v_u[np.argmax(np.abs(v_u))] < 0:
            v_u = -v_u
        if v_s[np.argmax(np.abs(v_s))] < 0:
            v_s = -v_s
        self.A = A
        self.A_inv = np.round(np.linalg.inv(A))
        self.eigenvalue_unstable = float(eigvals[iu])
        self.eigenvalue_stable = float(eigvals[is_])
        self.lambda_u = abs(self.eigenvalue_unstable)
        self.v_u = v_u
        self.v_s = v_s
        covectors = np.linalg.inv(np.column_stack([v_u, v_s]))
        self.ell_u = covectors[0]
        self.ell_s = covectors[1]
        self.conformal_constant = self.lambda_u
        super().__init__(C=1.0, lam=1.0 / self.lambda_u, delta=delta, eps=eps)

    def wrap(self, x):
        y = np.mod(x, 1.0)
        return np.where(y >= 1.0, 0.0, y)

    def displacement(self, x, y):
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return d - np.round(d)

    def apply(self, x):
        return self.wrap(matvec(self.A, np.asarray(x, dtype=float)))

    def apply_inverse(self, x):
        return self.wrap(matvec(self.A_inv, np.asarray(x, dtype=float)))

    def differential(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.A, x.shape[:-1] + (2, 2))

    def step_offset(self, y, z):
        return matvec(self.A, np.asarray(z, dtype=float))

    def inner(self, x, u, v):
        return np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def embed_boxsize(self):
        return 1.0

    def embed(self, x):
        return self.wrap(x)

    def sample_initial(self, rng, n):
        return rng.random((n, 2))

    def orientation(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.v_u, x.shape)

    def transverse_coordinate(self, r, p):
        return self.displacement(p, r) @ self.ell_u

    def transverse_gradient(self, r):
        r = np.asarray(r, dtype=float)
        return np.broadcast_to(self.ell_u, r.shape)

    def stable_coordinate(self, r, p):
        return (self.displacement(p, r) @ self.ell_s)[..., None]

    @property
    def conformal_factor(self):
        lam_u = self.lambda_u

        def factor(x):
            x = np.asarray(x, dtype=float)
            return np.full(x.shape[:-1], lam_u)

        return factor

    def descriptor(self):
        return {"kind": self.kind, "matrix": self.A.astype(int).tolist(),
                "delta": self.delta, "eps": self.eps}


class Solenoid(HyperbolicSystem):
    """Smale-Williams solenoid on the solid torus, (x, y, theta) with theta mod 2 pi.

    Lengths are measured in the embedding
    (x, y, theta) -> ((R0 + x) cos theta, (R0 + x) sin theta, y).
    """

    kind = "solenoid"
    phase_dim = 3
    stable_dim = 2

    def __init__(self, r: float = 0.4, alpha: float = 0.2, beta: float = 0.3,
                 major_radius: float = 4.0, delta: float = 0.3, eps: float = 0.3):
        if not 0.0 < r < 1.0:
            raise ValueError(f"solenoid needs 0 < r < 1, got r={r}")
        bound = min(r, 1.0 - r)
        if not (0.0 < alpha < bound and 0.0 < beta < bound):
            raise ValueError(f"solenoid needs 0 < alpha, beta < {bound}")
        self.r = float(r)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.trap_radius = self.r / (1.0 - max(self.alpha, self.beta))
        if major_radius <= 2.0 * self.trap_radius:
            raise ValueError("major_radius must exceed twice the trapping radius")
        self.major_radius = float(major_radius)
        super().__init__(C=2.0, lam=0.5, delta=delta, eps=eps)

    def wrap(self, x):
        x = np.array(x, dtype=float, copy=True)
        th = np.mod(x[..., 2], TWO_PI)
        x[..., 2] = np.where(th >= TWO_PI, 0.0, th)
        return x

    def displacement(self, x, y):
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        d = np.array(d, copy=True)
        d[..., 2] = np.mod(d[..., 2] + math.pi, TWO_PI) - math.pi
        return d

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        out = np.empty_like(x)
        out[..., 0] = self.alpha * x[..., 0] + self.r * np.cos(th)
        out[..., 1] = self.beta * x[..., 1] + self.r * np.sin(th)
        out[..., 2] = 2.0 * th
        return self.wrap(out)

    def apply_inverse(self, x):
        x = np.asarray(x, dtype=float)
        half = 0.5 * np.mod(x[..., 2], TWO_PI)
        cands = np.stack([half, half + math.pi], axis=-1)
        err = (x[..., 0:1] - self.r * np.cos(cands)) ** 2
        err += (x[..., 1:2] - self.r * np.sin(cands)) ** 2
        th = np.take_along_axis(cands, np.argmin(err, axis=-1)[..., None], axis=-1)[..., 0]
        out = np.empty_like(x)
        out[..., 0] = (x[..., 0] - self.r * np.cos(th)) / self.alpha
        out[..., 1] = (x[..., 1] - self.r * np.sin(th)) / self.beta
        out[..., 2] = th
        return self.wrap(out)

    def differential(self, x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        D = np.zeros(x.shape[:-1] + (3, 3))
        D[..., 0, 0] = self.alpha
        D[..., 1, 1] = self.beta
        D[..., 0, 2] = -self.r * np.sin(th)
        D[..., 1, 2] = self.r * np.cos(th)
        D[..., 2, 2] = 2.0
        return D

    def step_offset(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        th, dth = y[..., 2], z[..., 2]
        mid = th + 0.5 * dth
        s = np.sin(0.5 * dth)
        out = np.empty(np.broadcast(y, z).shape)
        out[..., 0] = self.alpha * z[..., 0] - 2.0 * self.r * np.sin(mid) * s
        out[..., 1] = self.beta * z[..., 1] + 2.0 * self.r * np.cos(mid) * s
        out[..., 2] = 2.0 * dth
        return out

    def metric(self, x):
        x = np.asarray(x, dtype=float)
        G = np.zeros(x.shape[:-1] + (3, 3))
        G[..., 0, 0] = 1.0
        G[..., 1, 1] = 1.0
        G[..., 2, 2] = (self.major_radius + x[..., 0]) ** 2
        return G

    def inner(self, x, u, v):
        x = np.asarray(x, dtype=float)
        rad = self.major_radius + x[..., 0]
        return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + rad**2 * u[..., 2] * v[..., 2]

    def embed(self, x):
        x = np.asarray(x, dtype=float)
        rad = self.major_radius + x[..., 0]
        return np.stack([rad * np.cos(x[..., 2]), rad * np.sin(x[..., 2]), x[..., 1]], axis=-1)

    def distance(self, x, y):
        return np.linalg.norm(self.embed(y) - self.embed(x), axis=-1)

    def retract(self, x):
        x = self.wrap(x)
        rad = np.hypot(x[..., 0], x[..., 1])
        scale = np.minimum(1.0, self.trap_radius / np.maximum(rad, 1e-300))
        x[..., 0] *= scale
        x[..., 1] *= scale
        return x

    def sample_initial(self, rng, n):
        rad = self.trap_radius * np.sqrt(rng.random(n))
        phi = TWO_PI * rng.random(n)
        th = TWO_PI * rng.random(n)
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), th], axis=-1)

    def orientation(self, x):
        x = np.asarray(x, dtype=float)
        ref = np.zeros(x.shape)
        ref[..., 2] = 1.0
        return ref

    def transverse_coordinate(self, r, p):
        return self.displacement(p, r)[..., 2]

    def transverse_gradient(self, r):
        r = np.asarray(r, dtype=float)
        g = np.zeros(r.shape)
        g[..., 2] = 1.0
        return g

    def stable_coordinate(self, r, p):
        return self.displacement(p, r)[..., :2]

    @property
    def conformal_factor(self):
        def factor(x):
            return unstable_jacobian(self, x)

        return factor

    def descriptor(self):
        return {"kind": self.kind, "r": self.r, "alpha": self.alpha, "beta": self.beta,
                "major_radius": self.major_radius, "delta": self.delta, "eps": self.eps}


def cutoff_profile(rho: np.ndarray, r0: float) -> Tuple[np.ndarray, np.ndarray]:
    """C^1 cutoff: 1 on [0, r0/2], 0 beyond r0, cubic in between. Returns (h, h')."""
    half = 0.5 * r0
    w = np.clip((rho - half) / half, 0.0, 1.0)
    h = 1.0 - 3.0 * w**2 + 2.0 * w**3
    dh = np.where((w > 0.0) & (w < 1.0), (-6.0 * w + 6.0 * w**2) / half, 0.0)
    return h, dh


class DAMap(ToralAutomorphism):
    """Derived-from-Anosov map f = A o g.

    g is the time-one map (fixed-step RK4) of ds/dt = tau * s * h(|(u, s)|) in the
    eigen-coordinates (u, s) of A around the fixed point 0; it preserves u, so the
    stable foliation of A is kept.
    """

    kind = "da-map"
    _LINEARIZE_BELOW = 3e-9

    def __init__(self, matrix: Sequence[Sequence[int]] = ((2, 1), (1, 1)), r0: float = 0.2,
                 tau: Optional[float] = None, n_steps: int = 16,
                 delta: float = 0.15, eps: float = 0.15):
        super().__init__(matrix=matrix, delta=delta, eps=eps)
        if not 0.0 < r0 <= 0.25:
            raise ValueError(f"DA bump radius r0={r0} must lie in (0, 0.25]")
        lam_s = abs(self.eigenvalue_stable)
        self.r0 = float(r0)
        self.tau = float(tau) if tau is not None else math.log(1.1 / lam_s)
        self.n_steps = int(n_steps)
        self.conformal_constant = None
        self.C = 3.0
        self.lam = 0.5

    def _eigen(self, x):
        z = np.asarray(x, dtype=float)
        z = z - np.round(z)
        return z @ self.ell_u, z @ self.ell_s

    def _field(self, s, u):
        rho = np.sqrt(u * u + s * s)
        h, dh = cutoff_profile(rho, self.r0)
        safe = np.where(rho > 0.0, rho, 1.0)
        F = self.tau * s * h
        F_s = self.tau * (h + s * dh * s / safe)
        F_u = self.tau * s * dh * u / safe
        return F, F_s, F_u

    def _flow(self, s0, u):
        """RK4 time-one map with its exact variational derivatives (ds/ds0, ds/du)."""
        dt = 1.0 / self.n_steps
        s = np.array(s0, dtype=float, copy=True)
        a = np.ones_like(s)
        b = np.zeros_like(s)

        def rhs(s_, a_, b_):
            F, F_s, F_u = self._field(s_, u)
            return F, F_s * a_, F_s * b_ + F_u

        for _ in range(self.n_steps):
            k1 = rhs(s, a, b)
            k2 = rhs(s + 0.5 * dt * k1[0], a + 0.5 * dt * k1[1], b + 0.5 * dt * k1[2])
            k3 = rhs(s + 0.5 * dt * k2[0], a + 0.5 * dt * k2[1], b + 0.5 * dt * k2[2])
            k4 = rhs(s + dt * k3[0], a + dt * k3[1], b + dt * k3[2])
            s = s + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            a = a + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            b = b + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        return s, a, b

    def perturbation(self, x):
        x = np.asarray(x, dtype=float)
        u, s = self._eigen(x)
        s1, a, b = self._flow(s, u)
        return x + (s1 - s)[..., None] * self.v_s

    def apply(self, x):
        return self.wrap(matvec(self.A, self.perturbation(x)))

    def apply_inverse(self, x):
        x1 = self.wrap(matvec(self.A_inv, np.asarray(x, dtype=float)))
        u, s1 = self._eigen(x1)
        s = np.array(s1, copy=True)
        for _ in range(60):
            val, a, _b = self._flow(s, u)
            step = (val - s1) / a
            s = s - step
            if np.all(np.abs(step) <= 1e-16 * np.maximum(1.0, np.abs(s))):
                break
        return self.wrap(x1 + (s - s1)[..., None] * self.v_s)

    def _perturbation_jacobian(self, x):
        u, s = self._eigen(x)
        _s1, a, b = self._flow(s, u)
        grad = (a - 1.0)[..., None] * self.ell_s + b[..., None] * self.ell_u
        return np.eye(2) + self.v_s[:, None] * grad[..., None, :]

    def differential(self, x):
        return np.einsum("ij,...jk->...ik", self.A, self._perturbation_jacobian(x))

    def step_offset(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        small = np.linalg.norm(z, axis=-1) < self._LINEARIZE_BELOW
        linear = matvec(self._perturbation_jacobian(y), z)
        u0, s0 = self._eigen(y)
        u1, s1 = self._eigen(y + z)
        d0 = self._flow(s0, u0)[0] - s0
        d1 = self._flow(s1, u1)[0] - s1
        direct = z + (d1 - d0)[..., None] * self.v_s
        return matvec(self.A, np.where(small[..., None], linear, direct))

    @property
    def conformal_factor(self):
        return None

    def descriptor(self):
        return {"kind": self.kind, "matrix": self.A.astype(int).tolist(), "r0": self.r0,
                "tau": self.tau, "n_steps": self.n_steps, "delta": self.delta, "eps": self.eps}


def cat_map(**kwargs: Any) -> ToralAutomorphism:
    return ToralAutomorphism(((2, 1), (1, 1)), **kwargs)


def system_from_descriptor(desc: Dict[str, Any]) -> HyperbolicSystem:
    """Build a system from a plain descriptor dict (the config's `system` section)."""
    params = {k: v for k, v in desc.items() if k != "kind"}
    kind = desc.get("kind")
    if kind == "toral-automorphism":
        return ToralAutomorphism(**params)
    if kind == "solenoid":
        return Solenoid(**params)
    if kind == "da-map":
        return DAMap(**params)
    raise ValueError(f"unknown system kind {kind!r}")


# -- operations ------------------------------------------------------------

def apply(sys: HyperbolicSystem, x: np.ndarray) -> np.ndarray:
    return sys.apply(x)


def apply_inverse(sys: HyperbolicSystem, x: np.ndarray) -> np.ndarray:
    return sys.apply_inverse(x)


def differential(sys: HyperbolicSystem, x: np.ndarray) -> np.ndarray:
    return sys.differential(x)


def backward_orbit(sys: HyperbolicSystem, x: np.ndarray, n: int) -> np.ndarray:
    """Pseudo-orbit y_k ~ f^{-k}(x), k = 0..n, shape (n + 1, ..., d)."""
    ys = [np.asarray(x, dtype=float)]
    for _ in range(n):
        ys.append(sys.retract(sys.apply_inverse(ys[-1])))
    return np.stack(ys)


def forward_orbit(sys: HyperbolicSystem, x: np.ndarray, n: int) -> np.ndarray:
    xs = [np.asarray(x, dtype=float)]
    for _ in range(n):
        xs.append(sys.apply(xs[-1]))
    return np.stack(xs)


def orient(sys: HyperbolicSystem, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    sign = np.sign(sys.inner(x, v, sys.orientation(x)))
    sign = np.where(sign == 0.0, 1.0, sign)
    return v * sign[..., None]


def _push_seed(sys, ys, seed):
    n = ys.shape[0] - 1
    v = np.broadcast_to(seed, ys.shape[1:]).copy()
    v = v / sys.norm(ys[n], v)[..., None]
    log_growth = np.zeros(ys.shape[1:-1])
    for k in range(n, 0, -1):
        w = matvec(sys.differential(ys[k]), v)
        g = sys.norm(ys[k - 1], w)
        log_growth += np.log(np.maximum(g, 1e-300))
        v = w / np.maximum(g, 1e-300)[..., None]
    return v, log_growth


def unstable_direction(sys: HyperbolicSystem, x: np.ndarray, n: int = 30) -> np.ndarray:
    """Unit unstable direction e^u(x) by forward power iteration along f^{-n}(x)..x."""
    if n < 1:
        raise ValueError("unstable_direction needs n >= 1")
    x = np.asarray(x, dtype=float)
    ys = backward_orbit(sys, x, n)
    seeds = _SEEDS[sys.phase_dim]
    v, log_growth = _push_seed(sys, ys, seeds[0])
    # a seed lying in E^s does not grow; retry those points with the next seed
    for seed in seeds[1:]:
        bad = ~np.isfinite(log_growth) | (log_growth <= 0.0) | ~np.all(np.isfinite(v), axis=-1)
        if not np.any(bad):
            break
        logger.debug(f"Reseeding unstable direction at {int(np.sum(bad))} points")
        v2, g2 = _push_seed(sys, ys, seed)
        v = np.where(bad[..., None], v2, v)
        log_growth = np.where(bad, g2, log_growth)
    return orient(sys, x, v)


def unstable_jacobian(sys: HyperbolicSystem, x: np.ndarray, n: int = 30) -> np.ndarray:
    """J^u(x) = |Df(x) e^u(x)|_{f(x)} for d_u = 1."""
    x = np.asarray(x, dtype=float)
    e = unstable_direction(sys, x, n)
    w = matvec(sys.differential(x), e)
    return sys.norm(sys.apply(x), w) / sys.norm(x, e)


def equivariance_residual(sys: HyperbolicSystem, x: np.ndarray, n: int) -> np.ndarray:
    """Angle between the normalized push of e^u(x) and e^u(f(x)), both at depth n."""
    x = np.asarray(x, dtype=float)
    fx = sys.apply(x)
    pushed = matvec(sys.differential(x), unstable_direction(sys, x, n))
    pushed = pushed / sys.norm(fx, pushed)[..., None]
    target = unstable_direction(sys, fx, n)
    cos = np.clip(sys.inner(fx, pushed, target), -1.0, 1.0)
    # arccos loses precision near 1; use the chord instead
    chord = sys.norm(fx, pushed - target)
    return np.where(cos > 0.5, 2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0)), np.arccos(cos))


def lyapunov_exponent(sys: HyperbolicSystem, x: np.ndarray, N: int) -> np.ndarray:
    """(1/N) sum_{k<N} log J^u(f^k x), by pushing e^u along the forward orbit."""
    if N < 1:
        raise ValueError("lyapunov_exponent needs N >= 1")
    x = np.asarray(x, dtype=float)
    v = unstable_direction(sys, x)
    total = np.zeros(x.shape[:-1])
    for _ in range(N):
        w = matvec(sys.differential(x), v)
        x = sys.apply(x)
        g = sys.norm(x, w)
        total += np.log(g)
        v = w / g[..., None]
    return total / N


def birkhoff_average(sys: HyperbolicSystem, x: np.ndarray, N: int,
                     observable: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    total = np.zeros(x.shape[:-1])
    for _ in range(N):
        total += observable(x)
        x = sys.apply(x)
    return total / N


def attractor_sample(sys: HyperbolicSystem, n_points: int, seed: int,
                     burn_in: int = 1000) -> np.ndarray:
    """Points on the attractor: uniform initial points iterated `burn_in` times."""
    rng = np.random.default_rng(seed)
    x = sys.sample_initial(rng, n_points)
    for _ in range(burn_in):
        x = sys.apply(x)
    return x


def hyperbolicity_certificate(sys: HyperbolicSystem, points: np.ndarray, n_max: int = 20) -> float:
    """Worst ratio |df^{-n} v| / (C lambda^n |v|) over v in E^u and n <= n_max."""
    points = np.asarray(points, dtype=float)
    v = unstable_direction(sys, points)
    y = points
    worst = 0.0
    norm0 = sys.norm(points, v)
    for n in range(1, n_max + 1):
        prev = sys.retract(sys.apply_inverse(y))
        v = np.linalg.solve(sys.differential(prev), v[..., None])[..., 0]
        y = prev
        ratio = sys.norm(y, v) / (sys.C * sys.lam**n * norm0)
        worst = max(worst, float(np.max(ratio)))
    return worst


def conformal_bounds(sys: HyperbolicSystem, points: np.ndarray, n: int = 1) -> Tuple[float, float]:
    """(a_min, a_max) of the leaf expansion measured along n forward steps of `points`."""
    factor = sys.conformal_factor
    if factor is None:
        raise ValueError(f"{sys.kind} has no conformal factor")
    values = []
    x = np.asarray(points, dtype=float)
    for _ in range(max(n, 1)):
        values.append(np.abs(factor(x)))
        x = sys.apply(x)
    values = np.concatenate([np.ravel(v) for v in values])
    return float(np.min(values)), float(np.max(values))
