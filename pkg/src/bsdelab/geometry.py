"""Convex-set calculus for constrained backward equations.

Each body exposes the squared distance d2(x) = |x - project(x)|^2 together
with its gradient 2(x - project(x)) and, where it exists, its Hessian.
The Hessian of d2 is undefined on a measure-zero locus (set boundary,
facet coordinates, zero eigenvalues); those points are reported with an
explicit marker instead of a silently wrong matrix.

Symmetric-matrix bodies act on flattened coordinates: a side x side
matrix is embedded as a vector of length side(side+1)/2 with sqrt(2)
scaling on off-diagonal entries, so Euclidean inner products of vectors
equal trace inner products of matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import roots_legendre

__all__ = [
    "HessianResult",
    "ConvexBody",
    "Ball",
    "Box",
    "OrthantProduct",
    "HalfspaceIntersection",
    "PsdCone",
    "FinitePointSet",
    "SpectralParts",
    "spectral_split",
    "sym_to_vec",
    "vec_to_sym",
    "jump_defect",
    "QuadSpec",
    "MollifiedResult",
    "mollified_dist2",
]

_BOUNDARY_RTOL = 1e-9


@dataclass(frozen=True)
class HessianResult:
    """Hessian of d2 at a point, or an explicit undefined marker."""

    matrix: np.ndarray | None
    defined: bool
    reason: str = ""

    def require(self) -> np.ndarray:
        if not self.defined:
            raise ValueError(f"Hessian undefined: {self.reason}")
        return self.matrix


class ConvexBody:
    """Closed convex set with projection-based distance calculus."""

    dim: int

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dist2(self, x: np.ndarray) -> float:
        p = self.project(np.asarray(x, dtype=float))
        diff = np.asarray(x, dtype=float) - p
        return float(diff @ diff)

    def dist(self, x: np.ndarray) -> float:
        return math.sqrt(max(self.dist2(x), 0.0))

    def grad_dist2(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 2.0 * (x - self.project(x))

    def hess_dist2(self, x: np.ndarray) -> HessianResult:
        raise NotImplementedError

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return self.dist(x) <= tol

    def sample_point(self, rng: np.random.Generator) -> np.ndarray:
        """A random point of the body, used by property checks."""
        raise NotImplementedError

    def dist2_batch(self, xs: np.ndarray) -> np.ndarray:
        """Squared distances for rows of ``xs``; overridden where it pays off."""
        xs = np.asarray(xs, dtype=float)
        return np.array([self.dist2(x) for x in xs])

    def dist_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.dist2_batch(xs), 0.0))


@dataclass(frozen=True)
class Ball(ConvexBody):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).ravel()
        if self.radius <= 0.0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def project(self, x):
        x = np.asarray(x, dtype=float)
        v = x - self.center
        norm = np.linalg.norm(v)
        if norm <= self.radius:
            return x.copy()
        return self.center + v * (self.radius / norm)

    def dist2(self, x):
        norm = np.linalg.norm(np.asarray(x, dtype=float) - self.center)
        return max(norm - self.radius, 0.0) ** 2

    def hess_dist2(self, x):
        x = np.asarray(x, dtype=float)
        v = x - self.center
        rho = np.linalg.norm(v)
        tol = _BOUNDARY_RTOL * max(1.0, self.radius, rho)
        if abs(rho - self.radius) <= tol:
            return HessianResult(None, False, "point on the sphere")
        if rho < self.radius:
            return HessianResult(np.zeros((self.dim, self.dim)), True)
        outer = np.outer(v, v)
        mat = 2.0 * (1.0 - self.radius / rho) * np.eye(self.dim)
        mat += 2.0 * self.radius / rho**3 * outer
        return HessianResult(mat, True)

    def contains(self, x, tol=1e-9):
        return np.linalg.norm(np.asarray(x, dtype=float) - self.center) <= self.radius + tol

    def sample_point(self, rng):
        v = rng.normal(size=self.dim)
        v /= np.linalg.norm(v)
        return self.center + v * self.radius * rng.uniform() ** (1.0 / self.dim)

    def dist2_batch(self, xs):
        norms = np.linalg.norm(np.asarray(xs, dtype=float) - self.center, axis=-1)
        return np.maximum(norms - self.radius, 0.0) ** 2


@dataclass(frozen=True)
class Box(ConvexBody):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(lower > upper):
            raise ValueError("box lower bounds must not exceed upper bounds")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def dist2(self, x):
        x = np.asarray(x, dtype=float)
        excess = np.maximum(x - self.upper, 0.0) + np.maximum(self.lower - x, 0.0)
        return float(excess @ excess)

    def hess_dist2(self, x):
        x = np.asarray(x, dtype=float)
        scale = np.maximum(1.0, np.abs(x))
        diag = np.zeros(self.dim)
        for i in range(self.dim):
            if self.lower[i] == self.upper[i]:
                # pinned coordinate: d2 contribution is a smooth parabola
                diag[i] = 2.0
                continue
            tol = _BOUNDARY_RTOL * scale[i]
            if abs(x[i] - self.lower[i]) <= tol or abs(x[i] - self.upper[i]) <= tol:
                return HessianResult(None, False, f"coordinate {i} on a facet")
            if x[i] < self.lower[i] or x[i] > self.upper[i]:
                diag[i] = 2.0
        return HessianResult(np.diag(diag), True)

    def contains(self, x, tol=1e-9):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def sample_point(self, rng):
        return rng.uniform(self.lower, self.upper)

    def dist2_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        excess = np.maximum(xs - self.upper, 0.0) + np.maximum(self.lower - xs, 0.0)
        return np.sum(excess * excess, axis=-1)


@dataclass(frozen=True)
class OrthantProduct(ConvexBody):
    """R^{n_plus}_+ x R^{n_free}: first block sign-constrained, rest free."""

    n_plus: int
    n_free: int

    def __post_init__(self):
        if self.n_plus < 0 or self.n_free < 0 or self.n_plus + self.n_free == 0:
            raise ValueError("orthant product needs a nonempty dimension split")

    @property
    def dim(self) -> int:
        return self.n_plus + self.n_free

    def project(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[: self.n_plus] = np.maximum(out[: self.n_plus], 0.0)
        return out

    def dist2(self, x):
        x = np.asarray(x, dtype=float)
        neg = np.minimum(x[: self.n_plus], 0.0)
        return float(neg @ neg)

    def hess_dist2(self, x):
        x = np.asarray(x, dtype=float)
        head = x[: self.n_plus]
        tol = _BOUNDARY_RTOL * np.maximum(1.0, np.abs(head))
        if np.any(np.abs(head) <= tol):
            return HessianResult(None, False, "constrained coordinate at zero")
        diag = np.zeros(self.dim)
        diag[: self.n_plus] = np.where(head < 0.0, 2.0, 0.0)
        return HessianResult(np.diag(diag), True)

    def contains(self, x, tol=1e-9):
        return bool(np.all(np.asarray(x, dtype=float)[: self.n_plus] >= -tol))

    def sample_point(self, rng):
        out = rng.normal(size=self.dim) * 2.0
        out[: self.n_plus] = np.abs(out[: self.n_plus])
        return out

    def dist2_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        neg = np.minimum(xs[..., : self.n_plus], 0.0)
        return np.sum(neg * neg, axis=-1)


class HalfspaceIntersection(ConvexBody):
    """Intersection of halfspaces a_i . x <= b_i, projected by Dykstra sweeps.

    Construction fails if the system is infeasible.  Projections run
    Dykstra iterations and then attempt an exact active-set polish, so
    distances are accurate to machine precision in the generic case.
    """

    def __init__(self, normals, offsets, max_sweeps: int = 20_000, tol: float = 1e-14):
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        offsets = np.asarray(offsets, dtype=float).ravel()
        if normals.shape[0] != offsets.shape[0]:
            raise ValueError("halfspaces: normals and offsets must match")
        if normals.shape[0] == 0:
            raise ValueError("halfspaces: at least one constraint required")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("halfspaces: zero normal vector")
        self.normals = normals
        self.offsets = offsets
        self._row_norm2 = norms**2
        self.max_sweeps = max_sweeps
        self.tol = tol
        self._interior = self._chebyshev_center(normals, offsets, norms)

    @staticmethod
    def _chebyshev_center(normals, offsets, norms):
        # caps keep the LP bounded when the intersection is unbounded
        m = normals.shape[1]
        res = linprog(
            c=np.r_[np.zeros(m), -1.0],
            A_ub=np.c_[normals, norms],
            b_ub=offsets,
            bounds=[(-1e6, 1e6)] * m + [(0.0, 1e3)],
            method="highs",
        )
        if not res.success:
            raise ValueError("halfspaces: empty intersection")
        return res.x[:m]

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def inradius_center(self) -> np.ndarray:
        return self._interior.copy()

    def _dykstra(self, x):
        p = x.copy()
        corrections = np.zeros_like(self.normals)
        scale = max(1.0, np.linalg.norm(x))
        for _ in range(self.max_sweeps):
            start = p.copy()
            corr_start = corrections.copy()
            for i in range(self.normals.shape[0]):
                z = p + corrections[i]
                viol = self.normals[i] @ z - self.offsets[i]
                if viol > 0.0:
                    p = z - (viol / self._row_norm2[i]) * self.normals[i]
                else:
                    p = z
                corrections[i] = z - p
            # the iterate alone can stall for a few sweeps while the
            # corrections keep moving; only the joint fixed point is the
            # projection, so test both
            if (
                np.max(np.abs(p - start)) <= self.tol * scale
                and np.max(np.abs(corrections - corr_start)) <= self.tol * scale
            ):
                break
        return p

    def _polish(self, x, p):
        scale = max(1.0, np.linalg.norm(x))
        resid = self.normals @ p - self.offsets
        active = np.flatnonzero(resid >= -1e-8 * scale)
        if active.size == 0:
            return x.copy() if self.contains(x, tol=1e-12 * scale) else p
        candidates = [tuple(active)]
        if 0 < active.size <= 6:
            # active-set guesses from Dykstra can overshoot; try subsets
            from itertools import combinations

            for k in range(active.size - 1, 0, -1):
                candidates.extend(tuple(c) for c in combinations(active, k))
        for cand in candidates:
            idx = np.asarray(cand)
            A = self.normals[idx]
            gram = A @ A.T
            rhs = A @ x - self.offsets[idx]
            try:
                lam = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                lam, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
            if np.any(lam < -1e-10 * scale):
                continue
            cand_p = x - A.T @ lam
            if np.all(self.normals @ cand_p - self.offsets <= 1e-10 * scale):
                return cand_p
        return p

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if self.contains(x, tol=0.0):
            return x.copy()
        return self._polish(x, self._dykstra(x))

    def hess_dist2(self, x):
        """Central-difference estimate; exact kinks are not detected."""
        x = np.asarray(x, dtype=float)
        eps = 1e-5 * max(1.0, np.linalg.norm(x))
        n = self.dim
        mat = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = eps
            mat[:, j] = (self.grad_dist2(x + e) - self.grad_dist2(x - e)) / (2.0 * eps)
        return HessianResult((mat + mat.T) / 2.0, True)

    def contains(self, x, tol=1e-9):
        return bool(np.all(self.normals @ np.asarray(x, dtype=float) - self.offsets <= tol))

    def sample_point(self, rng):
        # random feasible step from the inradius center
        direction = rng.normal(size=self.dim)
        direction /= np.linalg.norm(direction)
        along = self.normals @ direction
        slack = self.offsets - self.normals @ self._interior
        with np.errstate(divide="ignore"):
            steps = np.where(along > 0.0, slack / along, np.inf)
        t_max = min(np.min(steps), 1e3)
        return self._interior + direction * t_max * rng.uniform(0.0, 0.999)

    def dist2_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        proj = np.array([self.project(x) for x in xs])
        diff = xs - proj
        return np.sum(diff * diff, axis=-1)


def _sym_indices(side: int):
    return [(i, j) for i in range(side) for j in range(i, side)]


def sym_to_vec(mat: np.ndarray) -> np.ndarray:
    """Flatten a symmetric matrix isometrically (off-diagonals scaled by sqrt 2)."""
    mat = np.asarray(mat, dtype=float)
    side = mat.shape[0]
    out = np.empty(side * (side + 1) // 2)
    for k, (i, j) in enumerate(_sym_indices(side)):
        out[k] = mat[i, i] if i == j else math.sqrt(2.0) * mat[i, j]
    return out


def vec_to_sym(vec: np.ndarray, side: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape[-1] != side * (side + 1) // 2:
        raise ValueError("flattened length does not match matrix side")
    out = np.zeros((side, side))
    inv = 1.0 / math.sqrt(2.0)
    for k, (i, j) in enumerate(_sym_indices(side)):
        if i == j:
            out[i, i] = vec[k]
        else:
            out[i, j] = out[j, i] = vec[k] * inv
    return out


@dataclass(frozen=True)
class SpectralParts:
    """Orthogonal split S = positive - negative with both parts PSD."""

    positive: np.ndarray
    negative: np.ndarray
    eigenvalues: np.ndarray


def spectral_split(mat: np.ndarray) -> SpectralParts:
    mat = np.asarray(mat, dtype=float)
    if not np.allclose(mat, mat.T, atol=1e-10 * max(1.0, np.abs(mat).max())):
        raise ValueError("spectral split requires a symmetric matrix")
    w, q = np.linalg.eigh((mat + mat.T) / 2.0)
    pos = (q * np.maximum(w, 0.0)) @ q.T
    neg = (q * np.maximum(-w, 0.0)) @ q.T
    return SpectralParts(positive=pos, negative=neg, eigenvalues=w)


@dataclass(frozen=True)
class PsdCone(ConvexBody):
    """Positive semidefinite cone on flattened symmetric matrices."""

    side: int

    def __post_init__(self):
        if self.side < 1:
            raise ValueError("matrix side must be at least 1")

    @property
    def dim(self) -> int:
        return self.side * (self.side + 1) // 2

    def project(self, x):
        split = spectral_split(vec_to_sym(x, self.side))
        return sym_to_vec(split.positive)

    def dist2(self, x):
        w = np.linalg.eigvalsh(vec_to_sym(x, self.side))
        neg = np.minimum(w, 0.0)
        return float(neg @ neg)

    def hess_dist2(self, x):
        mat = vec_to_sym(x, self.side)
        w, q = np.linalg.eigh(mat)
        scale = max(1.0, np.abs(w).max())
        if np.min(np.abs(w)) <= _BOUNDARY_RTOL * scale:
            return HessianResult(None, False, "zero eigenvalue (cone boundary)")
        # derivative of the cone projection in the eigenbasis
        lam_pos = np.maximum(w, 0.0)
        denom = w[:, None] - w[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            omega = (lam_pos[:, None] - lam_pos[None, :]) / denom
        same = np.abs(denom) <= 1e-12 * scale
        pos = np.broadcast_to(w[:, None] > 0.0, omega.shape)
        omega = np.where(same, pos.astype(float), omega)
        n = self.dim
        hess = np.empty((n, n))
        for col, basis in enumerate(np.eye(n)):
            e_mat = vec_to_sym(basis, self.side)
            inner = q.T @ e_mat @ q
            dproj = q @ (omega * inner) @ q.T
            hess[:, col] = sym_to_vec(2.0 * (e_mat - dproj))
        return HessianResult((hess + hess.T) / 2.0, True)

    def contains(self, x, tol=1e-9):
        w = np.linalg.eigvalsh(vec_to_sym(x, self.side))
        return bool(w.min() >= -tol)

    def sample_point(self, rng):
        g = rng.normal(size=(self.side, self.side))
        return sym_to_vec(g @ g.T / math.sqrt(self.side))

    def dist2_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        mats = np.array([vec_to_sym(v, self.side) for v in xs])
        w = np.linalg.eigvalsh(mats)
        neg = np.minimum(w, 0.0)
        return np.sum(neg * neg, axis=-1)


@dataclass(frozen=True)
class FinitePointSet:
    """Finite target set for the nonconvex demonstration; distance only."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("point set must be nonempty")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def project(self, x):
        x = np.asarray(x, dtype=float)
        d2 = np.sum((self.points - x) ** 2, axis=1)
        return self.points[int(np.argmin(d2))].copy()

    def dist2(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.min(np.sum((self.points - x) ** 2, axis=1)))

    def dist(self, x):
        return math.sqrt(self.dist2(x))

    def contains(self, x, tol=1e-9):
        return self.dist(x) <= tol

    def dist2_batch(self, xs):
        xs = np.asarray(xs, dtype=float)
        d2 = np.sum((xs[:, None, :] - self.points[None, :, :]) ** 2, axis=2)
        return d2.min(axis=1)

    def dist_batch(self, xs):
        return np.sqrt(self.dist2_batch(xs))


def jump_defect(body: ConvexBody, y: np.ndarray, u: np.ndarray, marks) -> float:
    """Intensity-weighted convexity defect of d2 along the jumps.

    sum_j n_j [ d2(y + u_j) - d2(y) - <grad d2(y), u_j> ], nonnegative for
    convex bodies since d2 is convex.
    """
    y = np.asarray(y, dtype=float)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != marks.n_atoms:
        raise ValueError("jump integrand must supply one row per atom")
    base = body.dist2(y)
    grad = body.grad_dist2(y)
    total = 0.0
    for j in range(marks.n_atoms):
        total += marks.weights[j] * (body.dist2(y + u[j]) - base - grad @ u[j])
    return float(total)


@dataclass(frozen=True)
class QuadSpec:
    """Quadrature budget for the mollified distance.

    Tensorized Gauss-Legendre up to dimension 3, Monte Carlo above.
    """

    nodes_per_axis: int = 7
    mc_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.nodes_per_axis < 2:
            raise ValueError("need at least two nodes per axis")
        if self.mc_samples < 1:
            raise ValueError("need at least one Monte Carlo sample")


@dataclass(frozen=True)
class MollifiedResult:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    low_confidence: bool
    nodes_used: int


def _bump(v2: np.ndarray) -> np.ndarray:
    """Radial bump exp(-1/(1-|v|^2)) on the open unit ball, zero outside."""
    out = np.zeros_like(v2)
    inside = v2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - v2[inside]))
    return out


def _quad_nodes(dim: int, quad: QuadSpec):
    """Nodes in the unit ball and associated quadrature weights."""
    if dim <= 3:
        x, w = roots_legendre(quad.nodes_per_axis)
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.ones(nodes.shape[0])
        for g in np.meshgrid(*([w] * dim), indexing="ij"):
            weights = weights * g.ravel()
        return nodes, weights
    rng = np.random.Generator(np.random.Philox(key=np.uint64(quad.seed)))
    nodes = np.empty((quad.mc_samples, dim))
    filled = 0
    while filled < quad.mc_samples:
        cand = rng.uniform(-1.0, 1.0, size=(quad.mc_samples, dim))
        keep = cand[np.sum(cand * cand, axis=1) < 1.0]
        take = min(keep.shape[0], quad.mc_samples - filled)
        nodes[filled : filled + take] = keep[:take]
        filled += take
    return nodes, np.ones(quad.mc_samples)


def mollified_dist2(
    body: ConvexBody, x: np.ndarray, delta: float, quad: QuadSpec | None = None
) -> MollifiedResult:
    """Convolve d2 with the rescaled bump kernel of width ``delta``.

    The quadrature is self-normalizing: every output is a convex
    combination of exact pointwise evaluations, so the classical
    mollifier bounds hold up to rounding, not up to quadrature error.
    """
    if delta <= 0.0:
        raise ValueError("mollification width must be positive")
    quad = quad or QuadSpec()
    x = np.asarray(x, dtype=float)
    dim = x.shape[0]
    nodes, base_w = _quad_nodes(dim, quad)
    kernel = _bump(np.sum(nodes * nodes, axis=1)) * base_w
    live = kernel > 0.0
    nodes_used = int(live.sum())
    mass = kernel[live].sum()
    low_confidence = nodes_used < 8 or mass <= 0.0
    if mass <= 0.0:
        zeros = np.zeros((dim, dim))
        return MollifiedResult(0.0, np.zeros(dim), zeros, True, nodes_used)
    pts = x - delta * nodes[live]
    kv = kernel[live]

    d2_vals = np.array([body.dist2(p) for p in pts])
    value = float(kv @ d2_vals / mass)
    grads = np.array([body.grad_dist2(p) for p in pts])
    gradient = kv @ grads / mass

    hess_sum = np.zeros((dim, dim))
    hess_mass = 0.0
    skipped = 0
    for weight, p in zip(kv, pts):
        res = body.hess_dist2(p)
        if res.defined:
            hess_sum += weight * res.matrix
            hess_mass += weight
        else:
            skipped += 1
    if hess_mass > 0.0:
        hessian = hess_sum / hess_mass
    else:
        hessian = np.zeros((dim, dim))
        low_confidence = True
    if skipped > 0.1 * nodes_used:
        low_confidence = True
    return MollifiedResult(value, gradient, hessian, low_confidence, nodes_used)
