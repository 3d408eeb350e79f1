"""Geometry of the unit-diameter domain, discretization grids and quadratures.

Cells live on a Cartesian lattice.  A box domain activates every lattice cell;
a ball domain activates the cells whose centers fall strictly inside the ball.
Fields are stored as flat arrays over the active cells.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

BOX_EDGE = 1.0 / math.sqrt(3.0)
BALL_RADIUS = 0.5


@dataclass(frozen=True)
class DomainConfig:
    shape: str = "box"
    resolution: int | tuple[int, int, int] = 8


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


# samples per axis used to integrate over cells cut by a curved boundary
CUT_SUBSAMPLES = 16
CUT_SUBBOXES = 8


def _corners_inside(lo, spacing):
    c = lo + np.array(list(itertools.product((0, 1), repeat=3))) * spacing
    return bool(np.all((c**2).sum(axis=1) <= BALL_RADIUS**2))


class Domain:
    """Convex domain of diameter 1 discretized by cubic (or brick) cells.

    Attributes
    ----------
    shape : "box" or "ball"
    lattice_shape : cells per axis of the bounding lattice
    spacing : cell edge length per axis
    centers : (N, 3) active cell centers
    boundary : (N,) True for cells with a face on the domain boundary
    neighbors : (N, 3, 2) active index of the -/+ face neighbor per axis, -1 if none
    """

    def __init__(self, shape, lattice_shape, spacing, origin, active):
        self.shape = shape
        self.lattice_shape = tuple(int(n) for n in lattice_shape)
        self.spacing = _frozen(np.asarray(spacing, dtype=float))
        self.origin = _frozen(np.asarray(origin, dtype=float))
        self.active = _frozen(active)

        index = np.full(self.lattice_shape, -1, dtype=np.int64)
        ijk = np.argwhere(active)
        index[tuple(ijk.T)] = np.arange(len(ijk))
        self.index = _frozen(index)
        self.ijk = _frozen(ijk)
        self.centers = _frozen(self.origin + (ijk + 0.5) * self.spacing)
        self.n_cells = len(ijk)
        self.cell_volume = float(np.prod(self.spacing))

        nbr = np.full((self.n_cells, 3, 2), -1, dtype=np.int64)
        for ax in range(3):
            for side, step in enumerate((-1, 1)):
                pos = ijk.copy()
                pos[:, ax] += step
                ok = (pos[:, ax] >= 0) & (pos[:, ax] < self.lattice_shape[ax])
                nbr[ok, ax, side] = index[tuple(pos[ok].T)]
        self.neighbors = _frozen(nbr)
        self.boundary = _frozen((nbr < 0).any(axis=(1, 2)))

        # inactive lattice cells borrow the value of their nearest active cell
        if active.all():
            nearest = index
        else:
            _, inds = ndimage.distance_transform_edt(~active, return_indices=True)
            nearest = index[tuple(inds)]
        self._nearest = nearest

    @property
    def h(self) -> float:
        return float(self.spacing.min())

    @property
    def volume(self) -> float:
        return self.cell_volume * self.n_cells

    @cached_property
    def integration_weights(self):
        """Per-cell share of the domain volume, for integrals over the true domain.

        Box cells tile the domain exactly.  For the ball, each lattice cell is
        subsampled 8^3 times; samples inside the ball are credited to the cell,
        or to its nearest active cell when the cell itself is inactive.
        """
        pts, w, cell = self.integration_points
        return _frozen(np.bincount(cell, w, minlength=self.n_cells))

    @cached_property
    def integration_points(self):
        """(points, weights, owning cell) of a volume rule finer than one point per cell.

        Cells lying wholly inside the domain get the 2^3 Gauss-Legendre rule.
        Cut cells are split into CUT_SUBBOXES^3 sub-boxes of CUT_SUBSAMPLES^3
        fractionally occupied subsamples; each sub-box contributes the centroid
        and volume of its samples inside the domain.  Plain midpoints on 4^3
        sub-boxes leave a ~4e-4 bias in chord-length integrals on a 12^3 ball.  Weights sum to ``integration_weights`` per cell.
        """
        g = np.array([-1.0, 1.0]) / (2 * math.sqrt(3))
        offs = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T * self.spacing
        if self.active.all():
            pts = (self.centers[:, None, :] + offs[None]).reshape(-1, 3)
            w = np.full(len(pts), self.cell_volume / 8)
            cell = np.repeat(np.arange(self.n_cells), 8)
            return _frozen(pts), _frozen(w), _frozen(cell)
        s, k = CUT_SUBSAMPLES, CUT_SUBBOXES
        n = self.lattice_shape
        u = (np.arange(s) + 0.5) / s
        sub = s // k
        pts, w, cell = [], [], []
        for ijk in np.ndindex(*n):
            lo = self.origin + np.array(ijk) * self.spacing
            X = lo[0] + u * self.spacing[0]
            Y = lo[1] + u * self.spacing[1]
            Z = lo[2] + u * self.spacing[2]
            r = np.sqrt(X[:, None, None] ** 2 + Y[None, :, None] ** 2 + Z[None, None, :] ** 2)
            # occupied fraction of each subsample from the signed distance to the sphere
            inside = np.clip((BALL_RADIUS - r) / (self.h / s) + 0.5, 0.0, 1.0)
            cnt = float(inside.sum())
            if cnt == 0:
                continue
            owner = int(self._nearest[ijk])
            if self.active[ijk] and _corners_inside(lo, self.spacing):
                pts.append(self.centers[owner] + offs)
                w.append(np.full(8, self.cell_volume / 8))
                cell.append(np.full(8, owner))
                continue
            for a, b, c in np.ndindex(k, k, k):
                m = inside[a * sub:(a + 1) * sub, b * sub:(b + 1) * sub, c * sub:(c + 1) * sub]
                nin = float(m.sum())
                if nin == 0:
                    continue
                xs = X[a * sub:(a + 1) * sub, None, None]
                ys = Y[None, b * sub:(b + 1) * sub, None]
                zs = Z[None, None, c * sub:(c + 1) * sub]
                cen = [float((np.broadcast_to(v, m.shape) * m).sum()) / nin for v in (xs, ys, zs)]
                pts.append(np.array([cen]))
                w.append(np.array([nin * self.cell_volume / s**3]))
                cell.append(np.array([owner]))
        pts = np.concatenate(pts)
        # partly occupied subsamples can pull a centroid a hair outside the sphere
        r = np.linalg.norm(pts, axis=1)
        pts *= np.minimum(1.0, BALL_RADIUS / np.maximum(r, 1e-300))[:, None]
        return (_frozen(pts), _frozen(np.concatenate(w)),
                _frozen(np.concatenate(cell).astype(np.int64)))

    def contains(self, x, tol=1e-12):
        """Closure membership test, with a relative slack ``tol``."""
        x = np.asarray(x, dtype=float)
        if self.shape == "ball":
            return np.linalg.norm(x, axis=-1) <= BALL_RADIUS * (1 + tol)
        return (np.abs(x) <= 0.5 * BOX_EDGE * (1 + tol)).all(axis=-1)

    def outward_normal(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.shape == "ball":
            return x / np.linalg.norm(x, axis=-1, keepdims=True)
        n = np.zeros_like(x)
        ax = np.argmax(np.abs(x), axis=-1)
        n[np.arange(len(x)), ax] = np.sign(x[np.arange(len(x)), ax])
        return n

    def interpolation(self, points):
        """Trilinear interpolation stencil at ``points`` (P, 3).

        Returns active-cell indices (P, 8) and non-negative weights (P, 8)
        summing to one.  Points are clamped to the lattice of cell centers.
        """
        points = np.asarray(points, dtype=float)
        n = np.asarray(self.lattice_shape)
        f = (points - self.origin) / self.spacing - 0.5
        f = np.clip(f, 0.0, n - 1)
        i0 = np.minimum(np.floor(f).astype(np.int64), np.maximum(n - 2, 0))
        t = f - i0
        i1 = np.minimum(i0 + 1, n - 1)
        idx = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
        w = np.empty(points.shape[:-1] + (8,))
        c = 0
        for dx in (0, 1):
            ix = i1[..., 0] if dx else i0[..., 0]
            wx = t[..., 0] if dx else 1 - t[..., 0]
            for dy in (0, 1):
                iy = i1[..., 1] if dy else i0[..., 1]
                wy = t[..., 1] if dy else 1 - t[..., 1]
                for dz in (0, 1):
                    iz = i1[..., 2] if dz else i0[..., 2]
                    wz = t[..., 2] if dz else 1 - t[..., 2]
                    idx[..., c] = self._nearest[ix, iy, iz]
                    w[..., c] = wx * wy * wz
                    c += 1
        return idx, w

    def interpolate(self, field, points):
        idx, w = self.interpolation(points)
        return (np.asarray(field)[idx] * w).sum(axis=-1)

    @cached_property
    def interior_faces(self):
        """Per axis, (left, right) active index pairs sharing a face."""
        faces = []
        for ax in range(3):
            right = self.neighbors[:, ax, 1]
            left = np.nonzero(right >= 0)[0]
            faces.append((left, right[left]))
        return faces

    @cached_property
    def _gradient_stencil(self):
        """Per axis: (lo index, hi index, coordinate span), a missing neighbor replaced by the cell."""
        own = np.arange(self.n_cells)
        out = []
        for ax in range(3):
            lo, hi = self.neighbors[:, ax, 0], self.neighbors[:, ax, 1]
            lo = np.where(lo >= 0, lo, own)
            hi = np.where(hi >= 0, hi, own)
            # the difference of the actual center coordinates keeps linear fields exact in floating point
            span = self.centers[hi, ax] - self.centers[lo, ax]
            out.append((lo, hi, span))
        return out

    def gradient(self, f):
        """Cell-centered gradient: centered where both neighbors exist, one-sided otherwise."""
        f = np.asarray(f, dtype=float)
        g = np.zeros(f.shape + (3,))
        for ax, (lo, hi, span) in enumerate(self._gradient_stencil):
            g[..., ax] = np.where(span > 0, (f[hi] - f[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return g

    def divergence(self, v):
        v = np.asarray(v, dtype=float)
        return sum(self.gradient(v[:, ax])[:, ax] for ax in range(3))


def build_domain(config: DomainConfig) -> Domain:
    res = config.resolution
    if isinstance(res, (int, np.integer)):
        if res < 2:
            raise ValueError(f"resolution must be >= 2 cells per axis, got {res}")
        n = (int(res),) * 3
    else:
        n = tuple(int(r) for r in res)
        if len(n) != 3 or min(n) < 1 or max(n) < 2:
            raise ValueError(f"resolution must be 3 positive ints with at least one >= 2, got {res}")
    if config.shape == "box":
        spacing = BOX_EDGE / np.asarray(n)
        origin = np.full(3, -0.5 * BOX_EDGE)
        active = np.ones(n, dtype=bool)
    elif config.shape == "ball":
        spacing = 2 * BALL_RADIUS / np.asarray(n)
        origin = np.full(3, -BALL_RADIUS)
        grids = np.meshgrid(*[origin[a] + (np.arange(n[a]) + 0.5) * spacing[a] for a in range(3)],
                            indexing="ij")
        r2 = sum(g**2 for g in grids)
        active = r2 < BALL_RADIUS**2
        if not active.any():
            raise ValueError("ball resolution too coarse: no cell center inside")
    else:
        raise ValueError(f"unknown domain shape {config.shape!r}; expected 'box' or 'ball'")
    return Domain(config.shape, n, spacing, origin, active)


def exit_distance(domain: Domain, x, q):
    """Backward ray parameter alpha0 <= 0 at which x + alpha0*q leaves the domain.

    Vectorized over leading dimensions of ``x`` and ``q``.
    """
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    if not np.all(domain.contains(x)):
        raise ValueError("exit_distance: point outside the closed domain")
    x, q = np.broadcast_arrays(x, q)
    if domain.shape == "ball":
        xq = (x * q).sum(-1)
        disc = np.maximum(xq**2 - ((x * x).sum(-1) - BALL_RADIUS**2), 0.0)
        alpha = -xq - np.sqrt(disc)
    else:
        half = 0.5 * BOX_EDGE
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            lo = np.where(q > 0, (-half - x) / q, np.where(q < 0, (half - x) / q, -np.inf))
        alpha = lo.max(axis=-1)
    return np.minimum(alpha, 0.0)


@dataclass(frozen=True)
class BoundarySamples:
    """Points x0 on the boundary with the inward direction cone S2_-(x0)."""

    points: np.ndarray
    normals: np.ndarray
    inward: np.ndarray  # (P, D) bool over quadrature directions


def boundary_set_Xi(domain: Domain, quadrature: "AngularQuadrature") -> BoundarySamples:
    """Sample the set of (boundary point, inward direction) pairs.

    Box: outer face centers of boundary cells.  Ball: radial projection of
    boundary-cell centers onto the sphere.
    """
    pts = []
    if domain.shape == "ball":
        c = domain.centers[domain.boundary]
        pts = BALL_RADIUS * c / np.linalg.norm(c, axis=1, keepdims=True)
    else:
        half = 0.5 * BOX_EDGE
        out = []
        for ax in range(3):
            for side, sgn in ((0, -1.0), (1, 1.0)):
                sel = domain.neighbors[:, ax, side] < 0
                p = domain.centers[sel].copy()
                p[:, ax] = sgn * half
                out.append(p)
        pts = np.concatenate(out)
    normals = domain.outward_normal(pts)
    inward = (normals @ quadrature.nodes.T) < 0.0
    return BoundarySamples(_frozen(pts), _frozen(normals), _frozen(inward))


@dataclass(frozen=True)
class AngularQuadrature:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or len(w) != len(nodes):
            raise ValueError("quadrature nodes must be (D, 3) with D weights")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(w.sum() - 4 * math.pi) > 1e-12 * 4 * math.pi:
            raise ValueError(f"quadrature weights sum to {w.sum()}, expected 4*pi")
        if np.max(np.abs(np.linalg.norm(nodes, axis=1) - 1)) > 1e-12:
            raise ValueError("quadrature nodes must be unit vectors")
        if np.max(np.abs(w @ nodes)) > 1e-10:
            raise ValueError("quadrature first moment does not vanish")
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "weights", _frozen(w))

    def __len__(self):
        return len(self.weights)


def _signed_perms(v):
    out = set()
    for perm in itertools.permutations(v):
        for signs in itertools.product((1, -1), repeat=3):
            out.add(tuple(s * p for s, p in zip(signs, perm)))
    return sorted(out)


def angular_quadrature(order: int) -> AngularQuadrature:
    """Antipodally symmetric quadrature on the unit sphere.

    order 1, 2, 3 give the 6-, 14- and 26-point Lebedev sets; higher orders a
    Gauss-Legendre (in cos theta) times uniform (in phi) product rule with
    ``order`` polar and 2*``order`` azimuthal nodes.
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    four_pi = 4 * math.pi
    s2, s3 = 1 / math.sqrt(2), 1 / math.sqrt(3)
    axes = _signed_perms((1.0, 0.0, 0.0))
    faces = _signed_perms((s2, s2, 0.0))
    corners = _signed_perms((s3, s3, s3))
    if order == 1:
        sets = [(axes, 1 / 6)]
    elif order == 2:
        sets = [(axes, 1 / 15), (corners, 3 / 40)]
    elif order == 3:
        sets = [(axes, 1 / 21), (faces, 4 / 105), (corners, 9 / 280)]
    else:
        mu, wmu = np.polynomial.legendre.leggauss(order)
        nphi = 2 * order
        phi = (np.arange(nphi) + 0.5) * 2 * math.pi / nphi
        st = np.sqrt(1 - mu**2)
        nodes = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                          np.outer(mu, np.ones(nphi))], axis=-1).reshape(-1, 3)
        w = np.outer(wmu, np.full(nphi, 2 * math.pi / nphi)).ravel()
        w *= four_pi / w.sum()
        return AngularQuadrature(nodes, w)
    nodes = np.array([p for pts, _ in sets for p in pts], dtype=float)
    w = np.array([wt for pts, wt in sets for _ in pts]) * four_pi
    return AngularQuadrature(nodes, w)


@dataclass(frozen=True)
class MassGrid:
    """Droplet-mass bins.  ``edges`` start at 0 and end at ``M_bar1``."""

    edges: np.ndarray
    m_a: float
    m_A: float
    M_prime: float
    M_bar1: float
    M_cut: float

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or len(e) < 3:
            raise ValueError("mass grid needs at least two bins")
        if np.any(np.diff(e) <= 0):
            raise ValueError("mass bin widths must be strictly positive")
        if e[0] != 0.0:
            raise ValueError("mass grid must start at 0")
        if not (0 < self.m_a < self.m_A <= self.M_prime <= self.M_bar1):
            raise ValueError("need 0 < m_a < m_A <= M' <= M_bar1")
        if not self.M_cut > self.m_a:
            raise ValueError("coagulation cutoff M must exceed m_a")
        if not np.isclose(e[-1], self.M_bar1):
            raise ValueError("mass grid must end at M_bar1")
        if not (e[1:] <= 0.5 * self.m_a * (1 + 1e-12)).any():
            raise ValueError("mass grid needs a bin entirely below m_a/2")
        object.__setattr__(self, "edges", _frozen(e))

    @cached_property
    def centers(self):
        return _frozen(0.5 * (self.edges[1:] + self.edges[:-1]))

    @cached_property
    def widths(self):
        return _frozen(np.diff(self.edges))

    @property
    def n_bins(self):
        return len(self.edges) - 1

    @cached_property
    def allowed(self):
        """Bins lying inside ]m_a/2, M_bar1[, excluding the top guard bin."""
        ok = (self.edges[:-1] >= 0.5 * self.m_a * (1 - 1e-12))
        ok[-1] = False
        return _frozen(ok)

    def integrate(self, f):
        """Bin quadrature of f(m) over m; ``f`` has the bin axis first."""
        f = np.asarray(f, dtype=float)
        return np.tensordot(self.widths, f, axes=(0, 0))

    @classmethod
    def geometric(cls, n_bins, m_a, m_A, M_prime, M_bar1, M_cut):
        """Two bins below m_a/2, then geometric spacing from m_a/2 to M_bar1."""
        if n_bins < 4:
            raise ValueError("geometric mass grid needs >= 4 bins")
        upper = np.geomspace(0.5 * m_a, M_bar1, n_bins - 1)
        edges = np.concatenate([[0.0, 0.25 * m_a], upper])
        edges[-1] = M_bar1
        return cls(edges, m_a, m_A, M_prime, M_bar1, M_cut)

    @classmethod
    def uniform(cls, dm, n_bins, m_a, m_A, M_prime, M_cut):
        """Bins [(k-1/2)dm, (k+1/2)dm] centered on k*dm, after a first bin [0, dm/2]."""
        edges = np.concatenate([[0.0], dm * (np.arange(n_bins) + 0.5)])
        return cls(edges, m_a, m_A, M_prime, float(edges[-1]), M_cut)


@dataclass(frozen=True)
class WavelengthBands:
    """Wavelength bands with per-band Gauss-Legendre nodes in log(lambda).

    A single band with edges (0, inf) is the gray mode, integrated analytically.
    """

    edges: np.ndarray
    nodes_per_band: int = 16

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if len(e) < 2 or np.any(np.diff(e) <= 0) or e[0] < 0:
            raise ValueError("band edges must be strictly increasing and non-negative")
        if self.nodes_per_band < 1:
            raise ValueError("nodes_per_band must be positive")
        object.__setattr__(self, "edges", _frozen(e))

    @property
    def n_bands(self):
        return len(self.edges) - 1

    @property
    def gray(self):
        return self.n_bands == 1 and self.edges[0] == 0 and math.isinf(self.edges[-1])

    @cached_property
    def quadrature(self):
        """Per band (nodes, weights) for the integral over lambda."""
        if self.gray:
            return [(np.empty(0), np.empty(0))]
        x, w = np.polynomial.legendre.leggauss(self.nodes_per_band)
        out = []
        for lo, hi in zip(self.edges[:-1], self.edges[1:]):
            if lo <= 0 or math.isinf(hi):
                raise ValueError("finite band quadrature needs 0 < edges < inf")
            a, b = math.log(lo), math.log(hi)
            s = 0.5 * (b - a) * x + 0.5 * (a + b)
            lam = np.exp(s)
            out.append((_frozen(lam), _frozen(0.5 * (b - a) * w * lam)))
        return out
