"""Stationary radiative transfer solved as a fixed point of its integral form.

For every cell x and ordinate q the intensity satisfies

    I(x, q) = I0(x + a0 q, q) exp(-tau(x, a0, q))
              + int_{a0}^0 J(x + a q, q) exp(-tau(x, a, q)) da

with the source J made of three scattering terms and Planck emission.  Along
each ray the source is sampled uniformly on [a0, 0], interpolated trilinearly;
the attenuation kernel is integrated exactly on every segment for a piecewise
constant extinction.  The resulting discrete operator keeps the continuous
contraction factor 1 - eps_b exactly, which is what the solver asserts.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .domain import AngularQuadrature, Domain, MassGrid, WavelengthBands, exit_distance

FOUR_PI = 4.0 * math.pi


class HypothesisError(ValueError):
    """An admissibility inequality on the optical data failed."""

    def __init__(self, name, lhs, rhs, message=""):
        self.name, self.lhs, self.rhs = name, lhs, rhs
        super().__init__(f"hypothesis '{name}' failed: lhs={lhs!r} rhs={rhs!r}. {message}".strip())


class RadiationSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------- Planck

@dataclass(frozen=True)
class PlanckConstants:
    c: float = 2.99792458e8
    h: float = 6.62607015e-34
    k: float = 1.380649e-23

    @classmethod
    def nondimensional(cls):
        """c*h/k = 1 and 2*pi*c^2*h = 1."""
        return cls(c=1.0, h=1.0 / (2 * math.pi), k=1.0 / (2 * math.pi))

    @property
    def stefan_boltzmann(self):
        return 2 * math.pi**5 * self.k**4 / (15 * self.c**2 * self.h**3)


def planck(lam, T, constants: PlanckConstants = PlanckConstants()):
    """Hemispherical spectral emissive power B[lam, T] = 2 pi c^2 h lam^-5 / (exp(ch/(k lam T)) - 1)."""
    lam = np.asarray(lam, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("planck: wavelength must be positive")
    if np.any(T <= 0):
        raise ValueError("planck: temperature must be positive")
    c, h, k = constants.c, constants.h, constants.k
    x = c * h / (k * lam * T)
    with np.errstate(over="ignore"):
        return 2 * math.pi * c**2 * h * lam**-5.0 / np.expm1(x)


def band_planck(bands: WavelengthBands, T, constants: PlanckConstants = PlanckConstants()):
    """Band-integrated Planck function, shape (n_bands,) + T.shape."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("band_planck: temperature must be positive")
    if bands.gray:
        return (constants.stefan_boltzmann * T**4)[None]
    out = np.empty((bands.n_bands,) + T.shape)
    for b, (lam, w) in enumerate(bands.quadrature):
        out[b] = np.tensordot(w, planck(lam[(...,) + (None,) * T.ndim], T, constants), axes=(0, 0))
    return out


# ---------------------------------------------------------------- optics

def phase_kernel(kind, g, cosines):
    cosines = np.asarray(cosines, dtype=float)
    if kind == "isotropic":
        return np.ones_like(cosines)
    if kind == "hg":
        if not -1 < g < 1:
            raise ValueError("Henyey-Greenstein parameter must lie in ]-1, 1[")
        return (1 - g * g) / (1 + g * g - 2 * g * cosines) ** 1.5
    raise ValueError(f"unknown phase function {kind!r}")


def normalized_phase_matrix(quadrature: AngularQuadrature, kind="isotropic", g=0.0, tol=1e-14):
    """Symmetric D x D matrix P with (1/4pi) sum_j' w_j' P[j, j'] = 1 for every j.

    The kernel P(q_j . q_j') is rescaled by d_j d_j' (symmetric Sinkhorn balancing).
    """
    q, w = quadrature.nodes, quadrature.weights
    K = phase_kernel(kind, g, np.clip(q @ q.T, -1, 1))
    if kind == "isotropic":
        return K
    d = np.ones(len(w))
    for _ in range(10000):
        s = (K @ (w * d)) * d / FOUR_PI
        if np.max(np.abs(s - 1)) < tol:
            break
        d = d / np.sqrt(s)
    return d[:, None] * K * d[None, :]


@dataclass(frozen=True)
class OpticalCoefficients:
    """Per-band absorption (a) and scattering (r) coefficients.

    a1, r1: dry air; a2, r2: vapor; a3, r3: droplets, shape (n_bands, n_bins).
    ``phase`` is one (kind, g) pair per species, shared by all bands.
    """

    a1: np.ndarray
    r1: np.ndarray
    a2: np.ndarray
    r2: np.ndarray
    a3: np.ndarray
    r3: np.ndarray
    phase: tuple = (("isotropic", 0.0), ("isotropic", 0.0), ("isotropic", 0.0))

    def __post_init__(self):
        for name in ("a1", "r1", "a2", "r2"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, v)
        nb = len(self.a1)
        for name in ("a3", "r3"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim == 1:
                v = v[None, :]
            object.__setattr__(self, name, v)
        for name in ("a1", "r1", "a2", "r2", "a3", "r3"):
            v = getattr(self, name)
            if len(v) != nb:
                raise ValueError(f"optical coefficient {name} has {len(v)} bands, expected {nb}")
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"optical coefficient {name} must be finite and non-negative")
        object.__setattr__(self, "phase", tuple((str(k), float(g)) for k, g in self.phase))

    @property
    def n_bands(self):
        return len(self.a1)

    @classmethod
    def uniform(cls, n_bands, n_bins, a1=0.0, r1=0.0, a2=0.0, r2=0.0, a3=0.0, r3=0.0, phase=None):
        full = lambda v: np.full(n_bands, float(v))
        bins = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n_bands, n_bins)).copy()
        return cls(full(a1), full(r1), full(a2), full(r2), bins(a3), bins(r3),
                   phase or (("isotropic", 0.0),) * 3)

    def phase_matrices(self, quadrature):
        return [normalized_phase_matrix(quadrature, k, g) for k, g in self.phase]


@dataclass(frozen=True)
class Medium:
    """Radiatively active densities at one time level: rho, pi (N,), sigma (bins, N)."""

    rho: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray

    def check(self):
        for name in ("rho", "pi", "sigma"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"negative density in {name}")


def _species_columns(medium: Medium, coeffs: OpticalCoefficients, mass: MassGrid, band):
    """(absorbing, scattering dry, scattering vapor, scattering droplets) per cell."""
    wa3 = coeffs.a3[band] * mass.widths
    wr3 = coeffs.r3[band] * mass.widths
    absorb = coeffs.a1[band] * medium.rho + coeffs.a2[band] * medium.pi + wa3 @ medium.sigma
    return (absorb, coeffs.r1[band] * medium.rho, coeffs.r2[band] * medium.pi, wr3 @ medium.sigma)


def extinction_field(medium: Medium, coeffs: OpticalCoefficients, mass: MassGrid, band):
    """b = (a1+r1) rho + (a2+r2) pi + int (a3+r3) sigma dm, per cell."""
    medium.check()
    return sum(_species_columns(medium, coeffs, mass, band))


# ---------------------------------------------------------------- rays

def _ray_samples(x, q, alpha, step):
    """Uniform samples x + a q for a on [alpha, 0]; same count for every ray."""
    alpha = np.asarray(alpha, dtype=float)
    amax = float(np.max(-alpha)) if alpha.size else 0.0
    n = max(2, int(math.ceil(amax / step - 1e-12)) + 1)
    s = np.linspace(1.0, 0.0, n)  # from the upstream end to x
    a = alpha[..., None] * s
    pts = x[..., None, :] + a[..., None] * q[..., None, :]
    return pts, -alpha / (n - 1)


def optical_depth(domain: Domain, b, x, alpha, q, step=None):
    """Trapezoid line integral of the cell field b along x + a q, a in [alpha, 0]."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    x, q = np.broadcast_arrays(x, q)
    alpha = np.broadcast_to(alpha, x.shape[:-1])
    if np.any(alpha > 0):
        raise ValueError("optical_depth: alpha must be <= 0")
    a0 = exit_distance(domain, x, q)
    if np.any(alpha < a0 - 1e-12):
        raise ValueError("optical_depth: alpha lies beyond the exit point")
    step = 0.5 * domain.h if step is None else step
    pts, da = _ray_samples(x, q, alpha, step)
    vals = domain.interpolate(b, pts)
    out = da * (vals.sum(-1) - 0.5 * (vals[..., 0] + vals[..., -1]))
    return out


def chord_depth_sup(domain: Domain, quadrature: AngularQuadrature, b, step=None):
    """sup over x, q of the full backward optical depth.

    The backward depth from x is largest when x sits at the forward exit
    point of its chord, so chords through every cell center and through the
    origin are integrated end to end.
    """
    step = 0.5 * domain.h if step is None else step
    pts = np.vstack([domain.centers, np.zeros((1, 3))])
    best = 0.0
    for qj in quadrature.nodes:
        q = np.broadcast_to(qj, pts.shape)
        fwd = -exit_distance(domain, pts, -q)
        xf = pts + fwd[:, None] * q
        # clip tiny round-off outside the closure
        xf = np.where(domain.contains(xf)[:, None], xf, pts + (fwd[:, None] * (1 - 1e-13)) * q)
        a0 = exit_distance(domain, xf, q)
        best = max(best, float(optical_depth(domain, b, xf, a0, q, step).max()))
    return best


# ---------------------------------------------------------------- boundary data

@dataclass(frozen=True)
class BoundaryIntensity:
    """Inflow intensity I0 on the set of boundary points with inward directions.

    ``values`` is either one constant per band or a callable
    ``f(band, points, direction) -> array`` evaluated at exit points.
    """

    values: object

    def evaluate(self, band, points, direction):
        if callable(self.values):
            out = np.asarray(self.values(band, points, direction), dtype=float)
            out = np.broadcast_to(out, points.shape[:-1])
        else:
            out = np.full(points.shape[:-1], float(np.atleast_1d(self.values)[band]))
        if np.any(out < 0) or not np.all(np.isfinite(out)):
            raise ValueError("boundary intensity must be finite and non-negative")
        return out

    def sup(self, band, points, directions):
        return max(float(self.evaluate(band, points[i:i + 1], directions[i]).max())
                   for i in range(len(points))) if len(points) else 0.0

    @classmethod
    def constant(cls, per_band):
        return cls(tuple(float(v) for v in np.atleast_1d(per_band)))

    @classmethod
    def blackbody(cls, bands, T_wall, constants=PlanckConstants()):
        return cls.constant(band_planck(bands, np.asarray(float(T_wall)), constants))


# ---------------------------------------------------------------- hypotheses

@dataclass
class HypothesisReport:
    phase_normalization_error: float
    r3_sigma_sup: float
    r12_sup: float
    eps1: float
    K_b: float
    sup_P3: float
    kb_condition: float
    eps2: float
    passed: bool = True
    failures: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def ok(self):
        return self.passed

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def validate_hypotheses(medium0: Medium, coeffs: OpticalCoefficients, domain: Domain,
                        quadrature: AngularQuadrature, mass: MassGrid, eps1=None, eps2=1e-6,
                        line_step=None, raise_on_failure=True) -> HypothesisReport:
    """Check the admissibility inequalities on the initial data; returns every computed value."""
    medium0.check()
    mats = coeffs.phase_matrices(quadrature)
    w = quadrature.weights
    norm_err = max(float(np.max(np.abs(P @ w / FOUR_PI - 1))) for P in mats)
    supP = [float(P.max()) for P in mats]

    r3s = max(float((coeffs.r3[b] * mass.widths @ medium0.sigma).max(initial=0.0))
              for b in range(coeffs.n_bands))
    r12 = max(float((coeffs.r1[b] * supP[0] * medium0.rho + coeffs.r2[b] * supP[1] * medium0.pi).max())
              for b in range(coeffs.n_bands))
    if eps1 is None:
        eps1 = max(2 * r12, 1e-12)
    K_b = 0.0
    for b in range(coeffs.n_bands):
        b0 = 2 * extinction_field(medium0, coeffs, mass, b) + eps2
        K_b = max(K_b, 1 - math.exp(-2 * chord_depth_sup(domain, quadrature, b0, line_step)))
    kb_cond = math.sqrt(K_b * supP[2]) + eps1 / 2

    checks = [
        ("phase normalization", norm_err, 1e-6, norm_err <= 1e-6),
        ("sup int r3 sigma0 dm <= 4", r3s, 4.0, r3s <= 4.0),
        ("sup (r1 P1 rho0 + r2 P2 pi0) <= eps1/2", r12, eps1 / 2, r12 <= eps1 / 2),
        ("(K_b sup P3)^(1/2) + eps1/2 < 1", kb_cond, 1.0, kb_cond < 1.0),
    ]
    failures = [(n, l, r) for n, l, r, ok in checks if not ok]
    rep = HypothesisReport(norm_err, r3s, r12, float(eps1), K_b, supP[2], kb_cond, eps2,
                           passed=not failures, failures=failures,
                           checks=[{"name": n, "lhs": l, "rhs": r, "ok": ok} for n, l, r, ok in checks])
    if failures and raise_on_failure:
        raise HypothesisError(*failures[0])
    return rep


# ---------------------------------------------------------------- transfer operator

class RadiationModel:
    """Discrete transfer problem on fixed grids; state-dependent parts built per solve."""

    def __init__(self, domain: Domain, quadrature: AngularQuadrature, bands: WavelengthBands,
                 mass: MassGrid, coeffs: OpticalCoefficients, boundary: BoundaryIntensity,
                 constants: PlanckConstants = PlanckConstants(), line_step=None, threads=1):
        if coeffs.n_bands != bands.n_bands:
            raise ValueError("optical coefficients and wavelength bands disagree on band count")
        if coeffs.a3.shape[1] != mass.n_bins:
            raise ValueError("droplet optical coefficients must be sampled on the mass grid")
        self.domain, self.quadrature, self.bands, self.mass = domain, quadrature, bands, mass
        self.coeffs, self.boundary, self.constants = coeffs, boundary, constants
        self.line_step = 0.5 * domain.h if line_step is None else float(line_step)
        self.threads = max(1, int(threads))
        self.phase = coeffs.phase_matrices(quadrature)
        # (1/4pi) P_jj' w_j', applied to I of shape (D, N)
        self._scatter = [P * quadrature.weights[None, :] / FOUR_PI for P in self.phase]
        self._geom = {}
        self._cache_geometry = domain.n_cells * len(quadrature) * 8 * int(2 / self.line_step) < 2e7

    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def geometry(self, j):
        """Ray samples for direction j: exit params, stencil, step per cell."""
        if j in self._geom:
            return self._geom[j]
        d = self.domain
        q = np.broadcast_to(self.quadrature.nodes[j], d.centers.shape)
        a0 = exit_distance(d, d.centers, q)
        pts, da = _ray_samples(d.centers, q, a0, self.line_step)
        idx, w = d.interpolation(pts)
        exit_pts = d.centers + a0[:, None] * q
        g = (a0, idx, w, da, exit_pts)
        if self._cache_geometry:
            self._geom[j] = g
        return g

    def build(self, medium: Medium, T, T_bounds=None):
        return TransferOperator(self, medium, np.asarray(T, dtype=float), T_bounds)


class TransferOperator:
    """G(I) = boundary + A_j @ J_j(I) for one frozen (medium, T)."""

    def __init__(self, model: RadiationModel, medium: Medium, T, T_bounds=None):
        medium.check()
        if np.any(T <= 0):
            raise ValueError("temperature must be positive")
        self.model, self.medium, self.T = model, medium, T
        nb, nd, n = model.bands.n_bands, len(model.quadrature), model.domain.n_cells
        self.shape = (nb, nd, n)
        self.b = np.empty((nb, n))
        self.cols = []
        self.emission = np.empty((nb, n))
        Bcell = band_planck(model.bands, T, model.constants)
        for band in range(nb):
            absorb, s1, s2, s3 = _species_columns(medium, model.coeffs, model.mass, band)
            self.b[band] = absorb + s1 + s2 + s3
            self.cols.append((s1, s2, s3))
            self.emission[band] = absorb * Bcell[band]

        lo, hi = (float(T.min()), float(T.max())) if T_bounds is None else T_bounds
        self.B_sup = band_planck(model.bands, np.asarray(1.5 * hi), model.constants)

        def per_dir(j):
            a0, idx, w, da, exit_pts = model.geometry(j)
            out = []
            for band in range(nb):
                bs = (self.b[band][idx] * w).sum(-1)  # (N, ns)
                bbar = 0.5 * (bs[:, 1:] + bs[:, :-1])
                seg = bbar * da[:, None]
                # depth from the downstream end of each segment to x
                tail = np.concatenate([np.cumsum(seg[:, ::-1], axis=1)[:, ::-1][:, 1:],
                                       np.zeros((n, 1))], axis=1)
                tau0 = tail[:, 0] + seg[:, 0]
                with np.errstate(invalid="ignore", divide="ignore"):
                    frac = np.where(seg > 1e-12, -np.expm1(-seg) / np.where(seg > 0, seg, 1.0),
                                    1 - 0.5 * seg)
                E = np.exp(-tail) * da[:, None] * frac
                om = np.zeros(bs.shape)
                om[:, :-1] += 0.5 * E
                om[:, 1:] += 0.5 * E
                vals = (om[..., None] * w).ravel()
                rows = np.repeat(np.arange(n), idx.shape[1] * idx.shape[2])
                A = sparse.csr_matrix((vals, (rows, idx.ravel())), shape=(n, n))
                A.sum_duplicates()
                bnd = model.boundary.evaluate(band, exit_pts, model.quadrature.nodes[j])
                out.append((A, bnd * np.exp(-tau0), tau0))
            return out

        res = model._map(per_dir, range(nd))
        self.A = [[res[j][band][0] for j in range(nd)] for band in range(nb)]
        self.boundary_term = np.array([[res[j][band][1] for j in range(nd)] for band in range(nb)])
        self.tau0 = np.array([[res[j][band][2] for j in range(nd)] for band in range(nb)])
        self.eps_b = float(np.exp(-self.tau0.max())) if self.tau0.size else 1.0
        self.I0_sup = np.array([
            max(float(model.boundary.evaluate(band, model.geometry(j)[4], model.quadrature.nodes[j]).max())
                for j in range(nd)) for band in range(nb)])

    def source(self, I):
        """J(I) per (band, direction, cell)."""
        J = np.empty(self.shape)
        for band in range(self.shape[0]):
            s1, s2, s3 = self.cols[band]
            Ib = I[band]
            J[band] = (s1 * (self.model._scatter[0] @ Ib) + s2 * (self.model._scatter[1] @ Ib)
                       + s3 * (self.model._scatter[2] @ Ib) + self.emission[band])
        return J

    def apply(self, I):
        J = self.source(I)
        nb, nd, _ = self.shape

        def per_dir(j):
            return [self.A[band][j] @ J[band, j] for band in range(nb)]

        res = self.model._map(per_dir, range(nd))
        G = self.boundary_term.copy()
        for j in range(nd):
            for band in range(nb):
                G[band, j] += res[j][band]
        return G

    def dense(self, band=0):
        """Affine map I -> c + M I for one band as dense arrays (small problems only)."""
        nd, n = self.shape[1], self.shape[2]
        s1, s2, s3 = self.cols[band]
        M = np.zeros((nd * n, nd * n))
        c = np.empty(nd * n)
        Sc = self.model._scatter
        for j in range(nd):
            A = self.A[band][j].toarray()
            c[j * n:(j + 1) * n] = self.boundary_term[band, j] + A @ self.emission[band]
            for jp in range(nd):
                coef = s1 * Sc[0][j, jp] + s2 * Sc[1][j, jp] + s3 * Sc[2][j, jp]
                M[j * n:(j + 1) * n, jp * n:(jp + 1) * n] = A * coef[None, :]
        return c, M


@dataclass
class RadiationDiagnostics:
    eps_b: float
    K_b: float | None
    eps1: float | None
    sup_bound: float
    sup_I: float
    ratios: list
    sweeps: int
    converged: bool

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def picard_sweep(op: TransferOperator, I):
    """One Jacobi-style application of the integral operator."""
    return op.apply(np.asarray(I, dtype=float))


def solve_radiation(op: TransferOperator, tol=1e-8, max_sweeps=200, I_init=None,
                    hypotheses: HypothesisReport | None = None, ratio_slack=0.01):
    """Picard iteration to a relative sup-norm tolerance.

    Stopping uses the a-posteriori bound kappa/(1-kappa) |I_n - I_n-1| with
    kappa = 1 - eps_b, so the reported field is within ``tol`` of the fixed point.
    """
    if hypotheses is not None and not hypotheses.passed:
        n, l, r = hypotheses.failures[0]
        raise HypothesisError(n, l, r)
    kappa = 1.0 - op.eps_b
    I = np.zeros(op.shape) if I_init is None else np.array(I_init, dtype=float)
    ratios = []
    prev = None
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        new = op.apply(I)
        diff = float(np.max(np.abs(new - I)))
        scale = float(np.max(np.abs(new)))
        if prev is not None and prev > 1e-300 and diff > 64 * np.finfo(float).eps * scale:
            ratio = diff / prev
            ratios.append(ratio)
            if ratio > kappa + ratio_slack:
                raise RadiationSolveError(
                    f"Picard contraction ratio {ratio:.6g} exceeds 1 - eps_b + {ratio_slack} = "
                    f"{kappa + ratio_slack:.6g}")
        I, prev = new, diff
        err = diff * kappa / (1 - kappa) if kappa < 1 else math.inf
        if err <= tol * scale or diff == 0.0:
            converged = True
            break
    if not converged:
        raise RadiationSolveError(
            f"radiation did not converge in {max_sweeps} sweeps; last ratio "
            f"{ratios[-1] if ratios else float('nan'):.6g}")
    if np.any(I < 0):
        raise RadiationSolveError("negative intensity produced")
    bound = (float((op.I0_sup + op.B_sup).max())) / op.eps_b
    diag = RadiationDiagnostics(
        eps_b=op.eps_b,
        K_b=None if hypotheses is None else hypotheses.K_b,
        eps1=None if hypotheses is None else hypotheses.eps1,
        sup_bound=bound, sup_I=float(I.max(initial=0.0)), ratios=ratios, sweeps=sweeps,
        converged=converged)
    sup_per_band = I.reshape(op.shape[0], -1).max(axis=1)
    limit = (op.I0_sup + op.B_sup) / op.eps_b
    if np.any(sup_per_band > limit * (1 + 1e-12)):
        raise RadiationSolveError("sup bound on the intensity violated")
    return I, diag


# ---------------------------------------------------------------- flux

def radiative_flux(I, quadrature: AngularQuadrature):
    """E(x) = sum over bands and ordinates of w I q, shape (N, 3)."""
    I = np.asarray(I, dtype=float)
    return np.einsum("bdn,d,dk->nk", I, quadrature.weights, quadrature.nodes)


def flux_divergence(op: TransferOperator, I):
    """div E through the transfer identity: sum_bands sum_j w (J - b I)."""
    I = np.asarray(I, dtype=float)
    J = op.source(I)
    w = op.model.quadrature.weights
    return np.einsum("d,bdn->n", w, J - op.b[:, None, :] * I)


def flux_divergence_fd(domain: Domain, I, quadrature):
    """Finite-difference divergence of the radiative flux (test oracle)."""
    return domain.divergence(radiative_flux(I, quadrature))


# ---------------------------------------------------------------- diagnostics

def geometric_functionals(domain: Domain, quadrature: AngularQuadrature, step=None):
    """Cell weight vectors (g_lhs, g_rhs) with lhs = g_lhs @ phi and rhs = g_rhs @ phi.

    lhs = (1/4pi) int_Omega int_S2 int_alpha0^0 phi(x + a q) da dq dx and
    rhs = int_Omega phi dx, with phi the trilinear interpolant of a cell field.
    The x-integrals use the domain's sub-cell integration points, so both
    sides see the true domain rather than one point per cell.
    """
    step = 0.5 * domain.h if step is None else step
    x0, w0, _ = domain.integration_points
    n = domain.n_cells
    g_lhs = np.zeros(n)
    for qj, wj in zip(quadrature.nodes, quadrature.weights):
        q = np.broadcast_to(qj, x0.shape)
        a0 = exit_distance(domain, x0, q)
        pts, da = _ray_samples(x0, q, a0, step)
        # trapezoid weights along each ray, times the volume weight of its start point
        tw = np.ones(pts.shape[1])
        tw[[0, -1]] = 0.5
        coef = (wj * w0 * da)[:, None] * tw[None, :]
        idx, w = domain.interpolation(pts)
        g_lhs += np.bincount(idx.ravel(), (w * coef[..., None]).ravel(), minlength=n)
    g_lhs /= FOUR_PI
    idx, w = domain.interpolation(x0)
    g_rhs = np.bincount(idx.ravel(), (w * w0[:, None]).ravel(), minlength=n)
    return g_lhs, g_rhs


def geometric_inequality_check(domain: Domain, quadrature: AngularQuadrature, phi, step=None,
                               slack=0.05, functionals=None):
    """Both sides of (1/4pi) int int int phi(x + a q) da dq dx <= int phi dx.

    ``phi`` may carry extra trailing axes for several fields at once;
    ``functionals`` reuses the output of :func:`geometric_functionals`.
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0):
        raise ValueError("geometric_inequality_check: phi must be non-negative")
    g_lhs, g_rhs = functionals if functionals is not None else geometric_functionals(domain, quadrature, step)
    lhs = np.tensordot(g_lhs, phi, axes=(0, 0))
    rhs = np.tensordot(g_rhs, phi, axes=(0, 0))
    if np.any(lhs > rhs * (1 + slack)):
        raise AssertionError(f"geometric inequality violated: lhs={lhs} rhs={rhs}")
    if lhs.ndim == 0:
        return float(lhs), float(rhs)
    return lhs, rhs


def radiation_difference_diagnostic(domain, quadrature, mass, I1, I2, m1: Medium, m2: Medium, T1, T2):
    """Squared L2 distances of two radiation solutions and of the states driving them."""
    vol = domain.cell_volume
    w = quadrature.weights
    dI = np.asarray(I1) - np.asarray(I2)
    per_band = vol * np.einsum("d,bdn->b", w, dI**2)
    state = {
        "rho": vol * float(np.sum((m1.rho - m2.rho) ** 2)),
        "pi": vol * float(np.sum((m1.pi - m2.pi) ** 2)),
        "sigma": vol * float(mass.widths @ ((m1.sigma - m2.sigma) ** 2).sum(axis=1)),
        "T": vol * float(np.sum((np.asarray(T1) - np.asarray(T2)) ** 2)),
    }
    num = float(per_band.sum())
    den = sum(state.values())
    ratio = 0.0 if num == 0 else (num / den if den > 0 else math.inf)
    return {"intensity_l2sq_per_band": per_band.tolist(), "intensity_l2sq": num,
            "state_l2sq": state, "state_l2sq_total": den, "ratio": ratio}
