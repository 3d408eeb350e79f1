"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Values are Python literals (numbers, strings in quotes, None, true/false).
Every key of every section must be present; unknown keys are rejected with
the nearest valid name.
"""
import ast
import dataclasses
import difflib
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coupling as cp
from . import gasdynamics as gas
from . import microphysics as micro
from . import radiation as rad
from .domain import DomainConfig, MassGrid, WavelengthBands, angular_quadrature, build_domain

PRESET_DIR = Path(__file__).with_name("presets")
PRESETS = ("rest_state", "radiation_only", "condensation_column", "coagulation_box", "full_desk")


class ConfigError(ValueError):
    pass


@dataclass
class DomainSection:
    shape: str = "box"
    resolution: int = 8


@dataclass
class GridsSection:
    mass_bins: int = 24
    mass_spacing: str = "geometric"
    bands: int = 1
    band_min: float = 0.0
    band_max: float = math.inf
    band_nodes: int = 16
    angular_order: int = 1
    units: str = "nondimensional"


@dataclass
class PhysicsSection:
    eta: float = 0.05
    zeta: float = 0.05
    kappa: float = 0.05
    c_v: float = 2.5
    R0: float = 1.0
    mu_a: float = 1.0
    mu_h: float = 0.622
    phi_kind: str = "zero"
    phi_amp: float = 0.0


@dataclass
class MicroSection:
    K1: float = 0.0
    c_l: float = 1.0
    m_a: float = 1.0
    m_A: float = 2.0
    M_prime: float = 8.0
    M_bar1: float = 64.0
    M_cut: float = 16.0
    beta0: float = 0.0
    g0_amp: float = 0.0
    g1_amp: float = 0.0
    N_star: float = 0.0
    L_gl: float = 0.0
    alpha0: float = 1.0
    pi_ref: float = 0.01
    T_ref: float = 1.0
    condensation: bool = False
    coagulation: bool = False
    nucleation: bool = False
    removal: bool = False
    transport: bool = True


@dataclass
class OpticsSection:
    a1: float = 0.0
    r1: float = 0.0
    a2: float = 0.0
    r2: float = 0.0
    a3: float = 0.0
    r3: float = 0.0
    phase1: str = "isotropic"
    phase2: str = "isotropic"
    phase3: str = "isotropic"
    g1: float = 0.0
    g2: float = 0.0
    g3: float = 0.0
    boundary_kind: str = "blackbody"
    boundary_value: float = 1.0
    eps1: typing.Optional[float] = None
    eps2: float = 1e-6
    line_step: float = 0.5
    table_file: str = ""


@dataclass
class InitialSection:
    rho: float = 1.0
    rho_amp: float = 0.0
    pi: float = 0.01
    pi_amp: float = 0.0
    T: float = 1.0
    T_amp: float = 0.0
    sigma_total: float = 0.0
    sigma_amp: float = 0.0
    v_amp: float = 0.0
    rho_file: str = ""
    pi_file: str = ""
    T_file: str = ""
    sigma_file: str = ""
    v_file: str = ""


@dataclass
class LoopSection:
    dt: float = 0.01
    nsteps: int = 10
    rad_tol: float = 1e-8
    rad_max_sweeps: int = 200
    inner_tol: float = 1e-10
    inner_max: int = 30
    outer_tol: float = 1e-8
    outer_max: int = 30
    kappa_target: float = 0.9
    inner_target: float = 0.5
    p: float = 5.0
    q: float = 4.0
    radiation: bool = True
    momentum: bool = True
    temperature: bool = True
    latent_heat: bool = True


@dataclass
class OutputSection:
    directory: str = "runs"
    cadence: int = 1
    write_fields: bool = True


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 0


@dataclass
class RunConfig:
    domain: DomainSection = field(default_factory=DomainSection)
    grids: GridsSection = field(default_factory=GridsSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    micro: MicroSection = field(default_factory=MicroSection)
    optics: OpticsSection = field(default_factory=OpticsSection)
    initial: InitialSection = field(default_factory=InitialSection)
    loop: LoopSection = field(default_factory=LoopSection)
    output: OutputSection = field(default_factory=OutputSection)
    run: RunSection = field(default_factory=RunSection)
    name: str = "custom"
    base_dir: str = "."


SECTIONS = [f.name for f in dataclasses.fields(RunConfig) if f.name not in ("name", "base_dir")]


# ---------------------------------------------------------------- text format

def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_config(cfg: RunConfig, path=None):
    lines = [f"# cloudrad run configuration: {cfg.name}"]
    for sec in SECTIONS:
        lines.append("")
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _parse_value(raw):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("inf", "+inf"):
        return math.inf
    if low == "-inf":
        return -math.inf
    return ast.literal_eval(s)


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")


# physical names people tend to type instead of the short keys
KEY_SYNONYMS = {
    "viscosity": "eta", "shear_viscosity": "eta", "bulk_viscosity": "zeta",
    "conductivity": "kappa", "heat_conductivity": "kappa", "heat_capacity": "c_v",
    "gas_constant": "R0", "condensation_rate": "K1", "latent_heat": "L_gl",
    "timestep": "dt", "seed": "seed",
}


def _nearest_key(key, valid):
    """Closest valid key, matching against known physical synonyms as well."""
    valid = list(valid)
    cand = {k: k for k in valid}
    cand.update({s: k for s, k in KEY_SYNONYMS.items() if k in valid})
    best = difflib.get_close_matches(key.lower(), list(cand), n=1, cutoff=0.0)
    return cand[best[0]] if best else valid[0]


def parse_config_text(text, source="<string>", base_dir="."):
    cfg = RunConfig(base_dir=str(base_dir))
    seen = {s: set() for s in SECTIONS}
    hints = {s: typing.get_type_hints(type(getattr(cfg, s))) for s in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip() if not line.strip().startswith("#") else ""
        if not stripped:
            if line.strip().startswith("# cloudrad run configuration:"):
                cfg.name = line.split(":", 1)[1].strip()
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                near = difflib.get_close_matches(section, SECTIONS, n=1)
                raise ConfigError(f"{where}: unknown section [{section}]"
                                  + (f"; did you mean [{near[0]}]?" if near else ""))
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in hints[section]:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]; "
                              f"nearest valid key is '{_nearest_key(key, hints[section])}'")
        if key in seen[section]:
            raise ConfigError(f"{where}: duplicate key '{key}' in [{section}]")
        try:
            value = _parse_value(raw)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"{where}: cannot parse value {raw!r} for '{key}'") from exc
        setattr(getattr(cfg, section), key, _coerce(value, hints[section][key], f"{where} '{key}'"))
        seen[section].add(key)
    for sec in SECTIONS:
        missing = [k for k in hints[sec] if k not in seen[sec]]
        if missing:
            raise ConfigError(f"{source}: missing key(s) {missing} in [{sec}]")
    validate_config(cfg, source)
    return cfg


def parse_config(path):
    path = Path(path)
    if not path.is_file() and path.suffix == "" and (PRESET_DIR / f"{path.name}.cfg").is_file():
        path = PRESET_DIR / f"{path.name}.cfg"
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path), path.parent)


def validate_config(cfg: RunConfig, source="<config>"):
    def fail(msg):
        raise ConfigError(f"{source}: {msg}")

    L = cfg.loop
    if not (L.p > 4 and 2 * L.q > L.p > L.q > 3):
        fail(f"exponents must satisfy p > 4 and 2q > p > q > 3; got p={L.p}, q={L.q}")
    for k in ("rad_tol", "inner_tol", "outer_tol", "dt"):
        if not getattr(L, k) > 0:
            fail(f"[loop] {k} must be > 0")
    for k in ("nsteps", "rad_max_sweeps", "inner_max", "outer_max"):
        if getattr(L, k) < 1:
            fail(f"[loop] {k} must be >= 1")
    if not 0 < L.kappa_target < 1 or not 0 < L.inner_target < 1:
        fail("[loop] kappa_target and inner_target must lie in ]0, 1[")
    if cfg.domain.shape not in ("box", "ball"):
        fail(f"[domain] shape must be 'box' or 'ball', got {cfg.domain.shape!r}")
    if cfg.domain.resolution < 2:
        fail("[domain] resolution must be >= 2")
    G = cfg.grids
    if G.mass_spacing not in ("geometric", "uniform"):
        fail("[grids] mass_spacing must be 'geometric' or 'uniform'")
    if G.units not in ("nondimensional", "si"):
        fail("[grids] units must be 'nondimensional' or 'si'")
    if G.angular_order < 1 or G.bands < 1 or G.mass_bins < 4:
        fail("[grids] angular_order >= 1, bands >= 1, mass_bins >= 4 required")
    M = cfg.micro
    if not (0 < M.m_a < M.m_A <= M.M_prime <= M.M_bar1):
        fail("[micro] need 0 < m_a < m_A <= M_prime <= M_bar1")
    if not M.m_a < M.M_cut <= M.M_bar1:
        fail("[micro] need m_a < M_cut <= M_bar1")
    O = cfg.optics
    if O.boundary_kind not in ("blackbody", "constant", "table"):
        fail("[optics] boundary_kind must be 'blackbody', 'constant' or 'table'")
    if O.boundary_kind == "table" and not O.table_file:
        fail("[optics] boundary_kind 'table' needs table_file")
    for k in ("a1", "r1", "a2", "r2", "a3", "r3", "boundary_value", "eps2", "line_step"):
        if getattr(O, k) < 0:
            fail(f"[optics] {k} must be non-negative")
    if O.line_step <= 0 or O.line_step > 0.5:
        fail("[optics] line_step is a fraction of h in ]0, 0.5]")
    for sec, k in [("initial", k) for k in ("rho_file", "pi_file", "T_file", "sigma_file", "v_file")] + [
            ("optics", "table_file")]:
        f = getattr(getattr(cfg, sec), k)
        if f and not (Path(cfg.base_dir) / f).is_file():
            fail(f"[{sec}] {k} {f!r} does not exist")
    if cfg.run.threads < 0:
        fail("[run] threads must be >= 0 (0 uses every available core)")
    for k, v in dataclasses.asdict(cfg).items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                if isinstance(vv, float) and math.isnan(vv):
                    fail(f"[{k}] {kk} is NaN")
    return cfg


# ---------------------------------------------------------------- presets

def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    cfg = RunConfig(name=name)
    if name == "rest_state":
        cfg.loop.radiation = False
    elif name == "radiation_only":
        cfg.optics = OpticsSection(a1=0.02, r1=0.005, boundary_value=0.9)
        cfg.initial.T_amp = 0.05
        cfg.loop.momentum = False
        cfg.grids.angular_order = 2
    elif name == "condensation_column":
        cfg.micro = MicroSection(K1=300.0, L_gl=1.0, condensation=True, removal=True, g1_amp=1.0)
        cfg.physics.phi_kind = "cosine_z"
        cfg.physics.phi_amp = 0.02
        cfg.initial.pi = 0.0105
        cfg.initial.pi_amp = 0.1
        cfg.initial.sigma_total = 1e-3
        cfg.loop.radiation = False
    elif name == "coagulation_box":
        cfg.micro = MicroSection(beta0=5.0, coagulation=True, transport=False)
        cfg.initial.sigma_total = 5e-3
        cfg.initial.sigma_amp = 0.2
        cfg.loop.radiation = False
    elif name == "full_desk":
        cfg.micro = MicroSection(K1=300.0, beta0=1.0, g0_amp=1.0, g1_amp=1.0, N_star=1e-3, L_gl=1.0,
                                 condensation=True, coagulation=True, nucleation=True, removal=True)
        cfg.optics = OpticsSection(a1=0.02, r1=0.005, a2=0.5, r2=0.1, a3=0.5, r3=0.1, boundary_value=0.95)
        cfg.physics.phi_kind = "cosine_z"
        cfg.physics.phi_amp = 0.02
        cfg.initial = InitialSection(rho=1.0, rho_amp=0.05, pi=0.0105, pi_amp=0.05, T=1.0, T_amp=0.02,
                                     sigma_total=1e-3, sigma_amp=0.1, v_amp=0.05)
        cfg.run.seed = 12345
    return cfg


def write_presets(directory=PRESET_DIR):
    Path(directory).mkdir(parents=True, exist_ok=True)
    for name in PRESETS:
        write_config(preset_config(name), Path(directory) / f"{name}.cfg")


# ---------------------------------------------------------------- problem assembly

def _load_csv(path):
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _read_field_csv(path, n, ncomp=1):
    """Cell-indexed CSV (header row, first column cell index, last ``ncomp`` columns values)."""
    data = _load_csv(path)
    out = np.full((n, ncomp), np.nan)
    idx = data[:, 0].astype(int)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= n:
        raise ConfigError(f"{path}: cell index out of range [0, {n})")
    out[idx] = data[:, -ncomp:]
    if np.any(np.isnan(out)):
        raise ConfigError(f"{path}: field file does not cover every cell")
    return out[:, 0] if ncomp == 1 else out


def _read_spectrum_csv(path, n_bins, n):
    """Long-format spectrum CSV with columns cell, bin, [mass,] value; absent entries are zero."""
    data = _load_csv(path)
    out = np.zeros((n_bins, n))
    cell, k = data[:, 0].astype(int), data[:, 1].astype(int)
    if (cell.min(initial=0) < 0 or cell.max(initial=0) >= n or k.min(initial=0) < 0
            or k.max(initial=0) >= n_bins):
        raise ConfigError(f"{path}: cell or bin index out of range")
    out[k, cell] = data[:, -1]
    return out


def read_optics_table(path, n_bands):
    """Per-band optics CSV: band, a1, r1, a2, r2, a3, r3[, I0]."""
    data = _load_csv(path)
    if data.shape[1] not in (7, 8):
        raise ConfigError(f"{path}: expected columns band,a1,r1,a2,r2,a3,r3[,I0]")
    order = np.argsort(data[:, 0])
    data = data[order]
    if not np.array_equal(data[:, 0].astype(int), np.arange(n_bands)):
        raise ConfigError(f"{path}: need exactly one row per band 0..{n_bands - 1}")
    if np.any(data[:, 1:] < 0):
        raise ConfigError(f"{path}: optical coefficients must be non-negative")
    return data[:, 1:]


def _smooth_pattern(rng, centers, n_modes=3):
    """Sum of a few random low-order cosine modes, unit max amplitude."""
    f = np.zeros(len(centers))
    for _ in range(n_modes):
        k = rng.integers(1, 3, size=3) * math.pi * math.sqrt(3)
        ph = rng.uniform(0, 2 * math.pi, size=3)
        f += np.prod(np.cos(k * centers + ph), axis=1)
    m = np.abs(f).max()
    return f / m if m > 0 else f


def resolve_threads(threads):
    return threads if threads > 0 else (os.cpu_count() or 1)


def build_mass_grid(cfg: RunConfig):
    M, G = cfg.micro, cfg.grids
    if G.mass_spacing == "geometric":
        return MassGrid.geometric(G.mass_bins, M.m_a, M.m_A, M.M_prime, M.M_bar1, M.M_cut)
    dm = M.M_bar1 / (G.mass_bins - 0.5)
    return MassGrid.uniform(dm, G.mass_bins, M.m_a, M.m_A, M.M_prime, M.M_cut)


def initial_state(cfg: RunConfig, domain, mass):
    rng = np.random.default_rng(cfg.run.seed)
    I, n, c = cfg.initial, domain.n_cells, domain.centers
    base = Path(cfg.base_dir)
    rho = (_read_field_csv(base / I.rho_file, n) if I.rho_file
           else I.rho * (1 + I.rho_amp * _smooth_pattern(rng, c)))
    pi = (_read_field_csv(base / I.pi_file, n) if I.pi_file
          else I.pi * (1 + I.pi_amp * _smooth_pattern(rng, c)))
    T = (_read_field_csv(base / I.T_file, n) if I.T_file
         else I.T * (1 + I.T_amp * _smooth_pattern(rng, c)))
    sigma = np.zeros((mass.n_bins, n))
    if I.sigma_file:
        sigma = _read_spectrum_csv(base / I.sigma_file, mass.n_bins, n)
    elif I.sigma_total > 0:
        M = cfg.micro
        e = mass.edges
        inside = (e[:-1] >= M.m_a) & (e[1:] <= M.M_prime)
        cm = mass.centers
        t = np.clip((cm - M.m_a) / (M.M_prime - M.m_a), 0, 1)
        shape = np.where(inside, (t * (1 - t)) ** 2, 0.0)
        if shape.sum() == 0:
            raise ConfigError("no mass bin lies inside [m_a, M_prime] for the initial spectrum")
        shape /= mass.widths @ shape
        spatial = 1 + I.sigma_amp * _smooth_pattern(rng, c)
        sigma = I.sigma_total * shape[:, None] * spatial[None, :]
    v = np.zeros((n, 3))
    if I.v_file:
        v = _read_field_csv(base / I.v_file, n, 3)
        if np.any(v[domain.boundary]):
            raise ConfigError(f"{I.v_file}: initial velocity must vanish on boundary cells")
    elif I.v_amp > 0:
        for k in range(3):
            v[:, k] = I.v_amp * _smooth_pattern(rng, c)
        v[domain.boundary] = 0.0
    for name, f in (("rho", rho), ("T", T)):
        if np.any(f <= 0):
            raise ConfigError(f"initial {name} must be positive")
    if np.any(pi < 0) or np.any(sigma < 0):
        raise ConfigError("initial pi and sigma must be non-negative")
    return cp.State(rho, pi, sigma, v, T)


def build_problem(cfg: RunConfig):
    domain = build_domain(DomainConfig(cfg.domain.shape, cfg.domain.resolution))
    mass = build_mass_grid(cfg)
    G, M, O, P, L = cfg.grids, cfg.micro, cfg.optics, cfg.physics, cfg.loop
    quad = angular_quadrature(G.angular_order)
    if G.bands == 1 and G.band_min == 0 and math.isinf(G.band_max):
        bands = WavelengthBands(np.array([0.0, math.inf]))
    else:
        bands = WavelengthBands(np.geomspace(G.band_min, G.band_max, G.bands + 1), G.band_nodes)
    constants = rad.PlanckConstants.nondimensional() if G.units == "nondimensional" else rad.PlanckConstants()
    phys = gas.PhysParams(P.eta, P.zeta, P.kappa, P.c_v, P.R0, P.mu_a, P.mu_h, P.phi_kind, P.phi_amp)
    mp = micro.MicroParams(K1=M.K1, c_l=M.c_l, m_a=M.m_a, m_A=M.m_A, M_cut=M.M_cut, beta0=M.beta0,
                           g0_amp=M.g0_amp, g1_amp=M.g1_amp, N_star=M.N_star, L_gl=M.L_gl,
                           alpha0=M.alpha0, pi_ref=M.pi_ref, T_ref=M.T_ref, R0=P.R0, mu_h=P.mu_h)
    # droplet optics scale with the droplet cross-section per unit mass, ~ m^(-1/3)
    shape = (mass.centers / M.m_a) ** (-1 / 3)
    nb = bands.n_bands
    tab = np.tile([O.a1, O.r1, O.a2, O.r2, O.a3, O.r3], (nb, 1))
    if O.table_file:
        t = read_optics_table(Path(cfg.base_dir) / O.table_file, nb)
        tab = t[:, :6]
        if O.boundary_kind == "table" and t.shape[1] < 7:
            raise ConfigError(f"{O.table_file}: boundary_kind 'table' needs an I0 column")
    optics = rad.OpticalCoefficients(
        tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3], tab[:, 4:5] * shape, tab[:, 5:6] * shape,
        ((O.phase1, O.g1), (O.phase2, O.g2), (O.phase3, O.g3)))
    if O.boundary_kind == "blackbody":
        boundary = rad.BoundaryIntensity.blackbody(bands, O.boundary_value, constants)
    elif O.boundary_kind == "table":
        boundary = rad.BoundaryIntensity.constant(t[:, 6])
    else:
        boundary = rad.BoundaryIntensity.constant(np.full(nb, O.boundary_value))
    couplings = cp.Couplings(
        spectrum=micro.SpectrumSwitches(M.condensation, M.coagulation, M.nucleation, M.removal, M.transport),
        radiation=L.radiation, latent_heat=L.latent_heat, momentum=L.momentum, temperature=L.temperature)
    state0 = initial_state(cfg, domain, mass)
    return cp.CoupledProblem(
        domain=domain, mass=mass, quadrature=quad, bands=bands, phys=phys, micro=mp, optics=optics,
        boundary=boundary, initial=state0, dt=L.dt, constants=constants, couplings=couplings,
        rad_tol=L.rad_tol, rad_max_sweeps=L.rad_max_sweeps, line_step=O.line_step * domain.h,
        threads=resolve_threads(cfg.run.threads), inner_tol=L.inner_tol, inner_max=L.inner_max, outer_tol=L.outer_tol,
        outer_max=L.outer_max, p=L.p, q=L.q, eps1=O.eps1, eps2=O.eps2)
