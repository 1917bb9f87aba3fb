"""
config.py
---------
Central configuration for the Periodic Homogenization Pipeline.

Module-level constants are the defaults used by the library modules;
ExperimentConfig is the per-run definition read from a TOML preset.
"""
import dataclasses
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

from errors import ConfigParse

# =============================================================================
# CELL PROBLEMS
# =============================================================================
CELL_GRID = 256
CELL_RULE = "cell_center"
CELL_TOL = 1e-10
CELL_MAXITER_FACTOR = 10
ZERO_MEAN_TOL = 1e-10
SYMMETRY_TOL = 1e-12
PRESET_SAMPLE_GRID = 64
# =============================================================================
# FINITE ELEMENTS
# =============================================================================
SOLVER_TOL = 1e-10
DIRECT_SOLVER_MAX_DOFS = 200_000
MAX_MESH_NODES = 2_000_000
MESH_POINTS_PER_PERIOD = 4
QUADRATURE_POINTS_PER_PERIOD = 4
QUADRATURE_CAP = 8
MIN_ANGLE_DEG = 20.0
# =============================================================================
# EIGENPROBLEMS
# =============================================================================
DENSE_EIGEN_MAX_DOFS = 2_000
PENCIL_SYMMETRY_TOL = 1e-10
MAX_EIGEN_COUNT = 50
EIGEN_RESIDUAL_TOL = 1e-8
CLUSTER_TOL = 1e-6
# =============================================================================
# GEOMETRY / SLOPES
# =============================================================================
RATIONAL_MAX_DENOMINATOR = 10**6
RATIONAL_TOL = 1e-12
DIOPHANTINE_C = 0.1
DIOPHANTINE_L = 1.0
SCAN_RADIUS = 100
MAX_CONVERGENT_DEPTH = 20
# =============================================================================
# BOUNDARY LAYERS
# =============================================================================
MIN_STRIP_POINTS = 32
STRIP_HEIGHT_PERIODS = 10.0
TAIL_WINDOW = 0.25
DECAY_MONOTONE_SLACK = 0.05
CAUCHY_TOL = 1e-2
MAX_STRIP_PERIOD = 8.0
CONVERGENT_DEPTH = 4
# =============================================================================
# CONVERGENCE REPORTS
# =============================================================================
SLOPE_MARGIN = 0.1
CLEAN_RESIDUAL = 0.25
# relative to the magnitude of the compared quantities
FLOOR_VALUE = 1e-10
CLAIMED_EXPONENTS = {
    "eigenvalue_error": 1.0,
    "zeroth_order_residual": 1.0,
    "first_order_residual": 1.5,
    "homogenization_l2": 0.5,
    "reconstruction_h1": 1.0,
    "reconstruction_l2": 1.5,
    "reconstruction2_h1": 1.5,
    "chi_term": 1.0,
    "bl_tail_subtracted": 0.5,
    "bl_homogenized_gap": 0.5,
}
# the first-order residual passes on "slope > 1", not on claimed - margin
SLOPE_FLOORS = {
    "first_order_residual": 1.0,
    "reconstruction_h1": 0.85,
    "bl_tail_subtracted": 0.4,
    "bl_homogenized_gap": 0.4,
    "chi_term": 0.9,
    "eigenvalue_error": 0.9,
    "zeroth_order_residual": 0.9,
}
# =============================================================================
# CLI
# =============================================================================
EXIT_OK = 0
EXIT_MODULE_ERROR = 1
EXIT_CONFIG_ERROR = 2
EXIT_STRICT_FAILURE = 3
# =============================================================================
# FILE PATHS (relative to the output directory)
# =============================================================================
OUT_DIR_ENV = "HOMOG_OUT_DIR"
STAGES = ("cell", "tails", "spectrum", "expansion")
DEFAULT_PATHS = {
    "config": "config.toml",
    "run_log": "run.log",
    "cell_summary": "cell/summary.json",
    "correctors": "cell/correctors.parquet",
    "correctors_matched": "cell/correctors_matched.parquet",
    "tails": "tails/tails.json",
    "tails_dir": "tails",
    "spectrum": "spectrum/spectrum.csv",
    "spectrum_summary": "spectrum/summary.json",
    "reports_dir": "reports",
    "plots_dir": "plots",
    "fields_dir": "fields",
    "expansion_summary": "reports/expansion.json",
}


# =============================================================================
# EXPERIMENT DEFINITION
# =============================================================================
@dataclass(frozen=True)
class TensorSpec:
    preset: str = "laminate"
    csv: str = ""
    components: int = 1
    scale: float = 1.0
    ellipticity: float = 0.0  # 0 accepts the measured constant
    allow_nonsymmetric: bool = False
    lattice_phase: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class DomainSpec:
    vertices: tuple = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
    exact_normals: tuple = ()
    diophantine_C: float = DIOPHANTINE_C
    diophantine_l: float = DIOPHANTINE_L
    scan_radius: int = SCAN_RADIUS
    allow_undetermined: bool = False


@dataclass(frozen=True)
class ResolutionSpec:
    cell_grid: int = CELL_GRID
    cell_rule: str = CELL_RULE
    diagonal: int = 1
    mesh_points_per_period: int = MESH_POINTS_PER_PERIOD
    mesh_matched: bool = True
    quadrature_points: int = QUADRATURE_POINTS_PER_PERIOD
    quadrature_cap: int = QUADRATURE_CAP
    strip_points_per_unit: int = MIN_STRIP_POINTS
    strip_height_periods: float = STRIP_HEIGHT_PERIODS
    tail_window: float = TAIL_WINDOW
    convergent_depth: int = CONVERGENT_DEPTH
    max_strip_period: float = MAX_STRIP_PERIOD
    eigen_count: int = 8
    max_nodes: int = MAX_MESH_NODES
    allow_coarse_mesh: bool = False
    allow_underresolved: bool = False


@dataclass(frozen=True)
class ToleranceSpec:
    cell: float = CELL_TOL
    solver: float = SOLVER_TOL
    eigen: float = EIGEN_RESIDUAL_TOL
    cluster: float = CLUSTER_TOL
    cauchy: float = CAUCHY_TOL
    slope_margin: float = SLOPE_MARGIN
    clean_residual: float = CLEAN_RESIDUAL
    phase_samples: int = 0


@dataclass(frozen=True)
class StudySpec:
    load: str = "one"
    order: int = 1
    stages: tuple = STAGES
    corrector_study: bool = True
    chi_decay: bool = True
    bl_decay: bool = True
    osborn: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    epsilons: tuple = (0.125, 0.0625, 0.03125)
    modes: tuple = (0,)
    output_dir: str = "results"
    seed: int = 0
    tensor: TensorSpec = field(default_factory=TensorSpec)
    domain: DomainSpec = field(default_factory=DomainSpec)
    resolution: ResolutionSpec = field(default_factory=ResolutionSpec)
    tolerances: ToleranceSpec = field(default_factory=ToleranceSpec)
    study: StudySpec = field(default_factory=StudySpec)

    def validate(self):
        eps = self.epsilons
        if any(e <= 0 for e in eps):
            raise ConfigParse(f"epsilons must be positive: {list(eps)}", key="epsilons")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigParse(f"epsilons must be strictly decreasing: {list(eps)}", key="epsilons")
        if self.resolution.mesh_points_per_period < 4 and not self.resolution.allow_coarse_mesh:
            raise ConfigParse(
                "mesh policy requires h <= eps/4 (mesh_points_per_period >= 4) "
                "unless resolution.allow_coarse_mesh is set",
                key="resolution.mesh_points_per_period",
            )
        if len(self.domain.vertices) < 3:
            raise ConfigParse("domain.vertices needs at least 3 points", key="domain.vertices")
        if self.domain.exact_normals and len(self.domain.exact_normals) != len(self.domain.vertices):
            raise ConfigParse("domain.exact_normals must list one (p, q) pair per edge", key="domain.exact_normals")
        if self.modes and max(self.modes) >= self.resolution.eigen_count:
            raise ConfigParse(
                f"modes {list(self.modes)} need resolution.eigen_count > {max(self.modes)}", key="resolution.eigen_count"
            )
        slope_study = self.study.corrector_study or self.study.chi_decay or self.study.bl_decay
        if len(eps) < 3 and (slope_study or "spectrum" in self.study.stages):
            raise ConfigParse(f"slope studies need at least 3 epsilons, got {len(eps)}", key="epsilons")
        if any(k < 0 for k in self.modes):
            raise ConfigParse(f"modes must be non-negative: {list(self.modes)}", key="modes")
        unknown = [s for s in self.study.stages if s not in STAGES]
        if unknown:
            raise ConfigParse(f"Unknown stages {unknown}; expected a subset of {list(STAGES)}", key="study.stages")
        if self.study.order not in (1, 2):
            raise ConfigParse(f"study.order must be 1 or 2, got {self.study.order}", key="study.order")
        if self.tensor.csv and not os.path.exists(self.tensor.csv):
            raise ConfigParse(f"Tensor file not found: {self.tensor.csv}", key="tensor.csv", path=self.tensor.csv)
        if self.resolution.cell_grid & (self.resolution.cell_grid - 1):
            raise ConfigParse(f"cell_grid must be a power of two, got {self.resolution.cell_grid}", key="resolution.cell_grid")
        m = self.resolution.mesh_points_per_period
        if self.resolution.mesh_matched and m & (m - 1):
            raise ConfigParse(
                f"mesh-matched correctors live on an m-grid and need a power of two, got m={m}; "
                "set resolution.mesh_matched = false",
                key="resolution.mesh_points_per_period",
            )
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _freeze(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"expected an array, got {value!r}")
        return _tuples(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    return value


def _tuples(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuples(v) for v in value)
    return value


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigParse(f"[{section}] must be a table", key=section)
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigParse(f"Unknown keys in [{section}]: {unknown}", key=section)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        default = getattr(defaults, f.name)
        key = f"{section}.{f.name}" if section else f.name
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), data[f.name], key)
            continue
        try:
            kwargs[f.name] = _numeric_arrays(f.name, _freeze(data[f.name], default))
        except (TypeError, ValueError) as e:
            raise ConfigParse(f"Bad value for {key}: {e}", key=key) from None
    return cls(**kwargs)


def _numeric_arrays(name, value):
    # vertices and phases are stored as floats so that parse -> dump -> parse is stable
    if name in ("vertices",):
        return tuple(tuple(float(c) for c in v) for v in value)
    if name in ("lattice_phase", "epsilons"):
        return tuple(float(c) for c in value)
    if name == "exact_normals":
        return tuple(tuple(int(c) for c in v) for v in value)
    if name in ("modes",):
        return tuple(int(c) for c in value)
    return value


def parse_config(text, base_dir="."):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigParse(f"Invalid TOML: {e}") from None
    cfg = _build(ExperimentConfig, data, "")
    if cfg.tensor.csv and not os.path.isabs(cfg.tensor.csv):
        cfg = dataclasses.replace(
            cfg, tensor=dataclasses.replace(cfg.tensor, csv=os.path.normpath(os.path.join(base_dir, cfg.tensor.csv)))
        )
    return cfg.validate()


def load_config(path):
    try:
        with open(path, "rb") as f:
            text = f.read().decode("utf-8")
    except FileNotFoundError:
        raise ConfigParse(f"Config file not found: {path}", path=str(path)) from None
    except UnicodeDecodeError as e:
        raise ConfigParse(f"Config file is not UTF-8: {path} ({e})", path=str(path)) from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg):
    return tomli_w.dumps(cfg.to_dict())


def resolve_output_dir(cfg, override=None):
    """--out beats the environment variable, which beats the config file."""
    if override:
        return override
    return os.environ.get(OUT_DIR_ENV) or cfg.output_dir
