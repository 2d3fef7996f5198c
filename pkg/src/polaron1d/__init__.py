"""Self-consistent polaron band structure and transport for a 1-D molecular
lattice with simultaneous local and nonlocal exciton-phonon coupling."""

from .errors import (
    ConfigError,
    CutoffNotConverged,
    DegenerateZeroScattering,
    InvalidParameter,
    MissingDataset,
    NonPositiveRate,
    NotConverged,
    NumericalBreakdown,
    PolaronError,
    TooLarge,
    UndefinedField,
)
from .lattice import (
    ModelParams,
    MomentumGrid,
    bare_band,
    bare_transfer,
    bose_factor,
    coupling,
    coupling_matrix,
    make_grid,
)

__version__ = "0.1.0"

from .scf import (
    SCFSolution,
    SolverReport,
    build_E,
    extract_scaling,
    matrix_exp,
    solve,
    theta_avg,
    update_A,
)
from .band import (
    PolaronBand,
    band,
    band_of,
    group_velocity,
    renormalized_transfer,
    thermal_avg,
)
from .correlation import (
    CorrelationContext,
    four_theta_avg,
    make_context,
    two_theta_avg,
    vv_correlation,
)
from .fock import (
    TruncatedSpace,
    build_theta,
    converged_correlators,
    exact_four_theta,
    exact_two_theta,
    exact_vv,
    make_space,
)
from .transport import (
    TransportPoint,
    WTensor,
    build_w_tensor,
    diffusion,
    hopping_rate,
    scattering_rate,
    sweep,
    write_sweep_csv,
)
from .config import RunConfig, emit_config, expand_preset, parse_config

__all__ = [
    "ModelParams",
    "MomentumGrid",
    "make_grid",
    "bare_band",
    "bare_transfer",
    "bose_factor",
    "coupling",
    "coupling_matrix",
    "SCFSolution",
    "SolverReport",
    "solve",
    "update_A",
    "build_E",
    "theta_avg",
    "extract_scaling",
    "matrix_exp",
    "PolaronBand",
    "band",
    "band_of",
    "group_velocity",
    "renormalized_transfer",
    "thermal_avg",
    "CorrelationContext",
    "make_context",
    "two_theta_avg",
    "four_theta_avg",
    "vv_correlation",
    "TruncatedSpace",
    "make_space",
    "build_theta",
    "exact_two_theta",
    "exact_four_theta",
    "exact_vv",
    "converged_correlators",
    "WTensor",
    "TransportPoint",
    "build_w_tensor",
    "scattering_rate",
    "hopping_rate",
    "diffusion",
    "sweep",
    "write_sweep_csv",
    "RunConfig",
    "parse_config",
    "emit_config",
    "expand_preset",
    "PolaronError",
    "InvalidParameter",
    "NumericalBreakdown",
    "NotConverged",
    "UndefinedField",
    "NonPositiveRate",
    "DegenerateZeroScattering",
    "TooLarge",
    "CutoffNotConverged",
    "ConfigError",
    "MissingDataset",
    "__version__",
]
