"""Time-domain simulation of noise transformation by a Kerr non-linear cavity."""

__version__ = "0.1.0"

from .cavity import (  # noqa: E402
    CavityError,
    CavitySpec,
    KerrMediumSpec,
    OperatingPoint,
    critical_operating_point,
    critical_spec,
    escape_efficiency,
    find_critical_theta,
    half_bandwidth,
    operating_point_for_fraction,
    solve_resonance_curve,
)
from .engine import DriveSpec, EngineError, extract_sidebands, propagate, run_sidebands  # noqa: E402
from .phasespace import (  # noqa: E402
    NoiseEllipse,
    SpectrumTable,
    WignerGrid,
    ellipse_from_spectral,
    measure_transfer,
    optimize_operating_point,
    sweep_spectrum,
    wigner_grid,
)
from .transfer import (  # noqa: E402
    VACUUM,
    InputNoiseSpec,
    SpectralMatrix,
    TransferMatrix,
    spectral_density,
    total_spectral_density,
    transfer_from_sidebands,
)
