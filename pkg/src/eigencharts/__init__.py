"""Local coordinate charts from Laplacian eigenfunctions and heat kernels."""

from .analysis import (
    DistortionReport,
    certify_theta,
    kernel_bound_diagnostics,
    measure_distortion,
    regime_probes,
    selection_diagnostics,
    sup_norm_growth,
)
from .embed import (
    EigenSelection,
    SelectionParams,
    TriangulationMap,
    candidate_set,
    eigen_embedding,
    free_plane_jacobian,
    heat_triangulation,
    local_ball_average,
    select_eigenfunctions,
)
from .errors import *  # noqa: F401,F403
from .geometry import (
    DIRICHLET,
    NEUMANN,
    BallPatch,
    GridDomain,
    MetricField,
    PointCloudGraph,
    ShapeSpec,
    build_grid_domain,
    build_point_cloud_graph,
    geodesic_distances,
)
from .heat import (
    HeatKernelQuery,
    duhamel_remainder,
    exit_time_tail_mc,
    fit_exit_tail,
    heat_kernel_spectral,
    heat_kernel_timestep,
)
from .spectral import EigenSystem, OperatorMatrix, assemble_laplacian, compute_eigensystem, weyl_count

__version__ = "0.1.0"
