"""Structure-preserving finite volumes for cross-diffusion systems."""
from .mesh import (Mesh, MeshError, build_interval_mesh, build_rectangle_mesh, import_triangulation,
                   regularity_zeta, square_triangulation, unit_square_3584)
from .model import (Model, ModelError, SKTCoefficients, detailed_balance_weights, dominance_eta0,
                    compute_Cf, fluid_mixture_model, keller_segel_model, seawater_model, skt_model,
                    verify_hypotheses)
from .scheme import State, EdgeMeans, assemble_edge_means, entropy_mean, flux, drift_flux, project_initial, residual
from .solver import SolverConfig, StepReport, advance, jacobian, newton_solve
from .analysis import (NormKind, discrete_norm, discrete_entropy, relative_entropy, entropy_dissipation,
                       approximate_gradient, stability_predicate, convergence_harness, decay_analysis)

__version__ = "0.1.0"
