"""Interacting backward particle systems, their mean-field limits and chaos-rate experiments."""

__version__ = "0.1.0"

from .errors import ConvergenceWarning, PreconditionError, ValidationError  # noqa: E402
from .kernel import BrownianBundle, TimeGrid, make_grid, sample_brownian  # noqa: E402
from .regression import BasisSpec, DriverSpec, TerminalSpec, picard_iterate, solve_backward  # noqa: E402
from .transport import (  # noqa: E402
    EmpiricalMeasure,
    PathCloud,
    path_wasserstein_supnorm,
    wasserstein_assignment,
    wasserstein_entropic,
)
from .meanfield import (  # noqa: E402
    InteractionSpec,
    interaction_preset,
    solve_interacting,
    solve_linear_interaction,
    solve_mkv,
)
from .chaos import (  # noqa: E402
    Experiment,
    RateParams,
    rate_curve,
    rate_reference,
    estimate_marginal_chaos,
    estimate_sup_chaos,
    estimate_tail,
    estimate_process_error,
    chaos_block_bound,
)
from .pde import PdeScenario, compare_pde, epsilon_cd, pde_preset, solve_master_fbsde, solve_particle_fbsde  # noqa: E402
from .scenario import Scenario  # noqa: E402
