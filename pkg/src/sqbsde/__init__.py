"""sqbsde: numerical solvers for singular quadratic BSDEs whose generators
are dominated by alpha + beta*y + gamma*z + delta*|z|^2/y, with probabilistic
evaluation of the associated semilinear parabolic PDEs (whole-space and
Neumann) and the portfolio/recursive-utility applications they price.

Top-level surface: exact transform oracles (`solve_canonical`,
`solve_gclass_exact`, `sandwich_bounds`), the regression Monte-Carlo engine
(`solve_lsmc`, `solve_truncated_ladder`, duality helpers), forward simulation
(`euler`, `euler_reflected`), PDE field evaluators, and the finance layer.
"""

from ._backend import BACKEND
from .core import (PathBundle, QuadratureRule, Terminal, TimeGrid,
                   gauss_expect, gauss_hermite, make_paths)
from .errors import (BlowUp, BranchError, IllConditioned, Infeasible,
                     InvalidArgument, NumericDomain, Singularity, SqbsdeError,
                     Unsupported)
from .expr import Expr, ParseError, UnboundVariable, parse
from .expr import eval as eval_expr
from .expr import to_source
from .generators import (AssumptionReport, ConjugateValue, GeneratorSpec,
                         check_assumptions, conjugate, eval_g, truncate_infconv,
                         truncate_sup)
from .transforms import (IntegratingFactor, PowerTransform, SandwichBounds,
                         forward, inverse, sandwich_bounds, solve_canonical,
                         solve_gclass_exact)
from .bsde import (BSDESolution, DualControl, LsmcOptions, RegressionBasis,
                   dual_value, ladder_report, solve_lsmc,
                   solve_truncated_ladder, subgradient_control)
from .sde import (ConvexDomain, DiffusionSpec, ReflectedPath, euler,
                  euler_reflected, flow_continuity_test)
from .pde import (PDEProblem, SolutionField, eval_neumann_series,
                  eval_probabilistic, eval_transform_exact, solve_fd)
from .finance import (MarketModel, SDUResult, SDUSpec, UtilityProblem,
                      UtilityResult, merton_grid_oracle, solve_sdu,
                      solve_utility, supermartingale_drift, wealth_paths)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BlowUp", "BranchError", "BSDESolution", "AssumptionReport",
    "ConjugateValue", "ConvexDomain", "DiffusionSpec", "DualControl", "Expr",
    "GeneratorSpec", "IllConditioned", "Infeasible", "IntegratingFactor",
    "InvalidArgument", "LsmcOptions", "MarketModel", "NumericDomain",
    "ParseError", "PathBundle", "PDEProblem", "PowerTransform",
    "QuadratureRule", "ReflectedPath", "RegressionBasis", "SandwichBounds",
    "SDUResult", "SDUSpec", "Singularity", "SolutionField", "SqbsdeError",
    "Terminal", "TimeGrid", "UnboundVariable", "Unsupported",
    "UtilityProblem", "UtilityResult", "check_assumptions", "conjugate",
    "dual_value", "euler", "euler_reflected", "eval_expr", "eval_g",
    "eval_neumann_series", "eval_probabilistic", "eval_transform_exact",
    "flow_continuity_test", "forward", "gauss_expect", "gauss_hermite",
    "inverse", "ladder_report", "make_paths", "merton_grid_oracle", "parse",
    "sandwich_bounds", "solve_canonical", "solve_fd", "solve_gclass_exact",
    "solve_lsmc", "solve_sdu", "solve_truncated_ladder", "solve_utility",
    "subgradient_control", "supermartingale_drift", "to_source",
    "wealth_paths", "__version__",
]
