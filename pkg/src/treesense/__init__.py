"""Second-order sensitivity engine for optimal investment on finite event trees."""

__version__ = "0.1.0"

from .tree import (ArbitrageCertificate, MarketTree, ModelError, PROB_FLOOR,
                   ValidationReport, admissible, conditional_expectation,
                   find_martingale_measure, load_model, model_from_document,
                   numeraire_change, random_tree, save_model,
                   terminal_gain_span, validate_model_document, validate_tree,
                   wealth_process)
from .utility import (BlendUtility, ConjugatePoint, ConstrainedUtility,
                      DomainError, PowerUtility, UtilityError, UtilitySpec,
                      build_constrained_utility, conjugate, conjugate_values,
                      corridor_scan, elasticity_probe, expansion_probe,
                      invert_marginal, load_utility, log_utility,
                      marginal_ratio_check, rra, utility_from_document)
from .solver import (PrimalDualSolution, SolverError, duality_audit,
                     first_order_audit, solve_dual, solve_primal, value_curve)
from .sensitivity import (FdOracle, SensitivityError, SensitivityReport,
                          SubspaceBasis, fd_oracle, gain_subspace,
                          martingale_audit, numeraire_rank_report,
                          orthocomplement, quad_project, quad_project_exact,
                          risk_measure, sensitivity)
from . import atlas, kernels
