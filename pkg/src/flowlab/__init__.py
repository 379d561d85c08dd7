"""Flows of vector fields on Gaussian space: quadrature, Ornstein-Uhlenbeck
smoothing, RK4 flows with density transport, commutator and continuity checks."""

from .catalogue import CATALOGUE, SMOOTH_KINDS, default_field, field_from_descriptor
from .commutator import (CommutatorReport, b_term_l1, commutator_eval, commutator_report,
                         commutator_split_diagnostic, scalar_function, smoothing_factor)
from .continuity import (RenormalizationProfile, ResidualTable, TestFunction, backward_density,
                         backward_preimage, renormalization_residual, sign_preservation_probe,
                         weak_residual)
from .errors import ConfigurationError, DomainError, EvaluationError, FlowlabError
from .fields import (FieldSpec, RotationGroup, cylindrical_projection, gaussian_divergence,
                     hs_norm, ld_seminorm, rotate_field, smooth_field, symmetric_gradient)
from .flow import (DensityBoundReport, FlowTrajectoryBatch, IntegratorOptions,
                   check_density_bound, density_lr_norm, dimension_consistency,
                   divergence_exp_bound, flow_from_time, integrate_flow, rotated_flow_solve,
                   semigroup_discrepancy, stability_metric)
from .gaussian import (QuadratureScheme, derive_seed, expectation, gaussian_rotation,
                       lambda_moment, make_quadrature, moment_identity_check,
                       quadratic_cancellation)
from .ou import OuOperator, mehler_apply, mehler_gradient, self_adjoint_check, smoothed_divergence

__version__ = "0.1.0"
