"""Pass/fail thresholds shared by the library checks, the CLI and the tests.

Every experiment verdict is computed against one of these numbers.
"""

# Monte Carlo comparisons allow this many standard errors.
MC_SIGMAS = 3.0

# Exact identities evaluated by Gauss-Hermite quadrature.
QUADRATURE_IDENTITY = 1e-8

# Chained and direct RK4 paths of a constant field agree to rounding.
SEMIGROUP_EXACT = 1e-10

# Measured order of the RK4 integrator under step halving.
RK4_ORDER = 4.0
RK4_ORDER_SLACK = 0.3

# First coordinates of a product-field flow in N+1 dimensions vs the N-dim flow.
PRODUCT_CONSISTENCY = 1e-14

# Duhamel residual of a rotated flow (Simpson on the stored trajectory).
DUHAMEL = 1e-6

# Commutator limit: residual at the smallest eps vs the largest.
LIMIT_RATIO = 0.1
# Residuals below this count as identically zero (pairs with v div_gamma c = r^eps = 0).
LIMIT_FLOOR = 1e-12

# Flows whose metrics all sit below this are numerically identical (T_eps b = b).
IDENTICAL_FLOWS = 1e-12

# Renormalization residual on smooth fields.
RENORMALIZATION = 5e-3


def as_dict():
    return {k: v for k, v in globals().items() if k.isupper()}
