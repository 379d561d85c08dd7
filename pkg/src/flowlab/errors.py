"""Exception types shared across flowlab."""

import numpy as np


class FlowlabError(Exception):
    """Base class for all flowlab errors."""


class ConfigurationError(FlowlabError, ValueError):
    """Invalid scheme, field descriptor or experiment configuration."""


class DomainError(FlowlabError, ValueError):
    """An operation was called outside the range where it is defined."""


class EvaluationError(FlowlabError, FloatingPointError):
    """A callback produced a non-finite value.

    The offending input point is available as ``node``.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = None if node is None else np.asarray(node, dtype=float)


def check_finite(values, points, what="integrand"):
    """Raise :class:`EvaluationError` at the first non-finite entry of ``values``.

    ``values`` has leading axis aligned with the rows of ``points``.
    """
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1) if values.ndim > 1 else values[:, None]
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        node = np.asarray(points)[idx]
        raise EvaluationError(f"non-finite {what} at node {node.tolist()}", node=node)
    return values
