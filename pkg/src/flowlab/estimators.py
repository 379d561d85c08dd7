"""scikit-learn style wrapper around the flow map ``x -> X(T, x)``."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .catalogue import field_from_descriptor
from .continuity import backward_preimage
from .flow import IntegratorOptions, integrate_flow


class FlowMapTransformer(TransformerMixin, BaseEstimator):
    """Transport points along a catalogue field.

    ``transform`` integrates forward to ``horizon``; ``inverse_transform``
    integrates the time-reversed field.  ``fit`` only resolves the field
    descriptor for the dimension of ``X``.

    Parameters
    ----------
    field : dict
        Descriptor ``{"kind": ..., "params": {...}}``.
    horizon : float
    max_step : float
        Largest RK4 step.
    """

    def __init__(self, field=None, horizon=1.0, max_step=1e-2):
        self.field = field
        self.horizon = horizon
        self.max_step = max_step

    def fit(self, X, y=None):
        X = check_array(X)
        desc = self.field if self.field is not None else {"kind": "zero"}
        self.field_ = field_from_descriptor(desc, dim=X.shape[1], horizon=self.horizon)
        self.n_features_in_ = X.shape[1]
        return self

    def _options(self):
        return IntegratorOptions(max_step=self.max_step)

    def transform(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X)
        batch = integrate_flow(self.field_, X, [0.0, self.horizon], self._options())
        return batch.final()

    def inverse_transform(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X)
        x, _, _ = backward_preimage(self.field_, self.horizon, X, self._options())
        return x

    def log_density(self, X):
        """``log`` of the pushforward density w.r.t. the Gaussian at ``X(T, x)`` for rows ``x``."""
        check_is_fitted(self, "field_")
        X = check_array(X)
        batch = integrate_flow(self.field_, X, [0.0, self.horizon], self._options())
        return np.asarray(batch.log_density[:, -1])
