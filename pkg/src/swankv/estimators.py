"""scikit-learn style wrappers around the rotation and pruning primitives.

These let the offline basis derivation be used on arbitrary activation
matrices (rows are head vectors) with the usual ``fit``/``transform``
contract, ``get_params``/``set_params`` and ``clone``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .calibration import DEFAULT_CALIBRATION_TOKENS, calibrate, collect_activations, derive_projection, projection_quality
from .exceptions import ConfigurationError, InvalidInputError


def _keep_top_k(y, k):
    """Zero all but the ``k`` largest-magnitude entries of each row (ties to
    the lower index, as in the cache)."""
    if k is None or k >= y.shape[1]:
        return y
    order = np.argsort(-np.abs(y), axis=1, kind="stable")
    out = np.zeros_like(y)
    rows = np.arange(y.shape[0])[:, None]
    keep = order[:, :k]
    out[rows, keep] = y[rows, keep]
    return out


def _check_k(k, n_features):
    if k is None:
        return None
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 0 <= k <= n_features:
        raise InvalidInputError(f"k_active must be an integer in [0, {n_features}], got {k!r}")
    return int(k)


class TopKPruner(TransformerMixin, BaseEstimator):
    """Per-row magnitude top-k in the input coordinates. Stateless."""

    def __init__(self, k_active=None):
        self.k_active = k_active

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        _check_k(self.k_active, X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _keep_top_k(X, _check_k(self.k_active, X.shape[1]))


class SwanProjector(TransformerMixin, BaseEstimator):
    """Learn an orthogonal basis from rows of ``X`` and rotate into it.

    ``fit`` stores the right singular vectors (descending singular value) in
    ``components_`` (``d x d``, columns are basis vectors). ``transform``
    rotates and, if ``k_active`` is set, keeps the top-k magnitudes of every
    rotated row. ``inverse_transform`` rotates back.
    """

    def __init__(self, k_active=None):
        self.k_active = k_active

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        _check_k(self.k_active, X.shape[1])
        self.components_ = derive_projection(X)
        self.singular_values_ = np.sqrt(np.maximum(np.sum((X.astype(np.float64) @ self.components_) ** 2, axis=0), 0.0))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _keep_top_k(X @ self.components_, _check_k(self.k_active, X.shape[1]))

    def inverse_transform(self, Y):
        check_is_fitted(self, "components_")
        Y = check_array(Y, dtype=np.float32)
        return Y @ self.components_.T

    def score(self, X, y=None):
        """Negative mean relative squared reconstruction error after pruning."""
        X = check_array(X, dtype=np.float32)
        rec = self.inverse_transform(self.transform(X)).astype(np.float64)
        x = X.astype(np.float64)
        tot = np.sum(x * x, axis=1)
        ok = tot > 0
        return -float(np.mean(np.sum((x - rec) ** 2, axis=1)[ok] / tot[ok]))


class SwanCalibrator(BaseEstimator):
    """Derive a :class:`~swankv.calibration.ProjectionSet` for ``model`` from a token stream.

    ``fit(X)`` takes a 1-D token array; ``score(X)`` is the negative mean
    pruned-reconstruction error of keys and values on the tokens ``X`` at
    ``retention``.
    """

    def __init__(self, model=None, n_tokens=DEFAULT_CALIBRATION_TOKENS, retention=0.5, seed=0, corpus_id=""):
        self.model = model
        self.n_tokens = n_tokens
        self.retention = retention
        self.seed = seed
        self.corpus_id = corpus_id

    def fit(self, X, y=None):
        if self.model is None:
            raise ConfigurationError("SwanCalibrator needs a model")
        tokens = np.asarray(X).reshape(-1)[: self.n_tokens]
        self.projections_ = calibrate(self.model, tokens, seed=self.seed, corpus_id=self.corpus_id)
        self.n_tokens_seen_ = len(tokens)
        return self

    def score(self, X, y=None):
        check_is_fitted(self, "projections_")
        batch = collect_activations(self.model, np.asarray(X).reshape(-1))
        return -projection_quality(self.projections_, batch, self.retention)
