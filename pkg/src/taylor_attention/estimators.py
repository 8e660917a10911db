"""scikit-learn compatible wrappers.

``SymmetricMonomialFeatures`` and ``TaylorKernelFeatures`` are ordinary
transformers and compose with pipelines and linear models.
``TaylorAttention`` and ``SoftmaxAttention`` take token matrices whose columns
are ``[query | key | value]``; ``partial_fit`` feeds context tokens and
``transform`` returns causal attention outputs that continue from that context.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from ._validation import check_choice, check_token_matrix
from .attention import (
    ON_DEGENERATE,
    PRECISIONS,
    Tokens,
    attend_scan,
    attend_stream,
    conventional_attention,
    init_state,
    read_output,
    update_state,
)
from .basis import DEFAULT_ELEMENT_BUDGET, build_basis_family, build_degree_basis
from .featuremap import family_features, phi_batch


class SymmetricMonomialFeatures(TransformerMixin, BaseEstimator):
    """Distinct degree-``degree`` monomials of the input columns.

    ``weights="sqrt"`` scales each monomial by the square root of its
    multiplicity, so that ``transform(x) @ transform(y).T == (x @ y.T) ** degree``.
    ``weights="multiplicity"`` scales by the multiplicity itself.
    """

    def __init__(self, degree=2, weights="none"):
        self.degree = degree
        self.weights = weights

    def fit(self, X, y=None):
        X = validate_data(self, X)
        check_choice("weights", self.weights, ("none", "sqrt", "multiplicity"))
        self.basis_ = build_degree_basis(self.n_features_in_, self.degree)
        mult = self.basis_.multiplicities.astype(np.float64)
        self.scale_ = {"none": np.ones_like(mult), "sqrt": np.sqrt(mult),
                       "multiplicity": mult}[self.weights]
        self.n_output_features_ = self.basis_.basis_size
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = validate_data(self, X, reset=False)
        return phi_batch(X, self.basis_) * self.scale_

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "basis_")
        if input_features is None:
            input_features = [f"x{i}" for i in range(self.n_features_in_)]
        names = []
        for row in self.basis_.rows():
            if not row:
                names.append("1")
                continue
            parts = []
            for i in sorted(set(row)):
                c = row.count(i)
                parts.append(input_features[i - 1] + (f"^{c}" if c > 1 else ""))
            names.append(" ".join(parts))
        return np.asarray(names, dtype=object)


class TaylorKernelFeatures(TransformerMixin, BaseEstimator):
    """Explicit features of the truncated exponential kernel.

    Dot products of transformed rows equal
    ``sum_{p < truncation_order} (x . y)^p / (p! scale^p)``.
    ``scale`` defaults to ``sqrt(n_features)``.
    """

    def __init__(self, truncation_order=4, scale=None):
        self.truncation_order = truncation_order
        self.scale = scale

    def fit(self, X, y=None):
        X = validate_data(self, X)
        self.family_ = build_basis_family(self.n_features_in_, self.truncation_order, self.scale,
                                          value_width=1)
        self.scale_ = np.sqrt(self.family_.packed_weights)
        return self

    def transform(self, X):
        check_is_fitted(self, "family_")
        X = validate_data(self, X, reset=False)
        return family_features(X, self.family_) * self.scale_


class TaylorAttention(TransformerMixin, BaseEstimator):
    """Causal attention with a constant-size state.

    Parameters
    ----------
    truncation_order : int
        Number of Taylor terms kept.
    scale : float or None
        Logit divisor; ``sqrt(key_width)`` when None.
    key_width : int or None
        Query/key width. When None, columns split into three equal blocks.
    chunk_size : int
        0 evaluates the sequential recurrence; otherwise a chunked scan.
    precision : {"double", "single"}
        Precision of feature evaluation. Accumulators are always double.
    on_degenerate : {"raise", "flag", "fallback"}
        What to do with near-zero denominators: raise, emit NaN, or fall
        back to the running mean of values.
    """

    def __init__(self, truncation_order=4, scale=None, key_width=None, chunk_size=0,
                 precision="double", on_degenerate="raise", max_elements=DEFAULT_ELEMENT_BUDGET):
        self.truncation_order = truncation_order
        self.scale = scale
        self.key_width = key_width
        self.chunk_size = chunk_size
        self.precision = precision
        self.on_degenerate = on_degenerate
        self.max_elements = max_elements

    def _tokens(self, X):
        return check_token_matrix(X, self.key_width_ if hasattr(self, "key_width_") else self.key_width)

    def fit(self, X, y=None):
        """Build the basis for ``X``'s widths and clear the context."""
        check_choice("precision", self.precision, PRECISIONS)
        check_choice("on_degenerate", self.on_degenerate, ON_DEGENERATE)
        tokens = check_token_matrix(X, self.key_width)
        self.n_features_in_ = np.asarray(X).shape[1]
        self.key_width_ = tokens.key_width
        self.value_width_ = tokens.value_width
        self.family_ = build_basis_family(self.key_width_, self.truncation_order, self.scale,
                                          value_width=self.value_width_,
                                          max_elements=self.max_elements)
        self.state_ = init_state(self.family_, self.value_width_, max_elements=self.max_elements)
        return self

    def partial_fit(self, X, y=None):
        """Append ``X``'s keys and values to the context."""
        if not hasattr(self, "state_"):
            self.fit(X)
        tokens = self._tokens(X)
        update_state(self.state_, tokens.keys, tokens.values, self.family_,
                     precision=self.precision)
        return self

    def transform(self, X):
        """Outputs for each row of ``X`` attending causally over context plus ``X``.

        The fitted context is not modified.
        """
        check_is_fitted(self, "state_")
        tokens = self._tokens(X)
        state = self.state_.copy()
        if self.chunk_size:
            result = attend_scan(tokens, self.family_, self.chunk_size,
                                 on_degenerate=self.on_degenerate, precision=self.precision,
                                 state=state)
        else:
            result = attend_stream(tokens, self.family_, on_degenerate=self.on_degenerate,
                                   precision=self.precision, state=state)
        return result.outputs

    def query(self, Q):
        """Read the current context at each query row, without adding tokens."""
        check_is_fitted(self, "state_")
        Q = check_array(Q)
        return np.array([read_output(self.state_, q, self.family_, precision=self.precision).output
                         for q in Q])

    @property
    def n_context_(self):
        return self.state_.token_count


class SoftmaxAttention(TransformerMixin, BaseEstimator):
    """Exact causal softmax attention with an explicit key/value cache."""

    def __init__(self, scale=None, key_width=None, block_size=256):
        self.scale = scale
        self.key_width = key_width
        self.block_size = block_size

    def fit(self, X, y=None):
        tokens = check_token_matrix(X, self.key_width)
        self.n_features_in_ = np.asarray(X).shape[1]
        self.key_width_ = tokens.key_width
        self.value_width_ = tokens.value_width
        self.scale_ = math.sqrt(self.key_width_) if self.scale is None else float(self.scale)
        self.keys_ = np.empty((0, self.key_width_))
        self.values_ = np.empty((0, self.value_width_))
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "keys_"):
            self.fit(X)
        tokens = check_token_matrix(X, self.key_width_)
        self.keys_ = np.concatenate([self.keys_, tokens.keys])
        self.values_ = np.concatenate([self.values_, tokens.values])
        return self

    def transform(self, X):
        check_is_fitted(self, "keys_")
        tokens = check_token_matrix(X, self.key_width_)
        c = self.keys_.shape[0]
        full = Tokens(
            np.concatenate([np.zeros_like(self.keys_), tokens.queries]),
            np.concatenate([self.keys_, tokens.keys]),
            np.concatenate([self.values_, tokens.values]),
        )
        return conventional_attention(full, self.scale_, block_size=self.block_size,
                                      first_query=c).outputs

    @property
    def kv_cache_elements_(self):
        return self.keys_.size + self.values_.size
