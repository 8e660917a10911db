"""Input checks shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import check_array

from .attention import Tokens
from .exceptions import DomainError


def check_token_matrix(X, key_width=None, dtype=np.float64):
    """Split ``X`` with columns ``[query | key | value]`` into :class:`Tokens`.

    Without ``key_width`` the three blocks are assumed equally wide.
    """
    X = check_array(X, dtype=dtype, ensure_min_samples=1)
    n_cols = X.shape[1]
    if key_width is None:
        if n_cols % 3:
            raise DomainError(
                f"{n_cols} columns cannot be split into equal query/key/value blocks; "
                "set key_width"
            )
        key_width = n_cols // 3
    if key_width < 1 or n_cols - 2 * key_width < 1:
        raise DomainError(f"{n_cols} columns leave no room for values with key_width={key_width}")
    return Tokens(
        X[:, :key_width], X[:, key_width:2 * key_width], X[:, 2 * key_width:]
    )


def check_choice(name, value, choices):
    if value not in choices:
        raise DomainError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value
