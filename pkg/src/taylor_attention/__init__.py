"""Causal attention at constant cost per token.

The exponential kernel is replaced by its truncated Taylor series, and each
power of the query-key dot product is evaluated over the distinct monomials of
a symmetric tensor. Causal attention then reduces to fixed-size running sums.
"""

from .attention import (
    AttentionOutput,
    AttentionOutputs,
    AttentionState,
    Tokens,
    TokenTriple,
    attend_scan,
    attend_stream,
    combine_states,
    conventional_attention,
    init_state,
    iter_attend,
    read_output,
    update_state,
)
from .basis import (
    BasisFamily,
    DegreeBasis,
    build_basis_family,
    build_degree_basis,
    enumerate_index_tuples,
    tuple_multiplicity,
)
from .estimators import (
    SoftmaxAttention,
    SymmetricMonomialFeatures,
    TaylorAttention,
    TaylorKernelFeatures,
)
from .exceptions import (
    DegenerateDenominatorError,
    DomainError,
    ElementBudgetError,
    EmptyContextError,
)
from .featuremap import FeatureVector, phi, phi_weighted, weighted_inner
from .kernel import KernelConfig, kernel_exact, kernel_truncated, truncation_residual

__version__ = "0.1.0"
