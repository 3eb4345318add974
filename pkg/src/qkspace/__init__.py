"""Contrastive QK subspace decomposition of a single attention head.

Modules:

- ``tensorcore``: matrices, Jacobi SVD, PCA, seeded random streams
- ``datagen``: the payload-retrieval toy task
- ``attnmodel``: one attention head with analytic gradients and AdamW
- ``contrastive``: contrastive query-key covariances
- ``decompose``: rank selection, interaction matrix, superposition score
- ``intervene``: key-side subspace swaps
- ``attribute``: per-feature attention-logit attribution
- ``dumps``: labeled activation dumps from external models
- ``experiments`` / ``cli``: config-driven runs
"""

__version__ = "0.1.0"
