"""hoodval: neighborhood-aware housing price estimation.

Computes walkability, land-use, urban-fabric, transit and security
features for census blocks, aggregates them over 1 km egohoods, trains a
regularized gradient-boosted-tree regressor under spatially independent
cross-validation, and decomposes every prediction into a bias plus
per-feature contributions.
"""

__version__ = "0.1.0"
