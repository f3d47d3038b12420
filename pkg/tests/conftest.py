"""Shared fixtures: small synthetic draws and fast estimator settings.

Unit tests shrink ensemble sizes to keep runtime low; statistical
assertions use pinned seeds so bounds are deterministic.
"""

import pytest

from cropcate import (
    BoostParams,
    ConstantTheta,
    DgpSpec,
    EstimatorConfig,
    ForestParams,
    LinearTheta,
    generate,
)

FAST_FOREST = ForestParams(n_trees=30, max_depth=8, min_leaf_size=5)
FAST_BOOST = BoostParams(n_rounds=30, max_depth=3, learning_rate=0.1)


@pytest.fixture(scope="session")
def fast_estimator() -> EstimatorConfig:
    return EstimatorConfig(y_forest=FAST_FOREST, t_forest=FAST_FOREST,
                           propensity=FAST_BOOST)


@pytest.fixture(scope="session")
def synth_constant():
    """One draw with a constant effect of 2.0, n=600."""
    return generate(DgpSpec(n=600, p=5, theta=ConstantTheta(2.0), seed=11))


@pytest.fixture(scope="session")
def synth_linear():
    """One draw with effect 1 + x1, n=800."""
    return generate(DgpSpec(n=800, p=5,
                            theta=LinearTheta(1.0, (1.0, 0.0, 0.0, 0.0, 0.0)),
                            seed=23))
