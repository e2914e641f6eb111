import numpy as np
import pytest

from flowlab import MollifierSpec, build_covariance


@pytest.fixture(scope="session")
def cov_triangle():
    return build_covariance(MollifierSpec("triangle-smooth", 1.0, 1025))


@pytest.fixture(scope="session")
def cov_bump():
    return build_covariance(MollifierSpec("bump", 1.0, 1025))


@pytest.fixture(scope="session")
def cov_cosine():
    return build_covariance(MollifierSpec("truncated-cosine", 1.0, 1025))
