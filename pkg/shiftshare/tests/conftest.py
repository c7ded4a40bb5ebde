import os

import numpy as np
import pytest

from shiftshare import Design, SharesMatrix, Shifters
from shiftshare.tests.utils import random_shares


def pytest_report_header(config):
    """Insert a customized header into the test report."""

    versions = os.linesep
    versions += 'numpy: '

    try:
        import numpy
        versions += numpy.__version__
    except ImportError:
        versions += 'not installed'

    versions += os.linesep
    versions += 'scipy: '

    try:
        import scipy
        versions += scipy.__version__
    except ImportError:
        versions += 'not installed'

    versions += os.linesep
    versions += 'pandas: '

    try:
        import pandas
        versions += pandas.__version__
    except ImportError:
        versions += 'not installed'

    versions += os.linesep
    versions += 'joblib: '

    try:
        import joblib
        versions += joblib.__version__
    except ImportError:
        versions += 'not installed'
    except AttributeError:
        versions += 'unknown version'

    versions += os.linesep

    return versions


@pytest.fixture
def concentrated():
    """Regions r1, r2 specialise in s1 and r3, r4 in s2; no controls."""
    shares = SharesMatrix(
        ('r1', 'r2', 'r3', 'r4'), ('s1', 's2'),
        [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    shifters = Shifters([1.0, -1.0], ('s1', 's2'))
    design = Design([2.0, 1.0, -1.0, -1.0])
    return shares, shifters, design


@pytest.fixture
def identity():
    """W = I2, shifters (1, -1), Y = 3X, no controls."""
    shares = SharesMatrix(('r1', 'r2'), ('s1', 's2'), np.eye(2))
    shifters = Shifters([1.0, -1.0], ('s1', 's2'))
    design = Design([3.0, -3.0])
    return shares, shifters, design


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_instance(rng):
    """N=30, S=5 Dirichlet shares with an intercept and one more control."""
    shares = random_shares(rng, 30, 5)
    shifters = Shifters(rng.normal(0, 2, 5), shares.sectors)
    x = shares.w @ shifters.values
    z = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = 0.7 * x + z @ [0.3, -0.2] + shares.w @ rng.normal(0, 1, 5) \
        + rng.normal(0, 0.5, 30)
    design = Design(y, z=z, z_names=('intercept', 'z1'))
    return shares, shifters, design
