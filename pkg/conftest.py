import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from search_space import FUSION, build_space, desk_space  # noqa: E402


@pytest.fixture
def desk():
    return desk_space()


@pytest.fixture
def tiny_space():
    """Four binary genes: one per modality block, two in fusion (16 chromosomes)."""
    return build_space(
        [
            ("a", ("a0", "a1"), 1),
            ("b", ("b0", "b1"), 2),
            ("f1", ("x", "y"), FUSION),
            ("f2", ("p", "q"), FUSION),
        ],
        2,
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
