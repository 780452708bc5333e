import itertools
import math
from collections import Counter

import numpy as np
import pytest

from diversity import (
    DiversityConfig,
    Mode,
    ThresholdState,
    UndefinedDiversityError,
    decide_rates,
    fixed_rates,
    init_threshold,
    pairwise_distance,
    spdi,
)
from search_space import Chromosome, default_space, encode, encode_many, random_chromosome


def test_pairwise_distance_on_one_hot(desk):
    a = Chromosome((0,) * 9)
    b = Chromosome((1,) + (0,) * 8)
    c = Chromosome((1,) * 8 + (0,))
    assert pairwise_distance(encode(desk, a), encode(desk, a)) == 0.0
    assert pairwise_distance(encode(desk, a), encode(desk, b)) == pytest.approx(math.sqrt(2))
    assert pairwise_distance(encode(desk, a), encode(desk, c)) == pytest.approx(4.0)


def test_pairwise_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        pairwise_distance([0.0, 1.0], [0.0])


def test_spdi_mean_of_pairs():
    # Points on a line at 0, 1, 3: distances 1, 3, 2.
    assert spdi([[0.0], [1.0], [3.0]]) == pytest.approx(2.0)


def test_spdi_identical_members_is_zero(desk):
    row = encode(desk, Chromosome((2,) * 9))
    assert spdi([row] * 5) == 0.0


def test_spdi_needs_two_members():
    with pytest.raises(UndefinedDiversityError):
        spdi([[1.0, 0.0]])


def test_spdi_matches_double_loop(rng):
    space = default_space()
    population = [random_chromosome(space, rng) for _ in range(20)]
    population.append(population[3])
    matrix = encode_many(space, population)
    pairs = list(itertools.combinations(range(len(matrix)), 2))
    reference = sum(float(np.linalg.norm(matrix[i] - matrix[j])) for i, j in pairs) / len(pairs)
    counters = Counter()
    assert spdi(matrix, counters) == pytest.approx(reference, abs=1e-9)
    assert counters["distance_computations"] == len(pairs)
    assert spdi(matrix[::-1]) == pytest.approx(reference, abs=1e-9)


def test_spdi_scales_linearly(rng, desk):
    matrix = encode_many(desk, [random_chromosome(desk, rng) for _ in range(6)])
    assert spdi(3.0 * matrix) == pytest.approx(3.0 * spdi(matrix))


def test_threshold_is_fraction_of_initial_diversity():
    state = init_threshold([[0.0], [4.0]], DiversityConfig(tau_fraction=0.5))
    assert state.initial_diversity == 4.0
    assert state.tau == 2.0
    assert init_threshold([[0.0], [1.0]], DiversityConfig(tau_fraction=0.9)).tau == pytest.approx(0.9)


def test_collapsed_initial_population_always_exploits():
    config = DiversityConfig()
    state = init_threshold([[1.0, 0.0]] * 3, config)
    assert state.tau == 0.0
    assert decide_rates(0.0, state, config).mode == Mode.EXPLOIT


def test_rate_switch():
    config = DiversityConfig()
    threshold = ThresholdState(initial_diversity=4.0, tau=2.0)
    exploit = decide_rates(3.0, threshold, config)
    assert (exploit.p_cross, exploit.p_mut, exploit.mode) == (0.9, 0.05, Mode.EXPLOIT)
    assert decide_rates(2.0, threshold, config).mode == Mode.EXPLOIT
    explore = decide_rates(0.0, threshold, config)
    assert (explore.p_cross, explore.p_mut, explore.mode) == (0.6, 0.3, Mode.EXPLORE)


def test_guard_absorbs_rounding_below_threshold():
    config = DiversityConfig(epsilon_guard=1e-9)
    threshold = ThresholdState(initial_diversity=4.0, tau=2.0)
    assert decide_rates(2.0 - 1e-10, threshold, config).mode == Mode.EXPLOIT
    assert decide_rates(2.0 - 1e-6, threshold, config).mode == Mode.EXPLORE
    strict = DiversityConfig(epsilon_guard=0.0)
    assert decide_rates(2.0 - 1e-10, threshold, strict).mode == Mode.EXPLORE


def test_fixed_rates_ignore_diversity():
    config = DiversityConfig()
    decision = fixed_rates(0.0, ThresholdState(4.0, 2.0), config)
    assert (decision.p_cross, decision.p_mut) == (0.9, 0.05)


def test_negative_spdi_rejected():
    with pytest.raises(ValueError):
        decide_rates(-0.1, ThresholdState(1.0, 0.5), DiversityConfig())


@pytest.mark.parametrize(
    "kwargs",
    [{"p_cross_low": 0.95}, {"p_mut_high": 0.01}, {"tau_fraction": 1.0}, {"tau_fraction": 0.0}],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        DiversityConfig(**kwargs)
