import json
from dataclasses import replace

import numpy as np
import pytest

from diversity import Mode
from evaluators import SyntheticLandscape, bruteforce_optimum
from genetic_ops import Individual, Origin, Population
from macc_engine import (
    AblationFlags,
    CheckpointError,
    EvaluationLedger,
    InProcessWorkerPool,
    RunConfig,
    checkpoint_load,
    evaluate_candidates,
    global_feedback,
    init_state,
    merge_elites,
    merge_estimates,
    read_checkpoint,
    run_ablation_suite,
    run_generation,
    run_search,
    select_survivors,
)
from madts import EliteSet, MadtsConfig
from search_space import FUSION, Block, Chromosome, build_space, default_space, validate_chromosome
from transport import WorkerFailure


SMALL = RunConfig(
    population_size=8,
    generations=4,
    local_steps=2,
    elites=2,
    eval_budget=6,
    master_seed=3,
    madts=MadtsConfig(local_population=8),
)


@pytest.fixture
def landscape(desk):
    return SyntheticLandscape.generate(desk, seed=0, interaction_weight=0.3, interaction_pairs=4)


def _elites(tag, blocks, estimates=None):
    return EliteSet(tag, tuple(blocks), tuple(estimates or [0.5] * len(blocks)))


def test_merge_is_cartesian_product(tiny_space):
    sets = [
        _elites(1, [Block(1, (0,)), Block(1, (1,))], [0.1, 0.2]),
        _elites(2, [Block(2, (1,))], [0.3]),
        _elites(FUSION, [Block(FUSION, (0, 0)), Block(FUSION, (1, 1))], [0.0, 0.5]),
    ]
    merged = merge_elites(tiny_space, sets)
    assert [c.alleles for c in merged] == [(0, 1, 0, 0), (0, 1, 1, 1), (1, 1, 0, 0), (1, 1, 1, 1)]
    assert merge_estimates(tiny_space, sets) == pytest.approx([0.4, 0.9, 0.5, 1.0])


def test_merge_requires_every_block(tiny_space):
    with pytest.raises(ValueError, match="fusion"):
        merge_elites(tiny_space, [_elites(1, [Block(1, (0,))]), _elites(2, [Block(2, (0,))])])


def test_merge_size_matches_elite_count(desk, rng):
    from search_space import random_block

    sets = []
    for tag in desk.block_tags:
        blocks = []
        while len(blocks) < 3:
            block = random_block(desk, tag, rng)
            if block not in blocks:
                blocks.append(block)
        sets.append(_elites(tag, blocks))
    merged = merge_elites(desk, sets)
    assert len(merged) == 27 == len(set(merged))
    for c in merged:
        validate_chromosome(desk, c)


def test_candidate_budget_and_memo(desk, landscape, rng):
    ledger = EvaluationLedger(landscape)
    candidates = [Chromosome((i % 3,) * 9) for i in range(3)] + [Chromosome((0, 1, 2, 0, 1, 2, 0, 1, 2))]
    ledger.evaluate([candidates[0]], Origin.INIT, 0)
    before = landscape.true_eval_counter
    evaluated = evaluate_candidates(candidates + [candidates[1]], ledger, 2, rng)
    assert landscape.true_eval_counter - before == 2
    assert candidates[0] in {i.chromosome for i in evaluated}
    assert all(i.origin == Origin.MERGED_ELITE for i in evaluated)


def test_candidate_budget_prefers_estimates(desk, landscape, rng):
    ledger = EvaluationLedger(landscape)
    candidates = [Chromosome((i,) * 9) for i in range(3)]
    evaluated = evaluate_candidates(candidates, ledger, 1, rng, estimates=[0.1, 0.9, 0.5])
    assert [i.chromosome for i in evaluated] == [candidates[1]]


def test_candidate_budget_respects_cap(desk, landscape, rng):
    ledger = EvaluationLedger(landscape, cap=1)
    evaluated = evaluate_candidates([Chromosome((i,) * 9) for i in range(3)], ledger, 5, rng)
    assert len(evaluated) == 1
    assert ledger.remaining() == 0


def test_survivors_are_elitist_and_deduplicated(tiny_space):
    def ind(alleles, fitness, born=0, origin=Origin.INIT):
        return Individual(Chromosome(alleles), fitness, origin, born)

    current = Population([ind((0, 0, 0, 0), 0.5), ind((1, 0, 0, 0), 0.2)], generation=1)
    candidates = [
        ind((0, 0, 0, 0), 0.5, 1, Origin.MERGED_ELITE),
        ind((1, 1, 0, 0), 0.9, 1, Origin.MERGED_ELITE),
        ind((0, 1, 0, 0), 0.5, 1, Origin.MUTATION),
    ]
    survivors = select_survivors(current, candidates, 3)
    assert [m.chromosome.alleles for m in survivors.members] == [(1, 1, 0, 0), (0, 0, 0, 0), (0, 1, 0, 0)]
    assert survivors.members[1].origin == Origin.INIT


def test_survivors_padding_needs_ledger(tiny_space):
    current = Population([Individual(Chromosome((0, 0, 0, 0)), 0.5)])
    with pytest.raises(ValueError):
        select_survivors(current, [], 3)


def test_survivors_padding_is_evaluated(tiny_space, rng):
    landscape = SyntheticLandscape.generate(tiny_space, seed=1)
    ledger = EvaluationLedger(landscape)
    current = Population([Individual(Chromosome((0, 0, 0, 0)), 0.5)])
    survivors = select_survivors(current, [], 4, tiny_space, rng, ledger)
    assert len(survivors) == 4 == len({m.chromosome for m in survivors.members})
    assert landscape.true_eval_counter == 3


def test_global_feedback_takes_block_maximum(tiny_space):
    evaluated = [
        Individual(Chromosome((0, 0, 1, 1)), 0.3),
        Individual(Chromosome((0, 1, 1, 1)), 0.8),
    ]
    feedback = global_feedback(tiny_space, evaluated)
    assert feedback[1] == {Block(1, (0,)): 0.8}
    assert feedback[2] == {Block(2, (0,)): 0.3, Block(2, (1,)): 0.8}
    assert feedback[FUSION] == {Block(FUSION, (1, 1)): 0.8}


def test_run_config_validation_and_budget(desk):
    with pytest.raises(ValueError):
        RunConfig(population_size=1)
    config = RunConfig()
    assert config.budget_cap(desk) == 20 + 30 * (20 + 125)
    assert config.offspring_count(desk) == 20
    baseline = replace(config, ablation=AblationFlags(disable_macc=True))
    assert baseline.offspring_count(desk) == 145
    assert replace(config, ablation=AblationFlags(disable_madts=True)).madts_for_run().use_surrogate is False


def test_run_config_dict_round_trip():
    assert RunConfig.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL


def test_search_trace_properties(desk, landscape):
    result = run_search(SMALL, desk, landscape)
    trace = result.trace
    assert [r.generation for r in trace] == [1, 2, 3, 4]
    best = [r.best_fitness for r in trace]
    assert best == sorted(best)
    evals = [SMALL.population_size] + [r.true_evals_cumulative for r in trace]
    for previous, current in zip(evals, evals[1:]):
        assert 0 <= current - previous <= SMALL.population_size + SMALL.eval_budget
    assert all(0 < r.merged_candidates_count <= 8 for r in trace)
    assert all(r.tau == pytest.approx(0.5 * trace[0].spdi_value) for r in trace)
    assert result.best_fitness == landscape.score(result.best_chromosome)
    assert result.true_evals == landscape.true_eval_counter
    assert result.best_found_at <= result.true_evals
    assert all(r.counters["surrogate_fits"] <= 2 * 2 for r in trace)
    pairs = SMALL.population_size * (SMALL.population_size - 1) // 2
    assert all(r.counters["distance_computations"] == pairs == 28 for r in trace)
    assert all(r.counters["proposals"] == (desk.modality_count + 1) * SMALL.local_steps == 6 for r in trace)


def test_mode_follows_population_diversity_during_run(desk, landscape):
    state = init_state(SMALL, desk, landscape)
    initial = state.population
    pool = InProcessWorkerPool(desk, SMALL.madts_for_run(), landscape, SMALL.master_seed)
    try:
        state, first = run_generation(state, pool)
        assert first.mode == Mode.EXPLOIT
        best = state.population.best()
        state.population = Population(
            [replace(m, chromosome=best.chromosome, fitness=best.fitness) for m in state.population.members],
            state.generation,
        )
        state, collapsed = run_generation(state, pool)
        assert collapsed.spdi_value == 0.0
        assert collapsed.tau == pytest.approx(0.5 * first.spdi_value)
        assert (collapsed.mode, collapsed.p_cross, collapsed.p_mut) == (Mode.EXPLORE, 0.6, 0.3)
        state.population = Population(initial.members, state.generation)
        state, restored = run_generation(state, pool)
    finally:
        pool.close()
    assert restored.spdi_value == pytest.approx(first.spdi_value)
    assert (restored.mode, restored.p_cross, restored.p_mut) == (Mode.EXPLOIT, 0.9, 0.05)


def test_single_modality_space_runs():
    space = build_space([("a", "xyz", 1), ("b", "xyz", 1), ("f", "xy", FUSION)], 1)
    evaluator = SyntheticLandscape.generate(space, seed=1)
    config = replace(SMALL, generations=3, population_size=6, madts=MadtsConfig(local_population=6))
    result = run_search(config, space, evaluator)
    assert [r.generation for r in result.trace] == [1, 2, 3]
    validate_chromosome(space, result.best_chromosome)


def test_search_is_deterministic(desk, landscape):
    first = run_search(SMALL, desk, landscape)
    second = run_search(SMALL, desk, landscape)
    assert [r.to_row() for r in first.trace] == [r.to_row() for r in second.trace]
    assert first.best_chromosome == second.best_chromosome


def test_search_without_macc(desk, landscape):
    config = replace(SMALL, ablation=AblationFlags(disable_macc=True))
    result = run_search(config, desk, landscape)
    assert all(r.merged_candidates_count == 0 for r in result.trace)
    assert all(r.counters.get("proposals", 0) == 0 for r in result.trace)


def test_search_without_spdi_always_exploits(desk, landscape):
    config = replace(SMALL, ablation=AblationFlags(disable_spdi=True))
    result = run_search(config, desk, landscape)
    assert {r.mode for r in result.trace} == {Mode.EXPLOIT}
    assert {(r.p_cross, r.p_mut) for r in result.trace} == {(0.9, 0.05)}


def test_search_without_madts_never_fits(desk, landscape):
    config = replace(SMALL, ablation=AblationFlags(disable_madts=True))
    result = run_search(config, desk, landscape)
    assert sum(r.counters.get("surrogate_fits", 0) for r in result.trace) == 0


def test_eval_cap_stops_early(desk, landscape):
    config = replace(SMALL, generations=20, eval_cap=30)
    result = run_search(config, desk, landscape)
    assert result.true_evals <= 30
    assert len(result.trace) < 20


def test_parallel_evaluation_matches_serial(desk, landscape):
    serial = run_search(SMALL, desk, landscape)
    parallel = run_search(replace(SMALL, eval_parallelism=4), desk, landscape)
    assert [r.to_row() for r in serial.trace] == [r.to_row() for r in parallel.trace]


class _Crash(RuntimeError):
    pass


def test_resume_matches_uninterrupted_run(desk, landscape, tmp_path):
    config = replace(SMALL, checkpoint_every=2)
    expected = run_search(config, desk, landscape)
    checkpoint = tmp_path / "checkpoint.json"

    def crash(record):
        if record.generation == 3:
            raise _Crash()

    with pytest.raises(_Crash):
        run_search(config, desk, landscape, checkpoint_path=checkpoint, on_generation=crash)
    assert read_checkpoint(checkpoint)["generation"] == 2
    resumed = run_search(config, desk, landscape, checkpoint_path=checkpoint, resume_from=checkpoint)
    assert [r.to_row() for r in resumed.trace] == [r.to_row() for r in expected.trace]
    assert resumed.best_chromosome == expected.best_chromosome
    assert resumed.true_evals == expected.true_evals


def test_checkpoint_for_other_space_is_rejected(desk, landscape, tmp_path):
    checkpoint = tmp_path / "checkpoint.json"
    run_search(replace(SMALL, generations=2, checkpoint_every=1), desk, landscape, checkpoint_path=checkpoint)
    other = default_space()
    with pytest.raises(CheckpointError, match="different search space"):
        checkpoint_load(checkpoint, other, SyntheticLandscape.generate(other))


def test_corrupt_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "checkpoint.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    path.write_text(json.dumps({"version": 99}), encoding="utf-8")
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)


class _FlakyPool:
    def __init__(self, inner, failures):
        self.inner = inner
        self.failures = failures
        self.restores = 0

    def dispatch(self, generation, *args):
        if generation == 2 and self.failures > 0:
            self.failures -= 1
            raise WorkerFailure("worker 1 disconnected")
        return self.inner.dispatch(generation, *args)

    def feedback(self, generation, feedback):
        self.inner.feedback(generation, feedback)

    def restore(self, snapshots, feedback):
        self.restores += 1
        self.inner.restore(snapshots, feedback)

    def close(self):
        self.inner.close()


def _pool(desk, landscape, failures):
    return _FlakyPool(InProcessWorkerPool(desk, SMALL.madts, landscape, SMALL.master_seed), failures)


def test_single_worker_failure_is_retried(desk, landscape):
    expected = run_search(SMALL, desk, landscape)
    pool = _pool(desk, landscape, failures=1)
    try:
        result = run_search(SMALL, desk, landscape, pool=pool)
    finally:
        pool.close()
    assert pool.restores == 1
    assert [r.to_row() for r in result.trace] == [r.to_row() for r in expected.trace]


def test_second_failure_aborts_with_checkpoint(desk, landscape, tmp_path):
    pool = _pool(desk, landscape, failures=2)
    checkpoint = tmp_path / "checkpoint.json"
    try:
        with pytest.raises(WorkerFailure):
            run_search(SMALL, desk, landscape, pool=pool, checkpoint_path=checkpoint)
    finally:
        pool.close()
    assert read_checkpoint(checkpoint)["generation"] == 1


def test_ablation_suite_shape(desk, landscape):
    config = replace(SMALL, generations=2)
    result = run_ablation_suite(config, desk, landscape, seeds=[0, 1])
    assert [row.method for row in result.rows] == ["full", "w/o MACC", "w/o MADTS", "w/o SPDI"]
    assert result.rows[0].delta_vs_full is None
    assert all(row.delta_vs_full is not None for row in result.rows[1:])
    assert result.eval_cap == config.budget_cap(desk)
    for runs in result.runs.values():
        assert len(runs) == 2
        assert all(run.true_evals <= result.eval_cap for run in runs)


def test_ablation_needs_two_seeds(desk, landscape):
    with pytest.raises(ValueError):
        run_ablation_suite(SMALL, desk, landscape, seeds=[0])


@pytest.mark.slow
def test_desk_benchmark_finds_optimum(desk, landscape):
    _, optimum = bruteforce_optimum(desk, landscape)
    hits = 0
    for seed in range(10):
        result = run_search(RunConfig(master_seed=seed), desk, landscape)
        hits += np.isclose(result.best_fitness, optimum, atol=1e-12)
    assert hits >= 9


@pytest.mark.slow
def test_desk_ablation_ordering(desk, landscape):
    _, optimum = bruteforce_optimum(desk, landscape)
    result = run_ablation_suite(RunConfig(), desk, landscape, seeds=range(10), reference_optimum=optimum)
    rows = {row.method: row for row in result.rows}
    assert rows["full"].mean_best >= rows["w/o MACC"].mean_best
    assert rows["full"].mean_best >= rows["w/o SPDI"].mean_best
    full, without_surrogate = rows["full"].evals_to_target_mean, rows["w/o MADTS"].evals_to_target_mean
    if full is not None and without_surrogate is not None:
        assert without_surrogate >= 1.3 * full
