import json
from pathlib import Path

import pytest

from config import ConfigError, build_evaluator, hello_payload, load_config, parse_config, to_run_config
from evaluators import SyntheticLandscape, TabularBenchmark
from search_space import Chromosome, default_space, desk_space


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _errors(data):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    return info.value.errors


def test_shipped_desk_config_matches_preset():
    config = load_config(CONFIGS / "desk_benchmark.json")
    assert config.space.build() == desk_space()
    run = to_run_config(config)
    assert (run.population_size, run.generations, run.local_steps, run.elites, run.eval_budget) == (20, 30, 5, 5, 125)
    assert run.diversity.tau_fraction == 0.5
    assert run.madts.local_population == 20


def test_shipped_configs_validate():
    assert load_config(CONFIGS / "default_k18.json").space.build() == default_space()
    tcp = load_config(CONFIGS / "desk_tcp.json")
    assert tcp.transport.mode == "tcp" and tcp.transport.workers == 3


def test_defaults_from_minimal_config():
    config = parse_config({"space": {"preset": "desk"}})
    assert config.evaluator.kind == "synthetic"
    assert config.transport.mode == "in_process"
    assert to_run_config(config, seed=7).master_seed == 7


def test_every_problem_is_reported_with_its_path():
    errors = _errors({"space": {"preset": "desk"}, "run": {"N": 1, "T": 0, "bogus": True}})
    joined = "\n".join(errors)
    assert len(errors) == 3
    assert "run.N" in joined and "run.T" in joined and "run.bogus" in joined


def test_preset_and_genes_are_exclusive():
    errors = _errors({"space": {"preset": "desk", "modalities": 2, "genes": []}})
    assert any("either a preset" in e for e in errors)


def test_invalid_space_is_rejected():
    genes = [
        {"name": "a", "candidates": ["x"], "block": 1},
        {"name": "f", "candidates": ["x", "y"], "block": "fusion"},
    ]
    errors = _errors({"space": {"modalities": 1, "genes": genes}})
    assert any("< 2 candidates" in e for e in errors)


def test_unknown_block_tag():
    genes = [{"name": "a", "candidates": ["x", "y"], "block": "audio"}]
    errors = _errors({"space": {"modalities": 1, "genes": genes}})
    assert any("space.genes.0.block" in e for e in errors)


def test_worker_count_must_match_blocks():
    errors = _errors({"space": {"preset": "desk"}, "transport": {"mode": "tcp", "workers": 2}})
    assert any("modalities + 1 = 3" in e for e in errors)


def test_rate_pairs_must_be_ordered():
    errors = _errors({"space": {"preset": "desk"}, "spdi": {"p_mut_low": 0.5}})
    assert any("p_mut_low" in e for e in errors)


def test_unknown_evaluator_kind():
    errors = _errors({"space": {"preset": "desk"}, "evaluator": {"kind": "oracle"}})
    assert any(e.startswith("evaluator") for e in errors)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)


def test_tabular_path_resolves_against_config(tmp_path):
    (tmp_path / "bench.csv").write_text(
        "allele_0,allele_1,allele_2,allele_3,score\n0,0,0,0,0.5\n", encoding="utf-8"
    )
    data = {
        "space": {
            "modalities": 2,
            "genes": [
                {"name": "a", "candidates": ["a0", "a1"], "block": 1},
                {"name": "b", "candidates": ["b0", "b1"], "block": 2},
                {"name": "f1", "candidates": ["x", "y"], "block": "fusion"},
                {"name": "f2", "candidates": ["p", "q"], "block": "fusion"},
            ],
        },
        "evaluator": {"kind": "tabular", "parameters": {"path": "bench.csv"}},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    config = load_config(path)
    assert Path(config.evaluator.parameters.path) == (tmp_path / "bench.csv").resolve()
    evaluator = build_evaluator(config.evaluator, config.space.build())
    assert isinstance(evaluator, TabularBenchmark)
    assert evaluator.eval_global(Chromosome((0, 0, 0, 0))) == 0.5


def test_worker_rebuilds_the_same_evaluator():
    config = load_config(CONFIGS / "desk_benchmark.json")
    space = config.space.build()
    payload = json.loads(json.dumps(hello_payload(config, space, to_run_config(config))))
    assert set(payload) == {"space", "madts", "evaluator", "master_seed"}
    local = build_evaluator(config.evaluator, space)
    remote = build_evaluator(payload["evaluator"], space)
    assert isinstance(remote, SyntheticLandscape)
    c = Chromosome((1, 2, 0, 1, 2, 0, 1, 2, 0))
    assert local.score(c) == remote.score(c)


def test_bad_evaluator_dict_raises_config_error():
    with pytest.raises(ConfigError):
        build_evaluator({"kind": "synthetic", "parameters": {"noise": -1}}, desk_space())


def test_madts_ablation_switches_off_surrogate_for_workers():
    config = parse_config({"space": {"preset": "desk"}, "ablation": {"disable_madts": True}})
    space = config.space.build()
    assert hello_payload(config, space, to_run_config(config))["madts"]["use_surrogate"] is False
