"""Run configuration files.

A run is described by one JSON document. It is validated strictly (unknown
keys are errors, every range is checked) before any work starts, and every
problem is reported with its JSON path.
"""

import json
from dataclasses import asdict
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator, model_validator

from diversity import DiversityConfig
from evaluators import BridgeConfig, Evaluator, ExternalEvaluator, SyntheticLandscape, TabularBenchmark
from macc_engine import AblationFlags, RunConfig
from madts import MadtsConfig
from search_space import SearchSpace, build_space, default_space, desk_space, parse_tag, space_to_dict, validate_space


PRESETS = {"desk": desk_space, "default_k18": default_space}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one ``path: message`` per problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in self.errors))


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeneEntry(StrictModel):
    name: str = Field(min_length=1)
    candidates: list[str]
    block: Union[int, str]

    @field_validator("block")
    @classmethod
    def _known_tag(cls, value):
        return parse_tag(value)


class SpaceSection(StrictModel):
    preset: Optional[Literal["desk", "default_k18"]] = None
    modalities: Optional[int] = Field(default=None, ge=1)
    genes: Optional[list[GeneEntry]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.preset is not None and (self.genes is not None or self.modalities is not None):
            raise ValueError("give either a preset or modalities + genes, not both")
        if self.preset is None and (self.genes is None or self.modalities is None):
            raise ValueError("modalities and genes are required without a preset")
        return self

    def build(self) -> SearchSpace:
        if self.preset is not None:
            return PRESETS[self.preset]()
        return build_space([(g.name, g.candidates, g.block) for g in self.genes], self.modalities)


class RunSection(StrictModel):
    N: int = Field(default=20, ge=2)
    T: int = Field(default=30, ge=1)
    T_LS: int = Field(default=5, ge=1)
    E: int = Field(default=5, ge=1)
    budget: int = Field(default=125, ge=1)
    seed: int = Field(default=0, ge=0)
    tournament_size: int = Field(default=2, ge=1)
    eval_parallelism: int = Field(default=1, ge=1)
    eval_cap: Optional[int] = Field(default=None, ge=1)
    checkpoint_every: int = Field(default=0, ge=0)
    record_wallclock: bool = False


class SpdiSection(StrictModel):
    p_cross_high: float = Field(default=0.9, ge=0.0, le=1.0)
    p_cross_low: float = Field(default=0.6, ge=0.0, le=1.0)
    p_mut_high: float = Field(default=0.3, ge=0.0, le=1.0)
    p_mut_low: float = Field(default=0.05, ge=0.0, le=1.0)
    rho: float = Field(default=0.5, gt=0.0, lt=1.0)
    epsilon: float = Field(default=1e-12, ge=0.0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.p_cross_low > self.p_cross_high:
            raise ValueError("p_cross_low must not exceed p_cross_high")
        if self.p_mut_low > self.p_mut_high:
            raise ValueError("p_mut_low must not exceed p_mut_high")
        return self


class MadtsSection(StrictModel):
    window: int = Field(default=20, ge=2)
    epsilon: float = Field(default=1e-6, gt=0.0)
    beta: float = Field(default=2.0, ge=0.0)
    archive_capacity: int = Field(default=256, ge=1)
    local_pop: int = Field(default=20, ge=2)
    local_exchange_rate: float = Field(default=0.8, ge=0.0, le=1.0)
    local_mutation_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    enumeration_limit: int = Field(default=10_000, ge=1)
    sample_size: int = Field(default=1_000, ge=1)


class SyntheticParameters(StrictModel):
    seed: int = Field(default=0, ge=0)
    interaction_weight: float = Field(default=0.3, ge=0.0)
    interaction_pairs: int = Field(default=4, ge=0)
    noise: float = Field(default=0.0, ge=0.0)


class TabularParameters(StrictModel):
    path: str = Field(min_length=1)


class ExternalParameters(StrictModel):
    command: list[str] = Field(min_length=1)
    timeout: float = Field(default=600.0, gt=0.0)
    pool_size: int = Field(default=1, ge=1)
    on_error: Literal["abort", "zero"] = "abort"


class SyntheticEvaluator(StrictModel):
    kind: Literal["synthetic"]
    parameters: SyntheticParameters = SyntheticParameters()


class TabularEvaluator(StrictModel):
    kind: Literal["tabular"]
    parameters: TabularParameters


class ExternalEvaluatorSection(StrictModel):
    kind: Literal["external"]
    parameters: ExternalParameters


EvaluatorSection = Annotated[
    Union[SyntheticEvaluator, TabularEvaluator, ExternalEvaluatorSection],
    Field(discriminator="kind"),
]


EVALUATOR_ADAPTER = TypeAdapter(EvaluatorSection)


class TransportSection(StrictModel):
    mode: Literal["in_process", "tcp"] = "in_process"
    bind: str = "127.0.0.1:7640"
    workers: Optional[int] = Field(default=None, ge=2)
    spawn_workers: bool = False
    reply_timeout: float = Field(default=600.0, gt=0.0)


class AblationSection(StrictModel):
    disable_macc: bool = False
    disable_madts: bool = False
    disable_spdi: bool = False


class ConfigFile(StrictModel):
    space: SpaceSection
    run: RunSection = RunSection()
    spdi: SpdiSection = SpdiSection()
    madts: MadtsSection = MadtsSection()
    evaluator: EvaluatorSection = SyntheticEvaluator(kind="synthetic")
    transport: TransportSection = TransportSection()
    ablation: AblationSection = AblationSection()

    @model_validator(mode="after")
    def _consistent(self):
        problems = validate_space(self.space.build())
        if problems:
            raise ValueError("space: " + "; ".join(problems))
        expected = self.space.build().modality_count + 1
        if self.transport.workers is not None and self.transport.workers != expected:
            raise ValueError(f"transport.workers must equal modalities + 1 = {expected}")
        return self


def _error_path(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(data, base_dir=None) -> ConfigFile:
    try:
        config = ConfigFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{_error_path(e['loc'])}: {e['msg']}" for e in exc.errors()) from exc
    if base_dir is not None and isinstance(config.evaluator, TabularEvaluator):
        path = Path(config.evaluator.parameters.path)
        if not path.is_absolute():
            parameters = TabularParameters(path=str((Path(base_dir) / path).resolve()))
            config = config.model_copy(update={"evaluator": TabularEvaluator(kind="tabular", parameters=parameters)})
    return config


def load_config(path) -> ConfigFile:
    """Read and validate a JSON run config; relative paths resolve against its folder."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc.strerror or exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: {path} is not valid JSON: {exc}"]) from exc
    return parse_config(data, base_dir=path.parent)


def to_run_config(config: ConfigFile, seed: Optional[int] = None) -> RunConfig:
    run, spdi, madts = config.run, config.spdi, config.madts
    return RunConfig(
        population_size=run.N,
        generations=run.T,
        local_steps=run.T_LS,
        elites=run.E,
        eval_budget=run.budget,
        master_seed=run.seed if seed is None else seed,
        diversity=DiversityConfig(
            p_cross_high=spdi.p_cross_high,
            p_cross_low=spdi.p_cross_low,
            p_mut_high=spdi.p_mut_high,
            p_mut_low=spdi.p_mut_low,
            tau_fraction=spdi.rho,
            epsilon_guard=spdi.epsilon,
        ),
        madts=MadtsConfig(
            window=madts.window,
            epsilon=madts.epsilon,
            beta=madts.beta,
            archive_capacity=madts.archive_capacity,
            local_population=madts.local_pop,
            local_exchange_rate=madts.local_exchange_rate,
            local_mutation_rate=madts.local_mutation_rate,
            enumeration_limit=madts.enumeration_limit,
            sample_size=madts.sample_size,
        ),
        ablation=AblationFlags(**config.ablation.model_dump()),
        tournament_size=run.tournament_size,
        eval_parallelism=run.eval_parallelism,
        eval_cap=run.eval_cap,
        checkpoint_every=run.checkpoint_every,
        record_wallclock=run.record_wallclock,
    )


def build_evaluator(section, space: SearchSpace) -> Evaluator:
    """Evaluator for a validated section, or for its ``model_dump`` sent to a worker."""
    if isinstance(section, dict):
        try:
            section = EVALUATOR_ADAPTER.validate_python(section)
        except ValidationError as exc:
            raise ConfigError(f"evaluator.{_error_path(e['loc'])}: {e['msg']}" for e in exc.errors()) from exc
    parameters = section.parameters
    if isinstance(section, SyntheticEvaluator):
        return SyntheticLandscape.generate(
            space,
            seed=parameters.seed,
            interaction_weight=parameters.interaction_weight,
            interaction_pairs=parameters.interaction_pairs,
            noise=parameters.noise,
        )
    if isinstance(section, TabularEvaluator):
        return TabularBenchmark.load(parameters.path, space)
    return ExternalEvaluator(
        space,
        BridgeConfig(
            command=tuple(parameters.command),
            timeout=parameters.timeout,
            pool_size=parameters.pool_size,
            on_error=parameters.on_error,
        ),
    )


def hello_payload(config: ConfigFile, space: SearchSpace, run: RunConfig) -> dict:
    """What every TCP worker needs to rebuild its session."""
    return {
        "space": space_to_dict(space),
        "madts": asdict(run.madts_for_run()),
        "evaluator": config.evaluator.model_dump(),
        "master_seed": run.master_seed,
    }
