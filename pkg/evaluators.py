"""Fitness oracles behind one contract.

``eval_global`` is the true (counted) evaluation of a chromosome and is the
unit of search budget. ``eval_local`` is the auxiliary per-block signal the
workers use; it never advances the true-evaluation counter. Evaluators
without a native local signal score a block inside a frozen context
chromosome (normally the incumbent best).
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from rng_utils import hashed_stream, make_stream
from search_space import (
    Block,
    Chromosome,
    SearchSpace,
    decompose,
    enumerate_chromosomes,
    reassemble,
    space_size,
    space_to_dict,
    validate_block,
    validate_chromosome,
)


LOGGER = logging.getLogger("macc")


class EvaluationError(RuntimeError):
    pass


class MissingArchitectureError(EvaluationError):
    pass


class EvaluatorTimeoutError(EvaluationError):
    pass


class MalformedResponseError(EvaluationError):
    pass


class TabularFormatError(ValueError):
    pass


class SearchSpaceTooLargeError(ValueError):
    pass


class Evaluator(ABC):
    """Base contract: counted global evaluation, uncounted local evaluation."""

    supports_local = False

    def __init__(self, space: SearchSpace):
        self.space = space
        self.true_eval_counter = 0
        self.local_evals = 0
        self._lock = threading.Lock()

    @abstractmethod
    def score(self, c: Chromosome) -> float:
        """Raw global score in [0, 1], without touching the counter."""

    def eval_global(self, c: Chromosome) -> float:
        validate_chromosome(self.space, c)
        value = self.score(c)
        if not 0.0 <= value <= 1.0:
            raise EvaluationError(f"score {value} for {list(c.alleles)} outside [0, 1]")
        with self._lock:
            self.true_eval_counter += 1
        return value

    def eval_local(self, block: Block, context: Optional[Chromosome] = None) -> float:
        """Score ``block`` with every other gene frozen to ``context``."""
        validate_block(self.space, block)
        if context is None:
            context = Chromosome(tuple(0 for _ in self.space.genes))
        blocks = [block if b.block_tag == block.block_tag else b for b in decompose(self.space, context)]
        with self._lock:
            self.local_evals += 1
        return self.score(reassemble(self.space, blocks))

    def restore_counter(self, value: int):
        with self._lock:
            self.true_eval_counter = int(value)

    def close(self):
        pass


class SyntheticLandscape(Evaluator):
    """Separable per-gene utilities plus weighted cross-block couplings.

    Scores are normalised by the sum of per-term minima and maxima, which is
    exact for ``interaction_weight == 0``. Optional noise is a pure function
    of (seed, alleles), so re-evaluating a chromosome gives the same value.
    """

    supports_local = True

    def __init__(
        self,
        space: SearchSpace,
        utilities: Sequence[Sequence[float]],
        interaction_weight: float = 0.0,
        pairs: Sequence[tuple[int, int, np.ndarray]] = (),
        noise: float = 0.0,
        seed: int = 0,
    ):
        super().__init__(space)
        if interaction_weight < 0 or noise < 0:
            raise ValueError("interaction weight and noise must be >= 0")
        if len(utilities) != len(space.genes):
            raise ValueError("one utility table per gene is required")
        self.utilities = [list(map(float, table)) for table in utilities]
        for gene, table in zip(space.genes, self.utilities):
            if len(table) != gene.cardinality:
                raise ValueError(f"utility table of gene {gene.name} has the wrong length")
        self.interaction_weight = float(interaction_weight)
        self.pairs = [(int(i), int(j), np.asarray(t, dtype=float)) for i, j, t in pairs]
        self.noise = float(noise)
        self.seed = int(seed)
        self._low = sum(min(t) for t in self.utilities) + self.interaction_weight * sum(
            float(t.min()) for _, _, t in self.pairs
        )
        self._high = sum(max(t) for t in self.utilities) + self.interaction_weight * sum(
            float(t.max()) for _, _, t in self.pairs
        )

    @classmethod
    def generate(cls, space: SearchSpace, seed: int = 0, interaction_weight: float = 0.3,
                 interaction_pairs: int = 4, noise: float = 0.0) -> "SyntheticLandscape":
        rng = make_stream(seed, "landscape")
        utilities = [rng.random(gene.cardinality) for gene in space.genes]
        cross = [
            (i, j)
            for i in range(len(space.genes))
            for j in range(i + 1, len(space.genes))
            if space.genes[i].block_tag != space.genes[j].block_tag
        ]
        chosen = rng.choice(len(cross), size=min(interaction_pairs, len(cross)), replace=False) if cross else []
        pairs = []
        for index in sorted(int(k) for k in chosen):
            i, j = cross[index]
            pairs.append((i, j, rng.random((space.genes[i].cardinality, space.genes[j].cardinality))))
        return cls(space, utilities, interaction_weight, pairs, noise, seed)

    def raw(self, alleles: Sequence[int]) -> float:
        total = sum(table[a] for table, a in zip(self.utilities, alleles))
        coupling = sum(float(t[alleles[i], alleles[j]]) for i, j, t in self.pairs)
        return total + self.interaction_weight * coupling

    def score(self, c: Chromosome) -> float:
        span = self._high - self._low
        value = (self.raw(c.alleles) - self._low) / span if span > 0 else 1.0
        if self.noise > 0:
            value += self.noise * float(hashed_stream(self.seed, "noise", c.alleles).standard_normal())
        return min(1.0, max(0.0, value))

    def eval_local(self, block: Block, context: Optional[Chromosome] = None) -> float:
        """Block utility normalised by that block's own extremes; couplings ignored."""
        validate_block(self.space, block)
        tables = [self.utilities[g] for g in self.space.genes_of(block.block_tag)]
        low = sum(min(t) for t in tables)
        high = sum(max(t) for t in tables)
        with self._lock:
            self.local_evals += 1
        if high <= low:
            return 1.0
        return (sum(t[a] for t, a in zip(tables, block.alleles)) - low) / (high - low)


class TabularBenchmark(Evaluator):
    """Exact lookup of precomputed architecture scores."""

    def __init__(self, space: SearchSpace, table: dict[tuple[int, ...], float], source: Optional[Path] = None):
        super().__init__(space)
        self.table = table
        self.source = source

    @classmethod
    def load(cls, path, space: SearchSpace) -> "TabularBenchmark":
        path = Path(path)
        k = len(space.genes)
        expected = [f"allele_{i}" for i in range(k)] + ["score"]
        try:
            frame = pd.read_csv(path, encoding="utf-8")
        except (OSError, ValueError) as exc:
            raise TabularFormatError(f"cannot read tabular benchmark {path}: {exc}") from exc
        if list(frame.columns) != expected:
            raise TabularFormatError(
                f"{path}: header must be {','.join(expected)}, got {','.join(map(str, frame.columns))}"
            )
        scores = pd.to_numeric(frame["score"], errors="coerce")
        if scores.isna().any():
            raise TabularFormatError(f"{path}: non-numeric score in row {int(scores.isna().idxmax()) + 2}")
        out_of_range = (scores < 0) | (scores > 1)
        if out_of_range.any():
            row = int(out_of_range.idxmax())
            raise TabularFormatError(f"{path}: score {scores[row]} in row {row + 2} outside [0, 1]")
        table = {}
        for alleles, value in zip(frame[expected[:-1]].itertuples(index=False, name=None), scores):
            key = tuple(int(a) for a in alleles)
            try:
                validate_chromosome(space, Chromosome(key))
            except ValueError as exc:
                raise TabularFormatError(f"{path}: {exc}") from exc
            table[key] = float(value)
        LOGGER.info(
            "Tabular benchmark loaded",
            extra={"event": "tabular_loaded", "file_path": str(path)},
        )
        return cls(space, table, path)

    def score(self, c: Chromosome) -> float:
        try:
            return self.table[c.alleles]
        except KeyError:
            raise MissingArchitectureError(f"architecture {list(c.alleles)} is not in the table") from None


@dataclass(frozen=True)
class BridgeConfig:
    command: tuple[str, ...]
    timeout: float = 600.0
    pool_size: int = 1
    on_error: str = "abort"

    def __post_init__(self):
        if not self.command:
            raise ValueError("external evaluator needs a command")
        if self.timeout <= 0 or self.pool_size < 1:
            raise ValueError("timeout must be > 0 and pool_size >= 1")
        if self.on_error not in ("abort", "zero"):
            raise ValueError("on_error must be 'abort' or 'zero'")


@dataclass
class _Child:
    """One evaluator subprocess speaking line-delimited JSON."""

    command: tuple[str, ...]
    hello: str
    process: subprocess.Popen = field(init=False)
    lines: queue.Queue = field(init=False)

    def __post_init__(self):
        self.process = subprocess.Popen(
            list(self.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self.lines = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()
        self.send(self.hello)

    def _pump(self):
        for line in self.process.stdout:
            self.lines.put(line)
        self.lines.put(None)

    @property
    def alive(self) -> bool:
        return self.process.poll() is None

    def send(self, line: str):
        self.process.stdin.write(line + "\n")
        self.process.stdin.flush()

    def request(self, line: str, timeout: float) -> str:
        try:
            self.send(line)
        except (BrokenPipeError, OSError) as exc:
            raise EvaluationError(f"evaluator process is not accepting input: {exc}") from exc
        try:
            reply = self.lines.get(timeout=timeout)
        except queue.Empty:
            self.terminate()
            raise EvaluatorTimeoutError(f"no response within {timeout} s; child terminated") from None
        if reply is None:
            raise MalformedResponseError("evaluator process closed its output")
        return reply

    def terminate(self):
        if self.process.poll() is None:
            self.process.kill()
        try:
            self.process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


class ExternalEvaluator(Evaluator):
    """Bridge to an external training/evaluation process."""

    def __init__(self, space: SearchSpace, bridge: BridgeConfig):
        super().__init__(space)
        self.bridge = bridge
        self._hello = json.dumps({"type": "hello", "space": space_to_dict(space)}, separators=(",", ":"))
        self._pool: queue.Queue = queue.Queue()
        for _ in range(bridge.pool_size):
            self._pool.put(_Child(bridge.command, self._hello))

    def _request_line(self, c: Chromosome) -> str:
        return json.dumps(
            {
                "type": "eval_global",
                "alleles": list(c.alleles),
                "gene_names": [g.name for g in self.space.genes],
                "candidate_names": [g.candidates[a] for g, a in zip(self.space.genes, c.alleles)],
            },
            separators=(",", ":"),
        )

    @staticmethod
    def _parse(reply: str) -> float:
        try:
            body = json.loads(reply)
        except json.JSONDecodeError as exc:
            raise MalformedResponseError(f"response is not JSON: {reply.strip()!r}") from exc
        value = body.get("score") if isinstance(body, dict) else None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedResponseError(f"response has no numeric score: {reply.strip()!r}")
        if not 0.0 <= value <= 1.0:
            raise EvaluationError(f"external score {value} outside [0, 1]")
        return float(value)

    def _score_once(self, c: Chromosome) -> float:
        child = self._pool.get()
        try:
            if not child.alive:
                child = _Child(self.bridge.command, self._hello)
            return self._parse(child.request(self._request_line(c), self.bridge.timeout))
        finally:
            self._pool.put(child)

    def score(self, c: Chromosome) -> float:
        try:
            return self._score_once(c)
        except EvaluationError:
            if self.bridge.on_error != "zero":
                raise
            LOGGER.warning(
                "External evaluation failed; assigning 0",
                exc_info=True,
                extra={"event": "external_eval_failed"},
            )
            return 0.0

    def close(self):
        while not self._pool.empty():
            child = self._pool.get_nowait()
            try:
                child.process.stdin.close()
            except OSError:
                pass
            child.terminate()


def bruteforce_optimum(space: SearchSpace, evaluator: Evaluator, cap: int = 1_000_000) -> tuple[Chromosome, float]:
    """Exact argmax by enumeration; the lexicographically smallest wins ties.

    Uses the uncounted ``score`` path so oracle calls never show up as search
    evaluations.
    """
    size = space_size(space)
    if size > cap:
        raise SearchSpaceTooLargeError(f"space has {size} chromosomes, enumeration cap is {cap}")
    best, best_value = None, -1.0
    for chromosome in enumerate_chromosomes(space):
        value = evaluator.score(chromosome)
        if value > best_value:
            best, best_value = chromosome, value
    return best, best_value
