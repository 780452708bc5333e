"""Categorical gene catalog, chromosomes, blocks and their one-hot encoding.

A search space is an ordered list of genes. Every gene belongs to exactly one
block: a modality block (tags 1..M) or the fusion block (tag ``FUSION``).
Chromosomes hold one candidate index per gene; blocks hold the indices of the
genes their tag owns, in partition order.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np


FUSION = "fusion"
BlockTag = Union[int, str]


class SpaceError(ValueError):
    """A search space that does not satisfy its invariants."""


class InvalidChromosomeError(ValueError):
    pass


class InvalidBlockError(ValueError):
    pass


class MergeError(ValueError):
    """Blocks that cannot be reassembled into one chromosome."""


def tag_to_str(tag: BlockTag) -> str:
    return FUSION if tag == FUSION else str(int(tag))


def parse_tag(value) -> BlockTag:
    """Parse ``"fusion"`` or a positive modality index."""
    if isinstance(value, str):
        text = value.strip().lower()
        if text == FUSION:
            return FUSION
        if not text.isdigit():
            raise ValueError(f"block tag must be a modality index or {FUSION!r}, got {value!r}")
        value = int(text)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"modality index must be an integer >= 1, got {value!r}")
    return value


@dataclass(frozen=True)
class GeneSpec:
    gene_id: int
    name: str
    candidates: tuple[str, ...]
    block_tag: BlockTag

    @property
    def cardinality(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class SearchSpace:
    genes: tuple[GeneSpec, ...]
    modality_count: int
    partition: tuple[tuple[BlockTag, tuple[int, ...]], ...]

    @property
    def size_k(self) -> int:
        return len(self.genes)

    @property
    def block_tags(self) -> tuple[BlockTag, ...]:
        """Modality tags 1..M followed by FUSION."""
        return tuple(range(1, self.modality_count + 1)) + (FUSION,)

    def genes_of(self, tag: BlockTag) -> tuple[int, ...]:
        for owner, gene_ids in self.partition:
            if owner == tag:
                return gene_ids
        raise InvalidBlockError(f"unknown block tag {tag!r}")

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(gene.cardinality for gene in self.genes)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start of each gene's one-hot sub-vector."""
        return tuple(int(x) for x in np.concatenate(([0], np.cumsum(self.cardinalities)[:-1])))

    @property
    def encoding_dim(self) -> int:
        return int(sum(self.cardinalities))


@dataclass(frozen=True)
class Chromosome:
    alleles: tuple[int, ...]

    def __len__(self):
        return len(self.alleles)


@dataclass(frozen=True)
class Block:
    block_tag: BlockTag
    alleles: tuple[int, ...]


def build_space(genes: Sequence[tuple[str, Sequence[str], BlockTag]], modality_count: int) -> SearchSpace:
    """Build a space from ``(name, candidates, block_tag)`` triples.

    The partition is derived from the tags, so every gene has one owner; the
    result still has to pass ``validate_space``.
    """
    specs = tuple(
        GeneSpec(gene_id=i, name=name, candidates=tuple(str(c) for c in candidates), block_tag=tag)
        for i, (name, candidates, tag) in enumerate(genes)
    )
    tags = tuple(range(1, modality_count + 1)) + (FUSION,)
    partition = tuple(
        (tag, tuple(spec.gene_id for spec in specs if spec.block_tag == tag)) for tag in tags
    )
    return SearchSpace(genes=specs, modality_count=modality_count, partition=partition)


def validate_space(space: SearchSpace) -> list[str]:
    """Every invariant violation of ``space``; an empty list means valid."""
    violations = []
    k = len(space.genes)
    if space.modality_count < 1:
        violations.append(f"modality count must be >= 1, got {space.modality_count}")
    for position, gene in enumerate(space.genes):
        if gene.gene_id != position:
            violations.append(f"gene ids not contiguous: position {position} has id {gene.gene_id}")
        if len(gene.candidates) < 2:
            violations.append(f"gene has < 2 candidates: gene {gene.gene_id} ({gene.name})")
        if len(set(gene.candidates)) != len(gene.candidates):
            violations.append(f"duplicate candidate values: gene {gene.gene_id} ({gene.name})")
    expected_tags = list(range(1, space.modality_count + 1)) + [FUSION]
    seen_tags = [tag for tag, _ in space.partition]
    for tag in expected_tags:
        if tag not in seen_tags:
            violations.append(f"missing block: {tag_to_str(tag)}")
    for tag in dict.fromkeys(seen_tags):
        if tag not in expected_tags:
            violations.append(f"unknown block: {tag_to_str(tag)}")
        elif seen_tags.count(tag) > 1:
            violations.append(f"block listed twice: {tag_to_str(tag)}")
    owners: dict[int, int] = {}
    for tag, gene_ids in space.partition:
        if not gene_ids:
            violations.append(f"block owns no genes: {tag_to_str(tag)}")
        for gene_id in gene_ids:
            if not 0 <= gene_id < k:
                violations.append(f"partition references unknown gene {gene_id}")
                continue
            owners[gene_id] = owners.get(gene_id, 0) + 1
    for gene_id in sorted(owners):
        if owners[gene_id] > 1:
            violations.append(f"duplicate ownership: gene {gene_id}")
    for gene_id in range(k):
        if gene_id not in owners:
            violations.append(f"missing gene in partition: gene {gene_id}")
    return violations


def require_valid(space: SearchSpace) -> SearchSpace:
    violations = validate_space(space)
    if violations:
        raise SpaceError("; ".join(violations))
    return space


def validate_chromosome(space: SearchSpace, c: Chromosome) -> Chromosome:
    if len(c.alleles) != len(space.genes):
        raise InvalidChromosomeError(
            f"chromosome length {len(c.alleles)} does not match K={len(space.genes)}"
        )
    for gene, allele in zip(space.genes, c.alleles):
        if not 0 <= allele < gene.cardinality:
            raise InvalidChromosomeError(
                f"allele {allele} out of range for gene {gene.gene_id} ({gene.name})"
            )
    return c


def validate_block(space: SearchSpace, b: Block) -> Block:
    gene_ids = space.genes_of(b.block_tag)
    if len(b.alleles) != len(gene_ids):
        raise InvalidBlockError(
            f"block {tag_to_str(b.block_tag)} has {len(b.alleles)} alleles, partition expects {len(gene_ids)}"
        )
    for gene_id, allele in zip(gene_ids, b.alleles):
        if not 0 <= allele < space.genes[gene_id].cardinality:
            raise InvalidBlockError(f"allele {allele} out of range for gene {gene_id}")
    return b


def random_chromosome(space: SearchSpace, rng: np.random.Generator) -> Chromosome:
    alleles = rng.integers(0, np.asarray(space.cardinalities))
    return Chromosome(tuple(int(a) for a in alleles))


def random_block(space: SearchSpace, tag: BlockTag, rng: np.random.Generator) -> Block:
    gene_ids = space.genes_of(tag)
    highs = np.asarray([space.genes[g].cardinality for g in gene_ids])
    return Block(tag, tuple(int(a) for a in rng.integers(0, highs)))


def decompose(space: SearchSpace, c: Chromosome) -> list[Block]:
    """Blocks of ``c`` in tag order: modality 1..M, then FUSION."""
    if len(c.alleles) != len(space.genes):
        raise InvalidChromosomeError(
            f"chromosome length {len(c.alleles)} does not match K={len(space.genes)}"
        )
    return [
        Block(tag, tuple(c.alleles[g] for g in space.genes_of(tag)))
        for tag in space.block_tags
    ]


def reassemble(space: SearchSpace, blocks: Sequence[Block]) -> Chromosome:
    by_tag: dict[BlockTag, Block] = {}
    for block in blocks:
        if block.block_tag in by_tag:
            raise MergeError(f"duplicate block tag {tag_to_str(block.block_tag)}")
        by_tag[block.block_tag] = block
    missing = [tag_to_str(tag) for tag in space.block_tags if tag not in by_tag]
    if missing:
        raise MergeError(f"missing block tags: {', '.join(missing)}")
    unknown = [tag_to_str(tag) for tag in by_tag if tag not in space.block_tags]
    if unknown:
        raise MergeError(f"unknown block tags: {', '.join(unknown)}")
    alleles = [0] * len(space.genes)
    for tag in space.block_tags:
        block = validate_block(space, by_tag[tag])
        for gene_id, allele in zip(space.genes_of(tag), block.alleles):
            alleles[gene_id] = allele
    return Chromosome(tuple(alleles))


def encode(space: SearchSpace, c: Chromosome) -> np.ndarray:
    """Per-gene one-hot concatenation, dimension sum of candidate counts."""
    vector = np.zeros(space.encoding_dim)
    offsets = space.offsets
    for gene_id, allele in enumerate(c.alleles):
        vector[offsets[gene_id] + allele] = 1.0
    return vector


def encode_many(space: SearchSpace, chromosomes: Sequence[Chromosome]) -> np.ndarray:
    matrix = np.zeros((len(chromosomes), space.encoding_dim))
    if not chromosomes:
        return matrix
    columns = np.asarray([c.alleles for c in chromosomes]) + np.asarray(space.offsets)
    matrix[np.arange(len(chromosomes))[:, None], columns] = 1.0
    return matrix


def block_offsets(space: SearchSpace, tag: BlockTag) -> tuple[int, ...]:
    cards = [space.genes[g].cardinality for g in space.genes_of(tag)]
    return tuple(int(x) for x in np.concatenate(([0], np.cumsum(cards)[:-1])))


def block_encoding_dim(space: SearchSpace, tag: BlockTag) -> int:
    return int(sum(space.genes[g].cardinality for g in space.genes_of(tag)))


def encode_block(space: SearchSpace, b: Block) -> np.ndarray:
    vector = np.zeros(block_encoding_dim(space, b.block_tag))
    for offset, allele in zip(block_offsets(space, b.block_tag), b.alleles):
        vector[offset + allele] = 1.0
    return vector


def encode_blocks(space: SearchSpace, tag: BlockTag, blocks: Sequence[Block]) -> np.ndarray:
    matrix = np.zeros((len(blocks), block_encoding_dim(space, tag)))
    if not blocks:
        return matrix
    columns = np.asarray([b.alleles for b in blocks]) + np.asarray(block_offsets(space, tag))
    matrix[np.arange(len(blocks))[:, None], columns] = 1.0
    return matrix


def space_size(space: SearchSpace) -> int:
    return math.prod(gene.cardinality for gene in space.genes)


def block_space_size(space: SearchSpace, tag: BlockTag) -> int:
    return math.prod(space.genes[g].cardinality for g in space.genes_of(tag))


def enumerate_blocks(space: SearchSpace, tag: BlockTag) -> Iterator[Block]:
    ranges = [range(space.genes[g].cardinality) for g in space.genes_of(tag)]
    for alleles in itertools.product(*ranges):
        yield Block(tag, alleles)


def enumerate_chromosomes(space: SearchSpace) -> Iterator[Chromosome]:
    """All chromosomes in lexicographic allele order."""
    for alleles in itertools.product(*(range(g.cardinality) for g in space.genes)):
        yield Chromosome(alleles)


def hamming(a: Chromosome, b: Chromosome) -> int:
    return sum(1 for x, y in zip(a.alleles, b.alleles) if x != y)


def symbolic(space: SearchSpace, c: Chromosome) -> dict[str, str]:
    """Gene name -> chosen candidate label."""
    return {gene.name: gene.candidates[allele] for gene, allele in zip(space.genes, c.alleles)}


def space_to_dict(space: SearchSpace) -> dict:
    return {
        "modalities": space.modality_count,
        "genes": [
            {"name": g.name, "candidates": list(g.candidates), "block": g.block_tag}
            for g in space.genes
        ],
    }


def space_from_dict(data: dict) -> SearchSpace:
    genes = [(g["name"], g["candidates"], parse_tag(g["block"])) for g in data["genes"]]
    return build_space(genes, int(data["modalities"]))


def space_hash(space: SearchSpace) -> str:
    canonical = json.dumps(space_to_dict(space), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Symbolic vocabularies for the shipped spaces. Labels only.
_MODALITY_GENES_K18 = (
    ("message", ("e_add_v", "e_mul_v", "e_mul_u", "e_sub_v")),
    ("aggregation", ("sum", "mean", "max", "attention")),
    ("update", ("gru", "mlp", "residual", "identity")),
    ("activation", ("relu", "gelu", "elu", "tanh")),
    ("hidden_dim", ("128", "256", "384", "512")),
    ("dropout", ("0.0", "0.1", "0.3", "0.5")),
    ("normalization", ("none", "batch", "layer", "graph")),
    ("layers", ("1", "2", "3", "4")),
)
_FUSION_GENES_K18 = (
    ("fusion", ("concat", "concat+norm", "concat+align", "concat+norm+align")),
    ("readout", ("mean", "sum", "max", "attention")),
)


def default_space() -> SearchSpace:
    """K=18, M=2, partition (8, 8, 2), four candidates per gene."""
    genes = []
    for modality in (1, 2):
        for name, candidates in _MODALITY_GENES_K18:
            genes.append((f"m{modality}_{name}", candidates, modality))
    for name, candidates in _FUSION_GENES_K18:
        genes.append((name, candidates, FUSION))
    return build_space(genes, 2)


def desk_space() -> SearchSpace:
    """K=9, M=2, partition (4, 4, 1), three candidates per gene (19,683 chromosomes)."""
    modality_genes = (
        ("message", ("e_add_v", "e_mul_v", "e_mul_u")),
        ("aggregation", ("sum", "mean", "max")),
        ("activation", ("relu", "gelu", "elu")),
        ("hidden_dim", ("128", "256", "512")),
    )
    genes = []
    for modality in (1, 2):
        for name, candidates in modality_genes:
            genes.append((f"m{modality}_{name}", candidates, modality))
    genes.append(("fusion", ("concat", "concat+norm", "concat+norm+align"), FUSION))
    return build_space(genes, 2)
