import numpy as np
import pytest

from search_space import (
    FUSION,
    Block,
    Chromosome,
    InvalidChromosomeError,
    MergeError,
    SearchSpace,
    build_space,
    decompose,
    default_space,
    encode,
    encode_block,
    encode_many,
    enumerate_chromosomes,
    parse_tag,
    reassemble,
    space_from_dict,
    space_hash,
    space_size,
    space_to_dict,
    symbolic,
    validate_chromosome,
    validate_space,
)


def test_desk_space_shape(desk):
    assert desk.size_k == 9
    assert desk.block_tags == (1, 2, FUSION)
    assert [len(desk.genes_of(tag)) for tag in desk.block_tags] == [4, 4, 1]
    assert space_size(desk) == 19_683
    assert validate_space(desk) == []


def test_default_space_partition():
    space = default_space()
    assert space.size_k == 18
    assert [len(space.genes_of(tag)) for tag in space.block_tags] == [8, 8, 2]
    assert validate_space(space) == []


def test_single_candidate_gene_is_reported():
    space = build_space([("a", ("only",), 1), ("f", ("x", "y"), FUSION)], 1)
    assert any("< 2 candidates" in problem for problem in validate_space(space))


def test_block_without_genes_is_reported():
    space = build_space([("a", ("x", "y"), 1), ("f", ("x", "y"), FUSION)], 2)
    assert "block owns no genes: 2" in validate_space(space)


def test_duplicate_ownership_is_reported(tiny_space):
    partition = ((1, (0, 1)), (2, (1,)), (FUSION, (2, 3)))
    broken = SearchSpace(tiny_space.genes, 2, partition)
    assert "duplicate ownership: gene 1" in validate_space(broken)


def test_decompose_reassemble_identity(tiny_space):
    c = Chromosome((1, 0, 1, 0))
    blocks = decompose(tiny_space, c)
    assert blocks == [Block(1, (1,)), Block(2, (0,)), Block(FUSION, (1, 0))]
    assert reassemble(tiny_space, list(reversed(blocks))) == c


def test_reassemble_missing_tag(tiny_space):
    with pytest.raises(MergeError, match="missing block tags: fusion"):
        reassemble(tiny_space, [Block(1, (0,)), Block(2, (1,))])


def test_reassemble_duplicate_tag(tiny_space):
    with pytest.raises(MergeError, match="duplicate"):
        reassemble(tiny_space, [Block(1, (0,)), Block(1, (1,)), Block(2, (1,)), Block(FUSION, (0, 0))])


def test_validate_chromosome_rejects_wrong_length(tiny_space):
    with pytest.raises(InvalidChromosomeError):
        validate_chromosome(tiny_space, Chromosome((0, 0)))
    with pytest.raises(InvalidChromosomeError):
        validate_chromosome(tiny_space, Chromosome((0, 0, 0, 2)))


def test_encoding_is_one_hot_per_gene(desk):
    c = Chromosome((0, 1, 2, 0, 1, 2, 0, 1, 2))
    vector = encode(desk, c)
    assert vector.shape == (27,)
    assert vector.sum() == 9
    np.testing.assert_array_equal(encode_many(desk, [c, c]), np.vstack([vector, vector]))


def test_block_encoding_matches_slice(desk):
    c = Chromosome((2, 1, 0, 2, 0, 0, 1, 1, 2))
    block = decompose(desk, c)[0]
    np.testing.assert_array_equal(encode_block(desk, block), encode(desk, c)[:12])


def test_enumeration_is_lexicographic(tiny_space):
    chromosomes = list(enumerate_chromosomes(tiny_space))
    assert len(chromosomes) == 16
    assert chromosomes[0].alleles == (0, 0, 0, 0)
    assert chromosomes[1].alleles == (0, 0, 0, 1)
    assert chromosomes[-1].alleles == (1, 1, 1, 1)


def test_symbolic_names(tiny_space):
    assert symbolic(tiny_space, Chromosome((1, 0, 0, 1))) == {"a": "a1", "b": "b0", "f1": "x", "f2": "q"}


def test_dict_round_trip_preserves_hash(desk):
    restored = space_from_dict(space_to_dict(desk))
    assert restored == desk
    assert space_hash(restored) == space_hash(desk)


@pytest.mark.parametrize("value,expected", [("fusion", FUSION), ("FUSION", FUSION), ("2", 2), (3, 3)])
def test_parse_tag(value, expected):
    assert parse_tag(value) == expected


@pytest.mark.parametrize("value", ["0", "-1", "x", 0, True])
def test_parse_tag_rejects(value):
    with pytest.raises(ValueError):
        parse_tag(value)
