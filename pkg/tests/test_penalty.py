import numpy as np
import pytest

from bigam.penalty import Adjacency, PenaltyAssembly, assemble, incidence_block, mrf_penalty, read_adjacency


def test_two_regions():
    S = mrf_penalty(Adjacency.from_edges(2, [(1, 2)]))
    assert np.array_equal(S, [[1, -1], [-1, 1]])


def test_triangle_spectrum():
    S = mrf_penalty(Adjacency.from_edges(3, [(1, 2), (2, 3), (3, 1)]))
    assert np.allclose(np.linalg.eigvalsh(S), [0, 3, 3], atol=1e-12)


def test_laplacian_properties():
    adj = Adjacency.from_edges(5, [(1, 2), (2, 3), (3, 4), (4, 5), (1, 5), (2, 4)])
    S = mrf_penalty(adj)
    assert np.allclose(S, S.T)
    assert np.allclose(S.sum(axis=1), 0)
    assert np.linalg.eigvalsh(S).min() > -1e-12


def test_asymmetric_adjacency_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        Adjacency(3, ({1}, set(), set()))
    with pytest.raises(ValueError):
        Adjacency.from_edges(3, [(1, 1)])


def test_read_adjacency(tmp_path):
    p = tmp_path / "adj.txt"
    p.write_text("4\n1 2\n2 3\n# comment\n3 4\n")
    adj = read_adjacency(p)
    assert adj.region_count == 4
    assert adj.neighbor_sets[1] == {0, 2}


def test_incidence_block():
    X = incidence_block([1, 3, 3, 2], 3)
    assert np.array_equal(X.sum(axis=0), [1, 1, 2])
    with pytest.raises(ValueError):
        incidence_block([0, 1], 3)
    with pytest.raises(ValueError):
        incidence_block([1.5], 3)


def test_assembly():
    blocks = [(1, np.eye(2)), (4, 2 * np.ones((1, 1)))]
    S = assemble(blocks, [3.0, 0.5], 6)
    expect = np.zeros((6, 6))
    expect[1:3, 1:3] = 3 * np.eye(2)
    expect[4, 4] = 1.0
    assert np.array_equal(S, expect)
    pa = PenaltyAssembly(blocks, 6)
    assert np.array_equal(pa.matrix([3.0, 0.5]), S)
    assert pa.padded(1)[4, 4] == 2
    with pytest.raises(ValueError):
        assemble(blocks, [1.0], 6)
    with pytest.raises(ValueError):
        assemble(blocks, [1.0, -1.0], 6)
    with pytest.raises(ValueError):
        PenaltyAssembly([(0, np.eye(3)), (2, np.eye(2))], 6)
