"""Markov random field and random-effect penalties, and global penalty assembly."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Adjacency",
    "read_adjacency",
    "mrf_penalty",
    "incidence_block",
    "PenaltyAssembly",
    "assemble",
]


@dataclass(frozen=True)
class Adjacency:
    region_count: int
    neighbor_sets: tuple

    def __post_init__(self):
        sets = tuple(frozenset(int(s) for s in nb) for nb in self.neighbor_sets)
        object.__setattr__(self, "neighbor_sets", sets)
        if len(sets) != self.region_count:
            raise ValueError("one neighbour set per region is required")
        for r, nb in enumerate(sets):
            if r in nb:
                raise ValueError(f"region {r + 1} lists itself as a neighbour")
            for s in nb:
                if not 0 <= s < self.region_count:
                    raise ValueError(f"neighbour {s + 1} of region {r + 1} is out of range")
                if r not in sets[s]:
                    raise ValueError(f"invalid adjacency: {r + 1} ~ {s + 1} is not symmetric")

    @classmethod
    def from_edges(cls, region_count, edges):
        """Build from 1-based undirected edges; duplicates are ignored."""
        sets = [set() for _ in range(region_count)]
        for r, s in edges:
            r, s = int(r) - 1, int(s) - 1
            if r == s:
                raise ValueError(f"self loop on region {r + 1}")
            if not (0 <= r < region_count and 0 <= s < region_count):
                raise ValueError(f"edge ({r + 1}, {s + 1}) out of range 1..{region_count}")
            sets[r].add(s)
            sets[s].add(r)
        return cls(region_count, tuple(sets))


def read_adjacency(path) -> Adjacency:
    """Read an edge list: first line ``R``, then one ``r s`` pair per line."""
    lines = [ln.split("#")[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"empty adjacency file {path}")
    R = int(lines[0])
    edges = []
    for ln in lines[1:]:
        parts = ln.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"malformed adjacency line {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return Adjacency.from_edges(R, edges)


def mrf_penalty(adj: Adjacency):
    """Intrinsic Markov random field penalty: ``N_r`` on the diagonal, -1 for neighbours."""
    R = adj.region_count
    S = np.zeros((R, R))
    for r, nb in enumerate(adj.neighbor_sets):
        S[r, r] = len(nb)
        for s in nb:
            S[r, s] = -1.0
    return S


def incidence_block(region_index, R: int):
    """``n x R`` incidence matrix from 1-based region labels."""
    idx = np.asarray(region_index)
    if idx.ndim != 1:
        raise ValueError("region index must be a vector")
    if not np.all(np.equal(np.mod(idx, 1), 0)):
        raise ValueError("region labels must be integers")
    idx = idx.astype(int)
    if np.any((idx < 1) | (idx > R)):
        raise ValueError(f"region labels must lie in 1..{R}")
    out = np.zeros((idx.size, R))
    out[np.arange(idx.size), idx - 1] = 1.0
    return out


@dataclass
class PenaltyAssembly:
    """Penalty blocks placed at coefficient offsets of a ``total_dim`` vector."""

    blocks: list
    total_dim: int

    def __post_init__(self):
        spans = []
        for off, mat in self.blocks:
            mat = np.asarray(mat)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ValueError("penalty blocks must be square")
            if off < 0 or off + mat.shape[0] > self.total_dim:
                raise ValueError("penalty block exceeds the coefficient vector")
            spans.append((off, off + mat.shape[0]))
        spans.sort()
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("penalty blocks overlap")

    def __len__(self):
        return len(self.blocks)

    def matrix(self, lam):
        return assemble(self.blocks, lam, self.total_dim)

    def padded(self, b):
        off, mat = self.blocks[b]
        out = np.zeros((self.total_dim, self.total_dim))
        q = mat.shape[0]
        out[off:off + q, off:off + q] = mat
        return out


def assemble(blocks, lam, total_dim: int):
    """``S_lambda = sum_b lam_b * (block b padded to total_dim x total_dim)``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size != len(blocks):
        raise ValueError(f"expected {len(blocks)} smoothing parameters, got {lam.size}")
    if np.any(lam < 0) or np.any(~np.isfinite(lam)):
        raise ValueError("smoothing parameters must be finite and non-negative")
    S = np.zeros((total_dim, total_dim))
    for (off, mat), l in zip(blocks, lam):
        mat = np.asarray(mat, dtype=float)
        q = mat.shape[0]
        if mat.shape != (q, q) or off < 0 or off + q > total_dim:
            raise ValueError("penalty block does not fit the coefficient vector")
        S[off:off + q, off:off + q] += l * mat
    return S
