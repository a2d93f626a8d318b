"""Shared space factories for the test suite."""
import numpy as np

from mmshape.builders import BuilderSpec, build
from mmshape.mmspace import DiscreteSpace

# criterion number -> list of (passed, detail), printed in the terminal summary
ACCEPTANCE_LINES = {}


def record(num, ok, detail):
    ACCEPTANCE_LINES.setdefault(num, []).append((bool(ok), detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok

SMALL_SPECS = {
    "euclidean": BuilderSpec("euclidean", (1.0, 1.0), 1 / 8),
    "finsler": BuilderSpec("finsler", (1.0, 1.0), 1 / 8, anisotropy=[[2.0, 0.3], [0.3, 1.0]]),
    "torus": BuilderSpec("torus", (1.0, 1.0), 1 / 8),
    "gaussian": BuilderSpec("gaussian", (1.0,), 0.25, q=(1.0,), radius=5.0),
    "heisenberg": BuilderSpec("heisenberg", (2.0, 2.0, 0.5), 0.5),
}


def small_space(kind):
    return build(SMALL_SPECS[kind])


def random_connected_graph(rng, n, weight=(0.5, 2.0), mass=(0.5, 1.5), extra=None):
    """Random spanning tree plus extra chords, uniform weights and masses."""
    edges = {}
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges[(min(a, b), max(a, b))] = None
    extra = n if extra is None else extra
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False)
        edges[(int(min(a, b)), int(max(a, b)))] = None
    triples = [(a, b, float(rng.uniform(*weight))) for a, b in sorted(edges)]
    measure = rng.uniform(*mass, size=n)
    return DiscreteSpace.from_edges(measure, triples)
