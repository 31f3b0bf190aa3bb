import numpy as np
import pytest

from rulekge.data import KnowledgeGraph, Triple
from rulekge.model import init_parameters


def make_graph(triples, n_entities=None, n_relations=None):
    """Graph from (head, relation, tail) id tuples placed in the train split.

    Extra entities/relations beyond those mentioned can be reserved so that
    vocabulary sizes are explicit.
    """
    graph = KnowledgeGraph()
    max_e = max((max(h, t) for h, _, t in triples), default=-1)
    max_r = max((r for _, r, _ in triples), default=-1)
    for e in range(max(n_entities or 0, max_e + 1)):
        graph.entities.intern(f"e{e}")
    for r in range(max(n_relations or 0, max_r + 1)):
        graph.relations.intern(f"r{r}")
    for h, r, t in triples:
        graph.add("train", Triple(h, r, t))
    return graph


def make_random_graph(rng, n_entities, n_relations, n_triples):
    triples = set()
    while len(triples) < n_triples:
        triples.add(
            (int(rng.integers(n_entities)), int(rng.integers(n_relations)),
             int(rng.integers(n_entities)))
        )
    return make_graph(sorted(triples), n_entities=n_entities, n_relations=n_relations)


def make_params(seed=0, n_entities=5, n_relations=3, dim=3, widths=(6, 5), activation="relu"):
    rng = np.random.default_rng(seed)
    return init_parameters(n_entities, n_relations, dim, widths, activation, rng)


@pytest.fixture
def tiny_graph():
    # relations: 0 = r, 1 = q, 2 = p over 5 entities
    return make_graph(
        [(0, 0, 1), (1, 0, 2), (0, 0, 3), (2, 1, 0), (3, 1, 4), (0, 2, 4), (4, 0, 0)],
        n_entities=5,
        n_relations=3,
    )
