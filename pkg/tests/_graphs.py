"""Random gate matrices shared by the pruner tests."""

import numpy as np

from sparsemask.errors import ArchitectureError
from sparsemask.oracles import reachability_prune
from sparsemask.pruner import prune
from sparsemask.searchspace import GateMatrix, candidate_sets

SIGMAS = (1e-3, 0.1, 0.5)


def random_gates(rng: np.random.Generator, num_stages: int) -> GateMatrix:
    return GateMatrix({(cs.stage, t): float(rng.random())
                       for cs in candidate_sets(num_stages) for t in cs.sources})


def random_cases(seed: int = 0, n: int = 200):
    rng = np.random.default_rng(seed)
    for i in range(n):
        L = int(rng.integers(2, 7))
        yield random_gates(rng, L), L, SIGMAS[i % len(SIGMAS)]


def pruned_edges(gm: GateMatrix, sigma: float):
    """Kept edge set, empty when the decoder collapses."""
    try:
        return prune(gm, sigma).kept_edges
    except ArchitectureError:
        return set()


def oracle_edges(gm: GateMatrix, num_stages: int, sigma: float):
    stages, _ = reachability_prune(num_stages, gm.values, sigma)
    return {(l, t) for l, srcs in stages.items() for t in srcs}
