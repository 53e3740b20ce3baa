"""Exact computations for broadcast processes on finite trees.

Modules
-------
markov      transition matrices, stationary law, second eigenvalue, site basis
tree        leaf-aligned rooted trees addressed by integer words
engine      sampling and exact moments by message passing; enumeration oracle
partitions  row-support partitions, word set and the xi basis
polyspace   leaf polynomials, branch decomposition, capacity, psi/xi decompositions
analysis    decay ratios, threshold sweeps, root posteriors, assumption checkers
cli         command-line runner (``broadcast-lab``)
"""

from . import analysis, engine, markov, partitions, polyspace, tree
from .errors import BroadcastLabError
from .markov import TransitionMatrix, stationary_distribution, second_eigenvalue, symmetric2
from .tree import RootedTree, make_dary, sample_galton_watson

__version__ = "0.1.0"

__all__ = [
    "analysis", "engine", "markov", "partitions", "polyspace", "tree",
    "BroadcastLabError", "TransitionMatrix", "stationary_distribution", "second_eigenvalue",
    "symmetric2", "RootedTree", "make_dary", "sample_galton_watson",
]
