"""Finite Markov chains: validation, stationary law, spectrum, site basis.

States are 0-indexed throughout (``0..q-1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .errors import AboveThreshold, DegeneratePi, InvalidMatrix, NotErgodic
from .textio import dumps

ROW_SUM_TOL = 1e-12
EIG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic ``q x q`` matrix.  The array is stored read-only."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.entries, dtype=float, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidMatrix(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] < 2:
            raise InvalidMatrix("need q >= 2 states")
        if not np.all(np.isfinite(a)):
            raise InvalidMatrix("entries must be finite")
        if np.any(a < 0) or np.any(a > 1):
            raise InvalidMatrix("entries must lie in [0, 1]")
        bad = np.abs(a.sum(axis=1) - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            raise InvalidMatrix(f"rows {np.flatnonzero(bad).tolist()} do not sum to 1")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def q(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TransitionMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash(self.entries.tobytes())

    def permuted(self, perm: Sequence[int]) -> "TransitionMatrix":
        """Relabel states: new state ``i`` is old state ``perm[i]``."""
        p = np.asarray(perm)
        return TransitionMatrix(self.entries[np.ix_(p, p)])

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {"q": self.q, "rows": self.entries.tolist()}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "TransitionMatrix":
        rows = obj["rows"]
        if "q" in obj and int(obj["q"]) != len(rows):
            raise InvalidMatrix(f"declared q={obj['q']} but {len(rows)} rows given")
        return cls(np.array(rows, dtype=float))


def as_array(M) -> np.ndarray:
    if isinstance(M, TransitionMatrix):
        return M.entries
    return TransitionMatrix(M).entries


def symmetric2(lam: float) -> TransitionMatrix:
    """2-state chain with eigenvalues 1 and ``lam``."""
    a, b = (1 + lam) / 2, (1 - lam) / 2
    return TransitionMatrix(np.array([[a, b], [b, a]]))


def random_chain(q: int, rng: np.random.Generator, strictly_positive: bool = False,
                 density: float = 0.6, max_tries: int = 10_000) -> TransitionMatrix:
    """Rejection-sample a random ergodic chain (optionally with all entries > 0)."""
    for _ in range(max_tries):
        a = rng.random((q, q))
        if not strictly_positive:
            a = a * (rng.random((q, q)) < density)
        rs = a.sum(axis=1, keepdims=True)
        if np.any(rs == 0):
            continue
        a = a / rs
        # absorb rounding into each row's largest entry so zero entries stay exactly zero
        top = np.argmax(a, axis=1)
        a[np.arange(q), top] += 1.0 - a.sum(axis=1)
        if np.any(a < 0):
            continue
        M = TransitionMatrix(a)
        if is_ergodic(M):
            return M
    raise RuntimeError("could not sample an ergodic chain")


# -- structure ---------------------------------------------------------

def support_graph(M) -> nx.DiGraph:
    a = as_array(M)
    g = nx.DiGraph()
    g.add_nodes_from(range(a.shape[0]))
    g.add_edges_from(zip(*np.nonzero(a > 0)))
    return g


def closed_classes(M) -> list[frozenset[int]]:
    """Closed communicating classes (attracting components) of the support digraph."""
    return sorted((frozenset(c) for c in nx.attracting_components(support_graph(M))), key=min)


def is_irreducible(M) -> bool:
    return nx.is_strongly_connected(support_graph(M))


def is_ergodic(M) -> bool:
    """Irreducible and aperiodic, decided exactly on the support digraph."""
    g = support_graph(M)
    return nx.is_strongly_connected(g) and nx.is_aperiodic(g)


# -- spectrum ----------------------------------------------------------

def stationary_distribution(M, check: bool = False) -> np.ndarray:
    """Unique stationary law ``pi``; raises NotErgodic if it is not unique.

    With ``check=True`` the chain must also be irreducible and aperiodic.
    """
    a = as_array(M)
    if len(closed_classes(a)) > 1:
        raise NotErgodic("chain has several closed classes; stationary law is not unique")
    if check and not is_ergodic(a):
        raise NotErgodic("chain is not irreducible and aperiodic")
    w, v = np.linalg.eig(a.T)
    i = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, i])
    pi = pi / pi.sum()
    # polish with a couple of power steps; keeps the residual at rounding level
    for _ in range(3):
        pi = pi @ a
        pi = np.clip(pi, 0.0, None)
        pi = pi / pi.sum()
    return pi


def second_eigenvalue(M) -> float:
    """Largest eigenvalue modulus after removing one copy of eigenvalue 1."""
    a = as_array(M)
    if len(closed_classes(a)) > 1:
        raise NotErgodic("chain has several closed classes")
    w = np.linalg.eigvals(a)
    i = int(np.argmin(np.abs(w - 1.0)))
    rest = np.delete(w, i)
    lam = float(np.max(np.abs(rest)))
    return 0.0 if lam < EIG_TOL * 1e-2 else lam


def threshold_value(lam: float, d: float) -> float:
    """``max{d * lam^2, lam}``."""
    return max(d * lam * lam, lam)


def epsilon_from(lam: float, d: float) -> float:
    t = threshold_value(lam, d)
    if t >= 1.0:
        raise AboveThreshold(f"max(d*lambda^2, lambda) = {t:.6g} >= 1")
    if t <= 0.0:
        return math.inf
    return -math.log(t) / 1.1


def epsilon(M, d: float) -> float:
    """epsilon with ``exp(-1.1 * epsilon) = max{d * lambda^2, lambda}``."""
    return epsilon_from(second_eigenvalue(M), d)


@dataclass(frozen=True)
class ChainSpectrum:
    pi: np.ndarray
    lam: float

    def epsilon_for(self, d: float) -> float:
        return epsilon_from(self.lam, d)


def spectrum(M) -> ChainSpectrum:
    return ChainSpectrum(stationary_distribution(M), second_eigenvalue(M))


# -- site basis --------------------------------------------------------

@dataclass(frozen=True)
class SiteBasis:
    """phi[0] == 1; phi[i], i >= 1, are pi-centered with unit pi-second moment."""

    phi: np.ndarray  # shape (q, q); row i is phi_i as a function of the state
    pi: np.ndarray

    @property
    def q(self) -> int:
        return self.phi.shape[0]

    def gram(self) -> np.ndarray:
        return (self.phi * self.pi) @ self.phi.T

    def coefficients(self, values: np.ndarray) -> np.ndarray:
        """Coordinates of a function ``[q] -> R`` in this basis."""
        return np.linalg.solve(self.phi.T, np.asarray(values, dtype=float))


def site_basis_from_pi(pi: np.ndarray) -> SiteBasis:
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0):
        raise DegeneratePi("stationary law has a zero entry")
    q = len(pi)
    vecs = [np.ones(q)]
    for j in range(q - 1):
        v = np.zeros(q)
        v[j] = 1.0
        for b in vecs:
            v = v - np.dot(pi * v, b) / np.dot(pi * b, b) * b
        v = v / math.sqrt(np.dot(pi * v, v))
        vecs.append(v)
    phi = np.array(vecs)
    phi.setflags(write=False)
    return SiteBasis(phi, pi)


def build_site_basis(M) -> SiteBasis:
    """Gram-Schmidt (pi inner product) of 1, e_0, ..., e_{q-2}."""
    return site_basis_from_pi(stationary_distribution(M))


# -- decay constants ---------------------------------------------------

@dataclass
class DecayConstants:
    lam: float
    k_max: int
    c_var_decay: float       # Var[M^k a] <= C k^{2q} lam^{2k} Var a
    c_var_linf: float        # C^{-1} max|a-Ea|^2 <= Var a <= C max|a-Ea|^2
    c_linf_decay: float      # max|M^k a - Ea| <= C k^q lam^k max|a-Ea|
    var_monotone: bool       # Var[M^k a] non-increasing in k for every test a
    var_table: np.ndarray = field(repr=False)   # (n_tests, k_max+1)
    sup_table: np.ndarray = field(repr=False)   # (n_tests, k_max+1)


def _ratio_max(num: np.ndarray, den: np.ndarray, tiny: float = 1e-14) -> float:
    """max num/den over entries, treating 0/0 as 0 and x/0 as inf."""
    out = 0.0
    for n, d in zip(num.ravel(), den.ravel()):
        if d > tiny:
            out = max(out, n / d)
        elif n > tiny:
            return math.inf
    return out


def decay_test_functions(M, n_random: int = 16, seed: int = 0) -> np.ndarray:
    """Deterministic zero-mean test set: basis functions, indicators, random draws."""
    a = as_array(M)
    pi = stationary_distribution(a)
    q = a.shape[0]
    rng = np.random.default_rng(seed)
    rows = [np.eye(q)[i] for i in range(q)]
    if np.all(pi > 0):
        rows += list(site_basis_from_pi(pi).phi[1:])
    rows += list(rng.standard_normal((n_random, q)))
    test = np.array(rows)
    return test - (test @ pi)[:, None]


def verify_markov_decay(M, k_max: int, n_random: int = 16, seed: int = 0) -> DecayConstants:
    """Smallest constants making the three decay inequalities hold on a test set."""
    a = as_array(M)
    pi = stationary_distribution(a)
    lam = second_eigenvalue(a)
    q = a.shape[0]
    test = decay_test_functions(a, n_random, seed)
    var = np.zeros((len(test), k_max + 1))
    sup = np.zeros((len(test), k_max + 1))
    cur = test.copy()
    for k in range(k_max + 1):
        var[:, k] = (cur ** 2) @ pi
        sup[:, k] = np.max(np.abs(cur), axis=1)
        cur = cur @ a.T  # row j becomes M @ test_j
    ks = np.arange(1, k_max + 1, dtype=float)
    var_bound = (ks ** (2 * q) * lam ** (2 * ks))[None, :] * var[:, :1]
    sup_bound = (ks ** q * lam ** ks)[None, :] * sup[:, :1]
    c1 = _ratio_max(var[:, 1:], var_bound)
    c3 = _ratio_max(sup[:, 1:], sup_bound)
    c2 = max(_ratio_max(var, sup ** 2), _ratio_max(sup ** 2, var))
    mono = bool(np.all(np.diff(var, axis=1) <= 1e-12 * np.maximum(var[:, :1], 1.0)))
    return DecayConstants(lam, k_max, c1, c2, c3, mono, var, sup)

