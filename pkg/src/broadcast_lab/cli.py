"""Command-line experiment runner.

Exit codes: 0 success, 1 usage error, 2 at least one asserted invariant failed
(the failures are listed under ``"invariant_failures"`` in the JSON artifact
and in a final ``FAILURES`` line on stderr).

Artifacts go to ``--out`` or, when absent, to ``$BROADCAST_LAB_OUT``; without
either they are only printed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis, engine, markov, partitions, polyspace
from .errors import BroadcastLabError
from .textio import csv_text, dumps, loads
from .tree import RootedTree, make_dary, parse_word, sample_galton_watson, word_str

OUT_ENV = "BROADCAST_LAB_OUT"
REDUCIBLE_CHAIN = 0.5 * np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]], dtype=float)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


# -- source specs -------------------------------------------------------------------------------

def parse_chain(spec: str) -> markov.TransitionMatrix:
    """``sym2:LAMBDA`` | ``random:Q,SEED[,positive]`` | ``file:PATH`` | ``reducible4``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "sym2":
            return markov.symmetric2(float(arg))
        if kind == "random":
            parts = arg.split(",")
            q, seed = int(parts[0]), int(parts[1])
            positive = len(parts) > 2 and parts[2] == "positive"
            return markov.random_chain(q, np.random.default_rng(seed), strictly_positive=positive)
        if kind == "file":
            return markov.TransitionMatrix.from_dict(loads(Path(arg).read_text()))
        if kind == "reducible4":
            return markov.TransitionMatrix(REDUCIBLE_CHAIN)
    except (ValueError, IndexError, OSError) as exc:
        raise UsageError(f"bad chain spec {spec!r}: {exc}") from exc
    raise UsageError(f"unknown chain spec {spec!r}; use sym2:L, random:Q,SEED[,positive], file:PATH or reducible4")


def parse_tree(spec: str) -> RootedTree:
    """``dary:DxDEPTH`` | ``gw:MEAN,DEPTH,SEED`` | ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "dary":
            d, depth = arg.split("x")
            return make_dary(int(d), int(depth))
        if kind == "gw":
            mean, depth, seed = arg.split(",")
            return sample_galton_watson(float(mean), int(depth), int(seed))
        if kind == "file":
            return RootedTree.from_dict(loads(Path(arg).read_text()))
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad tree spec {spec!r}: {exc}") from exc
    raise UsageError(f"unknown tree spec {spec!r}; use dary:DxDEPTH, gw:MEAN,DEPTH,SEED or file:PATH")


def parse_range(spec: str) -> List[int]:
    """``2..8`` (inclusive) or a comma list."""
    try:
        if ".." in spec:
            a, b = spec.split("..")
            out = list(range(int(a), int(b) + 1))
        else:
            out = [int(x) for x in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad range {spec!r}") from exc
    if not out:
        raise UsageError(f"empty range {spec!r}")
    return out


def parse_floats(spec: str) -> List[float]:
    try:
        return [float(x) for x in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad number list {spec!r}") from exc


def parse_leaf_set(tree: RootedTree, spec: str):
    if spec == "all-leaves":
        return list(tree.leaves)
    words = [parse_word(s) for s in spec.split(",")]
    for w in words:
        if w not in tree or tree.height(w) != 0:
            raise UsageError(f"{word_str(w)!r} is not a leaf of the tree")
    return words


def load_polynomial(args, tree: RootedTree, M, family=None) -> polyspace.LeafPolynomial:
    if getattr(args, "poly", None):
        return polyspace.LeafPolynomial.from_dict(loads(Path(args.poly).read_text()))
    rng = np.random.default_rng(args.seed)
    return analysis.random_leaf_polynomial(tree, markov.as_array(M).shape[0], rng, n_terms=args.terms,
                                           max_support=args.max_support, family=family)


# -- subcommands --------------------------------------------------------------------------------

class Result:
    def __init__(self, name: str):
        self.name = name
        self.payload: dict = {}
        self.csv: Optional[str] = None
        self.failures: List[dict] = []

    def fail(self, prop: str, **instance) -> None:
        self.failures.append({"property": prop, **instance})


def cmd_spectrum(args, res: Result) -> None:
    M = parse_chain(args.chain)
    sp = markov.spectrum(M)
    res.payload = {"chain": M.to_dict(), "pi": sp.pi, "lambda": sp.lam,
                   "ergodic": markov.is_ergodic(M)}
    if args.d is not None:
        res.payload["threshold"] = markov.threshold_value(sp.lam, args.d)
        try:
            res.payload["epsilon"] = sp.epsilon_for(args.d)
        except BroadcastLabError as exc:
            res.payload["epsilon"] = None
            res.payload["epsilon_error"] = str(exc)
    resid = float(np.max(np.abs(sp.pi @ M.entries - sp.pi)))
    if resid > 1e-10:
        res.fail("stationarity", residual=resid)


def cmd_xi_basis(args, res: Result) -> None:
    M = parse_chain(args.chain)
    nu = None
    if args.allow_reducible:
        nu = np.full(M.q, 1.0 / M.q)
    chain = partitions.build_partition_chain(M, allow_reducible=args.allow_reducible)
    words = partitions.build_word_set(chain)
    xb = partitions.build_xi_basis(M, chain, words, pi=nu)
    res.payload = {"partition_chain": chain.to_dict(), "words": words.to_dict(), "xi": xb.to_dict()}
    rank = int(np.linalg.matrix_rank(xb.matrix()))
    res.payload["rank"] = rank
    if rank != M.q:
        res.fail("xi vectors span", rank=rank, q=M.q)
    if not args.allow_reducible:
        try:
            rep = partitions.check_cvbasis_properties(xb, M, seed=args.seed)
            res.payload["cvbasis"] = rep.to_dict()
            if not rep.finite:
                res.fail("finite comparison constants")
        except BroadcastLabError as exc:
            res.fail("measurability", error=str(exc))


def cmd_capacity(args, res: Result) -> None:
    tree = parse_tree(args.tree)
    S = parse_leaf_set(tree, args.set)
    cap = polyspace.fractal_capacity(tree, S)
    res.payload = {"set": [word_str(v) for v in S], "capacity": cap, "size": len(set(S))}
    if len(tree.leaves) <= polyspace.MAX_AK_LEAVES:
        k = next(k for k in range(1, tree.depth + 2) if frozenset(S) in polyspace.build_Ak(tree, k))
        res.payload["oracle"] = "powerset A_k"
    else:
        k = polyspace.capacity_by_construction(tree, S)
        res.payload["oracle"] = "A_k on iterated branch parts"
    res.payload["capacity_from_Ak"] = k
    res.payload["cross_checked"] = k == cap
    if k != cap:
        res.fail("capacity recursion equals A_k membership", recursion=cap, construction=k)
    if cap > len(set(S)):
        res.fail("capacity <= |S|", capacity=cap, size=len(set(S)))


def cmd_decompose(args, res: Result) -> None:
    tree, M = parse_tree(args.tree), parse_chain(args.chain)
    fam = polyspace.CapacityFamily(tree, args.family) if args.family else None
    f = analysis.center(tree, M, load_polynomial(args, tree, M, fam))
    dec = polyspace.full_decompose(tree, M, f, args.k1, parse_word(args.rho), family=fam)
    basis = markov.build_site_basis(M)
    X = engine.sample_many(tree, M, None, args.samples, args.seed)
    err = float(np.max(np.abs(dec.total().evaluate(tree, X) - f.to_vertex(basis).evaluate(tree, X))))
    means = {word_str(u): engine.expectation(tree, M, fu.centered().to_vertex(basis))
             for u, fu in dec.f_u.items()}
    res.payload = {
        "k1": dec.k1, "rho_prime": word_str(dec.rho_prime), "polynomial": f.to_dict(),
        "f_u_means": means, "f_u_terms": {word_str(u): len(fu.psi_coeffs) for u, fu in dec.f_u.items()},
        "layer_terms": {str(k): len(p) for k, p in dec.f_k.items()},
        "identity_max_error": err,
        "canonical_ratio": dec.canonical.ratio,
        "sandwich_low": dec.sandwich_low, "sandwich_high": dec.sandwich_high,
    }
    if err > 1e-10:
        res.fail("sum_k f_k = f", max_error=err)
    for u, m in means.items():
        if abs(m) > 1e-10:
            res.fail("f_u centered", u=u, mean=m)


def cmd_decay(args, res: Result) -> None:
    tree, M = parse_tree(args.tree), parse_chain(args.chain)
    f = load_polynomial(args, tree, M)
    rep = analysis.decay_report(tree, M, f, d=args.d)
    res.payload = {"report": rep.to_dict(), "polynomial": f.to_dict()}
    if rep.ratio > 1 + 1e-12:
        res.fail("Jensen ratio <= 1", ratio=rep.ratio)


def cmd_sweep(args, res: Result) -> None:
    rows = analysis.ks_sweep(args.d, parse_range(args.depths), parse_floats(args.lam))
    header = ["lambda", "d", "depth", "ratio", "correlation", "bound", "quotient", "closed_form"]
    res.csv = csv_text(header, [[r.lam, r.d, r.depth, r.ratio, r.correlation, r.bound, r.quotient,
                                 r.closed_form] for r in rows])
    res.payload = {"rows": [r.to_dict() for r in rows]}
    for r in rows:
        if r.oracle_gap > 1e-9:
            res.fail("engine equals closed form", lam=r.lam, depth=r.depth, gap=r.oracle_gap)


def cmd_bp(args, res: Result) -> None:
    tree, M = parse_tree(args.tree), parse_chain(args.chain)
    if args.obs:
        states = [int(s) for s in args.obs.split(",")]
        if len(states) != len(tree.leaves):
            raise UsageError(f"--obs needs {len(tree.leaves)} states, got {len(states)}")
        obs = dict(zip(tree.leaves, states))
    else:
        smp = engine.sample(tree, M, None, args.seed)
        obs = {v: smp.assignment[v] for v in tree.leaves}
    post = analysis.bp_root_posterior(tree, M, obs)
    res.payload = {"observation": {word_str(v): s for v, s in obs.items()}, "posterior": post}
    if abs(post.sum() - 1) > 1e-12:
        res.fail("posterior sums to 1", total=float(post.sum()))


def _family_arg(tree, args):
    return polyspace.CapacityFamily(tree, args.family)


def cmd_check_A(args, res: Result) -> None:
    tree, M = parse_tree(args.tree), parse_chain(args.chain)
    rep = analysis.check_assumption_A(tree, M, _family_arg(tree, args), args.h_star, args.c_star,
                                      args.budget, args.seed, d=args.d)
    res.payload = rep.to_dict()
    if args.strict and not rep.passed:
        res.fail("assumption A on sampled instances", h_star=args.h_star, c_star=args.c_star)


def cmd_check_Ag(args, res: Result) -> None:
    tree, M = parse_tree(args.tree), parse_chain(args.chain)
    rep = analysis.check_assumption_Ag(tree, M, _family_arg(tree, args), args.h_circ, args.budget,
                                       args.seed, d=args.d)
    res.payload = rep.to_dict()
    if args.strict and not rep.passed:
        res.fail("assumption Ag on sampled instances", h_circ=args.h_circ)


def cmd_oracle_diff(args, res: Result) -> None:
    tree = parse_tree(args.tree)
    rng = np.random.default_rng(args.seed)
    worst = {"expectation": 0.0, "variance": 0.0, "var_conditional_root": 0.0, "root_posterior": 0.0}
    for trial in range(args.trials):
        M = parse_chain(args.chain) if args.chain else markov.random_chain(args.q, rng, strictly_positive=True)
        q = M.q
        f = analysis.random_vertex_polynomial(tree, q, rng)
        e = engine.enumeration(tree, M)
        worst["expectation"] = max(worst["expectation"], abs(engine.expectation(tree, M, f) - e.expectation(f)))
        worst["variance"] = max(worst["variance"], abs(engine.variance(tree, M, f) - e.variance(f)))
        worst["var_conditional_root"] = max(worst["var_conditional_root"],
                                            abs(engine.var_conditional_on(tree, M, f) - e.var_conditional_root(f)))
        obs = {v: int(rng.integers(q)) for v in tree.leaves}
        worst["root_posterior"] = max(worst["root_posterior"], float(np.max(np.abs(
            analysis.bp_root_posterior(tree, M, obs) - e.root_posterior(obs)))))
    res.payload = {"trials": args.trials, "max_abs_diff": worst}
    for k, v in worst.items():
        if v > 1e-9:
            res.fail("engine equals enumeration", quantity=k, diff=v)


# -- parser ------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="broadcast-lab", description="Exact experiments for broadcast processes on trees.")
    p.add_argument("--out", help=f"artifact directory (default ${OUT_ENV})")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    def poly_args(sp):
        sp.add_argument("--poly", help="LeafPolynomial JSON file (default: random)")
        sp.add_argument("--terms", type=int, default=6)
        sp.add_argument("--max-support", type=int, default=3)

    sp = add("spectrum", cmd_spectrum, "stationary law, second eigenvalue, epsilon")
    sp.add_argument("--chain", required=True)
    sp.add_argument("--d", type=float)

    sp = add("xi-basis", cmd_xi_basis, "partition chain, word set and xi basis")
    sp.add_argument("--chain", required=True)
    sp.add_argument("--allow-reducible", action="store_true",
                    help="run a reducible chain to its fixed point (uniform centering law)")

    sp = add("capacity", cmd_capacity, "fractal capacity of a leaf set")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--set", default="all-leaves", help="'all-leaves' or comma-separated leaf words")

    sp = add("decompose", cmd_decompose, "layer decomposition of a centered polynomial")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--chain", required=True)
    sp.add_argument("--k1", type=int, default=0)
    sp.add_argument("--rho", default="", help="decomposition root word (default: root)")
    sp.add_argument("--family", type=int, help="restrict random supports to A_k")
    sp.add_argument("--samples", type=int, default=10_000)
    poly_args(sp)

    sp = add("decay", cmd_decay, "Var(E[f|root]) / Var(f)")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--chain", required=True)
    sp.add_argument("--d", type=float)
    poly_args(sp)

    sp = add("sweep", cmd_sweep, "count-statistic sweep over depths for 2-state symmetric chains")
    sp.add_argument("--d", type=int, default=2)
    sp.add_argument("--lambda", dest="lam", required=True, help="comma-separated values")
    sp.add_argument("--depths", required=True, help="A..B or comma list")

    sp = add("bp", cmd_bp, "exact root posterior given the leaves")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--chain", required=True)
    sp.add_argument("--obs", help="comma-separated leaf states in leaf order (default: sampled)")

    for name, fn in (("check-A", cmd_check_A), ("check-Ag", cmd_check_Ag)):
        sp = add(name, fn, "sampled assumption checker")
        sp.add_argument("--tree", required=True)
        sp.add_argument("--chain", required=True)
        sp.add_argument("--family", type=int, default=1, help="k for the family A_k")
        sp.add_argument("--budget", type=int, default=50)
        sp.add_argument("--d", type=float)
        sp.add_argument("--strict", action="store_true", help="treat a failed check as an invariant failure")
        if name == "check-A":
            sp.add_argument("--h-star", type=float, required=True)
            sp.add_argument("--c-star", type=float, required=True)
        else:
            sp.add_argument("--h-circ", type=float, required=True)

    sp = add("oracle-diff", cmd_oracle_diff, "engine vs full enumeration on random inputs")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--q", type=int, default=2)
    sp.add_argument("--chain", help="fixed chain (default: random strictly positive per trial)")
    sp.add_argument("--trials", type=int, default=20)
    return p


def _write(res: Result, out_dir: Optional[str]) -> None:
    payload = dict(res.payload)
    payload["invariant_failures"] = res.failures
    text = dumps(payload)
    if res.csv is not None:
        sys.stdout.write(res.csv)
    else:
        sys.stdout.write(text)
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{res.name}.json").write_text(text)
        if res.csv is not None:
            (d / f"{res.name}.csv").write_text(res.csv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        if getattr(args, "seed", 0) < 0 or getattr(args, "seed", 0) >= 2 ** 64:
            raise UsageError("seeds must be 64-bit unsigned integers")
        res = Result(args.command)
        args.func(args, res)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except BroadcastLabError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1
    _write(res, args.out or os.environ.get(OUT_ENV))
    if res.failures:
        sys.stderr.write("FAILURES " + dumps(res.failures, indent=0))
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
