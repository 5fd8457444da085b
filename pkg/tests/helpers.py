"""Shared test utilities.

The satisfaction oracle here follows the defining rules literally, with
explicit quantifier loops over step indices (witness scan for achieve,
all-steps scan for ensuring, split-point enumeration for sequencing). It is
deliberately written against the rules rather than sharing any machinery with
the production evaluator.
"""

from __future__ import annotations

import numpy as np

from spectrl.logic import Achieve, Ensuring, Or, Seq, Spec, SymbolConj


def oracle_exact(spec: Spec, trace: list[frozenset[str]], lo: int, hi: int) -> bool:
    """Do steps lo..hi (inclusive) satisfy the formula exactly."""
    if isinstance(spec, Achieve):
        return any(spec.symbol.holds(trace[t]) for t in range(lo, hi + 1))
    if isinstance(spec, Ensuring):
        if not all(spec.condition.holds(trace[t]) for t in range(lo, hi + 1)):
            return False
        return oracle_exact(spec.spec, trace, lo, hi)
    if isinstance(spec, Seq):
        return any(
            oracle_exact(spec.first, trace, lo, m) and oracle_exact(spec.second, trace, m + 1, hi)
            for m in range(lo, hi)
        )
    if isinstance(spec, Or):
        return oracle_exact(spec.left, trace, lo, hi) or oracle_exact(spec.right, trace, lo, hi)
    raise TypeError(spec)


def oracle_accepts(spec: Spec, trace: list[frozenset[str]]) -> bool:
    """Some prefix satisfies the formula exactly."""
    return any(oracle_exact(spec, trace, 0, h) for h in range(len(trace)))


def oracle_prefix_acceptance(spec: Spec, traces: np.ndarray, props: list[str]) -> np.ndarray:
    """Rule-literal evaluator vectorized over the batch axis only.

    Index handling (the part worth testing independently) stays as explicit
    Python loops; numpy is used purely to run many traces at once.
    """
    traces = np.asarray(traces, dtype=bool)
    nb, nt, _ = traces.shape
    index = {p: i for i, p in enumerate(props)}
    memo: dict[tuple[int, int, int], np.ndarray] = {}

    def point(sym: SymbolConj, t: int) -> np.ndarray:
        ok = np.ones(nb, dtype=bool)
        for p in sorted(sym.positives):
            ok = ok & traces[:, t, index[p]]
        for p in sorted(sym.negatives):
            ok = ok & ~traces[:, t, index[p]]
        return ok

    def rel(node: Spec, lo: int, hi: int) -> np.ndarray:
        key = (id(node), lo, hi)
        if key in memo:
            return memo[key]
        if isinstance(node, Achieve):
            out = np.zeros(nb, dtype=bool)
            for t in range(lo, hi + 1):
                out = out | point(node.symbol, t)
        elif isinstance(node, Ensuring):
            out = rel(node.spec, lo, hi)
            for t in range(lo, hi + 1):
                out = out & point(node.condition, t)
        elif isinstance(node, Seq):
            out = np.zeros(nb, dtype=bool)
            for m in range(lo, hi):
                out = out | (rel(node.first, lo, m) & rel(node.second, m + 1, hi))
        elif isinstance(node, Or):
            out = rel(node.left, lo, hi) | rel(node.right, lo, hi)
        else:
            raise TypeError(node)
        memo[key] = out
        return out

    accept = np.zeros((nb, nt), dtype=bool)
    prev = np.zeros(nb, dtype=bool)
    for h in range(nt):
        prev = prev | rel(spec, 0, h)
        accept[:, h] = prev
    return accept


def all_traces(num_props: int, length: int) -> np.ndarray:
    """Every label sequence of exactly `length` steps over `num_props` bits,
    shape (2**(num_props*length), length, num_props)."""
    count = 2 ** (num_props * length)
    codes = np.arange(count, dtype=np.int64)
    bits = np.zeros((count, length, num_props), dtype=bool)
    k = 0
    for t in range(length):
        for p in range(num_props):
            bits[:, t, p] = (codes >> k) & 1
            k += 1
    return bits


def random_spec(rng: np.random.Generator, props: list[str], depth: int = 3) -> Spec:
    """Random formula for round-trip and property tests."""

    def symbol(allow_negs: bool = True) -> SymbolConj:
        pos = {props[rng.integers(len(props))]}
        neg: set[str] = set()
        if allow_negs:
            for p in props:
                if p not in pos and rng.random() < 0.3:
                    neg.add(p)
        return SymbolConj(frozenset(pos), frozenset(neg))

    def build(d: int) -> Spec:
        choice = rng.integers(4) if d > 0 else 0
        if choice == 0:
            return Achieve(symbol())
        if choice == 1:
            name = props[rng.integers(len(props))]
            return Ensuring(build(d - 1), SymbolConj(frozenset(), frozenset({name})))
        if choice == 2:
            return Seq(build(d - 1), build(d - 1))
        return Or(build(d - 1), build(d - 1))

    return build(depth)


# ---------------------------------------------------------------------------
# finite-difference gradient checks


def fd_grad(scalar_fn, arr, h=1e-6):
    flat = arr.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn()
        flat[i] = orig - h
        fm = scalar_fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape)


def assert_grads_match(store, loss_fn, h=1e-6, atol=1e-7, rtol=1e-5):
    """Reverse-mode grads vs central differences for every store parameter."""
    from spectrl.nn.tape import record

    loss_fn()  # materialize lazy params before differentiating
    with record() as t:
        loss = loss_fn()
    t.backward(loss)
    grads = store.collect_grads()
    for name in store.names():
        fd = fd_grad(lambda: float(loss_fn().data), store.tensor(name).data, h=h)
        np.testing.assert_allclose(grads[name], fd, atol=atol, rtol=rtol, err_msg=name)
