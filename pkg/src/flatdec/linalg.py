"""Generic-rank linear algebra over the function field of expressions.

Matrices are lists of equal-length lists of Expr.  All rank decisions are
probabilistic via the zero test; elimination is fraction-free so entries stay
division-free until a nullspace back-substitution deliberately divides.
"""

from __future__ import annotations

from .symexpr import (
    ONE, ZERO, Add, Const, EvaluationFailed, Expr, Mul, Pow, add, is_zero,
    mul, neg, pow_,
)


class RankDecisionFailed(RuntimeError):
    """The zero test ran out of valid sample points during elimination."""


class ZeroCtx:
    """Bundles the zero-test budget and seed so rank decisions are reproducible."""

    __slots__ = ("budget", "seed")

    def __init__(self, budget: int = 20, seed: int = 0):
        self.budget = budget
        self.seed = seed

    def zero(self, e: Expr) -> bool:
        try:
            return is_zero(e, budget=self.budget, seed=self.seed)
        except EvaluationFailed as exc:
            raise RankDecisionFailed(str(exc)) from exc

    def nonzero(self, e: Expr) -> bool:
        return not self.zero(e)


def row_echelon(rows, zc: ZeroCtx, reduced: bool = False):
    """Fraction-free Gaussian elimination.

    Returns (matrix, pivots) with pivots a list of (row, col).  Pivot choice
    is the syntactically smallest confirmed-nonzero entry in the column.
    Entries that test zero are replaced by the literal zero expression.
    """
    rows = [list(r) for r in rows]
    nrows = len(rows)
    ncols = len(rows[0]) if nrows else 0
    pivots = []
    r = 0
    for c in range(ncols):
        if r == nrows:
            break
        best = None
        for i in range(r, nrows):
            e = rows[i][c]
            if e is ZERO:
                continue
            if zc.zero(e):
                rows[i][c] = ZERO
                continue
            if best is None or e.nodes < rows[best][c].nodes:
                best = i
        if best is None:
            continue
        rows[r], rows[best] = rows[best], rows[r]
        p = rows[r][c]
        start = 0 if reduced else r + 1
        for i in range(start, nrows):
            if i == r:
                continue
            e = rows[i][c]
            if e is ZERO:
                continue
            new = []
            for j in range(ncols):
                v = add(mul(p, rows[i][j]), neg(mul(e, rows[r][j])))
                if v is not ZERO and zc.zero(v):
                    v = ZERO
                new.append(v)
            rows[i] = new
        pivots.append((r, c))
        r += 1
    return rows, pivots


def rank(rows, zc: ZeroCtx) -> int:
    return len(row_echelon(rows, zc)[1])


def rre_divided(rows, zc: ZeroCtx):
    """Reduced row echelon with pivot division: pivot entries become 1."""
    rows, pivots = row_echelon(rows, zc, reduced=True)
    for r, c in pivots:
        p = rows[r][c]
        if p is ONE:
            continue
        inv = pow_(p, -1)
        rows[r] = [ZERO if e is ZERO else mul(inv, e) for e in rows[r]]
    return rows, pivots


def _collect_dens(e: Expr, out: dict) -> None:
    # top-level negative powers (one Add level deep); Func args are opaque
    if isinstance(e, Pow) and e.exp < 0:
        k = out.get(e.base.key)
        need = -e.exp
        if k is None or k[1] < need:
            out[e.base.key] = (e.base, need)
    elif isinstance(e, Mul):
        for f in e.factors:
            _collect_dens(f, out)
    elif isinstance(e, Add):
        for t in e.terms:
            _collect_dens(t, out)


def _mul_through(e: Expr, factors) -> Expr:
    if e is ZERO:
        return ZERO
    if isinstance(e, Add):
        return add(*(_mul_through(t, factors) for t in e.terms))
    return mul(e, *factors)


def clear_denominators(vec, zc: ZeroCtx):
    """Multiply a vector by the collected denominators of all its entries."""
    dens: dict = {}
    for e in vec:
        _collect_dens(e, dens)
    if dens:
        factors = [pow_(b, k) for b, k in dens.values()]
        vec = [_mul_through(e, factors) for e in vec]
    return vec


def _rational_coeff(e: Expr):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Mul):
        for f in e.factors:
            if isinstance(f, Const):
                return f.value
    return None


def normalize_leading(vec, zc: ZeroCtx):
    """Scale so the first generically nonzero entry has rational coefficient 1."""
    for e in vec:
        if e is ZERO or zc.zero(e):
            continue
        coeff = _rational_coeff(e)
        if coeff is not None and coeff not in (0, 1):
            inv = Const(1 / coeff)
            return [ZERO if x is ZERO else mul(inv, x) for x in vec]
        return list(vec)
    return list(vec)


def nullspace(rows, ncols: int, zc: ZeroCtx):
    """Basis of the right nullspace, denominators cleared, leading coeff 1."""
    if ncols == 0:
        return []
    live = [r for r in rows if any(e is not ZERO for e in r)]
    if not live:
        basis = []
        for i in range(ncols):
            v = [ZERO] * ncols
            v[i] = ONE
            basis.append(v)
        return basis
    red, pivots = rre_divided(live, zc)
    pivot_cols = {c for _, c in pivots}
    basis = []
    for f in range(ncols):
        if f in pivot_cols:
            continue
        v = [ZERO] * ncols
        v[f] = ONE
        for r, c in pivots:
            entry = red[r][f]
            if entry is not ZERO:
                v[c] = neg(entry)
        v = clear_denominators(v, zc)
        basis.append(normalize_leading(v, zc))
    return basis


def reduce_against(echelon_rows, pivots, target, zc: ZeroCtx):
    """Fraction-free remainder of target against an echelonized row set."""
    target = list(target)
    for r, c in pivots:
        e = target[c]
        if e is ZERO:
            continue
        if zc.zero(e):
            target[c] = ZERO
            continue
        p = echelon_rows[r][c]
        new = []
        for j in range(len(target)):
            v = add(mul(p, target[j]), neg(mul(e, echelon_rows[r][j])))
            if v is not ZERO and zc.zero(v):
                v = ZERO
            new.append(v)
        target = new
    return target


def in_span(span_rows, target, zc: ZeroCtx) -> bool:
    if not span_rows:
        return all(e is ZERO or zc.zero(e) for e in target)
    ech, pivots = row_echelon(span_rows, zc)
    rem = reduce_against(ech, pivots, target, zc)
    return all(e is ZERO for e in rem)
