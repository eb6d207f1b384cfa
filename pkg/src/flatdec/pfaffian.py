"""Pfaffian systems and distributions with generic-rank linear algebra.

A Pfaffian system is a codistribution spanned by time-invariant 1-forms
m(xi) dxi - n(xi) dt; a Distribution is its vector-field counterpart.  All
spans are generic: membership and rank are decided by the probabilistic zero
test through fraction-free elimination.
"""

from __future__ import annotations

from . import linalg
from .exterior import (
    Chart, ChartTransform, KForm, T, VectorField, contract, d, dt,
    lie_bracket, oneform, one_coeffs, pullback, wedge, wedge_all, zero_form,
)
from .linalg import ZeroCtx
from .symexpr import ONE, ZERO, diff, mul, neg, substitute


class NotReducible(RuntimeError):
    """No basis free of the dropped coordinates exists within the zero test."""


def _form_row(w: KForm, chart: Chart):
    cm = one_coeffs(w)
    return [cm.get(s, ZERO) for s in chart.axes]


def _row_form(chart: Chart, row) -> KForm:
    return oneform(chart, {s: c for s, c in zip(chart.axes, row) if c is not ZERO})


def _field_row(v: VectorField, chart: Chart):
    return [v.comp(s) for s in chart.axes]


def _row_field(chart: Chart, row) -> VectorField:
    return VectorField(chart, {s: c for s, c in zip(chart.axes, row)
                               if c is not ZERO})


def _independent_subset(rows, zc: ZeroCtx):
    """Indices of a maximal generically independent subset, greedily front-first."""
    kept = []
    kept_rows = []
    for i, row in enumerate(rows):
        if linalg.in_span(kept_rows, row, zc):
            continue
        kept.append(i)
        kept_rows.append(row)
    return kept


class PfaffianSystem:
    """Codistribution spanned by independent time-invariant 1-forms."""

    __slots__ = ("chart", "generators")

    def __init__(self, chart: Chart, generators, zc: ZeroCtx = None,
                 assume_independent: bool = False):
        zc = zc or ZeroCtx()
        gens = []
        for g in generators:
            if g.degree != 1:
                raise ValueError("generators must be 1-forms")
            if g.chart != chart:
                raise ValueError("generator lives on a different chart")
            for c in g.coeffs.values():
                if T in c.free:
                    raise ValueError("coefficients must be time-invariant")
            if not g.is_structurally_zero():
                gens.append(g)
        rows = [_form_row(g, chart) for g in gens]
        if not assume_independent:
            keep = _independent_subset(rows, zc)
            gens = [gens[i] for i in keep]
            rows = [rows[i] for i in keep]
        norm = [linalg.normalize_leading(r, zc) for r in rows]
        self.chart = chart
        self.generators = tuple(_row_form(chart, r) for r in norm)

    @property
    def dim(self) -> int:
        return len(self.generators)

    def rows(self):
        return [_form_row(g, self.chart) for g in self.generators]

    def top_form(self) -> KForm:
        return wedge_all(list(self.generators), self.chart)

    def contains(self, w: KForm, zc: ZeroCtx) -> bool:
        if w.chart != self.chart:
            return False
        return linalg.in_span(self.rows(), _form_row(w, self.chart), zc)

    def same_span(self, other: "PfaffianSystem", zc: ZeroCtx) -> bool:
        return (all(self.contains(g, zc) for g in other.generators)
                and all(other.contains(g, zc) for g in self.generators))

    def __repr__(self):
        return f"<PfaffianSystem dim={self.dim} on {len(self.chart.coords)} coords>"


class Distribution:
    """Span of generically independent vector fields."""

    __slots__ = ("chart", "generators")

    def __init__(self, chart: Chart, generators, zc: ZeroCtx = None,
                 assume_independent: bool = False):
        zc = zc or ZeroCtx()
        gens = [g for g in generators if not g.is_structurally_zero()]
        for g in gens:
            if g.chart != chart:
                raise ValueError("field lives on a different chart")
        if not assume_independent:
            rows = [_field_row(g, chart) for g in gens]
            keep = _independent_subset(rows, zc)
            gens = [gens[i] for i in keep]
        self.chart = chart
        self.generators = tuple(gens)

    @property
    def dim(self) -> int:
        return len(self.generators)

    def rows(self):
        return [_field_row(g, self.chart) for g in self.generators]

    def contains(self, v: VectorField, zc: ZeroCtx) -> bool:
        if v.chart != self.chart:
            return False
        return linalg.in_span(self.rows(), _field_row(v, self.chart), zc)

    def __repr__(self):
        return f"<Distribution dim={self.dim} on {len(self.chart.coords)} coords>"


def from_control_system(cs) -> PfaffianSystem:
    """The system's Pfaffian form dx^a - f^a dt on the chart (states, inputs)."""
    chart = Chart(tuple(cs.states) + tuple(cs.inputs))
    gens = []
    for s, f in zip(cs.states, cs.dynamics):
        gens.append(oneform(chart, {s: ONE, T: neg(f)}))
    return PfaffianSystem(chart, gens, assume_independent=True)


def annihilator(P: PfaffianSystem, zc: ZeroCtx) -> Distribution:
    """All fields contracting to zero with every generator."""
    chart = P.chart
    basis = linalg.nullspace(P.rows(), len(chart.axes), zc)
    return Distribution(chart, [_row_field(chart, r) for r in basis],
                        assume_independent=True)


def vertical_annihilator(P: PfaffianSystem, zc: ZeroCtx) -> Distribution:
    """Annihilator of {P, dt}: time-fiber fields annihilating the system."""
    chart = P.chart
    rows = P.rows()
    dt_row = [ZERO] * len(chart.axes)
    dt_row[chart.axis_index(T)] = ONE
    basis = linalg.nullspace(rows + [dt_row], len(chart.axes), zc)
    return Distribution(chart, [_row_field(chart, r) for r in basis],
                        assume_independent=True)


def _coefficient_rows(forms, keys=None):
    """Stack k-forms into rows over the union of their index tuples.

    Returns the matrix transpose-wise: one row per index tuple, one column
    per form, suitable for nullspace over the form weights.
    """
    if keys is None:
        keys = sorted({idx for f in forms for idx in f.coeffs})
    return [[f.coeffs.get(idx, ZERO) for f in forms] for idx in keys]


def derived_system(P: PfaffianSystem, zc: ZeroCtx) -> PfaffianSystem:
    """Forms of P whose exterior derivative vanishes modulo P."""
    if P.dim == 0:
        return P
    omega = P.top_form()
    weighted = [wedge(d(g), omega) for g in P.generators]
    rows = _coefficient_rows(weighted)
    sols = linalg.nullspace(rows, P.dim, zc)
    gens = []
    for a in sols:
        acc = zero_form(P.chart, 1)
        for coeff, g in zip(a, P.generators):
            if coeff is not ZERO:
                acc = acc + KForm(P.chart, 1,
                                  {i: mul(coeff, c) for i, c in g.coeffs.items()})
        gens.append(acc)
    return PfaffianSystem(P.chart, gens, zc)


def derived_flag(P: PfaffianSystem, zc: ZeroCtx):
    """The descending chain P, P^(1), P^(2), ... down to stabilization."""
    flag = [P]
    while flag[-1].dim:
        nxt = derived_system(flag[-1], zc)
        if nxt.dim == flag[-1].dim:
            break
        flag.append(nxt)
    return flag


def cauchy_characteristics(P: PfaffianSystem, zc: ZeroCtx) -> Distribution:
    """All v with v in the annihilator and v contracted into dP staying in P."""
    chart = P.chart
    axes = chart.axes
    rows = list(P.rows())
    omega = P.top_form()
    for g in P.generators:
        dg = d(g)
        per_axis = []
        for s in axes:
            basis_field = VectorField(chart, {s: ONE})
            per_axis.append(wedge(contract(basis_field, dg), omega))
        keys = sorted({idx for f in per_axis for idx in f.coeffs})
        for idx in keys:
            rows.append([f.coeffs.get(idx, ZERO) for f in per_axis])
    basis = linalg.nullspace(rows, len(axes), zc)
    result = Distribution(chart, [_row_field(chart, r) for r in basis],
                          assume_independent=True)
    if not is_involutive(result, zc):
        raise RuntimeError("characteristic distribution failed involutivity")
    return result


def is_involutive(D: Distribution, zc: ZeroCtx) -> bool:
    rows = D.rows()
    for i in range(D.dim):
        for j in range(i + 1, D.dim):
            br = lie_bracket(D.generators[i], D.generators[j])
            if not linalg.in_span(rows, _field_row(br, D.chart), zc):
                return False
    return True


def is_integrable_with_dt(P: PfaffianSystem, zc: ZeroCtx) -> bool:
    """Frobenius test for {P, dt}: d(omega) ^ Omega ^ dt = 0 for all generators."""
    if P.dim == 0:
        return True
    base = wedge(P.top_form(), dt(P.chart))
    for g in P.generators:
        w = wedge(d(g), base)
        if any(not zc.zero(c) for c in w.coeffs.values()):
            return False
    return True


def restrict_to_subchart(P: PfaffianSystem, phi: ChartTransform, drop,
                         zc: ZeroCtx) -> PfaffianSystem:
    """Express the pullback of P on the source chart without the drop coords.

    Requires (generically) that pulled generators have no differentials of the
    dropped coordinates and, after reduced elimination with pivot division,
    coefficients independent of them.  Guaranteed when the dropped coordinate
    fields are Cauchy characteristics of the pulled system.
    """
    drop = list(drop)
    src = phi.source
    pulled = [pullback(phi, g) for g in P.generators]
    for g in pulled:
        cm = one_coeffs(g)
        for w in drop:
            c = cm.get(w, ZERO)
            if c is not ZERO and not zc.zero(c):
                raise NotReducible(
                    f"pulled generator keeps a d{w.name} component")
    rows = [_form_row(g, src) for g in pulled]
    red, pivots = linalg.rre_divided(rows, zc)
    red = [r for r in red if any(e is not ZERO for e in r)]
    drop_set = set(drop)
    keep = [s for s in src.coords if s not in drop_set]
    reduced_chart = Chart(tuple(keep), src.includes_time)
    out = []
    for row in red:
        coeffs = {}
        for s, c in zip(src.axes, row):
            if c is ZERO:
                continue
            if s in drop_set:
                if zc.zero(c):
                    continue
                raise NotReducible(
                    f"elimination left a d{s.name} component")
            for w in drop:
                if w in c.free:
                    if not zc.zero(diff(c, w)):
                        raise NotReducible(
                            f"coefficient on d{s.name} depends on {w.name}")
                    c = substitute(c, {w: ONE})
                    if w in c.free:
                        raise NotReducible(
                            f"could not eliminate {w.name} from a coefficient")
            coeffs[s] = c
        out.append(oneform(reduced_chart, coeffs))
    return PfaffianSystem(reduced_chart, out, zc)
