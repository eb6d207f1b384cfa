"""Search for block-triangular splittings of a control Pfaffian system.

Each reduction level picks an involutive set of vertical directions F,
finds a subsystem of matching codimension that is invariant along F,
straightens the flows of F, and drops the flow parameters from the chart.
A branch that empties the system yields the data a flat-output certificate
is assembled from; branches are explored depth first with backtracking.
"""

from dataclasses import dataclass
from itertools import product

from .exterior import (
    ChartTransform, NotSolvable, VectorField, compose, contract, d,
    extend_transform, identity_transform, one_coeffs, oneform, pullback,
    pushforward, scale, straighten_flow, wedge, zero_form, T,
)
from .linalg import ZeroCtx, nullspace, rank
from .pfaffian import (
    Distribution, NotReducible, PfaffianSystem, derived_system,
    from_control_system, is_integrable_with_dt, is_involutive,
    restrict_to_subchart, vertical_annihilator,
)
from .symexpr import (
    AUX, ONE, ZERO, Symbol, Var, add, diff, div, mul, pow_, structural_key,
    var,
)
from .sysdsl import render


class AnsatzExhausted(RuntimeError):
    """No candidate subsystem passed the necessary condition within budget."""


@dataclass(frozen=True)
class AnsatzConfig:
    max_degree: int = 2
    zero_budget: int = 20
    seed: int = 0
    branch_width: int = 8
    max_depth: int = 8
    max_candidates: int = 512
    assume_derived: bool = True


@dataclass(frozen=True)
class Splitting:
    """One verified reduction level.

    F lives on the level's chart, S_next on the reduced chart obtained by
    dropping the flow parameters (nondrv), and S_comp on the intermediate
    straightened chart, which is transform.source.
    """

    level: int
    F: Distribution
    S_next: PfaffianSystem
    S_comp: PfaffianSystem
    transform: ChartTransform
    nondrv: tuple

    def verify(self, parent: PfaffianSystem, zc: ZeroCtx) -> bool:
        """Re-check the defining invariants against the parent system."""
        if parent.dim != self.S_next.dim + self.F.dim:
            return False
        if len(self.nondrv) != self.S_comp.dim:
            return False
        V = vertical_annihilator(parent, zc)
        if not all(V.contains(v, zc) for v in self.F.generators):
            return False
        lifted = [_lift_through(self.transform, g) for g in self.S_next.generators]
        P = PfaffianSystem(parent.chart, lifted, zc)
        return all(_cauchy_member(v, P, zc) for v in self.F.generators)


@dataclass(frozen=True)
class DecompositionResult:
    status: str  # Triangularized | Inconclusive | NotReducible
    sequence: tuple
    transform: ChartTransform
    branch_log: tuple
    system: object
    config: AnsatzConfig


# -- rendering helpers for the branch log -----------------------------------------

def _field_dict(v: VectorField) -> dict:
    out = {}
    for s in v.chart.axes:
        e = v.comp(s)
        if e is not ZERO:
            out[s.name] = render(e)
    return out


def _form_dict(g) -> dict:
    out = {}
    coeffs = one_coeffs(g)
    for s in g.chart.axes:
        e = coeffs.get(s)
        if e is not None and e is not ZERO:
            out[s.name] = render(e)
    return out


# -- generic membership and span helpers -------------------------------------------

def _cauchy_member(v: VectorField, P: PfaffianSystem, zc: ZeroCtx) -> bool:
    """Direct test for v being a characteristic direction of P."""
    if P.dim == 0:
        return True
    top = P.top_form()
    for g in P.generators:
        for c in contract(v, g).coeffs.values():
            if not zc.zero(c):
                return False
        w = wedge(contract(v, d(g)), top)
        if any(not zc.zero(c) for c in w.coeffs.values()):
            return False
    return True


def _same_field_span(A: Distribution, B: Distribution, zc: ZeroCtx) -> bool:
    return A.dim == B.dim and all(B.contains(v, zc) for v in A.generators)


def _lift_through(phi: ChartTransform, g):
    """Carry a form on a subchart of phi.source back to phi.target."""
    injected = oneform(phi.source, one_coeffs(g))
    return pullback(_reversed(phi), injected)


def _reversed(phi: ChartTransform) -> ChartTransform:
    return ChartTransform(phi.target, phi.source,
                          dict(phi.inverse), dict(phi.forward))


def _combine(c, basis):
    chart = basis[0].chart
    comps = {}
    for s in chart.axes:
        e = add(*(mul(ci, b.comp(s)) for ci, b in zip(c, basis)))
        if e is not ZERO:
            comps[s] = e
    return VectorField(chart, comps)


# -- the necessary condition --------------------------------------------------------

def _field_row_tables(S: PfaffianSystem, basis):
    """Per basis field: wedge-index -> row of coefficients, one per generator.

    Row r of the table for field v states that sum_j a_j ((v . d g_j) ^ Omega)
    vanishes on that wedge index; the tables are combined linearly when the
    field is a coefficient combination of the basis.
    """
    gens = S.generators
    top = S.top_form()
    tables = []
    keys = set()
    for v in basis:
        tab = {}
        for j, g in enumerate(gens):
            w = wedge(contract(v, d(g)), top)
            for idx, cexpr in w.coeffs.items():
                tab.setdefault(idx, [ZERO] * len(gens))[j] = cexpr
        tables.append(tab)
        keys.update(tab)
    return tables, sorted(keys)


def _span_from_solutions(S: PfaffianSystem, sols, zc: ZeroCtx) -> PfaffianSystem:
    combos = []
    for a in sols:
        f = zero_form(S.chart, 1)
        for aj, g in zip(a, S.generators):
            f = f + scale(g, aj)
        combos.append(f)
    return PfaffianSystem(S.chart, combos, zc)


def _combination_span(S: PfaffianSystem, fields, zc: ZeroCtx) -> PfaffianSystem:
    """Span of generator combinations invariant along every given field."""
    if S.dim == 0:
        return PfaffianSystem(S.chart, [], zc)
    tables, keys = _field_row_tables(S, fields)
    rows = [tab[idx] for tab in tables for idx in sorted(tab)]
    sols = nullspace(rows, len(S.generators), zc)
    return _span_from_solutions(S, sols, zc)


def monomial_pool(chart, cfg: AnsatzConfig):
    """Monomials of bounded total absolute degree in the chart coordinates.

    Negative exponents are included; coordinates are treated as generically
    nonzero, which matches how the probabilistic zero test samples points.
    """
    coords = chart.coords
    out = []
    spans = [range(-cfg.max_degree, cfg.max_degree + 1)] * len(coords)
    for expo in product(*spans):
        if sum(abs(e) for e in expo) > cfg.max_degree:
            continue
        factors = [pow_(var(s), e) for s, e in zip(coords, expo) if e]
        out.append(mul(*factors) if factors else ONE)
    return sorted(out, key=lambda e: (e.nodes, structural_key(e)))


def _tuple_stream(pool, k: int):
    """Coefficient tuples: unit vectors first, then by ascending size."""
    for i in range(k):
        yield tuple(ONE if j == i else ZERO for j in range(k))
    items = list(pool)
    # keep the raw product enumerable; the simplest entries sort first anyway
    while (len(items) + 1) ** k > 200_000:
        items = items[: len(items) // 2]
    pool0 = [ZERO] + items
    yield from sorted(
        product(pool0, repeat=k),
        key=lambda c: (sum(x.nodes for x in c),
                       tuple(structural_key(x) for x in c)))


def _projective_key(c):
    lead = next((x for x in c if x is not ZERO), None)
    if lead is None:
        return None
    return tuple(structural_key(div(x, lead)) for x in c)


def _candidate_stream(S: PfaffianSystem, V: Distribution,
                      cfg: AnsatzConfig, zc: ZeroCtx):
    """Lazily yield single-field candidates (c, S_candidate)."""
    basis = list(V.generators)
    k = len(basis)
    gens = S.generators
    want = S.dim - 1
    if k == 0 or want < 0:
        return
    tables, keys = _field_row_tables(S, basis)
    derived = None
    if not cfg.assume_derived:
        derived = derived_system(S, zc)
    pool = monomial_pool(S.chart, cfg)
    seen = set()
    scanned = 0
    for c in _tuple_stream(pool, k):
        if scanned >= cfg.max_candidates:
            break
        key = _projective_key(c)
        if key is None or key in seen:
            continue
        seen.add(key)
        scanned += 1
        rows = []
        for idx in keys:
            row = []
            for j in range(len(gens)):
                row.append(add(*(mul(c[i], tables[i].get(idx, _ZROW)[j])
                                 for i in range(k) if c[i] is not ZERO)))
            rows.append(row)
        sols = nullspace(rows, len(gens), zc)
        if len(sols) != want:
            continue
        cand = _span_from_solutions(S, sols, zc)
        if cand.dim != want:
            continue
        if derived is not None and not all(
                cand.contains(g, zc) for g in derived.generators):
            continue
        yield tuple(c), cand


def necessary_condition_solutions(S: PfaffianSystem, V: Distribution,
                                  cfg: AnsatzConfig, zc: ZeroCtx = None):
    """Enumerate single-field candidates (c, S_candidate).

    c is a coefficient tuple over the basis of V; S_candidate collects every
    generator combination invariant along the combined field, and is kept
    only when its dimension leaves room for exactly that one field.  Raises
    AnsatzExhausted when nothing passes within cfg.max_candidates tuples.
    """
    zc = zc or ZeroCtx(cfg.zero_budget, cfg.seed)
    found = list(_candidate_stream(S, V, cfg, zc))
    if not found:
        raise AnsatzExhausted(
            f"no candidate subsystem within {cfg.max_candidates} coefficient tuples")
    return found


_ZROW = tuple(ZERO for _ in range(64))


def refine_to_cauchy(fields, S_candidate: PfaffianSystem, S: PfaffianSystem,
                     zc: ZeroCtx):
    """Upgrade a necessary-condition candidate to a verified invariant pair.

    Every field must annihilate the candidate generators, satisfy the
    invariance condition against the candidate's own top form, and span an
    involutive distribution.  Returns (F, S_next) or None.
    """
    chart = S.chart
    for v in fields:
        if not _cauchy_member(v, S_candidate, zc):
            return None
    F = Distribution(chart, list(fields), zc)
    if F.dim != len(fields):
        return None
    if not is_involutive(F, zc):
        return None
    return F, S_candidate


def check_parameterizable(S_comp: PfaffianSystem, nondrv, zc: ZeroCtx = None) -> bool:
    """True when the complement equations solve for the flow parameters.

    The first-order residual of each generator (dc -> formal c_d1 symbols)
    must have a generically regular square Jacobian with respect to the
    parameter values, and the parameter differentials must not appear.
    """
    zc = zc or ZeroCtx()
    params = list(nondrv)
    if len(params) != S_comp.dim:
        return False
    residuals = []
    for g in S_comp.generators:
        coeffs = one_coeffs(g)
        parts = []
        for s, m in coeffs.items():
            if s == T:
                parts.append(m)
            elif s in params:
                if not zc.zero(m):
                    return False
            else:
                parts.append(mul(m, var(Symbol(s.name + "_d1", AUX))))
        residuals.append(add(*parts) if parts else ZERO)
    jac = [[diff(r, p) for p in params] for r in residuals]
    return rank(jac, zc) == len(params)


# -- straightening one level ---------------------------------------------------------

_PREFIX_LETTERS = "wqrsgehjkmnpv"


class _Prefixes:
    """Deterministic supply of fresh coordinate-name prefixes."""

    def __init__(self, reserved):
        self._reserved = set(reserved)
        self._stream = self._gen()

    def _gen(self):
        for ch in _PREFIX_LETTERS:
            yield ch
        for a in _PREFIX_LETTERS:
            for b in _PREFIX_LETTERS:
                yield a + b

    def take(self) -> str:
        for p in self._stream:
            if not any(name.startswith(p) for name in self._reserved):
                return p
        raise RuntimeError("out of fresh coordinate prefixes")


def _straighten_level(F: Distribution, zc: ZeroCtx, naming: _Prefixes):
    """Straighten the fields of F one after another.

    Returns (phi, params): phi maps the level chart from the fully
    straightened chart, params are the flow parameters in straightening
    order under their final names.  Raises NotSolvable when a transported
    field leaves the kept slice or has no closed-form flow.
    """
    phi = None
    params = []
    for v in F.generators:
        if phi is None:
            cur = v
        else:
            moved = pushforward(_reversed(phi), v)
            comps = {}
            for s in moved.chart.coords:
                e = moved.comp(s)
                if e is ZERO:
                    continue
                if s in params:
                    if not zc.zero(e):
                        raise NotSolvable(
                            "transported field leaves the kept slice: "
                            + render(e) + " along " + s.name)
                    continue
                comps[s] = e
            cur = VectorField(moved.chart, comps)
        step = straighten_flow(cur, zc, prefix=naming.take())
        renamed = []
        for p in params:
            e = step.forward[p]
            if not isinstance(e, Var):
                raise NotSolvable(f"parameter {p.name} not carried rigidly")
            renamed.append(e.sym)
        params = renamed + [step.source.coords[-1]]
        phi = step if phi is None else compose(phi, step)
    return phi, params


def _complement(S: PfaffianSystem, S_sub: PfaffianSystem, zc: ZeroCtx):
    """Greedy extension of S_sub to all of S using the original generators."""
    acc = list(S_sub.generators)
    comp = []
    dim = S_sub.dim
    for g in S.generators:
        if dim + 1 > S.dim:
            break
        trial = PfaffianSystem(S.chart, acc + [g], zc)
        if trial.dim > dim:
            acc.append(g)
            comp.append(g)
            dim += 1
    return comp


# -- one reduction layer ----------------------------------------------------------------

def reduce_once(S: PfaffianSystem, cfg: AnsatzConfig, zc: ZeroCtx = None,
                naming: _Prefixes = None, level: int = 0, events: list = None):
    """Every verified splitting of S, in search order.

    Order: the derived-system shortcut, the joint ansatz over all vertical
    directions, then single combined fields by ascending coefficient size.
    Candidate rejections that reached verification are appended to events.
    """
    zc = zc or ZeroCtx(cfg.zero_budget, cfg.seed)
    naming = naming or _Prefixes({s.name for s in S.chart.axes})
    events = events if events is not None else []
    V = vertical_annihilator(S, zc)
    out = []
    taken = []

    def consider(fields, cand, kind, c=None):
        if len(out) >= cfg.branch_width:
            return
        info = {"kind": kind, "F": [_field_dict(v) for v in fields]}
        if c is not None:
            info["c"] = [render(x) for x in c]
        if S.dim != cand.dim + len(fields):
            info.update(outcome="rejected", note="size bookkeeping fails")
            events.append(info)
            return
        refined = refine_to_cauchy(fields, cand, S, zc)
        if refined is None:
            info.update(outcome="rejected",
                        note="fields are not characteristic for the candidate")
            events.append(info)
            return
        F, keep = refined
        for F0, S0 in taken:
            if _same_field_span(F, F0, zc) and keep.same_span(S0, zc):
                return
        try:
            phi, params = _straighten_level(F, zc, naming)
        except NotSolvable as ex:
            info.update(outcome="suspended", note=f"flow not solvable: {ex}")
            events.append(info)
            return
        comp_gens = _complement(S, keep, zc)
        comp = PfaffianSystem(phi.source,
                              [pullback(phi, g) for g in comp_gens], zc)
        if not check_parameterizable(comp, params, zc):
            info.update(outcome="rejected", note="complement not parameterizable")
            events.append(info)
            return
        try:
            nxt = restrict_to_subchart(keep, phi, params, zc)
        except NotReducible as ex:
            info.update(outcome="rejected", note=f"restriction blocked: {ex}",
                        restrict_failed=True)
            events.append(info)
            return
        taken.append((F, keep))
        out.append(Splitting(level, F, nxt, comp, phi, tuple(params)))

    D1 = derived_system(S, zc)
    if (is_integrable_with_dt(D1, zc) and V.dim == S.dim - D1.dim
            and (V.dim <= 1 or is_involutive(V, zc))):
        consider(list(V.generators), D1, "shortcut")
    if 2 <= V.dim <= S.dim and is_involutive(V, zc):
        joint = _combination_span(S, V.generators, zc)
        consider(list(V.generators), joint, "joint")
    if len(out) < cfg.branch_width:
        # The tuple stream is ordered simplest-first and deduplicated up to
        # scale, so the first field surviving the full check chain is kept
        # and the scan stops; alternatives at this level would only differ
        # by a more complicated coefficient vector.
        tried = 0
        for c, cand in _candidate_stream(S, V, cfg, zc):
            if len(out) >= cfg.branch_width:
                break
            tried += 1
            before = len(out)
            consider([_combine(c, V.generators)], cand, "ansatz", c=c)
            if len(out) > before:
                break
        if not out:
            raise AnsatzExhausted(
                f"no admissible splitting within {cfg.max_candidates} coefficient "
                f"tuples ({tried} candidate subsystems rejected)")
    return out


# -- the full search -----------------------------------------------------------------------

def sequence_transforms(base_chart, sequence):
    """Composed transform and the per-level extensions.

    Returns (theta, exts): theta maps the base chart from the final chart
    (kept coordinates, then flow parameters newest first); exts[l] is the
    level-l transform extended by all earlier parameters.
    """
    theta = identity_transform(base_chart)
    exts = []
    params = []
    for sp in sequence:
        ext = extend_transform(sp.transform, tuple(params))
        exts.append(ext)
        theta = compose(theta, ext)
        params = list(sp.nondrv) + params
    return theta, exts


def run_decomposition(cs, cfg: AnsatzConfig = None) -> DecompositionResult:
    """Depth-first reduction of the system's Pfaffian form.

    Triangularized iff some branch empties the system within the depth
    budget; otherwise Inconclusive, or NotReducible when restriction
    failures were the only way branches died.
    """
    cfg = cfg or AnsatzConfig()
    zc = ZeroCtx(cfg.zero_budget, cfg.seed)
    S0 = from_control_system(cs)
    naming = _Prefixes({s.name for s in S0.chart.axes})
    log = []
    path = []
    flags = {"exhausted": False, "suspended": False,
             "notreducible": False, "depth": False}

    def explore(S, level, parent):
        if S.dim == 0:
            return True
        if level >= cfg.max_depth:
            log.append({"id": len(log), "parent": parent, "level": level,
                        "kind": "depth-limit", "outcome": "suspended",
                        "note": f"depth budget {cfg.max_depth} reached"})
            flags["depth"] = True
            return False
        events = []
        try:
            splits = reduce_once(S, cfg, zc=zc, naming=naming,
                                 level=level, events=events)
        except AnsatzExhausted as ex:
            splits = []
            events.append({"kind": "ansatz", "outcome": "rejected",
                           "note": str(ex)})
            flags["exhausted"] = True
        for ev in events:
            if ev.pop("restrict_failed", False):
                flags["notreducible"] = True
            if ev.get("outcome") == "suspended":
                flags["suspended"] = True
            ev.update(id=len(log), parent=parent, level=level)
            log.append(ev)
        for sp in splits:
            entry = {"id": len(log), "parent": parent, "level": level,
                     "kind": "splitting",
                     "F": [_field_dict(v) for v in sp.F.generators],
                     "S_next": [_form_dict(g) for g in sp.S_next.generators],
                     # the same span expressed on the level's parent chart,
                     # so logged reductions can be checked from outside
                     "S_kept": [_form_dict(_lift_through(sp.transform, g))
                                for g in sp.S_next.generators],
                     "params": [p.name for p in sp.nondrv],
                     "outcome": "extended", "note": ""}
            log.append(entry)
            path.append(sp)
            if explore(sp.S_next, level + 1, entry["id"]):
                entry["outcome"] = "success"
                return True
            entry["outcome"] = "dead_end"
            path.pop()
        return False

    done = explore(S0, 0, None)
    if done:
        status = "Triangularized"
        theta, _ = sequence_transforms(S0.chart, path)
    else:
        status = "Inconclusive"
        if flags["notreducible"] and not (flags["exhausted"]
                                          or flags["suspended"]
                                          or flags["depth"]):
            status = "NotReducible"
        theta = None
    return DecompositionResult(status=status, sequence=tuple(path),
                               transform=theta, branch_log=tuple(log),
                               system=cs, config=cfg)
