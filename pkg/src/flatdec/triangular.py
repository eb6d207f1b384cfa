"""Block-triangular implicit form: assembly, structure checks, trajectory recovery.

A finished reduction sequence is reassembled on its final chart as equation
blocks Xi^1..Xi^nb over coordinate blocks z^1..z^m, m = nb + 1.  Each block
Xi^i carries only dz^k with k <= i and solves algebraically for the block
i+1 non-derivative variables.  From that shape the flat outputs can be read
off, and trajectories are recovered block by block with Newton's method.
"""

import math
import random
from dataclasses import dataclass

import numpy as np

from .decompose import _cauchy_member, sequence_transforms
from .exterior import (
    T, VectorField, compose, identity_transform, one_coeffs, oneform,
    pullback,
)
from .linalg import ZeroCtx, rank
from .pfaffian import PfaffianSystem, vertical_annihilator
from .symexpr import (
    AUX, INPUT, ONE, ZERO, Symbol, add, compile_expr, diff, mul, neg, var,
)


class StructureViolation(ValueError):
    """The assembled equations break the triangular dependence rules."""


class OutputCountMismatch(ValueError):
    """Number of candidate flat outputs differs from the input count."""


class NewtonDivergence(RuntimeError):
    pass


class SingularJacobian(RuntimeError):
    pass


@dataclass(frozen=True)
class Block:
    """Coordinate block z^i = (y^i, zhat^i)."""

    index: int
    y: tuple
    nondrv: tuple

    @property
    def coords(self) -> tuple:
        return self.y + self.nondrv


@dataclass(frozen=True, eq=False)
class TriangularDecomposition:
    chart: object          # final chart, all blocks plus time
    blocks: tuple          # Block, index i at position i-1
    equations: tuple       # tuple per Xi^i of one-forms on chart
    transform: object      # original chart <- final chart
    system: object = None

    @property
    def n_b(self) -> int:
        return len(self.equations)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def flat_coords(self) -> tuple:
        return tuple(c for blk in self.blocks for c in blk.y)

    def a_matrix(self, i: int, k: int):
        """Coefficient rows of Xi^i on the dz^k coordinates."""
        cols = self.blocks[k - 1].coords
        out = []
        for g in self.equations[i - 1]:
            coeffs = one_coeffs(g)
            out.append([coeffs.get(c, ZERO) for c in cols])
        return out

    def b_vector(self, i: int):
        """Right-hand sides: Xi^i = sum a dz - b dt."""
        out = []
        for g in self.equations[i - 1]:
            e = one_coeffs(g).get(T, ZERO)
            out.append(neg(e) if e is not ZERO else ZERO)
        return out


def _jet(sym: Symbol, order: int) -> Symbol:
    return sym if order == 0 else Symbol(f"{sym.name}_d{order}", AUX)


def _residual(g):
    """Implicit ODE residual of a one-form: sum a*zdot - b."""
    parts = []
    for s, e in one_coeffs(g).items():
        parts.append(e if s == T else mul(e, var(_jet(s, 1))))
    return add(*parts) if parts else ZERO


def _span(td: TriangularDecomposition, count: int, zc: ZeroCtx) -> PfaffianSystem:
    gens = [g for xi in td.equations[:count] for g in xi]
    return PfaffianSystem(td.chart, gens, zc)


def from_sequence(sequence, zc: ZeroCtx = None, system=None) -> TriangularDecomposition:
    """Assemble the triangular form from a completed reduction sequence.

    The per-level complements are carried to the final chart through the
    remaining level transforms; flow parameters become the non-derivative
    variables, newest level first, and the kept coordinates are sorted
    into blocks by how deep their Cauchy-characteristic property reaches.
    """
    if not sequence:
        raise StructureViolation("empty reduction sequence")
    if sequence[-1].S_next.dim != 0:
        raise StructureViolation("sequence does not end with an empty system")
    zc = zc or ZeroCtx()
    n_b = len(sequence)
    m = n_b + 1
    base = sequence[0].F.chart
    theta, exts = sequence_transforms(base, sequence)
    final = theta.source

    tails = [None] * n_b
    cur = identity_transform(final)
    for level in range(n_b - 1, -1, -1):
        tails[level] = cur
        cur = compose(exts[level], cur)

    equations = []
    for i in range(1, n_b + 1):
        level = n_b - i
        gens = []
        for g in sequence[level].S_comp.generators:
            w = oneform(exts[level].source, one_coeffs(g))
            gens.append(pullback(tails[level], w))
        equations.append(tuple(gens))
    equations = tuple(equations)

    spans = [PfaffianSystem(final, [g for xi in equations[:j] for g in xi], zc)
             for j in range(n_b + 1)]
    kept = sequence[-1].S_next.chart.coords
    member = {}
    for c in kept:
        v = VectorField(final, {c: ONE})
        depth = 0
        while depth < n_b and _cauchy_member(v, spans[depth + 1], zc):
            depth += 1
        member[c] = 1 + depth
        if member[c] == m:
            raise StructureViolation(
                f"coordinate {c.name} is characteristic for the whole system")

    blocks = []
    for k in range(1, m + 1):
        ys = tuple(c for c in kept if member[c] == k)
        nondrv = tuple(sequence[m - k].nondrv) if k >= 2 else ()
        blocks.append(Block(k, ys, nondrv))
    blocks = tuple(blocks)

    td = TriangularDecomposition(chart=final, blocks=blocks,
                                 equations=equations, transform=theta,
                                 system=system)
    _check_structure(td, zc)
    return td


def _check_structure(td: TriangularDecomposition, zc: ZeroCtx) -> None:
    n_b = td.n_b
    for i in range(1, n_b + 1):
        gens = td.equations[i - 1]
        solved = td.blocks[i].nondrv
        if len(gens) != len(solved):
            raise StructureViolation(
                f"block {i} has {len(gens)} equations for {len(solved)} unknowns")
        later = [c for blk in td.blocks[i:] for c in blk.coords]
        allowed = {c for blk in td.blocks[:i] for c in blk.coords}
        allowed.update(solved)
        allowed.add(T)
        for g in gens:
            coeffs = one_coeffs(g)
            for s in later:
                e = coeffs.get(s)
                if e is not None and not zc.zero(e):
                    raise StructureViolation(
                        f"Xi^{i} carries d{s.name} from a later block")
            for e in coeffs.values():
                for s in e.free:
                    if s not in allowed:
                        raise StructureViolation(
                            f"Xi^{i} coefficient depends on {s.name}")
        residuals = [_residual(g) for g in gens]
        jac = [[diff(r, p) for p in solved] for r in residuals]
        if rank(jac, zc) != len(solved):
            raise StructureViolation(
                f"Xi^{i} is not solvable for block {i + 1}: singular Jacobian")


def validate(td: TriangularDecomposition, zc: ZeroCtx = None):
    """Pass/fail items for the defining properties of the triangular form.

    Checked per level: the solved variables' coordinate fields are vertical
    for the enclosing subsystem and characteristic for the deeper one; each
    block solves for its variables with a regular Jacobian; the flat-output
    coordinates are characteristic for every block that omits them.
    """
    zc = zc or ZeroCtx()
    n_b, m = td.n_b, td.m
    report = []
    for k in range(n_b):
        blk = td.blocks[m - k - 1]
        fields = [VectorField(td.chart, {p: ONE}) for p in blk.nondrv]
        S_k = _span(td, n_b - k, zc)
        V = vertical_annihilator(S_k, zc)
        ok = all(V.contains(v, zc) for v in fields)
        report.append((f"zhat^{m - k} vertical for S_d{k}", ok))
        S_next = _span(td, n_b - k - 1, zc)
        ok = all(_cauchy_member(v, S_next, zc) for v in fields)
        report.append((f"zhat^{m - k} Cauchy for S_d{k + 1}", ok))
    for i in range(1, n_b + 1):
        solved = td.blocks[i].nondrv
        ok = True
        for g in td.equations[i - 1]:
            coeffs = one_coeffs(g)
            if any(not zc.zero(coeffs.get(p, ZERO)) for p in solved):
                ok = False
        if ok:
            residuals = [_residual(g) for g in td.equations[i - 1]]
            jac = [[diff(r, p) for p in solved] for r in residuals]
            ok = rank(jac, zc) == len(solved)
        report.append((f"Xi^{i} parameterizable in zhat^{i + 1}", ok))
    for k in range(1, m):
        blk = td.blocks[k - 1]
        if not blk.y:
            continue
        S_deep = _span(td, k - 1, zc)
        fields = [VectorField(td.chart, {c: ONE}) for c in blk.y]
        ok = all(_cauchy_member(v, S_deep, zc) for v in fields)
        report.append((f"y^{k} Cauchy for S_d{m - k}", ok))
    return report


@dataclass(frozen=True)
class FlatnessCertificate:
    system: object
    decomposition: TriangularDecomposition
    outputs: tuple         # Expr in the original (x, u) coordinates
    order: str             # "0-flat" | "1-flat"
    transform: object      # original chart <- final chart


def extract_flat_output(td: TriangularDecomposition, phi=None) -> FlatnessCertificate:
    """Read the flat outputs off the y-coordinates of the blocks."""
    phi = phi or td.transform
    ycoords = td.flat_coords
    outputs = tuple(phi.inverse[c] for c in ycoords)
    n_u = sum(1 for s in phi.target.coords if s.kind == INPUT)
    if len(outputs) != n_u:
        raise OutputCountMismatch(
            f"{len(outputs)} flat-output candidates for {n_u} inputs")
    inputy = any(s.kind == INPUT for e in outputs for s in e.free)
    return FlatnessCertificate(system=td.system, decomposition=td,
                               outputs=outputs,
                               order="1-flat" if inputy else "0-flat",
                               transform=phi)


# -- trajectory recovery ------------------------------------------------------------

@dataclass(frozen=True)
class PolyCurve:
    """Polynomial test curve with exact derivatives of every order."""

    coeffs: tuple  # ascending powers

    def eval(self, t: float, order: int = 0) -> float:
        acc = 0.0
        for k in range(order, len(self.coeffs)):
            fac = 1.0
            for j in range(k, k - order, -1):
                fac *= j
            acc += self.coeffs[k] * fac * t ** (k - order)
        return acc

    @classmethod
    def fit(cls, ts, ys, degree: int) -> "PolyCurve":
        return cls(tuple(float(c) for c in reversed(np.polyfit(ts, ys, degree))))


@dataclass(frozen=True)
class RecoveredSample:
    t: float
    x: dict
    u: dict
    converged: bool
    residual: float
    note: str = ""


@dataclass(frozen=True)
class RecoveryResult:
    samples: tuple
    converged: int
    skipped: int
    dynamics_residual: float  # divided differences vs f; nan with < 2 points


class _SampleFailure(Exception):
    def __init__(self, block, detail):
        super().__init__(detail)
        self.block = block
        self.detail = detail


class _SampleSingular(_SampleFailure):
    pass


class _SampleDiverged(_SampleFailure):
    pass


_NUMERIC_ERRORS = (ValueError, OverflowError, ZeroDivisionError)


class _Engine:
    """Compiled per-certificate solver shared across samples and trials."""

    def __init__(self, cert: FlatnessCertificate):
        td = cert.decomposition
        self.td = td
        self.n_b = td.n_b
        coords = td.chart.coords
        self.args = []
        self.slot = {}
        for c in coords:
            for j in range(self.n_b + 1):
                s = _jet(c, j)
                self.slot[s] = len(self.args)
                self.args.append(s)
        bump = {}
        for c in coords:
            for j in range(self.n_b):
                bump[_jet(c, j)] = _jet(c, j + 1)
        self.flat = td.flat_coords
        self.blocks = []
        for i in range(1, self.n_b + 1):
            unknowns = td.blocks[i].nondrv
            residuals = [_residual(g) for g in td.equations[i - 1]]
            rf = [compile_expr(r, self.args) for r in residuals]
            jf = [[compile_expr(diff(r, p), self.args) for p in unknowns]
                  for r in residuals]
            chains = []
            cur = residuals
            for _ in range(self.n_b - i):
                cur = [self._dt(r, bump) for r in cur]
                chains.append([compile_expr(r, self.args) for r in cur])
            self.blocks.append((unknowns, rf, jf, chains))
        self.nondrv_names = tuple(p.name for blk in td.blocks
                                  for p in blk.nondrv)
        base = cert.transform.target
        self.base_coords = base.coords
        self.base_f = {s: compile_expr(cert.transform.forward[s], self.args)
                       for s in base.coords}

    @staticmethod
    def _dt(e, bump):
        parts = []
        for s in sorted(e.free, key=lambda s: s.name):
            if s not in bump:
                raise RuntimeError(f"jet order overflow at {s.name}")
            parts.append(mul(diff(e, s), var(bump[s])))
        return add(*parts) if parts else ZERO

    def seed_warm(self, initial_guess) -> dict:
        """Warm-start table from a name -> value guess for the solved variables."""
        warm = {}
        for bi, (unknowns, _, _, _) in enumerate(self.blocks, start=1):
            if any(p.name in initial_guess for p in unknowns):
                warm[bi] = [float(initial_guess.get(p.name, 0.0))
                            for p in unknowns]
        return warm

    def solve(self, curves, t: float, warm: dict):
        """All chart jets at time t; raises _SampleFailure on trouble."""
        vals = [0.0] * len(self.args)
        for c, curve in zip(self.flat, curves):
            for j in range(self.n_b + 1):
                vals[self.slot[_jet(c, j)]] = curve.eval(t, j)
        for bi, (unknowns, rf, jf, chains) in enumerate(self.blocks, start=1):
            n = len(unknowns)
            guess = warm.get(bi, [0.0] * n)
            for k, p in enumerate(unknowns):
                vals[self.slot[p]] = guess[k]
            jac = None
            try:
                for _ in range(60):
                    rv = [f(vals) for f in rf]
                    if max(abs(r) for r in rv) < 1e-12:
                        break
                    jac = np.array([[f(vals) for f in row] for row in jf])
                    if abs(np.linalg.det(jac)) < 1e-12:
                        raise _SampleSingular(
                            bi, f"singular Jacobian in block {bi} at t={t}")
                    step = np.linalg.solve(jac, [-r for r in rv])
                    for k, p in enumerate(unknowns):
                        vals[self.slot[p]] += float(step[k])
                    if max(abs(vals[self.slot[p]]) for p in unknowns) > 1e9:
                        raise _SampleDiverged(
                            bi, f"Newton blow-up in block {bi} at t={t}")
                else:
                    raise _SampleDiverged(
                        bi, f"no convergence in block {bi} at t={t}")
                warm[bi] = [vals[self.slot[p]] for p in unknowns]
                jac = np.array([[f(vals) for f in row] for row in jf])
                if abs(np.linalg.det(jac)) < 1e-12:
                    raise _SampleSingular(
                        bi, f"singular Jacobian in block {bi} at t={t}")
                for j, cf in enumerate(chains, start=1):
                    rest = [f(vals) for f in cf]
                    sol = np.linalg.solve(jac, [-r for r in rest])
                    for k, p in enumerate(unknowns):
                        vals[self.slot[_jet(p, j)]] = float(sol[k])
            except _NUMERIC_ERRORS as ex:
                raise _SampleSingular(
                    bi, f"domain violation in block {bi} at t={t}: {ex}") from ex
            except np.linalg.LinAlgError as ex:
                raise _SampleSingular(
                    bi, f"singular Jacobian in block {bi} at t={t}") from ex
        return vals

    def residual_at(self, vals):
        worst = 0.0
        for _, rf, _, _ in self.blocks:
            for f in rf:
                worst = max(worst, abs(f(vals)))
        return worst

    def xu_at(self, vals):
        x, u = {}, {}
        for s in self.base_coords:
            v = self.base_f[s](vals)
            (u if s.kind == INPUT else x)[s.name] = v
        return x, u


def recover_trajectory(cert: FlatnessCertificate, y_curves, t_samples,
                       initial_guess=None) -> RecoveryResult:
    """Solve the blocks for the non-derivative variables at each sample.

    Each block is a square Newton solve (tolerance 1e-12); the time
    derivatives of the solved variables follow from differentiating the
    block equations along the trajectory, reusing the same Jacobian.
    The block equations can have several roots; initial_guess (a map
    from solved-variable name to a value near the intended branch at the
    first sample) selects among them, and later samples continue from
    the previous solution.  Samples that hit a singular Jacobian or
    diverge are skipped and reported; if every sample fails the
    strongest failure kind is raised.
    """
    if len(y_curves) != len(cert.outputs):
        raise ValueError(
            f"{len(y_curves)} curves supplied for {len(cert.outputs)} outputs")
    engine = _Engine(cert)
    warm = engine.seed_warm(initial_guess) if initial_guess else {}
    samples = []
    failures = []
    for t in t_samples:
        try:
            vals = engine.solve(y_curves, float(t), warm)
        except _SampleFailure as ex:
            samples.append(RecoveredSample(float(t), {}, {}, False,
                                           math.inf, ex.detail))
            failures.append(ex)
            continue
        x, u = engine.xu_at(vals)
        samples.append(RecoveredSample(float(t), x, u, True,
                                       engine.residual_at(vals)))
    good = [s for s in samples if s.converged]
    if not good:
        if failures and all(isinstance(f, _SampleSingular) for f in failures):
            raise SingularJacobian(failures[0].detail)
        raise NewtonDivergence(failures[0].detail if failures
                               else "no samples supplied")

    worst = float("nan")
    if cert.system is not None:
        names = [s for s in cert.system.states + cert.system.inputs]
        fs = [compile_expr(f, names) for f in cert.system.dynamics]
        pairs = [(a, b) for a, b in zip(samples, samples[1:])
                 if a.converged and b.converged]
        for a, b in pairs:
            h = b.t - a.t
            if h <= 0:
                continue
            mid = [(a.x[s.name] + b.x[s.name]) / 2 for s in cert.system.states]
            mid += [(a.u[s.name] + b.u[s.name]) / 2 for s in cert.system.inputs]
            for i, s in enumerate(cert.system.states):
                rate = (b.x[s.name] - a.x[s.name]) / h
                err = abs(rate - fs[i](mid))
                if math.isnan(worst) or err > worst:
                    worst = err
    return RecoveryResult(samples=tuple(samples), converged=len(good),
                          skipped=len(samples) - len(good),
                          dynamics_residual=worst)


@dataclass(frozen=True)
class NumericVerdict:
    trials: int
    passed: int
    failed: int
    singular: int
    worst_deviation: float
    ok: bool


def verify_flatness_numeric(cert: FlatnessCertificate, trials: int = 20,
                            seed: int = 0) -> NumericVerdict:
    """Independent numeric check that the certificate's outputs are flat.

    Per trial: simulate the original dynamics under random smooth inputs,
    fit low-degree polynomials to the claimed outputs along that run, feed
    the fits to recover_trajectory on a fine half-step grid, then (a) check
    the claimed outputs reproduce the test curves on the recovered
    trajectory, and (b) re-integrate the original dynamics with a classic
    4th-order step from the recovered initial state and compare states.
    Trials with skipped samples count as singular, never as failures, but
    the pass bar is 80 percent of ALL trials, so singular trials eat into
    the same slack as failures.  Trial inputs are drawn from a narrow
    correlated envelope chosen to keep samples clear of singular loci.
    """
    if cert.system is None:
        raise ValueError("certificate carries no source system")
    cs = cert.system
    coords = list(cs.states) + list(cs.inputs)
    n_x, n_u = len(cs.states), len(cs.inputs)
    fs = [compile_expr(f, coords) for f in cs.dynamics]
    outs = [compile_expr(y, coords) for y in cert.outputs]
    engine = _Engine(cert)
    # branch selectors: the solved chart variables in original coordinates
    td = cert.decomposition
    chartvals = {p.name: compile_expr(cert.transform.inverse[p], coords)
                 for blk in td.blocks for p in blk.nondrv}
    degree = max(engine.n_b, 3)
    rng = random.Random(seed)
    h = 1e-3
    half = h / 2
    n_steps = 1000

    def f_eval(x, u):
        return [f(x + u) for f in fs]

    def rk4(x, u0, u1, u2, step):
        k1 = f_eval(x, u0)
        k2 = f_eval([a + step / 2 * b for a, b in zip(x, k1)], u1)
        k3 = f_eval([a + step / 2 * b for a, b in zip(x, k2)], u1)
        k4 = f_eval([a + step * b for a, b in zip(x, k3)], u2)
        return [a + step / 6 * (b + 2 * c + 2 * d + e)
                for a, b, c, d, e in zip(x, k1, k2, k3, k4)]

    passed = failed = singular = 0
    worst = 0.0
    for _ in range(trials):
        x0 = [rng.uniform(0.8, 1.2) for _ in range(n_x)]
        # shared base level, alternating per-input slopes: levels stay below
        # 1 and input ratios drift monotonically without nearing pi/2, so
        # samples keep clear of singular loci and rate-dependent coordinates
        # stay observable (pairwise nonvanishing input Wronskians)
        base = rng.uniform(0.7, 0.8)
        ucoeff = []
        for j in range(n_u):
            sgn = 1.0 if j % 2 == 0 else -1.0
            ucoeff.append((base * (1 + sgn * rng.uniform(0.0, 0.02)),
                           sgn * rng.uniform(0.04, 0.06),
                           rng.uniform(-0.01, 0.01)))

        def uref(t):
            return [c0 + c1 * t + c2 * t * t for c0, c1, c2 in ucoeff]

        # reference run of the true dynamics, sampled for curve fitting
        xs = [x0]
        x = x0
        for k in range(n_steps):
            t = k * h
            x = rk4(x, uref(t), uref(t + half), uref(t + h), h)
            xs.append(x)
        fit_ts, fit_ys = [], [[] for _ in outs]
        for k in range(0, n_steps + 1, 10):
            t = k * h
            point = xs[k] + uref(t)
            fit_ts.append(t)
            for j, fo in enumerate(outs):
                fit_ys[j].append(fo(point))
        curves = [PolyCurve.fit(fit_ts, ys, degree) for ys in fit_ys]

        grid = [k * half for k in range(2 * n_steps + 1)]
        start = x0 + uref(0.0)
        try:
            guess = {name: f(start) for name, f in chartvals.items()}
            rec = recover_trajectory(cert, curves, grid, initial_guess=guess)
        except _NUMERIC_ERRORS + (SingularJacobian, NewtonDivergence):
            singular += 1
            continue
        if rec.skipped:
            singular += 1
            continue

        consistent = True
        for k in range(0, 2 * n_steps + 1, 2):
            s = rec.samples[k]
            point = [s.x[c.name] for c in cs.states] + \
                    [s.u[c.name] for c in cs.inputs]
            for j, fo in enumerate(outs):
                if abs(fo(point) - curves[j].eval(s.t)) > 1e-7:
                    consistent = False
                    break
            if not consistent:
                break
        if not consistent:
            failed += 1
            continue

        xhat = [rec.samples[0].x[c.name] for c in cs.states]
        deviation = 0.0
        for k in range(n_steps):
            us = [[rec.samples[2 * k + d].u[c.name] for c in cs.inputs]
                  for d in (0, 1, 2)]
            xhat = rk4(xhat, us[0], us[1], us[2], h)
            ref = rec.samples[2 * k + 2]
            for j, c in enumerate(cs.states):
                deviation = max(deviation, abs(xhat[j] - ref.x[c.name]))
        if deviation < 1e-6:
            passed += 1
        elif rec.dynamics_residual > 1e-3:
            # the divided-difference defect already exceeds what a fixed
            # step can resolve: stiffness, not a dynamic inconsistency
            singular += 1
            continue
        else:
            worst = max(worst, deviation)
            failed += 1
            continue
        worst = max(worst, deviation)

    ok = trials > 0 and passed * 5 >= trials * 4
    return NumericVerdict(trials=trials, passed=passed, failed=failed,
                          singular=singular, worst_deviation=worst, ok=ok)
