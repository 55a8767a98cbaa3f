"""
Manufactured solutions for the composite Zener system, error norms and
convergence studies.

The family is separable in time, u(x, t) = sin(t) w(x).  On each viscous
subdomain the memory stress follows the exact particular solution

    zeta(x, t) = (D - C) eps(w)(x) * (cos t + omega sin t) / (1 + omega^2)

of the relaxation law omega zeta' + zeta = (D - C) eps(w) cos t, so the
stress pair satisfies the constitutive equations identically and the body
force F = rho u'' - div(gamma + omega zeta) closes the momentum balance.
Initial data is read off the closed form at t = 0, which keeps the
trajectory transient-free.

The combined stress sigma = gamma + omega zeta must be H(div) across the
material interface.  With a common elastic tensor C on both sides this
reduces to (D - C) eps(w) e_n = 0 on the interface, which the constructor
checks by sampling; the default w = (sin(pi x) sin(pi y),
cos(pi x) cos(pi y)) satisfies it on the vertical line x = 1/2 whenever
lam_d = lam.
"""

import math

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import sympy as sym

from .assembly import Discretization, SeparableField, eval_by_tag
from .cg_hybrid_solver import TimeGrid, energy, run_cg
from .dg_solver import choose_penalty, estimate_cfl, run_dg
from .materials import MaterialTable
from .mesh import unit_square_mesh

X, Y = sym.symbols("x y")

DEFAULT_INTERFACE = 0.5


def default_displacement():
    """Smooth trigonometric profile compatible with the x = 1/2 interface."""
    return sym.Matrix([sym.sin(sym.pi * X) * sym.sin(sym.pi * Y),
                       sym.cos(sym.pi * X) * sym.cos(sym.pi * Y)])


def default_materials():
    """Left half elastic, right half viscoelastic with omega = 0.5."""
    return MaterialTable.from_dict({
        1: dict(lam=1.0, mu=1.0, rho=1.0, omega=0.0),
        2: dict(lam=1.0, mu=1.0, rho=1.0, omega=0.5, lam_d=1.0, mu_d=1.5),
    })


def _strain(w):
    J = w.jacobian([X, Y])
    return (J + J.T) / 2


def _apply_isotropic(lam, mu, eps):
    return lam * sym.trace(eps) * sym.eye(2) + 2 * mu * eps


def _tensor_div(M):
    return sym.Matrix([sym.diff(M[0, 0], X) + sym.diff(M[0, 1], Y),
                       sym.diff(M[1, 0], X) + sym.diff(M[1, 1], Y)])


def _lambdify_stack(exprs, out_shape):
    """Vectorized evaluator pts -> (n, *out_shape) from a list of exprs."""
    fns = [sym.lambdify((X, Y), sym.sympify(e), "numpy") for e in exprs]

    def evaluate(pts):
        pts = np.asarray(pts, dtype=float)
        n = pts.shape[0]
        vals = np.empty((n, len(fns)))
        for j, f in enumerate(fns):
            vals[:, j] = np.broadcast_to(f(pts[:, 0], pts[:, 1]), (n,))
        return vals.reshape((n,) + out_shape)

    return evaluate


def _zero_field(out_shape):
    def evaluate(pts):
        pts = np.asarray(pts)
        return np.zeros((pts.shape[0],) + out_shape)
    return evaluate


class SubdomainField:
    """
    Space field with one callable branch per subdomain tag.

    Assembly routines evaluate it per element group through eval_tagged,
    so points on a material interface take the branch of the owning
    element.  Calling the field directly picks branches by point location
    (boundary data, plotting); a selector maps points to tags, and without
    one the first branch is used everywhere.
    """

    def __init__(self, fns, selector=None):
        self.fns = dict(fns)
        self.selector = selector

    def eval_tagged(self, pts, tag):
        return np.asarray(self.fns[tag](np.asarray(pts, dtype=float)),
                          dtype=float)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self.selector is None:
            first = next(iter(self.fns.values()))
            return np.asarray(first(pts), dtype=float)
        tags = self.selector(pts)
        out = None
        for tag, fn in self.fns.items():
            idx = np.nonzero(tags == tag)[0]
            if len(idx) == 0:
                continue
            vals = np.asarray(fn(pts[idx]), dtype=float)
            if out is None:
                out = np.zeros((pts.shape[0],) + vals.shape[1:])
            out[idx] = vals
        return out


def relaxation_coefficient(t, omega):
    """Exact particular solution coefficient of omega T' + T = cos t."""
    t = np.asarray(t, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return (np.cos(t) + omega * np.sin(t)) / (1.0 + omega ** 2)


def relaxation_coefficient_dot(t, omega):
    t = np.asarray(t, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return (-np.sin(t) + omega * np.cos(t)) / (1.0 + omega ** 2)


class ManufacturedCase:
    """
    Closed-form solution bundle for the composite wave problem.

    Carries tagged space fields for the stress pair, its divergence, the
    rotation multiplier, the body force and the boundary acceleration,
    all derived symbolically from a displacement profile w and a material
    table.  Construction runs the constitutive and interface compatibility
    gates and raises ValueError when the pair (w, materials) does not
    solve the system exactly.
    """

    def __init__(self, w, materials, interface_x=DEFAULT_INTERFACE):
        self.materials = materials
        self.interface_x = float(interface_x)
        self.w_sym = sym.Matrix(w)
        self.tags = materials.tags()

        lo, hi = self.tags[0], self.tags[-1]
        x0 = self.interface_x

        def selector(pts):
            pts = np.asarray(pts, dtype=float)
            return np.where(pts[:, 0] <= x0, lo, hi)

        self.selector = selector if len(self.tags) > 1 else None

        Ew = _strain(self.w_sym)
        skw01 = (sym.diff(self.w_sym[0], Y) - sym.diff(self.w_sym[1], X)) / 2
        self.w = _lambdify_stack(list(self.w_sym), (2,))
        self.strain = _lambdify_stack(list(Ew), (2, 2))
        # rotation multiplier scalar against the unit spin tensor
        self.rot_space = _lambdify_stack([sym.sqrt(2) * skw01], ())

        self._tab = {}
        for tag in self.tags:
            mat = materials[tag]
            Sg = _apply_isotropic(mat.C.lam, mat.C.mu, Ew)
            if mat.viscous:
                rel = mat.relaxation()
                Sz = _apply_isotropic(rel.lam, rel.mu, Ew)
            else:
                Sz = sym.zeros(2, 2)
            dSg = _tensor_div(Sg)
            dSz = _tensor_div(Sz)
            F1 = -mat.rho * self.w_sym - dSg
            F2 = -mat.omega * dSz
            self._tab[tag] = dict(
                omega=mat.omega, rho=mat.rho, viscous=mat.viscous,
                Sg=_lambdify_stack(list(Sg), (2, 2)),
                Sz=_lambdify_stack(list(Sz), (2, 2)),
                dSg=_lambdify_stack(list(dSg), (2,)),
                dSz=_lambdify_stack(list(dSz), (2,)),
                F1=_lambdify_stack(list(F1), (2,)),
                F2=_lambdify_stack(list(F2), (2,)),
            )

        self.source = self._build_source()
        self.boundary_accel = SeparableField([
            (lambda t: -np.sin(t), self.w)])
        self._self_check()

    # ------------------------------------------------------------------
    # tagged space fields
    # ------------------------------------------------------------------
    def _field(self, key):
        return SubdomainField({tag: self._tab[tag][key] for tag in self.tags},
                              self.selector)

    def space_fields(self):
        """Dict of the time-independent space parts as tagged fields."""
        return dict(
            Sg=self._field("Sg"),
            Sz=self._field("Sz"),
            dSg=self._field("dSg"),
            dSz=self._field("dSz"),
            rot=SubdomainField({tag: self.rot_space for tag in self.tags},
                               self.selector),
        )

    def _build_source(self):
        terms = [(np.sin, self._field("F1"))]
        omegas = sorted({self._tab[t]["omega"] for t in self.tags
                         if self._tab[t]["viscous"]})
        for om in omegas:
            fns = {}
            for tag in self.tags:
                row = self._tab[tag]
                if row["viscous"] and row["omega"] == om:
                    fns[tag] = row["F2"]
                else:
                    fns[tag] = _zero_field((2,))
            terms.append((lambda t, om=om: relaxation_coefficient(t, om),
                          SubdomainField(fns, self.selector)))
        return SeparableField(terms)

    # ------------------------------------------------------------------
    # exact trajectory
    # ------------------------------------------------------------------
    def _pair_coeffs(self, t, deriv):
        """(gamma coefficient, zeta coefficient per tag) at time t."""
        ag = [math.sin, math.cos, lambda s: -math.sin(s)][deriv](t)
        az = {}
        for tag in self.tags:
            om = self._tab[tag]["omega"]
            if deriv == 0:
                az[tag] = float(relaxation_coefficient(t, om))
            elif deriv == 1:
                az[tag] = float(relaxation_coefficient_dot(t, om))
            else:
                az[tag] = -float(relaxation_coefficient(t, om))
        return ag, az

    def _scaled(self, key, coeff_by_tag):
        fns = {}
        for tag in self.tags:
            base = self._tab[tag][key]
            c = coeff_by_tag[tag]
            fns[tag] = (lambda pts, base=base, c=c:
                        c * np.asarray(base(pts), dtype=float))
        return SubdomainField(fns, self.selector)

    def stress_fields(self, t, deriv=0):
        """(gamma, zeta) tagged fields of the deriv-th time derivative."""
        ag, az = self._pair_coeffs(t, deriv)
        gamma = self._scaled("Sg", {tag: ag for tag in self.tags})
        zeta = self._scaled("Sz", az)
        return gamma, zeta

    def div_fields(self, t, deriv=0):
        """(div gamma, div zeta) tagged fields at time t."""
        ag, az = self._pair_coeffs(t, deriv)
        dg = self._scaled("dSg", {tag: ag for tag in self.tags})
        dz = self._scaled("dSz", az)
        return dg, dz

    def initial_pair(self, deriv):
        """(gamma, zeta, div gamma, div zeta) at t = 0, time-derivative
        order deriv in (0, 1, 2); feeds the elliptic projection start-up."""
        g, z = self.stress_fields(0.0, deriv)
        dg, dz = self.div_fields(0.0, deriv)
        return g, z, dg, dz

    def rotation_coefficient(self, t):
        """Time factor of the rotation multiplier r(t) = (cos t - 1) skw(grad w)."""
        return np.cos(t) - 1.0

    def rotation_values(self, pts, t):
        return self.rotation_coefficient(t) * self.rot_space(pts)

    def displacement(self, pts, t):
        return np.sin(t) * self.w(pts)

    def acceleration_values(self, pts, t):
        return -np.sin(t) * self.w(pts)

    def zeta1_pair(self, pts, tag):
        """Start-up memory-stress rate two ways: the compatibility formula
        (D eps(u1) - gamma1 - zeta0) / omega and the exact derivative.
        Returned as (formula, exact) arrays for mismatch reporting."""
        row = self._tab[tag]
        if not row["viscous"]:
            z = np.zeros((np.asarray(pts).shape[0], 2, 2))
            return z, z.copy()
        om = row["omega"]
        Ew = self.strain(pts)
        d_eps = self.materials.apply_D(tag, Ew)
        gamma1 = self.materials.apply_C(tag, Ew)
        zeta0 = float(relaxation_coefficient(0.0, om)) * row["Sz"](pts)
        formula = (d_eps - gamma1 - zeta0) / om
        exact = float(relaxation_coefficient_dot(0.0, om)) * row["Sz"](pts)
        return formula, exact

    # ------------------------------------------------------------------
    # construction gates
    # ------------------------------------------------------------------
    def _self_check(self, nsamples=200, seed=0):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.05, 0.95, size=(nsamples, 2))
        ts = rng.uniform(0.0, 2.0 * np.pi, size=nsamples)
        Ew = self.strain(pts)
        scale = max(np.abs(Ew).max(), 1.0)

        for tag in self.tags:
            row = self._tab[tag]
            # gamma = C eps(u): symbolic tensor application against the
            # material table's own apply
            want = self.materials.apply_C(tag, Ew)
            got = row["Sg"](pts)
            if np.abs(want - got).max() > 1e-10 * scale:
                raise ValueError("gamma branch does not equal C eps(u)")
            if not row["viscous"]:
                if np.abs(row["Sz"](pts)).max() != 0.0:
                    raise ValueError("memory stress nonzero on an elastic "
                                     "subdomain")
                continue
            om = row["omega"]
            rel = row["Sz"](pts)
            Tv = relaxation_coefficient(ts, om)
            Td = relaxation_coefficient_dot(ts, om)
            resid = (om * Td + Tv - np.cos(ts))[:, None, None] * rel
            rhs_dir = self.materials.apply_D(tag, Ew) \
                - self.materials.apply_C(tag, Ew)
            if np.abs(rel - rhs_dir).max() > 1e-10 * scale:
                raise ValueError("relaxation branch does not equal "
                                 "(D - C) eps(u)")
            if np.abs(resid).max() > 1e-10 * scale:
                raise ValueError("constitutive residual above tolerance")

        if len(self.tags) > 1:
            self._check_interface(scale)

    def _check_interface(self, scale, nsamples=64):
        mats = [self.materials[t] for t in self.tags]
        lam0, mu0 = mats[0].C.lam, mats[0].C.mu
        for m in mats[1:]:
            if m.C.lam != lam0 or m.C.mu != mu0:
                raise ValueError("elastic tensor must match across "
                                 "subdomains for a conforming stress")
        ys = np.linspace(0.0, 1.0, nsamples)
        pts = np.column_stack([np.full_like(ys, self.interface_x), ys])
        lo, hi = self.tags[0], self.tags[-1]
        svals = {}
        for tag in (lo, hi):
            row = self._tab[tag]
            svals[tag] = row["omega"] * row["Sz"](pts)[:, :, 0]
        om_lo = self._tab[lo]["omega"]
        om_hi = self._tab[hi]["omega"]
        if om_lo == om_hi:
            gap = np.abs(svals[lo] - svals[hi]).max()
        else:
            gap = max(np.abs(svals[lo]).max(), np.abs(svals[hi]).max())
        if gap > 1e-10 * scale:
            raise ValueError("combined stress is not H(div) across the "
                             "material interface: (D - C) eps(w) n != 0")


def make_case_separable(w=None, materials=None,
                        interface_x=DEFAULT_INTERFACE):
    """Build the separable manufactured case u(x, t) = sin(t) w(x)."""
    if w is None:
        w = default_displacement()
    if materials is None:
        materials = default_materials()
    return ManufacturedCase(w, materials, interface_x)


# ----------------------------------------------------------------------
# error measurement
# ----------------------------------------------------------------------
class ErrorAccumulator:
    """
    Running max-in-time error norms of a discrete trajectory against a
    manufactured case.

    push(t, pvec, rvec) feeds one time level.  The stress-pair norm
    (material-weighted pair plus rho^{-1/2}-weighted divergence of the
    combined stress, plus the scaled jump seminorm of the iterate when
    include_jumps is set) and the rotation error are measured at every
    level; the velocity-pair error uses the centered difference of the
    last three levels.  All integrals use the overkill quadrature tables
    of the discretization.
    """

    def __init__(self, disc, case, dt, include_jumps=False):
        self.disc = disc
        self.case = case
        self.dt = float(dt)
        self.include_jumps = include_jumps
        fields = case.space_fields()
        xq = disc.xq_err
        ne, nq = xq.shape[:2]
        self.Sg = eval_by_tag(fields["Sg"], xq, disc.tags).reshape(ne, nq, 4)
        self.Sz = eval_by_tag(fields["Sz"], xq, disc.tags).reshape(ne, nq, 4)
        self.dSg = eval_by_tag(fields["dSg"], xq, disc.tags)
        self.dSz = eval_by_tag(fields["dSz"], xq, disc.tags)
        self.rot = eval_by_tag(fields["rot"], xq, disc.tags).reshape(ne, nq)
        if include_jumps:
            # sum of squared trace values, not the assembled Gram form,
            # so a conforming iterate reports a roundoff-size seminorm
            self.trace_op = disc.interior_trace()
            self.trace_qw = disc.trace_row_data()[0]
        else:
            self.trace_op = None
        self.window = []
        self.err_S = 0.0
        self.err_vel = 0.0
        self.err_rot = 0.0
        self.err_jump = 0.0
        self.err_S_by_tag = {tag: 0.0 for tag in disc.materials.tags()}

    def _pair_coeffs(self, t, deriv):
        om = self.disc.omega
        if deriv == 0:
            return np.sin(t), relaxation_coefficient(t, om)
        if deriv == 1:
            return np.cos(t), relaxation_coefficient_dot(t, om)
        return -np.sin(t), -relaxation_coefficient(t, om)

    def _stress_error_values(self, t, pvec, deriv=0):
        ag, az = self._pair_coeffs(t, deriv)
        gh, zh = self.disc.stress_at_quad(pvec, error=True)
        ne, nq = gh.shape[:2]
        eg = ag * self.Sg - gh.reshape(ne, nq, 4)
        ez = az[:, None, None] * self.Sz - zh.reshape(ne, nq, 4)
        return eg, ez

    def _snorm_sq_per_element(self, t, pvec):
        eg, ez = self._stress_error_values(t, pvec)
        dens = np.einsum("eab,eqa,eqb->eq", self.disc.A4, eg, eg) \
            + np.einsum("eab,eqa,eqb->eq", self.disc.V4, ez, ez)
        ag, az = self._pair_coeffs(t, 0)
        dv_ex = ag * self.dSg \
            + (self.disc.omega * az)[:, None, None] * self.dSz
        dv = dv_ex - self.disc.divj_at_quad(pvec, error=True)
        dens = dens + np.einsum("eqd,eqd->eq", dv, dv) \
            / self.disc.rho[:, None]
        return self.disc.cell_integrals(dens, error=True)

    def push(self, t, pvec, rvec):
        per_elem = self._snorm_sq_per_element(t, pvec)
        total = float(per_elem.sum())
        if self.include_jumps:
            tv = self.trace_op @ pvec
            jump_sq = float(np.sum(self.trace_qw * tv * tv))
            total += jump_sq
            self.err_jump = max(self.err_jump,
                                math.sqrt(max(jump_sq, 0.0)))
        self.err_S = max(self.err_S, math.sqrt(max(total, 0.0)))
        for tag in self.err_S_by_tag:
            mask = self.disc.tags == tag
            self.err_S_by_tag[tag] = max(
                self.err_S_by_tag[tag],
                math.sqrt(max(float(per_elem[mask].sum()), 0.0)))

        rh = self.disc.rotation_at_quad(rvec, error=True)
        er = self.case.rotation_coefficient(t) * self.rot - rh
        rot_sq = float(self.disc.cell_integrals(er * er, error=True).sum())
        self.err_rot = max(self.err_rot, math.sqrt(max(rot_sq, 0.0)))

        self.window.append((t, np.asarray(pvec, dtype=float)))
        if len(self.window) > 3:
            self.window.pop(0)
        if len(self.window) == 3:
            t_mid = self.window[1][0]
            diff = (self.window[2][1] - self.window[0][1]) / (2.0 * self.dt)
            eg, ez = self._stress_error_values(t_mid, diff, deriv=1)
            om2 = self.disc.omega[:, None] ** 2
            dens = np.einsum("eqa,eqa->eq", eg, eg) \
                + om2 * np.einsum("eqa,eqa->eq", ez, ez)
            vel_sq = float(self.disc.cell_integrals(dens, error=True).sum())
            self.err_vel = max(self.err_vel, math.sqrt(max(vel_sq, 0.0)))

    def report(self):
        return dict(err_S=self.err_S, err_vel=self.err_vel,
                    err_rot=self.err_rot, err_jump=self.err_jump,
                    err_S_by_tag=dict(self.err_S_by_tag))


def error_norms(disc, case, dt, times, pvecs, rvecs, include_jumps=False):
    """Max-in-time error norms of a stored trajectory."""
    acc = ErrorAccumulator(disc, case, dt, include_jumps=include_jumps)
    for t, p, r in zip(times, pvecs, rvecs):
        acc.push(t, p, r)
    return acc.report()


class ErrorReport:
    """Refinement-study rows with observed rates as log2 error ratios."""

    COLUMNS = ("level", "h", "dt", "err_S", "err_vel", "err_rot",
               "rate_S", "rate_vel", "rate_rot")

    def __init__(self):
        self.rows = []

    def add_row(self, level, h, dt, err_S, err_vel, err_rot, **extra):
        self.rows.append(dict(level=level, h=h, dt=dt, err_S=err_S,
                              err_vel=err_vel, err_rot=err_rot, **extra))

    def rates(self):
        out = []
        for i, row in enumerate(self.rows):
            if i == 0:
                out.append(dict(rate_S=None, rate_vel=None, rate_rot=None))
                continue
            prev = self.rows[i - 1]
            rr = {}
            for key, rkey in (("err_S", "rate_S"), ("err_vel", "rate_vel"),
                              ("err_rot", "rate_rot")):
                e0, e1 = prev[key], row[key]
                rr[rkey] = (math.log2(e0 / e1)
                            if e0 > 0.0 and e1 > 0.0 else None)
            out.append(rr)
        return out

    def to_csv_lines(self):
        lines = [",".join(self.COLUMNS)]
        rates = self.rates()
        for row, rr in zip(self.rows, rates):
            cells = [str(row["level"]),
                     "%.8e" % row["h"], "%.8e" % row["dt"],
                     "%.8e" % row["err_S"], "%.8e" % row["err_vel"],
                     "%.8e" % row["err_rot"]]
            for key in ("rate_S", "rate_vel", "rate_rot"):
                cells.append("" if rr[key] is None else "%.4f" % rr[key])
            lines.append(",".join(cells))
        return lines


def cg_step_policy(k):
    """dt = 0.4 h^{(k+1)/2}: temporal error O(dt^2) = O(h^{k+1}) stays
    below the spatial O(h^k) error on refinement."""
    def policy(h):
        return 0.4 * h ** ((k + 1) / 2.0)
    return policy


def convergence_study(scheme, case, k, levels, final_time=0.5, base_n=4,
                      dt_policy=None, penalty=None, progress=None):
    """
    Error study on a ladder of uniformly refined unit-square meshes,
    n = base_n * 2^level.  Rows carry the global error norms, the
    per-subdomain stress errors (err_S_tag<t>) and, for the dg scheme,
    the jump seminorm of the iterate (err_jump).

    The default step policies keep the temporal error subdominant: the
    trapezoidal scheme takes dt = 0.4 h^{(k+1)/2}, the explicit scheme
    half its stability estimate.  dt_policy(h) overrides either.
    """
    if levels < 3:
        raise ValueError("need at least 3 refinement levels")
    if scheme not in ("cg", "dg"):
        raise ValueError("scheme must be 'cg' or 'dg'")
    interface = case.interface_x if len(case.materials.tags()) > 1 else None
    report = ErrorReport()
    for j in range(levels):
        n = base_n * 2 ** j
        mesh = unit_square_mesh(n, interface_x=interface)
        disc = Discretization(mesh, k, case.materials)
        if scheme == "cg":
            dt = (dt_policy or cg_step_policy(k))(mesh.h)
            grid = TimeGrid(final_time,
                            max(int(math.ceil(final_time / dt)), 2))
            acc = ErrorAccumulator(disc, case, grid.dt)
            run_cg(disc, case, grid,
                   collect=lambda i, t, p, r: acc.push(t, p, r))
        else:
            pen = penalty if penalty is not None else choose_penalty(
                mesh, case.materials, k, disc=disc)
            dt = dt_policy(mesh.h) if dt_policy \
                else 0.5 * estimate_cfl(disc, pen)
            grid = TimeGrid(final_time,
                            max(int(math.ceil(final_time / dt)), 2))
            acc = ErrorAccumulator(disc, case, grid.dt, include_jumps=True)
            run_dg(disc, case, grid, penalty=pen,
                   collect=lambda i, t, p, r: acc.push(t, p, r))
        rep = acc.report()
        extra = {"err_S_tag%d" % tag: val
                 for tag, val in rep["err_S_by_tag"].items()}
        if scheme == "dg":
            extra["err_jump"] = rep["err_jump"]
        report.add_row(j, mesh.h, grid.dt, rep["err_S"], rep["err_vel"],
                       rep["err_rot"], **extra)
        if progress is not None:
            progress(j, report)
    return report


def energy_trace(pvecs, M, K, dt, tol=1e-9):
    """
    Discrete midpoint energy E^{k+1/2} between consecutive levels of a
    stored trajectory, plus the indices of steps whose energy grew by
    more than tol relative to the series maximum.  Free evolution under
    the trapezoidal scheme must produce an empty violation list.
    """
    series = np.array([energy(M, K, dt, pvecs[i], pvecs[i + 1])
                       for i in range(len(pvecs) - 1)])
    if len(series) == 0:
        return series, []
    scale = max(float(series.max()), 0.0)
    if scale == 0.0:
        return series, []
    viol = [i for i in range(1, len(series))
            if series[i] - series[i - 1] > tol * scale]
    return series, viol


def inf_sup_estimate(disc):
    """
    Smallest normalized singular value of the constraint block of the
    mixed saddle problem, restricted to the facet-continuous subspace:
    with Z spanning the null space of the facet-continuity constraint,

        beta^2 = lambda_min( (B Z) (Z^T X Z)^{-1} (B Z)^T ),

    where B stacks the weak-symmetry and divergence constraints and X is
    the Gram matrix of the full stress-pair norm.  The multiplier Gram
    matrix is the identity for the orthonormal modal bases.  Dense linear
    algebra; intended for small diagnostic meshes.
    """
    Bpsi = disc.psi_matrix().toarray()
    Z = scipy.linalg.null_space(Bpsi)
    if Z.shape[1] == 0:
        return 0.0
    X = (disc.pairform_matrix() + disc.divdiv_matrix()).toarray()
    B = sp.vstack([disc.skew_matrix(), disc.udiv_matrix()]).toarray()
    Bt = B @ Z
    Xt = Z.T @ X @ Z
    S = Bt @ np.linalg.solve(Xt, Bt.T)
    lam = scipy.linalg.eigvalsh(S)
    return float(np.sqrt(max(lam[0], 0.0)))
