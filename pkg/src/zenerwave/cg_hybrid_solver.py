"""
Trapezoidal (average acceleration) time stepping for the stress-pair wave
system, with static condensation onto facet multipliers.

Each step solves the symmetric saddle system

    [ E        c B_r^T   -c B_psi^T ] [p^{k+1}  ]   [b_p]
    [ c B_r    0          0         ] [r^{k+1}  ] = [0  ]
    [ -c B_psi 0          0         ] [psi^{k+1}]   [0  ],

with c = 1/(2 dt) and E = M/dt^2 + c G + K/4, where M is the pair mass
(A on gamma, omega^2 V on zeta), G the viscous damping (omega V on zeta),
K the rho^{-1}-weighted div-div form of the combined stress and B_r, B_psi
the weak-symmetry and facet-continuity constraints.  The right-hand side
carries the history

    b_p = ell(t_k) + M/dt^2 (2p^k - p^{k-1}) + c G p^{k-1}
          - K/4 (2p^k + p^{k-1}) + c B_r^T r^{k-1} - c B_psi^T psi^{k-1}.

Every block except the psi coupling is element-local, so the solve
reduces to batched local factorizations plus one sparse factorization of
the Schur complement in the facet multipliers, reused for all steps.  A
monolithic variant of the same step (one global sparse factorization)
serves as the reference the condensed path is tested against.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import (
    EllipticProjector,
    combine_source,
    precompute_source_vectors,
)


class SolverError(Exception):
    pass


class TimeGrid:
    """Uniform time grid on [0, T] with L steps."""

    def __init__(self, T, L):
        if L < 2:
            raise ValueError("need at least 2 time steps")
        if T <= 0.0:
            raise ValueError("final time must be positive")
        self.T = float(T)
        self.L = int(L)
        self.dt = self.T / self.L

    def t(self, k):
        return k * self.dt

    def times(self):
        return np.arange(self.L + 1) * self.dt


class CgState:
    """Two consecutive iterate levels of (p, r, psi)."""

    def __init__(self, p_prev, p_curr, r_prev, r_curr, psi_prev, psi_curr,
                 k=1):
        self.p_prev = p_prev
        self.p_curr = p_curr
        self.r_prev = r_prev
        self.r_curr = r_curr
        self.psi_prev = psi_prev
        self.psi_curr = psi_curr
        self.k = k

    def advance(self, p_next, r_next, psi_next):
        self.p_prev, self.p_curr = self.p_curr, p_next
        self.r_prev, self.r_curr = self.r_curr, r_next
        self.psi_prev, self.psi_curr = self.psi_curr, psi_next
        self.k += 1


class TransientLoad:
    """
    Precomputed source vectors for separable space-time data.

    ell(t) evaluates the full load functional: the volume term
    -(rho^{-1} F, div j_w^+ q), the boundary term <g'', (j_w^+ q) n> and,
    when with_facets is set (DG), the interior facet term
    <{rho^{-1} F}, [[j_w^+ q]]>.
    """

    def __init__(self, disc, source=None, boundary_accel=None,
                 with_facets=False):
        self.ndof = disc.ndof_p
        self.terms = []
        if source is not None:
            self.terms += precompute_source_vectors(
                disc, source, disc.volume_source_vector) or []
            if with_facets:
                self.terms += precompute_source_vectors(
                    disc, source, disc.facet_average_source_vector) or []
        if boundary_accel is not None:
            self.terms += precompute_source_vectors(
                disc, boundary_accel, disc.boundary_source_vector) or []

    def __call__(self, t):
        if not self.terms:
            return np.zeros(self.ndof)
        return combine_source(self.terms, t)


def project_startup(disc, case, dt):
    """(p^0, p^1) from the elliptic projection of the initial data and a
    second-order Taylor start-up; zero data gives zero vectors."""
    if case is None:
        z = np.zeros(disc.ndof_p)
        return z, z.copy()
    proj = EllipticProjector(disc)
    pj = [proj.project_fields(*case.initial_pair(j)) for j in (0, 1, 2)]
    p0 = pj[0]
    p1 = pj[0] + dt * pj[1] + 0.5 * dt * dt * pj[2]
    return p0, p1


def initialize(disc, case, grid):
    """Start-up state: projected (p^0, p^1), zero rotation and trace
    multipliers."""
    p0, p1 = project_startup(disc, case, grid.dt)
    zr = np.zeros(disc.ndof_r)
    zpsi = np.zeros(disc.ndof_psi)
    return CgState(p0, p1, zr.copy(), zr.copy(), zpsi.copy(), zpsi.copy(),
                   k=1)


class CondensedSystem:
    """
    Element-local factorizations plus the factorized Schur complement in
    the facet multipliers, for one fixed (mesh, order, dt).
    """

    def __init__(self, disc, grid):
        self.disc = disc
        self.grid = grid
        dt = grid.dt
        self.c = 1.0 / (2.0 * dt)
        self.M = disc.mass_matrix()
        self.G = disc.damping_matrix()
        self.K = disc.divdiv_matrix()
        self.Br = disc.skew_matrix()
        self.Bpsi = disc.psi_matrix()
        self.Mdt2 = (self.M / dt ** 2).tocsr()

        self.groups = []
        npsi = disc.ndof_psi
        CT = (-self.c * self.Bpsi.T).tocsr()
        facs_of = [[] for _ in range(disc.mesh.num_elements)]
        for f, (e0, e1) in enumerate(disc.facets.interior_elems):
            facs_of[e0].append(f)
            facs_of[e1].append(f)
        w = disc.psi_per_facet

        srows, scols, svals = [], [], []
        for viscous in (False, True):
            idx = disc.group(viscous)
            if len(idx) == 0:
                continue
            ns = disc._slot_count(viscous)
            np_loc = ns * disc.nb
            m = np_loc + disc.nbm
            g = len(idx)
            E = (disc.local_mass(viscous) / dt ** 2
                 + self.c * disc.local_damping(viscous)
                 + 0.25 * disc.local_divdiv(viscous))
            Brl = disc.local_skew(viscous)
            A = np.zeros((g, m, m))
            A[:, :np_loc, :np_loc] = E
            A[:, np_loc:, :np_loc] = self.c * Brl
            A[:, :np_loc, np_loc:] = self.c * Brl.transpose(0, 2, 1)
            try:
                Ainv = np.linalg.inv(A)
            except np.linalg.LinAlgError:
                bad = self._first_singular(A, idx)
                raise SolverError("singular local block on element %d" % bad)

            Pidx = disc.p_offset[idx][:, None] + np.arange(np_loc)[None, :]
            Ridx = (idx * disc.nbm)[:, None] + np.arange(disc.nbm)[None, :]
            PsiIdx = np.full((g, 3 * w), npsi, dtype=int)
            D = np.zeros((g, m, 3 * w))
            for pos, e in enumerate(idx):
                for slot, f in enumerate(facs_of[e]):
                    cols = f * w + np.arange(w)
                    PsiIdx[pos, slot * w:(slot + 1) * w] = cols
                    block = CT[Pidx[pos, 0]:Pidx[pos, 0] + np_loc, :]
                    D[pos, :np_loc, slot * w:(slot + 1) * w] = \
                        block[:, cols].toarray()
            S_loc = np.einsum("gmi,gmn,gnj->gij", D, Ainv, D)
            r = np.broadcast_to(PsiIdx[:, :, None], S_loc.shape)
            ccol = np.broadcast_to(PsiIdx[:, None, :], S_loc.shape)
            srows.append(r.ravel())
            scols.append(ccol.ravel())
            svals.append(S_loc.ravel())
            self.groups.append(dict(idx=idx, np_loc=np_loc, m=m,
                                    Ainv=Ainv, D=D, Pidx=Pidx, Ridx=Ridx,
                                    PsiIdx=PsiIdx))

        S = sp.coo_matrix(
            (np.concatenate(svals),
             (np.concatenate(srows), np.concatenate(scols))),
            shape=(npsi + 1, npsi + 1)).tocsc()[:npsi, :npsi]
        self.schur = S.tocsr()
        asym = abs(S - S.T).max()
        scale = max(abs(S).max(), 1.0)
        if asym > 1e-10 * scale:
            raise SolverError("Schur complement lost symmetry")
        try:
            self.schur_lu = splu(S.tocsc())
        except RuntimeError as exc:
            raise SolverError("Schur factorization failed: %s" % exc)

    @staticmethod
    def _first_singular(A, idx):
        for pos, e in enumerate(idx):
            if not np.isfinite(np.linalg.cond(A[pos])):
                return int(e)
        return int(idx[0])

    def rhs(self, state, ell_t):
        c = self.c
        b = ell_t \
            + self.Mdt2 @ (2.0 * state.p_curr - state.p_prev) \
            + c * (self.G @ state.p_prev) \
            - 0.25 * (self.K @ (2.0 * state.p_curr + state.p_prev)) \
            + c * (self.Br.T @ state.r_prev) \
            - c * (self.Bpsi.T @ state.psi_prev)
        return b

    def solve(self, b_p):
        """(p, r, psi) solving the condensed step system for load b_p."""
        npsi = self.disc.ndof_psi
        g_rhs = np.zeros(npsi + 1)
        locals_b = []
        for grp in self.groups:
            b = np.zeros((len(grp["idx"]), grp["m"]))
            b[:, :grp["np_loc"]] = b_p[grp["Pidx"]]
            u = np.einsum("gmn,gn->gm", grp["Ainv"], b)
            np.add.at(g_rhs, grp["PsiIdx"],
                      np.einsum("gmw,gm->gw", grp["D"], u))
            locals_b.append(b)
        psi = self.schur_lu.solve(g_rhs[:npsi])
        resid = self.schur @ psi - g_rhs[:npsi]
        if np.abs(resid).max() > 1e-10 * (1.0 + np.abs(g_rhs).max()):
            raise SolverError("Schur solve residual above tolerance")
        p, r = self.recover_local(locals_b, psi)
        return p, r, psi

    def recover_local(self, locals_b, psi):
        """Element-wise back substitution for given multipliers."""
        psi_pad = np.append(psi, 0.0)
        p = np.zeros(self.disc.ndof_p)
        r = np.zeros(self.disc.ndof_r)
        for grp, b in zip(self.groups, locals_b):
            rhs = b - np.einsum("gmw,gw->gm", grp["D"], psi_pad[grp["PsiIdx"]])
            x = np.einsum("gmn,gn->gm", grp["Ainv"], rhs)
            p[grp["Pidx"]] = x[:, :grp["np_loc"]]
            r[grp["Ridx"]] = x[:, grp["np_loc"]:]
        return p, r


def build_condensed(disc, grid):
    return CondensedSystem(disc, grid)


def step(state, system, load):
    """Advance one step; the load is sampled at the current time t_k."""
    t_k = system.grid.t(state.k)
    b_p = system.rhs(state, load(t_k))
    p, r, psi = system.solve(b_p)
    state.advance(p, r, psi)
    return state


class MonolithicSystem:
    """Un-condensed sparse factorization of the same step operator; the
    reference the hybrid path is verified against."""

    def __init__(self, disc, grid):
        self.disc = disc
        self.grid = grid
        dt = grid.dt
        self.c = 1.0 / (2.0 * dt)
        self.M = disc.mass_matrix()
        self.G = disc.damping_matrix()
        self.K = disc.divdiv_matrix()
        self.Br = disc.skew_matrix()
        self.Bpsi = disc.psi_matrix()
        self.Mdt2 = (self.M / dt ** 2).tocsr()
        E = self.Mdt2 + self.c * self.G + 0.25 * self.K
        A = sp.bmat([[E, self.c * self.Br.T, -self.c * self.Bpsi.T],
                     [self.c * self.Br, None, None],
                     [-self.c * self.Bpsi, None, None]], format="csc")
        self.lu = splu(A)

    rhs = CondensedSystem.rhs

    def solve(self, b_p):
        nd, nr = self.disc.ndof_p, self.disc.ndof_r
        rhs = np.concatenate([b_p, np.zeros(nr + self.disc.ndof_psi)])
        sol = self.lu.solve(rhs)
        return sol[:nd], sol[nd:nd + nr], sol[nd + nr:]


def energy(M, K, dt, p_prev, p_curr):
    """Discrete midpoint energy between two consecutive levels: kinetic
    part on the difference quotient plus div-div part on the average."""
    v = (p_curr - p_prev) / dt
    m = 0.5 * (p_curr + p_prev)
    return 0.5 * float(v @ (M @ v)) + 0.5 * float(m @ (K @ m))


def acceleration(disc, pvec, source_moments=None):
    """Velocity-block coefficients of rho^{-1}(div j_w^+ p + U_h F); pass
    the precomputed rho^{-1} F moments for the time of interest."""
    rho_u = np.repeat(disc.rho, 2 * disc.nbm)
    out = (disc.udiv_matrix() @ pvec) / rho_u
    if source_moments is not None:
        out = out + source_moments
    return out


def run_cg(disc, case, grid, collect=None):
    """Drive the hybrid scheme over the whole grid; collect(k, t, p, r)
    is called at every level including the two start-up levels."""
    state = initialize(disc, case, grid)
    system = build_condensed(disc, grid)
    load = TransientLoad(disc,
                         source=None if case is None else case.source,
                         boundary_accel=None if case is None
                         else case.boundary_accel)
    if collect is not None:
        collect(0, 0.0, state.p_prev, state.r_prev)
        collect(1, grid.dt, state.p_curr, state.r_curr)
    for k in range(1, grid.L):
        step(state, system, load)
        if collect is not None:
            collect(state.k, grid.t(state.k), state.p_curr, state.r_curr)
    return state, system
