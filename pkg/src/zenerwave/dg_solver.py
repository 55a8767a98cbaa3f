"""
Interior-penalty DG discretization of the stress-pair wave system with the
explicit centered time stepper.

The spatial operator on the broken stress space is

    S = Kdiv - J_c - J_c^T + penalty(a),

where Kdiv is the broken rho^{-1}-weighted div-div form, J_c the facet
consistency coupling <[[j_w^+ q]], {rho^{-1} div j_w^+ p}> and the penalty
a <{rho^{-1}} h^{-1} [[j_w^+ p]], [[j_w^+ q]]>.  Each step solves

    [ M/dt^2 + c G   c B_r^T ] [p^{k+1}]   [b_p]
    [ c B_r          0       ] [r^{k+1}] = [0  ],

    b_p = ell(t_k) + M/dt^2 (2p^k - p^{k-1}) + c G p^{k-1}
          - S p^k + c B_r^T r^{k-1},

with c = 1/(2 dt).  Every left-hand block is element-local, so a step is a
sparse matvec with S followed by batched dense back substitutions; only
the penalty size a and the time step restrict stability.  The penalty
floor is estimated from a discrete trace constant, the stable step from
a matrix-free eigenvalue iteration on the mass-preconditioned spatial
operator.
"""

import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cg_hybrid_solver import SolverError, TransientLoad, project_startup


class PenaltyConfig:
    """Jump penalty value plus how it was obtained."""

    def __init__(self, a, mode, a0=None, c_tr=None):
        if a <= 0.0:
            raise ValueError("penalty must be positive")
        self.a = float(a)
        self.mode = mode
        self.a0 = a0
        self.c_tr = c_tr


def average_trace_operator(disc):
    """
    Sparse map from gamma-block coefficients (4 slots per element,
    orthonormal basis) to the facet average (1/2)(q+ n + q- n) at interior
    facet quadrature points, with the side-0 normal used for both sides.
    Returns the operator and the row weights of ||h^{1/2} . ||_{F0}^2.
    """
    fac = disc.facets
    nqf = disc.nqf
    nb = disc.nb
    rows, cols, vals = [], [], []
    for side in (0, 1):
        es = fac.interior_elems[:, side]
        locs = fac.interior_local[:, side]
        flips = fac.interior_flip[:, side].astype(int)
        Vst = disc.Vedge[locs, flips]
        scale = 0.5 / np.sqrt(disc.detJ[es])
        for s_slot in range(4):
            d, c = s_slot // 2, s_slot % 2
            coef = fac.interior_normals[:, c] * scale
            v = coef[:, None, None] * Vst
            r = (np.arange(disc.nfi)[:, None, None] * nqf
                 + np.arange(nqf)[None, :, None]) * 2 + d
            r = np.broadcast_to(r, v.shape)
            cidx = (es[:, None, None] * 4 * nb + s_slot * nb
                    + np.arange(nb)[None, None, :])
            cidx = np.broadcast_to(cidx, v.shape)
            rows.append(r.ravel())
            cols.append(cidx.ravel())
            vals.append(v.ravel())
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(disc.nfi * nqf * 2, 4 * nb * disc.mesh.num_elements)).tocsr()
    qw, hf, _ = disc.trace_row_data()
    return P, qw * hf * hf


def _top_eigenvalue(op, maxit, what, M=None, Minv=None, seed=1234):
    """
    Largest eigenvalue of a symmetric positive semidefinite operator (or
    pencil, with M and its exact inverse), matrix-free.  Plain power
    iteration stalls here: the top of these spectra clusters under
    refinement (one near-identical facet mode per interior facet), so the
    convergence rate degrades towards 1 with n.  Restarted Lanczos keeps
    a Krylov basis and has no such problem; the start vector is fixed for
    reproducible runs.
    """
    n = op.shape[0]
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals = spla.eigsh(op, k=1, M=M, Minv=Minv, which="LA",
                          maxiter=maxit, v0=v0,
                          return_eigenvectors=False)
    except spla.ArpackNoConvergence:
        raise SolverError("%s eigenvalue iteration did not converge"
                          % what)
    lam = float(vals[0])
    if lam <= 0.0:
        raise SolverError("%s estimate degenerated to zero" % what)
    return lam


def estimate_trace_constant(disc, maxit=5000):
    """
    Largest Rayleigh quotient ||h^{1/2} avg(q n)||_{F0} / ||q||_Omega over
    the broken tensor space (the volume Gram matrix is the identity for
    the orthonormal modal basis).
    """
    P, w = average_trace_operator(disc)
    PtWP_diag = sp.diags(w)
    n = P.shape[1]
    op = spla.LinearOperator(
        (n, n), matvec=lambda x: P.T @ (PtWP_diag @ (P @ x)), dtype=float)
    return float(np.sqrt(_top_eigenvalue(op, maxit, "trace-constant")))


def choose_penalty(mesh, materials, k, mode="auto", a=None, disc=None):
    """
    Penalty for the jump term.  In auto mode the floor is

        a0 = 4 C_tr^2 / max(1/rho)^2 + 9/4

    with C_tr estimated on the actual mesh, scaled by a 1.5 safety factor;
    a user value below that floor is raised to it.  The floor is a
    heuristic, so mode="user-fixed" passes any positive value through
    unchanged.
    """
    if mode in ("user-fixed", "fixed"):
        if a is None:
            raise ValueError("user-fixed mode requires a penalty value")
        return PenaltyConfig(a, "user-fixed")
    if mode != "auto":
        raise ValueError("penalty mode must be 'auto' or 'user-fixed'")
    if disc is None:
        from .assembly import Discretization
        disc = Discretization(mesh, k, materials)
    c_tr = estimate_trace_constant(disc)
    inv_rho_max = float((1.0 / disc.rho).max())
    a0 = 4.0 * c_tr ** 2 / inv_rho_max ** 2 + 9.0 / 4.0
    auto = 1.5 * a0
    value = auto if a is None else max(float(a), auto)
    return PenaltyConfig(value, "auto", a0=a0, c_tr=c_tr)


def spatial_operator(disc, a):
    """Assembled DG operator Kdiv - J_c - J_c^T + penalty(a)."""
    Jc = disc.consistency_matrix()
    S = disc.divdiv_matrix() - Jc - Jc.T + disc.penalty_matrix(a)
    return S.tocsr()


class DgState:
    """Two consecutive iterate levels of (p, r)."""

    def __init__(self, p_prev, p_curr, r_prev, r_curr, k=1):
        self.p_prev = p_prev
        self.p_curr = p_curr
        self.r_prev = r_prev
        self.r_curr = r_curr
        self.k = k

    def advance(self, p_next, r_next):
        self.p_prev, self.p_curr = self.p_curr, p_next
        self.r_prev, self.r_curr = self.r_curr, r_next
        self.k += 1


def initialize_dg(disc, case, grid):
    """Start-up (p^0, p^1) by the same projection as the conforming
    scheme, zero rotation multipliers."""
    p0, p1 = project_startup(disc, case, grid.dt)
    zr = np.zeros(disc.ndof_r)
    return DgState(p0, p1, zr.copy(), zr.copy(), k=1)


def build_local_blocks(disc, grid):
    """
    Batched inverses of the element-local saddle blocks
    [[M/dt^2 + c G, c B_r^T], [c B_r, 0]], grouped by material kind.
    """
    dt = grid.dt
    c = 1.0 / (2.0 * dt)
    groups = []
    for viscous in (False, True):
        idx = disc.group(viscous)
        if len(idx) == 0:
            continue
        ns = disc._slot_count(viscous)
        np_loc = ns * disc.nb
        m = np_loc + disc.nbm
        E = (disc.local_mass(viscous) / dt ** 2
             + c * disc.local_damping(viscous))
        Brl = disc.local_skew(viscous)
        A = np.zeros((len(idx), m, m))
        A[:, :np_loc, :np_loc] = E
        A[:, np_loc:, :np_loc] = c * Brl
        A[:, :np_loc, np_loc:] = c * Brl.transpose(0, 2, 1)
        try:
            Ainv = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            raise SolverError("singular local saddle block")
        Pidx = disc.p_offset[idx][:, None] + np.arange(np_loc)[None, :]
        Ridx = (idx * disc.nbm)[:, None] + np.arange(disc.nbm)[None, :]
        groups.append(dict(idx=idx, np_loc=np_loc, m=m, Ainv=Ainv,
                           Pidx=Pidx, Ridx=Ridx))
    return groups


class DgSystem:
    """Assembled forms plus local factorizations for one (mesh, order,
    dt, penalty)."""

    def __init__(self, disc, grid, penalty):
        self.disc = disc
        self.grid = grid
        if isinstance(penalty, PenaltyConfig):
            self.penalty = penalty
        else:
            self.penalty = PenaltyConfig(float(penalty), "user-fixed")
        dt = grid.dt
        self.c = 1.0 / (2.0 * dt)
        self.M = disc.mass_matrix()
        self.G = disc.damping_matrix()
        self.Br = disc.skew_matrix()
        self.S = spatial_operator(disc, self.penalty.a)
        self.Mdt2 = (self.M / dt ** 2).tocsr()
        self.blocks = build_local_blocks(disc, grid)
        self.trace = disc.interior_trace()
        self.trace_qw = disc.trace_row_data()[0]

    def rhs(self, state, ell_t):
        c = self.c
        return (ell_t
                + self.Mdt2 @ (2.0 * state.p_curr - state.p_prev)
                + c * (self.G @ state.p_prev)
                - self.S @ state.p_curr
                + c * (self.Br.T @ state.r_prev))

    def solve(self, b_p):
        p = np.zeros(self.disc.ndof_p)
        r = np.zeros(self.disc.ndof_r)
        for grp in self.blocks:
            b = np.zeros((len(grp["idx"]), grp["m"]))
            b[:, :grp["np_loc"]] = b_p[grp["Pidx"]]
            x = np.einsum("gmn,gn->gm", grp["Ainv"], b)
            p[grp["Pidx"]] = x[:, :grp["np_loc"]]
            r[grp["Ridx"]] = x[:, grp["np_loc"]:]
        return p, r

    def jump_seminorm(self, pvec):
        """h^{-1/2}-weighted L2 norm of the facet jumps, accumulated as a
        sum of squared trace values; a conforming iterate comes out at
        trace roundoff instead of being swamped by Gram-matrix roundoff."""
        tv = self.trace @ pvec
        return float(np.sqrt(np.sum(self.trace_qw * tv * tv)))


def build_dg(disc, grid, penalty=None):
    if penalty is None:
        penalty = choose_penalty(disc.mesh, None, disc.k, disc=disc)
    return DgSystem(disc, grid, penalty)


def step_dg(state, system, load):
    """Advance one step; spatial terms and loads sampled at level k."""
    t_k = system.grid.t(state.k)
    b_p = system.rhs(state, load(t_k))
    p, r = system.solve(b_p)
    state.advance(p, r)
    return state


def energy_and_jumps(state, system):
    """
    Staggered discrete energy

        E^{k+1/2} = 1/2 v^T M v + 1/2 p^{k+1}^T S p^k,
        v = (p^{k+1} - p^k)/dt,

    which free evolution changes by exactly -dt (G d0p, d0p) per step,
    together with the h^{-1/2} jump seminorm of the newest iterate.
    """
    dt = system.grid.dt
    v = (state.p_curr - state.p_prev) / dt
    e = 0.5 * float(v @ (system.M @ v)) \
        + 0.5 * float(state.p_curr @ (system.S @ state.p_prev))
    return e, system.jump_seminorm(state.p_curr)


def _mass_inverse_apply(disc):
    """Batched application of the inverse pair mass matrix."""
    groups = []
    for viscous in (False, True):
        idx = disc.group(viscous)
        if len(idx) == 0:
            continue
        Minv = np.linalg.inv(disc.local_mass(viscous))
        np_loc = disc._slot_count(viscous) * disc.nb
        Pidx = disc.p_offset[idx][:, None] + np.arange(np_loc)[None, :]
        groups.append((Minv, Pidx))

    def apply(x):
        y = np.zeros_like(x)
        for Minv, Pidx in groups:
            y[Pidx] = np.einsum("gmn,gn...->gm...", Minv, x[Pidx])
        return y

    return apply


def estimate_cfl(disc, penalty, maxit=5000, seed=0):
    """
    Stable step estimate 0.9 * 2/sqrt(lam_max), with lam_max the largest
    eigenvalue of the symmetric pencil S x = lam M x, found matrix-free
    (the exact batched local mass inverses stand in for M^{-1}).
    """
    a = penalty.a if isinstance(penalty, PenaltyConfig) else float(penalty)
    S = spatial_operator(disc, a)
    M = disc.mass_matrix()
    minv = _mass_inverse_apply(disc)
    n = disc.ndof_p
    minv_op = spla.LinearOperator((n, n), matvec=minv, dtype=float)
    lam = _top_eigenvalue(S, maxit, "stable-step", M=M, Minv=minv_op,
                          seed=seed)
    return 0.9 * 2.0 / np.sqrt(lam)


def run_dg(disc, case, grid, penalty=None, collect=None):
    """
    Drive the explicit scheme over the whole grid; collect(k, t, p, r) is
    called at every level including the two start-up levels.  A step above
    the stability estimate is allowed but warned about loudly.
    """
    system = build_dg(disc, grid, penalty)
    dt_max = estimate_cfl(disc, system.penalty)
    if grid.dt > dt_max:
        warnings.warn(
            "time step %.3e exceeds the stability estimate %.3e; "
            "expect blow-up" % (grid.dt, dt_max), RuntimeWarning,
            stacklevel=2)
    state = initialize_dg(disc, case, grid)
    load = TransientLoad(disc,
                         source=None if case is None else case.source,
                         boundary_accel=None if case is None
                         else case.boundary_accel,
                         with_facets=True)
    if collect is not None:
        collect(0, 0.0, state.p_prev, state.r_prev)
        collect(1, grid.dt, state.p_curr, state.r_curr)
    for _ in range(1, grid.L):
        step_dg(state, system, load)
        if collect is not None:
            collect(state.k, grid.t(state.k), state.p_curr, state.r_curr)
    return state, system
