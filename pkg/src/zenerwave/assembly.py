"""
Degree-of-freedom layout and operator assembly for the stress-pair system.

Unknowns per element are the modal coefficients of the stress pair
p = (gamma, zeta): four tensor slots (00, 01, 10, 11) of gamma everywhere
and four slots of zeta on viscous elements only.  The combined stress
sigma = gamma + omega * zeta is what carries the H(div) structure; its
slot weights (1 on gamma, omega on zeta) show up in every divergence and
facet operator below.

Because the scalar basis is detJ-normalized orthonormal, volume mass
matrices reduce to 4x4 material matrices per slot pair, and L2 moments
of a target field are directly its projection coefficients.

Element-major dof ordering throughout; rotation multipliers (skew modal,
one scalar coefficient per mode) and facet multipliers (two components
times k+1 Legendre modes per interior facet) get their own blocks.
"""

import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem_basis import (
    EDGE_HEAD,
    EDGE_TAIL,
    MAX_QUAD_DEGREE,
    SKEW,
    LocalBasis,
    facet_quadrature,
    legendre_values,
    make_quadrature,
    poly_dim,
)
from .mesh import build_facets

REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
SLOT_ROW = np.array([0, 0, 1, 1])
SLOT_COL = np.array([0, 1, 0, 1])
# contraction of each slot with the unit spin tensor
SLOT_SPIN = np.array([0.0, 1.0, -1.0, 0.0]) / math.sqrt(2.0)


def eval_by_tag(field, pts_by_elem, tags):
    """
    Evaluate a space field at stacked per-element points.

    pts_by_elem has shape (n, m, 2), tags shape (n,).  A field carrying an
    eval_tagged(pts, tag) method is evaluated group-by-group so that points
    sitting exactly on a material interface take the branch of the owning
    element; a plain callable is evaluated in one vectorized call.  Returns
    (n, m, ...) values.
    """
    pts = np.asarray(pts_by_elem, dtype=float)
    n, m = pts.shape[:2]
    if not hasattr(field, "eval_tagged"):
        flat = np.asarray(field(pts.reshape(-1, 2)), dtype=float)
        return flat.reshape((n, m) + flat.shape[1:])
    out = None
    for tag in np.unique(tags):
        idx = np.nonzero(tags == tag)[0]
        vals = np.asarray(field.eval_tagged(pts[idx].reshape(-1, 2), int(tag)),
                          dtype=float)
        vals = vals.reshape((len(idx), m) + vals.shape[1:])
        if out is None:
            out = np.zeros((n, m) + vals.shape[2:])
        out[idx] = vals
    return out


class Discretization:
    """Mesh + order + materials with all quadrature and layout tables."""

    def __init__(self, mesh, order, materials):
        if order not in (1, 2, 3):
            raise ValueError("polynomial order must be 1, 2 or 3")
        self.mesh = mesh
        self.k = order
        self.materials = materials
        self.facets = build_facets(mesh)
        self.basis = LocalBasis(order)
        self.nb = poly_dim(order)
        self.nbm = poly_dim(order - 1)

        coords = mesh.element_coords()
        self.coords = coords
        self.J = np.stack([coords[:, 1] - coords[:, 0],
                           coords[:, 2] - coords[:, 0]], axis=-1)
        self.detJ = (self.J[:, 0, 0] * self.J[:, 1, 1]
                     - self.J[:, 0, 1] * self.J[:, 1, 0])
        inv = np.empty_like(self.J)
        inv[:, 0, 0] = self.J[:, 1, 1]
        inv[:, 0, 1] = -self.J[:, 0, 1]
        inv[:, 1, 0] = -self.J[:, 1, 0]
        inv[:, 1, 1] = self.J[:, 0, 0]
        self.invJ = inv / self.detJ[:, None, None]

        tags = mesh.subdomain
        self.tags = tags
        self.omega = np.array([materials[t].omega for t in tags])
        self.rho = np.array([materials[t].rho for t in tags])
        self.visc = self.omega > 0.0
        ne = mesh.num_elements

        # per-element 4x4 slot matrices of the material operators
        self.A4 = np.stack([materials.a4(t) for t in tags])
        self.C4 = np.stack([materials.c4(t) for t in tags])
        self.V4 = np.stack([materials.v4(t) if materials.is_viscous(t)
                            else np.zeros((4, 4)) for t in tags])

        # dof layout: stress pair, rotation, facet multipliers, velocity
        self.n_slots = np.where(self.visc, 8, 4)
        self.p_size = self.n_slots * self.nb
        self.p_offset = np.concatenate([[0], np.cumsum(self.p_size)])[:-1]
        self.ndof_p = int(self.p_size.sum())
        self.ndof_r = ne * self.nbm
        self.nfi = len(self.facets.interior_elems)
        self.psi_per_facet = 2 * (order + 1)
        self.ndof_psi = self.nfi * self.psi_per_facet
        self.ndof_u = ne * 2 * self.nbm

        # slot weights of j_omega^+ (1 on gamma, omega on zeta slots)
        self.wslot = np.ones((ne, 8))
        self.wslot[:, 4:] = self.omega[:, None]

        # volume quadrature tables (mass/moment integrals up to 2k exact)
        vq = make_quadrature(min(2 * order + 2, MAX_QUAD_DEGREE))
        self.wq = vq.weights
        self.Vhat = self.basis.eval(vq.xy)
        self.Ghat = self.basis.grad(vq.xy)
        self.xq = coords[:, 0][:, None, :] + np.einsum(
            "eab,qb->eqa", self.J, vq.xy)

        # finer rule for error norms
        eq = make_quadrature(min(2 * order + 4, MAX_QUAD_DEGREE))
        self.wq_err = eq.weights
        self.Vhat_err = self.basis.eval(eq.xy)
        self.Ghat_err = self.basis.grad(eq.xy)
        self.xq_err = coords[:, 0][:, None, :] + np.einsum(
            "eab,qb->eqa", self.J, eq.xy)

        # facet quadrature and the six edge restrictions of the basis
        s, fw = facet_quadrature(2 * order + 1)
        self.fs, self.fw = s, fw
        self.nqf = len(s)
        self.leg = legendre_values(order, s)
        self.Vedge = np.empty((3, 2, self.nqf, self.nb))
        self.Gedge = np.empty((3, 2, self.nqf, self.nb, 2))
        for loc in range(3):
            for flip in (0, 1):
                t = 1.0 - s if flip else s
                pts = (REF_VERTS[EDGE_TAIL[loc]][None, :] * (1.0 - t[:, None])
                       + REF_VERTS[EDGE_HEAD[loc]][None, :] * t[:, None])
                self.Vedge[loc, flip] = self.basis.eval(pts)
                self.Gedge[loc, flip] = self.basis.grad(pts)

        # facet geometry, interior then boundary
        fac = self.facets
        vi = mesh.vertices[fac.interior_vertices]
        self.hf_int = np.linalg.norm(vi[:, 1] - vi[:, 0], axis=1)
        self.int_pts = (vi[:, 0][:, None, :] * (1.0 - s[:, None])
                        + vi[:, 1][:, None, :] * s[:, None])
        vb = mesh.vertices[fac.boundary_vertices]
        self.hf_bnd = np.linalg.norm(vb[:, 1] - vb[:, 0], axis=1)
        self.bnd_pts = (vb[:, 0][:, None, :] * (1.0 - s[:, None])
                        + vb[:, 1][:, None, :] * s[:, None])

        self._cache = {}

    # ------------------------------------------------------------------
    # element groups and local dense operator stacks
    # ------------------------------------------------------------------
    def group(self, viscous):
        return np.nonzero(self.visc == viscous)[0]

    def _slot_count(self, viscous):
        return 8 if viscous else 4

    def local_mass(self, viscous):
        """Pair mass blocks: A on gamma, omega^2 V on zeta slots."""
        key = ("local_mass", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            slots = np.zeros((len(idx), ns, ns))
            slots[:, :4, :4] = self.A4[idx]
            if viscous:
                slots[:, 4:, 4:] = (self.omega[idx] ** 2)[:, None, None] \
                    * self.V4[idx]
            self._cache[key] = self._kron_identity(slots)
        return self._cache[key]

    def local_damping(self, viscous):
        """Damping blocks: omega V on zeta slots, zero elsewhere."""
        key = ("local_damping", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            slots = np.zeros((len(idx), ns, ns))
            if viscous:
                slots[:, 4:, 4:] = self.omega[idx][:, None, None] * self.V4[idx]
            self._cache[key] = self._kron_identity(slots)
        return self._cache[key]

    def _kron_identity(self, slots):
        ng, ns, _ = slots.shape
        eye = np.eye(self.nb)
        out = np.einsum("est,ij->esitj", slots, eye)
        return out.reshape(ng, ns * self.nb, ns * self.nb)

    def local_pairform(self, viscous):
        """Blocks of the pair form (A gamma, eta) + (V zeta, tau); this is
        the norm weighting, distinct from the mass blocks whose zeta part
        carries the omega^2 factor."""
        key = ("local_pairform", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            slots = np.zeros((len(idx), ns, ns))
            slots[:, :4, :4] = self.A4[idx]
            if viscous:
                slots[:, 4:, 4:] = self.V4[idx]
            self._cache[key] = self._kron_identity(slots)
        return self._cache[key]

    def local_divdiv(self, viscous):
        """Blocks of (rho^{-1} div j_w^+ p, div j_w^+ q) per element."""
        key = ("local_divdiv", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            P = np.einsum("q,qia,qjb->iajb", self.wq, self.Ghat, self.Ghat)
            invJ = self.invJ[idx]
            DD = np.einsum("eac,ebd,iajb->ecidj", invJ, invJ, P)
            cols = SLOT_COL[np.arange(ns) % 4]
            rows = SLOT_ROW[np.arange(ns) % 4]
            sel = DD[:, cols][:, :, :, cols]            # (ng, ns, nb, ns, nb)
            w = self.wslot[idx][:, :ns]
            mask = (rows[:, None] == rows[None, :]).astype(float)
            wmat = (w[:, :, None] * w[:, None, :] * mask
                    / self.rho[idx][:, None, None])
            K = sel * wmat[:, :, None, :, None]
            ng = len(idx)
            self._cache[key] = K.reshape(ng, ns * self.nb, ns * self.nb)
        return self._cache[key]

    def local_skew(self, viscous):
        """Rows (spin mode m) of (s, j_w^+ p) per element."""
        key = ("local_skew", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            out = np.zeros((len(idx), self.nbm, ns * self.nb))
            ms = np.arange(self.nbm)
            for s_slot in range(ns):
                sgn = SLOT_SPIN[s_slot % 4]
                if sgn == 0.0:
                    continue
                out[:, ms, s_slot * self.nb + ms] = \
                    sgn * self.wslot[idx, s_slot][:, None]
            self._cache[key] = out
        return self._cache[key]

    def local_udiv(self, viscous):
        """Rows (component d, mode m) of (v, div j_w^+ p) per element."""
        key = ("local_udiv", viscous)
        if key not in self._cache:
            idx = self.group(viscous)
            ns = self._slot_count(viscous)
            PSI = np.einsum("q,qm,qia->mia",
                            self.wq, self.Vhat[:, :self.nbm], self.Ghat)
            DGI = np.einsum("mia,eac->emic", PSI, self.invJ[idx])
            ng = len(idx)
            out = np.zeros((ng, 2 * self.nbm, ns * self.nb))
            for s_slot in range(ns):
                d = SLOT_ROW[s_slot % 4]
                c = SLOT_COL[s_slot % 4]
                w = self.wslot[idx, s_slot]
                block = w[:, None, None] * DGI[:, :, :, c]
                rs = d * self.nbm + np.arange(self.nbm)
                cs = s_slot * self.nb + np.arange(self.nb)
                out[:, rs[:, None], cs[None, :]] += block
            self._cache[key] = out
        return self._cache[key]

    # ------------------------------------------------------------------
    # global sparse operators
    # ------------------------------------------------------------------
    def _scatter_square(self, key, local_getter):
        if key not in self._cache:
            rows, cols, vals = [], [], []
            for viscous in (False, True):
                idx = self.group(viscous)
                if len(idx) == 0:
                    continue
                blocks = local_getter(viscous)
                S = blocks.shape[1]
                off = self.p_offset[idx]
                r = off[:, None, None] + np.arange(S)[None, :, None]
                c = off[:, None, None] + np.arange(S)[None, None, :]
                rows.append(np.broadcast_to(r, blocks.shape).ravel())
                cols.append(np.broadcast_to(c, blocks.shape).ravel())
                vals.append(blocks.ravel())
            mat = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.ndof_p, self.ndof_p))
            self._cache[key] = mat.tocsr()
        return self._cache[key]

    def mass_matrix(self):
        return self._scatter_square("mass", self.local_mass)

    def damping_matrix(self):
        return self._scatter_square("damping", self.local_damping)

    def pairform_matrix(self):
        return self._scatter_square("pairform", self.local_pairform)

    def divdiv_matrix(self):
        return self._scatter_square("divdiv", self.local_divdiv)

    def _scatter_rect(self, key, local_getter, row_block, nrows):
        if key not in self._cache:
            rows, cols, vals = [], [], []
            for viscous in (False, True):
                idx = self.group(viscous)
                if len(idx) == 0:
                    continue
                blocks = local_getter(viscous)
                R, S = blocks.shape[1], blocks.shape[2]
                r = (idx * row_block)[:, None, None] \
                    + np.arange(R)[None, :, None]
                c = self.p_offset[idx][:, None, None] \
                    + np.arange(S)[None, None, :]
                rows.append(np.broadcast_to(r, blocks.shape).ravel())
                cols.append(np.broadcast_to(c, blocks.shape).ravel())
                vals.append(blocks.ravel())
            mat = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(nrows, self.ndof_p))
            self._cache[key] = mat.tocsr()
        return self._cache[key]

    def skew_matrix(self):
        """B_r: rotation modes x stress dofs."""
        return self._scatter_rect("skew", self.local_skew,
                                  self.nbm, self.ndof_r)

    def udiv_matrix(self):
        """B_u: velocity modes x stress dofs (projector constraint)."""
        return self._scatter_rect("udiv", self.local_udiv,
                                  2 * self.nbm, self.ndof_u)

    # ------------------------------------------------------------------
    # facet trace operators
    # ------------------------------------------------------------------
    def interior_trace(self):
        """
        Sparse map from stress dofs to jump values of (j_w^+ p) n at the
        facet quadrature points; rows ordered (facet, point, component).
        """
        if "trace" not in self._cache:
            fac = self.facets
            nqf = self.nqf
            rows, cols, vals = [], [], []
            for side in (0, 1):
                es = fac.interior_elems[:, side]
                locs = fac.interior_local[:, side]
                flips = fac.interior_flip[:, side].astype(int)
                normals = fac.interior_normals * (1.0 if side == 0 else -1.0)
                Vst = self.Vedge[locs, flips]           # (nfi, nqf, nb)
                scale = 1.0 / np.sqrt(self.detJ[es])
                for s_slot in range(8):
                    if s_slot < 4:
                        f_idx = np.arange(self.nfi)
                    else:
                        f_idx = np.nonzero(self.visc[es])[0]
                    if len(f_idx) == 0:
                        continue
                    e_sel = es[f_idx]
                    w = self.wslot[e_sel, s_slot]
                    d = SLOT_ROW[s_slot % 4]
                    c = SLOT_COL[s_slot % 4]
                    coef = w * normals[f_idx, c] * scale[f_idx]
                    v = coef[:, None, None] * Vst[f_idx]
                    r = (f_idx[:, None, None] * nqf
                         + np.arange(nqf)[None, :, None]) * 2 + d
                    r = np.broadcast_to(r, v.shape)
                    cidx = (self.p_offset[e_sel][:, None, None]
                            + s_slot * self.nb
                            + np.arange(self.nb)[None, None, :])
                    cidx = np.broadcast_to(cidx, v.shape)
                    rows.append(r.ravel())
                    cols.append(cidx.ravel())
                    vals.append(v.ravel())
            T = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.nfi * nqf * 2, self.ndof_p)).tocsr()
            self._cache["trace"] = T
        return self._cache["trace"]

    def trace_row_data(self):
        """Per-row (facet, point, component) weights of the trace map."""
        if "trace_rows" not in self._cache:
            fac = self.facets
            qw = np.repeat(np.tile(self.fw, self.nfi), 2)
            hf = np.repeat(self.hf_int, self.nqf * 2)
            inv_rho = 0.5 * (1.0 / self.rho[fac.interior_elems[:, 0]]
                             + 1.0 / self.rho[fac.interior_elems[:, 1]])
            inv_rho = np.repeat(inv_rho, self.nqf * 2)
            self._cache["trace_rows"] = (qw, hf, inv_rho)
        return self._cache["trace_rows"]

    def avg_div_operator(self):
        """
        Sparse map from stress dofs to {rho^{-1} div j_w^+ p} values at
        the facet quadrature points (same row ordering as the trace map).
        """
        if "avgdiv" not in self._cache:
            fac = self.facets
            nqf = self.nqf
            rows, cols, vals = [], [], []
            for side in (0, 1):
                es = fac.interior_elems[:, side]
                locs = fac.interior_local[:, side]
                flips = fac.interior_flip[:, side].astype(int)
                Gst = self.Gedge[locs, flips]           # (nfi, nqf, nb, 2)
                Gphys = np.einsum("fqia,fac->fqic", Gst, self.invJ[es])
                scale = 0.5 / (self.rho[es] * np.sqrt(self.detJ[es]))
                for s_slot in range(8):
                    if s_slot < 4:
                        f_idx = np.arange(self.nfi)
                    else:
                        f_idx = np.nonzero(self.visc[es])[0]
                    if len(f_idx) == 0:
                        continue
                    e_sel = es[f_idx]
                    w = self.wslot[e_sel, s_slot]
                    d = SLOT_ROW[s_slot % 4]
                    c = SLOT_COL[s_slot % 4]
                    v = (w * scale[f_idx])[:, None, None] \
                        * Gphys[f_idx, :, :, c]
                    r = (f_idx[:, None, None] * nqf
                         + np.arange(nqf)[None, :, None]) * 2 + d
                    r = np.broadcast_to(r, v.shape)
                    cidx = (self.p_offset[e_sel][:, None, None]
                            + s_slot * self.nb
                            + np.arange(self.nb)[None, None, :])
                    cidx = np.broadcast_to(cidx, v.shape)
                    rows.append(r.ravel())
                    cols.append(cidx.ravel())
                    vals.append(v.ravel())
            D = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.nfi * nqf * 2, self.ndof_p)).tocsr()
            self._cache["avgdiv"] = D
        return self._cache["avgdiv"]

    def legendre_moment_operator(self):
        """Sparse map from trace-row values to facet Legendre moments."""
        if "wleg" not in self._cache:
            nqf, kp = self.nqf, self.k + 1
            f = np.arange(self.nfi)
            # row (f, d, m) <- trace row (f, q, d), value sqrt(h) w_q leg[q, m]
            rows, cols, vals = [], [], []
            for d in range(2):
                for m in range(kp):
                    r = f * self.psi_per_facet + d * kp + m
                    for q in range(nqf):
                        c = (f * nqf + q) * 2 + d
                        v = np.sqrt(self.hf_int) * self.fw[q] * self.leg[q, m]
                        rows.append(r)
                        cols.append(c)
                        vals.append(v)
            W = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.ndof_psi, self.nfi * nqf * 2)).tocsr()
            self._cache["wleg"] = W
        return self._cache["wleg"]

    def psi_matrix(self):
        """B_psi: facet multiplier modes x stress dofs."""
        if "psi" not in self._cache:
            self._cache["psi"] = (self.legendre_moment_operator()
                                  @ self.interior_trace()).tocsr()
        return self._cache["psi"]

    def jump_gram(self):
        """Gram matrix of the h^{-1}-weighted jump seminorm."""
        if "jumpgram" not in self._cache:
            T = self.interior_trace()
            qw, _, _ = self.trace_row_data()
            self._cache["jumpgram"] = (T.T @ sp.diags(qw) @ T).tocsr()
        return self._cache["jumpgram"]

    def penalty_matrix(self, penalty):
        """Jump penalty with the averaged inverse density weight."""
        T = self.interior_trace()
        qw, _, inv_rho = self.trace_row_data()
        return (T.T @ sp.diags(penalty * inv_rho * qw) @ T).tocsr()

    def consistency_matrix(self):
        """Facet coupling <[[j_w^+ q]], {rho^{-1} div j_w^+ p}>."""
        if "consistency" not in self._cache:
            T = self.interior_trace()
            D = self.avg_div_operator()
            qw, hf, _ = self.trace_row_data()
            self._cache["consistency"] = (T.T @ sp.diags(qw * hf) @ D).tocsr()
        return self._cache["consistency"]

    def boundary_trace(self):
        """Trace map ((j_w^+ p) n at boundary facet points) and row data."""
        if "btrace" not in self._cache:
            fac = self.facets
            nqf = self.nqf
            nfb = len(fac.boundary_elems)
            rows, cols, vals = [], [], []
            es = fac.boundary_elems
            locs = fac.boundary_local
            flips = fac.boundary_flip.astype(int)
            Vst = self.Vedge[locs, flips]
            scale = 1.0 / np.sqrt(self.detJ[es])
            for s_slot in range(8):
                if s_slot < 4:
                    f_idx = np.arange(nfb)
                else:
                    f_idx = np.nonzero(self.visc[es])[0]
                if len(f_idx) == 0:
                    continue
                e_sel = es[f_idx]
                w = self.wslot[e_sel, s_slot]
                d = SLOT_ROW[s_slot % 4]
                c = SLOT_COL[s_slot % 4]
                coef = w * fac.boundary_normals[f_idx, c] * scale[f_idx]
                v = coef[:, None, None] * Vst[f_idx]
                r = (f_idx[:, None, None] * nqf
                     + np.arange(nqf)[None, :, None]) * 2 + d
                r = np.broadcast_to(r, v.shape)
                cidx = (self.p_offset[e_sel][:, None, None]
                        + s_slot * self.nb
                        + np.arange(self.nb)[None, None, :])
                cidx = np.broadcast_to(cidx, v.shape)
                rows.append(r.ravel())
                cols.append(cidx.ravel())
                vals.append(v.ravel())
            T = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(nfb * nqf * 2, self.ndof_p)).tocsr()
            qw = np.repeat(np.tile(self.fw, nfb), 2)
            hf = np.repeat(self.hf_bnd, nqf * 2)
            self._cache["btrace"] = (T, qw * hf)
        return self._cache["btrace"]

    # ------------------------------------------------------------------
    # moment / source vectors
    # ------------------------------------------------------------------
    def _gphys(self, error=False):
        key = ("gphys", error)
        if key not in self._cache:
            G = self.Ghat_err if error else self.Ghat
            self._cache[key] = np.einsum("qia,eac->eqic", G, self.invJ)
        return self._cache[key]

    def pair_moments(self, gamma, zeta=None):
        """
        L2 moments of a tensor pair against the stress basis; equals the
        coefficient vector of the elementwise L2 projection.
        """
        ne, nq = self.xq.shape[:2]
        gv = eval_by_tag(gamma, self.xq, self.tags).reshape(ne, nq, 4)
        out = np.zeros(self.ndof_p)
        sq = np.sqrt(self.detJ)
        mom_g = np.einsum("q,eqs,qi->esi", self.wq, gv, self.Vhat) \
            * sq[:, None, None]
        zv = None
        if zeta is not None and self.visc.any():
            zv = eval_by_tag(zeta, self.xq, self.tags).reshape(ne, nq, 4)
            mom_z = np.einsum("q,eqs,qi->esi", self.wq, zv, self.Vhat) \
                * sq[:, None, None]
        for e in range(ne):
            off = self.p_offset[e]
            out[off:off + 4 * self.nb] = mom_g[e].ravel()
            if self.visc[e] and zv is not None:
                out[off + 4 * self.nb:off + 8 * self.nb] = mom_z[e].ravel()
        return out

    def combined_values(self, gamma, zeta, pts_by_elem, elems=None):
        """Values of gamma + omega zeta at given per-element points."""
        shape = pts_by_elem.shape
        tags = self.tags if elems is None else self.tags[elems]
        gv = eval_by_tag(gamma, pts_by_elem, tags).reshape(
            shape[0], shape[1], 2, 2)
        zv = eval_by_tag(zeta, pts_by_elem, tags).reshape(
            shape[0], shape[1], 2, 2)
        om = self.omega if elems is None else self.omega[elems]
        return gv + om[:, None, None, None] * zv

    def skew_moments(self, gamma, zeta):
        """(spin mode, j_w^+ target) moments, ordered like the r block."""
        jv = self.combined_values(gamma, zeta, self.xq)
        comp = np.einsum("eqab,ab->eq", jv, SKEW)
        mom = np.einsum("q,eq,qm->em", self.wq, comp, self.Vhat[:, :self.nbm])
        return (mom * np.sqrt(self.detJ)[:, None]).ravel()

    def udiv_moments(self, div_gamma, div_zeta):
        """(velocity mode, div j_w^+ target) moments (u block order)."""
        ne, nq = self.xq.shape[:2]
        dgv = eval_by_tag(div_gamma, self.xq, self.tags).reshape(ne, nq, 2)
        dzv = eval_by_tag(div_zeta, self.xq, self.tags).reshape(ne, nq, 2)
        dv = dgv + self.omega[:, None, None] * dzv
        mom = np.einsum("q,eqd,qm->edm", self.wq, dv, self.Vhat[:, :self.nbm])
        return (mom * np.sqrt(self.detJ)[:, None, None]).ravel()

    def jump_moments(self, gamma, zeta):
        """Facet multiplier moments of [[j_w^+ target]] (psi block order)."""
        fac = self.facets
        vals = np.zeros(self.nfi * self.nqf * 2)
        for side in (0, 1):
            es = fac.interior_elems[:, side]
            normals = fac.interior_normals * (1.0 if side == 0 else -1.0)
            jv = self.combined_values(gamma, zeta, self.int_pts, elems=es)
            tr = np.einsum("fqdc,fc->fqd", jv, normals)
            vals += tr.ravel()
        return self.legendre_moment_operator() @ vals

    def volume_source_vector(self, F):
        """Moments of -(rho^{-1} F, div j_w^+ q) for a space field F."""
        ne, nq = self.xq.shape[:2]
        Fv = eval_by_tag(F, self.xq, self.tags).reshape(ne, nq, 2)
        Gphys = self._gphys()
        out = np.zeros(self.ndof_p)
        coef = -np.sqrt(self.detJ) / self.rho
        for viscous in (False, True):
            idx = self.group(viscous)
            if len(idx) == 0:
                continue
            ns = self._slot_count(viscous)
            loc = np.einsum("q,eqd,eqic->edci",
                            self.wq, Fv[idx], Gphys[idx]) * coef[idx][:, None, None, None]
            for s_slot in range(ns):
                d = SLOT_ROW[s_slot % 4]
                c = SLOT_COL[s_slot % 4]
                w = self.wslot[idx, s_slot]
                block = w[:, None] * loc[:, d, c, :]
                cols = (self.p_offset[idx][:, None] + s_slot * self.nb
                        + np.arange(self.nb)[None, :])
                np.add.at(out, cols, block)
        return out

    def boundary_source_vector(self, g):
        """Moments of <g, (j_w^+ q) n> over the domain boundary."""
        T, wrow = self.boundary_trace()
        btags = self.tags[self.facets.boundary_elems]
        gv = eval_by_tag(g, self.bnd_pts, btags)
        return T.T @ (wrow * gv.ravel())

    def facet_average_source_vector(self, F):
        """Moments of <{rho^{-1} F}, [[j_w^+ q]]> over interior facets.

        The average is taken with one-sided values, so a source with a jump
        at the material interface contributes the mean of its two traces.
        """
        T = self.interior_trace()
        qw, hf, _ = self.trace_row_data()
        fac = self.facets
        avg = np.zeros((self.nfi, self.nqf, 2))
        for side in (0, 1):
            es = fac.interior_elems[:, side]
            Fv = eval_by_tag(F, self.int_pts, self.tags[es])
            avg += 0.5 * (1.0 / self.rho[es])[:, None, None] \
                * Fv.reshape(self.nfi, self.nqf, 2)
        return T.T @ (qw * hf * avg.ravel())

    # ------------------------------------------------------------------
    # evaluation of discrete fields at quadrature points
    # ------------------------------------------------------------------
    def _split_coeffs(self, vec, idx, ns):
        out = np.empty((len(idx), ns, self.nb))
        for pos, e in enumerate(idx):
            off = self.p_offset[e]
            out[pos] = vec[off:off + ns * self.nb].reshape(ns, self.nb)
        return out

    def stress_at_quad(self, vec, error=True):
        """Values (gamma, zeta) of a coefficient vector; zeta zero where
        the element is elastic.  Shapes (ne, nq, 2, 2)."""
        V = self.Vhat_err if error else self.Vhat
        nq = V.shape[0]
        ne = self.mesh.num_elements
        gamma = np.zeros((ne, nq, 2, 2))
        zeta = np.zeros((ne, nq, 2, 2))
        for viscous in (False, True):
            idx = self.group(viscous)
            if len(idx) == 0:
                continue
            ns = self._slot_count(viscous)
            c = self._split_coeffs(vec, idx, ns)
            scale = 1.0 / np.sqrt(self.detJ[idx])
            vals = np.einsum("esi,qi->eqs", c, V) * scale[:, None, None]
            gamma[idx] = vals[:, :, :4].reshape(len(idx), nq, 2, 2)
            if viscous:
                zeta[idx] = vals[:, :, 4:].reshape(len(idx), nq, 2, 2)
        return gamma, zeta

    def divj_at_quad(self, vec, error=True):
        """Values of div(j_w^+ p) (row-wise divergence), (ne, nq, 2)."""
        Gphys = self._gphys(error=error)
        nq = Gphys.shape[1]
        ne = self.mesh.num_elements
        out = np.zeros((ne, nq, 2))
        for viscous in (False, True):
            idx = self.group(viscous)
            if len(idx) == 0:
                continue
            ns = self._slot_count(viscous)
            c = self._split_coeffs(vec, idx, ns)
            scale = 1.0 / np.sqrt(self.detJ[idx])
            for s_slot in range(ns):
                d = SLOT_ROW[s_slot % 4]
                cc = SLOT_COL[s_slot % 4]
                w = self.wslot[idx, s_slot] * scale
                out[idx, :, d] += w[:, None] * np.einsum(
                    "ei,eqi->eq", c[:, s_slot], Gphys[idx][:, :, :, cc])
        return out

    def rotation_at_quad(self, rvec, error=True):
        """Scalar spin coefficient values of the rotation block."""
        V = self.Vhat_err if error else self.Vhat
        nq = V.shape[0]
        c = rvec.reshape(self.mesh.num_elements, self.nbm)
        scale = 1.0 / np.sqrt(self.detJ)
        return np.einsum("em,qm->eq", c, V[:, :self.nbm]) * scale[:, None]

    def ufield_at_quad(self, uvec, error=True):
        """Vector values of a velocity-block coefficient vector, (ne, nq, 2)."""
        V = self.Vhat_err if error else self.Vhat
        c = uvec.reshape(self.mesh.num_elements, 2, self.nbm)
        scale = 1.0 / np.sqrt(self.detJ)
        return np.einsum("edm,qm->eqd", c, V[:, :self.nbm]) \
            * scale[:, None, None]

    def umoment_vector(self, F):
        """Moments of rho^{-1} F against the velocity modes (u block)."""
        Fv = eval_by_tag(F, self.xq, self.tags)
        mom = np.einsum("q,eqd,qm->edm", self.wq, Fv, self.Vhat[:, :self.nbm])
        return (mom * (np.sqrt(self.detJ) / self.rho)[:, None, None]).ravel()

    def cell_integrals(self, values, error=True):
        """Integrate per-element quadrature values over each element."""
        w = self.wq_err if error else self.wq
        extra = (1,) * (values.ndim - 2)
        return np.einsum("q,eq...->e...", w, values) \
            * self.detJ.reshape(-1, *extra)

    def cell_means(self, vec):
        """Per-element mean values of (gamma, zeta) as (ne, 2, 2) arrays."""
        gamma, zeta = self.stress_at_quad(vec, error=False)
        area = 0.5 * self.detJ
        gm = self.cell_integrals(gamma, error=False) / area[:, None, None]
        zm = self.cell_integrals(zeta, error=False) / area[:, None, None]
        return gm, zm


class SeparableField:
    """
    Sum of time-coefficient times space-field terms, f(x, t) =
    sum_j c_j(t) f_j(x).  Solvers precompute one source vector per term.
    """

    def __init__(self, terms):
        self.terms = list(terms)

    def __call__(self, pts, t):
        pts = np.asarray(pts)
        out = None
        for ct, fx in self.terms:
            v = ct(t) * np.asarray(fx(pts), dtype=float)
            out = v if out is None else out + v
        return out


def precompute_source_vectors(disc, field, builder):
    """List of (time coefficient, assembled vector) for a source field."""
    if isinstance(field, SeparableField):
        return [(ct, builder(fx)) for ct, fx in field.terms]
    return None


def combine_source(terms, t):
    out = None
    for ct, vec in terms:
        v = ct(t) * vec
        out = v if out is None else out + v
    return out


class EllipticProjector:
    """
    Constrained elementwise L2 projection onto the hybrid stress space:
    the closest coefficient vector matching the target's rotation moments,
    divergence moments and facet traces.  Because the basis is
    orthonormal the KKT system reduces to a multiplier solve with the
    constraint Gram matrix, factored once and reused for several fields.

    By construction div j_w^+ of the projection is the elementwise L2
    projection of div j_w^+ of the target.
    """

    def __init__(self, disc):
        self.disc = disc
        B = sp.vstack([disc.skew_matrix(),
                       disc.udiv_matrix(),
                       disc.psi_matrix()]).tocsr()
        self.B = B
        self.n_r = disc.ndof_r
        self.n_u = disc.ndof_u
        gram = (B @ B.T).tocsc()
        self.lu = splu(gram)

    def project_fields(self, gamma, zeta, div_gamma, div_zeta):
        disc = self.disc
        b_p = disc.pair_moments(gamma, zeta)
        rhs = np.concatenate([
            disc.skew_moments(gamma, zeta),
            disc.udiv_moments(div_gamma, div_zeta),
            disc.jump_moments(gamma, zeta),
        ])
        lam = self.lu.solve(self.B @ b_p - rhs)
        return b_p - self.B.T @ lam
