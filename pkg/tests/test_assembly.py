import math

import numpy as np
import pytest
from scipy.linalg import null_space

from zenerwave.assembly import (
    SLOT_COL,
    SLOT_ROW,
    Discretization,
    EllipticProjector,
    SeparableField,
    combine_source,
    eval_by_tag,
    precompute_source_vectors,
)
from zenerwave.fem_basis import monomial_exponents
from zenerwave.materials import IsotropicTensor, Material, MaterialTable
from zenerwave.mesh import unit_square_mesh


def _mixed_materials():
    return MaterialTable({
        1: Material(IsotropicTensor(1.0, 1.0), rho=1.0, omega=0.0),
        2: Material(IsotropicTensor(1.0, 1.0), rho=1.0, omega=0.5,
                    D=IsotropicTensor(1.0, 1.5)),
    })


def _viscous_materials():
    return MaterialTable({
        1: Material(IsotropicTensor(1.0, 1.0), rho=1.0, omega=0.5,
                    D=IsotropicTensor(1.0, 1.5)),
    })


def _mixed_disc(n=2, k=1):
    mesh = unit_square_mesh(n, interface_x=0.5)
    return Discretization(mesh, k, _mixed_materials())


def _viscous_disc(n=1, k=1):
    mesh = unit_square_mesh(n)
    return Discretization(mesh, k, _viscous_materials())


def _random_vec(disc, seed=0):
    return np.random.default_rng(seed).standard_normal(disc.ndof_p)


def _poly_tensor_with_div(k, seed):
    """Random tensor polynomial of degree k and its exact divergence."""
    exps = monomial_exponents(k)
    C = np.random.default_rng(seed).standard_normal((2, 2, len(exps)))

    def f(pts):
        pts = np.asarray(pts)
        mono = np.stack([pts[:, 0] ** a * pts[:, 1] ** b for a, b in exps],
                        axis=-1)
        return np.einsum("rci,qi->qrc", C, mono)

    def div(pts):
        pts = np.asarray(pts)
        out = np.zeros((pts.shape[0], 2))
        for i, (a, b) in enumerate(exps):
            if a > 0:
                out += C[:, 0, i][None, :] * a \
                    * (pts[:, 0] ** (a - 1) * pts[:, 1] ** b)[:, None]
            if b > 0:
                out += C[:, 1, i][None, :] * b \
                    * (pts[:, 0] ** a * pts[:, 1] ** (b - 1))[:, None]
        return out

    return f, div


def _zero_tensor(pts):
    return np.zeros((np.asarray(pts).shape[0], 2, 2))


def _zero_vector(pts):
    return np.zeros((np.asarray(pts).shape[0], 2))


def test_dof_counts_frozen():
    disc = _mixed_disc(n=2, k=1)
    assert disc.ndof_p == 144      # 4 elastic * 12 + 4 viscous * 24
    assert disc.ndof_r == 8
    assert disc.ndof_psi == 32     # 8 interior facets * 2 * (k + 1)
    assert disc.ndof_u == 16
    disc2 = _mixed_disc(n=2, k=2)
    assert disc2.ndof_p == 288
    assert disc2.ndof_r == 24
    assert disc2.ndof_psi == 48
    assert disc2.ndof_u == 48


def test_mass_matrix_against_quadrature():
    disc = _mixed_disc(n=2, k=2)
    v = _random_vec(disc, 1)
    M = disc.mass_matrix()
    assert abs(M - M.T).max() < 1e-13
    gamma, zeta = disc.stress_at_quad(v, error=False)
    total = 0.0
    mats = disc.materials
    for e in range(disc.mesh.num_elements):
        tag = disc.tags[e]
        ig = np.einsum("qab,qab->q", mats.apply_A(tag, gamma[e]), gamma[e])
        val = disc.detJ[e] * np.sum(disc.wq * ig)
        if disc.visc[e]:
            iz = np.einsum("qab,qab->q", mats.apply_V(tag, zeta[e]), zeta[e])
            val += disc.omega[e] ** 2 * disc.detJ[e] * np.sum(disc.wq * iz)
        total += val
    assert abs(v @ (M @ v) - total) < 1e-11 * max(1.0, abs(total))


def test_damping_and_pairform_against_quadrature():
    disc = _mixed_disc(n=2, k=1)
    v = _random_vec(disc, 2)
    gamma, zeta = disc.stress_at_quad(v, error=False)
    mats = disc.materials
    damp = 0.0
    form = 0.0
    for e in range(disc.mesh.num_elements):
        tag = disc.tags[e]
        ig = np.einsum("qab,qab->q", mats.apply_A(tag, gamma[e]), gamma[e])
        form += disc.detJ[e] * np.sum(disc.wq * ig)
        if disc.visc[e]:
            iz = np.einsum("qab,qab->q", mats.apply_V(tag, zeta[e]), zeta[e])
            damp += disc.omega[e] * disc.detJ[e] * np.sum(disc.wq * iz)
            form += disc.detJ[e] * np.sum(disc.wq * iz)
    assert abs(v @ (disc.damping_matrix() @ v) - damp) < 1e-12 * max(1.0, damp)
    assert abs(v @ (disc.pairform_matrix() @ v) - form) < 1e-12 * max(1.0, form)


def test_divdiv_matrix_against_quadrature():
    disc = _mixed_disc(n=2, k=2)
    v = _random_vec(disc, 3)
    dv = disc.divj_at_quad(v, error=False)
    total = float(np.sum(
        disc.cell_integrals(np.sum(dv**2, axis=2), error=False) / disc.rho))
    got = v @ (disc.divdiv_matrix() @ v)
    assert abs(got - total) < 1e-11 * max(1.0, total)


def test_skew_matrix_against_quadrature():
    disc = _mixed_disc(n=2, k=2)
    v = _random_vec(disc, 4)
    gamma, zeta = disc.stress_at_quad(v, error=False)
    jv = gamma + disc.omega[:, None, None, None] * zeta
    comp = (jv[..., 0, 1] - jv[..., 1, 0]) / math.sqrt(2.0)
    got = (disc.skew_matrix() @ v).reshape(disc.mesh.num_elements, disc.nbm)
    for e in range(disc.mesh.num_elements):
        phi = disc.Vhat[:, :disc.nbm] / math.sqrt(disc.detJ[e])
        want = disc.detJ[e] * np.einsum("q,qm,q->m", disc.wq, phi, comp[e])
        assert np.abs(got[e] - want).max() < 1e-12


def test_trace_annihilates_continuous_fields():
    disc = _mixed_disc(n=2, k=2)
    f, _ = _poly_tensor_with_div(disc.k, seed=5)
    vec = disc.pair_moments(f, _zero_tensor)
    jump = disc.interior_trace() @ vec
    assert np.abs(jump).max() < 1e-11
    # the boundary trace must reproduce the field's normal components
    T, _ = disc.boundary_trace()
    got = (T @ vec).reshape(-1, disc.nqf, 2)
    fv = f(disc.bnd_pts.reshape(-1, 2)).reshape(-1, disc.nqf, 2, 2)
    want = np.einsum("fqrc,fc->fqr", fv, disc.facets.boundary_normals)
    assert np.abs(got - want).max() < 1e-11


def test_trace_matches_direct_side_evaluation():
    disc = _mixed_disc(n=2, k=2)
    v = _random_vec(disc, 6)
    jump = (disc.interior_trace() @ v).reshape(disc.nfi, disc.nqf, 2)
    fac = disc.facets
    for f in range(disc.nfi):
        total = np.zeros((disc.nqf, 2))
        for side in (0, 1):
            e = fac.interior_elems[f, side]
            n = fac.interior_normals[f] * (1.0 if side == 0 else -1.0)
            ref = (disc.int_pts[f] - disc.coords[e, 0]) @ disc.invJ[e].T
            vals = disc.basis.eval(ref) / math.sqrt(disc.detJ[e])
            ns = disc.n_slots[e]
            off = disc.p_offset[e]
            c = v[off:off + ns * disc.nb].reshape(ns, disc.nb)
            jmat = np.zeros((disc.nqf, 2, 2))
            for s in range(ns):
                w = 1.0 if s < 4 else disc.omega[e]
                jmat[:, SLOT_ROW[s % 4], SLOT_COL[s % 4]] += w * (vals @ c[s])
            total += np.einsum("qrc,c->qr", jmat, n)
        assert np.abs(total - jump[f]).max() < 1e-11

    # jump gram equals the weighted sum of squared jumps
    qw, _, _ = disc.trace_row_data()
    direct = float(np.sum(qw * (disc.interior_trace() @ v) ** 2))
    assert abs(v @ (disc.jump_gram() @ v) - direct) < 1e-11 * direct


@pytest.mark.parametrize("k", [1, 2])
def test_psi_nullspace_dimension(k):
    disc = _viscous_disc(n=1, k=k)
    assert disc.mesh.num_elements == 2
    B = disc.psi_matrix().toarray()
    Z = null_space(B)
    # stress dofs minus one full-rank multiplier block per interior facet
    assert Z.shape[1] == disc.ndof_p - 2 * (k + 1)
    assert np.linalg.matrix_rank(B) == 2 * (k + 1)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_projector_reproduces_polynomial_pairs(k):
    disc = _viscous_disc(n=2, k=k)
    gamma, div_gamma = _poly_tensor_with_div(k, seed=10 + k)
    zeta, div_zeta = _poly_tensor_with_div(k, seed=20 + k)
    proj = EllipticProjector(disc)
    vec = proj.project_fields(gamma, zeta, div_gamma, div_zeta)
    gv, zv = disc.stress_at_quad(vec)
    pts = disc.xq_err.reshape(-1, 2)
    ne, nq = disc.xq_err.shape[:2]
    assert np.abs(gv - gamma(pts).reshape(ne, nq, 2, 2)).max() < 1e-10
    assert np.abs(zv - zeta(pts).reshape(ne, nq, 2, 2)).max() < 1e-10


def test_projector_constraints_and_commuting():
    disc = _mixed_disc(n=2, k=2)
    gamma, div_gamma = _poly_tensor_with_div(disc.k + 2, seed=30)
    zeta, div_zeta = _poly_tensor_with_div(disc.k + 2, seed=31)
    proj = EllipticProjector(disc)
    vec = proj.project_fields(gamma, zeta, div_gamma, div_zeta)

    r_resid = disc.skew_matrix() @ vec - disc.skew_moments(gamma, zeta)
    u_resid = disc.udiv_matrix() @ vec - disc.udiv_moments(div_gamma, div_zeta)
    p_resid = disc.psi_matrix() @ vec - disc.jump_moments(gamma, zeta)
    assert np.abs(r_resid).max() < 1e-10
    assert np.abs(u_resid).max() < 1e-10
    assert np.abs(p_resid).max() < 1e-10

    # commuting property: div j_w^+ of the projection equals the
    # elementwise L2 projection of div j_w^+ of the target
    dv = disc.divj_at_quad(vec, error=False)
    ne, nq = disc.xq.shape[:2]
    pts = disc.xq.reshape(-1, 2)
    dt = div_gamma(pts).reshape(ne, nq, 2) \
        + disc.omega[:, None, None] * div_zeta(pts).reshape(ne, nq, 2)
    coeffs = np.einsum("q,eqd,qm->edm", disc.wq, dt, disc.Vhat[:, :disc.nbm])
    proj_vals = np.einsum("edm,qm->eqd", coeffs, disc.Vhat[:, :disc.nbm])
    scale = max(np.abs(dt).max(), 1.0)
    assert np.abs(dv - proj_vals).max() < 1e-9 * scale


def test_volume_source_pairs_with_divergence():
    disc = _mixed_disc(n=2, k=2)

    def F(pts):
        pts = np.asarray(pts)
        return np.column_stack([np.sin(pts[:, 0] + 2.0 * pts[:, 1]),
                                np.cos(pts[:, 0] * pts[:, 1])])

    vec = disc.volume_source_vector(F)
    v = _random_vec(disc, 7)
    dv = disc.divj_at_quad(v, error=False)
    ne, nq = disc.xq.shape[:2]
    Fv = F(disc.xq.reshape(-1, 2)).reshape(ne, nq, 2)
    want = -float(np.sum(
        disc.cell_integrals(np.einsum("eqd,eqd->eq", Fv, dv), error=False)
        / disc.rho))
    assert abs(v @ vec - want) < 1e-11 * max(1.0, abs(want))


def test_boundary_source_divergence_theorem():
    # for a constant tensor M and g(x) = x the boundary pairing equals
    # the integral of tr(M) over the unit square
    disc = _mixed_disc(n=2, k=1)
    rng = np.random.default_rng(8)
    M = rng.standard_normal((2, 2))
    vec = np.zeros(disc.ndof_p)
    for e in range(disc.mesh.num_elements):
        off = disc.p_offset[e]
        coef = math.sqrt(disc.detJ[e]) / math.sqrt(2.0)
        for s in range(4):
            vec[off + s * disc.nb] = coef * M[SLOT_ROW[s], SLOT_COL[s]]
    ell = disc.boundary_source_vector(lambda pts: np.asarray(pts, dtype=float))
    assert abs(vec @ ell - np.trace(M)) < 1e-12


def test_separable_field_combination():
    f1 = lambda pts: np.ones((np.asarray(pts).shape[0], 2))
    f2 = lambda pts: np.asarray(pts, dtype=float)
    field = SeparableField([(np.sin, f1), (np.cos, f2)])
    pts = np.array([[0.25, 0.5], [0.75, 0.1]])
    direct = field(pts, 0.7)
    want = np.sin(0.7) * f1(pts) + np.cos(0.7) * f2(pts)
    assert np.allclose(direct, want, atol=1e-15)

    disc = _mixed_disc(n=2, k=1)
    terms = precompute_source_vectors(disc, field, disc.volume_source_vector)
    vec = combine_source(terms, 0.7)
    want_vec = disc.volume_source_vector(lambda pts: field(pts, 0.7))
    assert np.abs(vec - want_vec).max() < 1e-13


class _PiecewiseConstant:
    """Vector field with a different constant value on each subdomain."""

    def __init__(self, values_by_tag):
        self.values_by_tag = values_by_tag

    def eval_tagged(self, pts, tag):
        pts = np.asarray(pts)
        return np.broadcast_to(self.values_by_tag[tag],
                               (pts.shape[0], 2)).copy()


def test_tagged_volume_source_uses_owning_element_branch():
    disc = _mixed_disc(n=2, k=1)
    a = np.array([1.0, -2.0])
    b = np.array([0.5, 3.0])
    F = _PiecewiseConstant({1: a, 2: b})
    ell = disc.volume_source_vector(F)

    v = _random_vec(disc, 11)
    dv = disc.divj_at_quad(v, error=False)
    per_elem = disc.cell_integrals(dv, error=False)   # (ne, 2)
    want = 0.0
    for e in range(disc.mesh.num_elements):
        Fe = a if disc.tags[e] == 1 else b
        want -= per_elem[e] @ Fe / disc.rho[e]
    assert abs(v @ ell - want) < 1e-12 * max(1.0, abs(want))


def test_tagged_facet_average_takes_one_sided_values():
    disc = _mixed_disc(n=2, k=1)
    a = np.array([1.0, -2.0])
    b = np.array([0.5, 3.0])
    F = _PiecewiseConstant({1: a, 2: b})
    ell = disc.facet_average_source_vector(F)

    v = _random_vec(disc, 12)
    tv = (disc.interior_trace() @ v).reshape(disc.nfi, disc.nqf, 2)
    qw, hf, _ = disc.trace_row_data()
    qw = qw.reshape(disc.nfi, disc.nqf, 2)
    hf = hf.reshape(disc.nfi, disc.nqf, 2)
    want = 0.0
    for f in range(disc.nfi):
        avg = np.zeros(2)
        for side in (0, 1):
            e = disc.facets.interior_elems[f, side]
            Fe = a if disc.tags[e] == 1 else b
            avg += 0.5 * Fe / disc.rho[e]
        want += np.sum(qw[f] * hf[f] * tv[f] * avg[None, None, :])
    assert abs(v @ ell - want) < 1e-12 * max(1.0, abs(want))


def test_tagged_field_with_equal_branches_matches_plain_callable():
    disc = _mixed_disc(n=2, k=2)
    c = np.array([0.7, -0.3])
    tagged = _PiecewiseConstant({1: c, 2: c})
    plain = lambda pts: np.broadcast_to(c, (np.asarray(pts).shape[0], 2)).copy()
    for builder in (disc.volume_source_vector,
                    disc.facet_average_source_vector,
                    disc.boundary_source_vector):
        lt = builder(tagged)
        lp = builder(plain)
        assert np.abs(lt - lp).max() < 1e-14

    vals = eval_by_tag(tagged, disc.xq, disc.tags)
    assert vals.shape == disc.xq.shape[:2] + (2,)
    assert np.abs(vals - c).max() == 0.0
