import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from zenerwave.assembly import Discretization, EllipticProjector
from zenerwave.cg_hybrid_solver import TimeGrid, TransientLoad
from zenerwave.dg_solver import (
    DgSystem,
    average_trace_operator,
    build_dg,
    build_local_blocks,
    choose_penalty,
    energy_and_jumps,
    estimate_cfl,
    estimate_trace_constant,
    initialize_dg,
    run_dg,
    spatial_operator,
    step_dg,
)
from zenerwave.materials import MaterialTable
from zenerwave.mesh import unit_square_mesh
from zenerwave.verification import ErrorAccumulator, make_case_separable


def _viscous_materials(rho=1.0):
    return MaterialTable.from_dict({
        1: dict(lam=1.0, mu=1.0, rho=rho, omega=0.5, lam_d=1.0, mu_d=1.5),
    })


def _elastic_materials(rho=1.0):
    return MaterialTable.from_dict({
        1: dict(lam=1.0, mu=1.0, rho=rho, omega=0.0),
    })


def _mixed_disc(n=2, k=1):
    case = make_case_separable()
    mesh = unit_square_mesh(n, interface_x=0.5)
    return Discretization(mesh, k, case.materials), case


def test_spatial_operator_is_symmetric_positive_semidefinite():
    disc, _ = _mixed_disc(2, 1)
    pen = choose_penalty(disc.mesh, None, 1, disc=disc)
    S = spatial_operator(disc, pen.a)
    asym = abs(S - S.T).max()
    scale = abs(S).max()
    assert asym <= 1e-10 * scale
    lam = scipy.linalg.eigvalsh(S.toarray())
    assert lam[0] >= -1e-10 * lam[-1]


def test_conforming_reduction_to_divdiv_form():
    # on H(div)-conforming weakly symmetric fields the facet terms vanish
    # and the DG operator acts like the plain div-div form
    disc, case = _mixed_disc(2, 2)
    proj = EllipticProjector(disc)

    def conforming(t):
        g, z = case.stress_fields(t)
        dg, dz = case.div_fields(t)
        return proj.project_fields(g, z, dg, dz)

    v, w = conforming(0.3), conforming(0.8)
    pen = choose_penalty(disc.mesh, None, 2, disc=disc)
    S = spatial_operator(disc, pen.a)
    K = disc.divdiv_matrix()
    ref = float(w @ (K @ v))
    scale = max(abs(ref), 1.0)
    assert abs(float(w @ (S @ v)) - ref) <= 1e-11 * scale
    assert abs(float(v @ (S @ w)) - ref) <= 1e-11 * scale


def test_local_solve_matches_global_sparse_solve():
    case = make_case_separable(materials=_viscous_materials())
    mesh = unit_square_mesh(1)
    disc = Discretization(mesh, 1, case.materials)
    grid = TimeGrid(0.5, 10)
    system = DgSystem(disc, grid, 10.0)
    c = system.c
    A = sp.bmat([[system.Mdt2 + c * system.G, c * system.Br.T],
                 [c * system.Br, None]], format="csc")
    rng = np.random.default_rng(7)
    b_p = rng.standard_normal(disc.ndof_p)
    sol = spsolve(A, np.concatenate([b_p, np.zeros(disc.ndof_r)]))
    p, r = system.solve(b_p)
    assert np.abs(p - sol[:disc.ndof_p]).max() < 1e-10
    assert np.abs(r - sol[disc.ndof_p:]).max() < 1e-10


def test_local_blocks_have_no_cross_element_coupling():
    disc, _ = _mixed_disc(2, 1)
    grid = TimeGrid(0.5, 10)
    groups = build_local_blocks(disc, grid)
    seen = np.zeros(disc.ndof_p, dtype=bool)
    for grp in groups:
        for row in grp["Pidx"]:
            assert not seen[row].any()
            seen[row] = True
    assert seen.all()


def test_identity_compliance_gives_diagonal_mass_block():
    mats = MaterialTable.from_dict({
        1: dict(lam=0.0, mu=0.5, rho=1.0, omega=0.0),
    })
    mesh = unit_square_mesh(2)
    disc = Discretization(mesh, 2, mats)
    M = disc.local_mass(False)
    eye = np.eye(M.shape[1])
    assert np.abs(M - eye).max() < 1e-12


def test_trace_constant_matches_dense_eigensolver():
    case = make_case_separable(materials=_viscous_materials())
    mesh = unit_square_mesh(1)
    disc = Discretization(mesh, 1, case.materials)
    P, w = average_trace_operator(disc)
    dense = (P.T @ sp.diags(w) @ P).toarray()
    lam_max = scipy.linalg.eigvalsh(dense)[-1]
    c_tr = estimate_trace_constant(disc)
    assert abs(c_tr - math.sqrt(lam_max)) < 1e-6 * math.sqrt(lam_max)


def test_trace_constant_is_mesh_stable():
    case = make_case_separable()
    vals = []
    for n in (2, 4, 8):
        mesh = unit_square_mesh(n, interface_x=0.5)
        disc = Discretization(mesh, 1, case.materials)
        vals.append(estimate_trace_constant(disc))
    assert max(vals) / min(vals) < 1.2


def test_choose_penalty_modes():
    case = make_case_separable()
    mesh = unit_square_mesh(2, interface_x=0.5)
    fixed = choose_penalty(mesh, case.materials, 1, mode="user-fixed", a=10.0)
    assert fixed.a == 10.0 and fixed.mode == "user-fixed"
    auto = choose_penalty(mesh, case.materials, 1)
    assert auto.a == pytest.approx(1.5 * auto.a0)
    assert auto.a0 == pytest.approx(4.0 * auto.c_tr ** 2 + 2.25)
    clamped = choose_penalty(mesh, case.materials, 1, a=1e-6)
    assert clamped.a == pytest.approx(auto.a)
    kept = choose_penalty(mesh, case.materials, 1, a=10.0 * auto.a)
    assert kept.a == pytest.approx(10.0 * auto.a)
    with pytest.raises(ValueError):
        choose_penalty(mesh, case.materials, 1, mode="user-fixed")


def test_cfl_refinement_and_density_scaling():
    case = make_case_separable(materials=_elastic_materials())
    dts = []
    for n in (2, 4):
        mesh = unit_square_mesh(n)
        disc = Discretization(mesh, 1, case.materials)
        dts.append(estimate_cfl(disc, 10.0))
    assert 1.6 < dts[0] / dts[1] < 2.6

    mesh = unit_square_mesh(2)
    heavy = Discretization(mesh, 1, _elastic_materials(rho=2.0))
    dt_heavy = estimate_cfl(heavy, 10.0)
    assert abs(dt_heavy / dts[0] - math.sqrt(2.0)) < 0.05 * math.sqrt(2.0)


def test_cfl_matches_dense_eigensolver():
    case = make_case_separable(materials=_viscous_materials())
    mesh = unit_square_mesh(1)
    disc = Discretization(mesh, 1, case.materials)
    dt_max = estimate_cfl(disc, 10.0)
    S = spatial_operator(disc, 10.0).toarray()
    M = disc.mass_matrix().toarray()
    lam_max = scipy.linalg.eigh(S, M, eigvals_only=True)[-1]
    assert abs(dt_max - 0.9 * 2.0 / math.sqrt(lam_max)) < 0.01 * dt_max


def test_zero_data_stays_zero():
    disc, _ = _mixed_disc(2, 1)
    grid = TimeGrid(0.5, 16)
    state, system = run_dg(disc, None, grid, penalty=10.0)
    assert np.abs(state.p_curr).max() == 0.0
    assert np.abs(state.r_curr).max() == 0.0
    e, j = energy_and_jumps(state, system)
    assert e == 0.0 and j == 0.0


def test_weak_symmetry_every_step():
    disc, case = _mixed_disc(2, 1)
    dt_max = estimate_cfl(disc, choose_penalty(disc.mesh, None, 1, disc=disc))
    dt = 0.5 * dt_max
    L = max(int(round(0.5 / dt)), 4)
    grid = TimeGrid(L * dt, L)
    system = build_dg(disc, grid)
    state = initialize_dg(disc, case, grid)
    load = TransientLoad(disc, case.source, case.boundary_accel,
                         with_facets=True)
    Br = system.Br
    for _ in range(1, grid.L):
        step_dg(state, system, load)
        scale = max(np.abs(state.p_curr).max(), 1.0)
        assert np.abs(Br @ state.p_curr).max() < 1e-9 * scale


def test_free_evolution_energy_identity_and_boundedness():
    disc, case = _mixed_disc(2, 1)
    pen = choose_penalty(disc.mesh, None, 1, disc=disc)
    dt = 0.5 * estimate_cfl(disc, pen)
    L = max(int(round(1.0 / dt)), 8)
    grid = TimeGrid(L * dt, L)
    system = DgSystem(disc, grid, pen)
    state = initialize_dg(disc, case, grid)
    load = TransientLoad(disc)
    traj = [state.p_prev.copy(), state.p_curr.copy()]
    energies = [energy_and_jumps(state, system)[0]]
    for _ in range(1, grid.L):
        step_dg(state, system, load)
        traj.append(state.p_curr.copy())
        energies.append(energy_and_jumps(state, system)[0])
    scale = max(energies)
    assert scale > 0.0
    G = system.G
    for k in range(1, grid.L):
        d0 = (traj[k + 1] - traj[k - 1]) / (2.0 * grid.dt)
        dissip = grid.dt * float(d0 @ (G @ d0))
        gap = energies[k] - energies[k - 1] + dissip
        assert abs(gap) < 1e-11 * scale
    assert min(energies) > 0.0
    assert max(energies) <= energies[0] * (1.0 + 1e-10)


def test_elastic_free_evolution_conserves_energy():
    case = make_case_separable(materials=_elastic_materials())
    mesh = unit_square_mesh(2)
    disc = Discretization(mesh, 1, case.materials)
    pen = choose_penalty(mesh, case.materials, 1, disc=disc)
    dt = 0.5 * estimate_cfl(disc, pen)
    L = max(int(round(2.0 / dt)), 16)
    grid = TimeGrid(L * dt, L)
    system = DgSystem(disc, grid, pen)
    state = initialize_dg(disc, case, grid)
    load = TransientLoad(disc)
    e0 = energy_and_jumps(state, system)[0]
    for _ in range(1, grid.L):
        step_dg(state, system, load)
        e = energy_and_jumps(state, system)[0]
        assert abs(e - e0) < 1e-9 * e0


def test_conforming_iterate_has_zero_jump_seminorm():
    disc, case = _mixed_disc(2, 1)
    proj = EllipticProjector(disc)
    g, z = case.stress_fields(0.6)
    dg, dz = case.div_fields(0.6)
    p = proj.project_fields(g, z, dg, dz)
    system = DgSystem(disc, TimeGrid(0.5, 10), 10.0)
    assert system.jump_seminorm(p) < 1e-12 * np.abs(p).max()


def test_penalty_doubling_changes_error_mildly():
    case = make_case_separable()
    mesh = unit_square_mesh(4, interface_x=0.5)
    disc = Discretization(mesh, 1, case.materials)
    pen = choose_penalty(mesh, case.materials, 1, disc=disc)

    def final_error(a):
        dt = 0.4 * estimate_cfl(disc, pen)
        L = max(int(math.ceil(0.5 / dt)), 4)
        grid = TimeGrid(0.5, L)
        acc = ErrorAccumulator(disc, case, grid.dt, include_jumps=True)
        holder = {}

        def collect(k, t, p, r):
            holder["last"] = (t, p, r)

        run_dg(disc, case, grid, penalty=a, collect=collect)
        acc.push(*holder["last"])
        return acc.report()["err_S"]

    e1 = final_error(pen.a)
    e2 = final_error(2.0 * pen.a)
    assert abs(e2 - e1) < 0.2 * e1


def test_oversized_step_warns():
    disc, case = _mixed_disc(2, 1)
    dt_max = estimate_cfl(disc, 10.0)
    grid = TimeGrid(4.0 * dt_max, 2)
    with pytest.warns(RuntimeWarning, match="stability"):
        run_dg(disc, case, grid, penalty=10.0)


def test_manufactured_convergence_first_order():
    case = make_case_separable()
    errs = []
    for n in (4, 8):
        mesh = unit_square_mesh(n, interface_x=0.5)
        disc = Discretization(mesh, 1, case.materials)
        pen = choose_penalty(mesh, case.materials, 1, disc=disc)
        dt = 0.5 * estimate_cfl(disc, pen)
        L = max(int(math.ceil(0.5 / dt)), 4)
        grid = TimeGrid(0.5, L)
        acc = ErrorAccumulator(disc, case, grid.dt, include_jumps=True)
        run_dg(disc, case, grid, penalty=pen,
               collect=lambda k, t, p, r: acc.push(t, p, r))
        errs.append(acc.report()["err_S"])
    assert math.log2(errs[0] / errs[1]) > 0.7
