"""
Command-line front end: batch runs, convergence studies and diagnostics.

Subcommands
-----------
run          time-step one configuration, dumping cell-sampled fields
             (legacy ASCII VTK), an energy time series (CSV) and an
             energy plot
convergence  drive a refinement study, print and save the rate table
             (CSV) and a log-log error plot; exits nonzero if the
             observed stress-norm rate falls below order - 0.3
inspect      print dof counts, the inf-sup estimate, the trace-constant
             and penalty estimates and the stable-step estimate

Configuration is a single YAML file; every value has a default, and the
flags --scheme/--order/--levels/--dt/--penalty/--threads/--out override
the file.  Schema (all keys optional):

    mesh:       {n: 8, interface_x: 0.5}          # built-in generator
                # or {path: mesh.txt}             # native mesh format
    materials:  {1: {lam: 1.0, mu: 1.0, rho: 1.0, omega: 0.0},
                 2: {lam: 1.0, mu: 1.0, rho: 1.0, omega: 0.5,
                     lam_d: 1.0, mu_d: 1.5}}
    scheme:     cg                                # cg | dg
    order:      1                                 # 1 | 2 | 3
    time:       {T: 0.5, L: 100}                  # or dt instead of L
    case:       manufactured                      # manufactured | zero
                # optionally {type: manufactured,
                #             displacement: ["expr(x,y)", "expr(x,y)"]}
    penalty:    {mode: auto, a: null}             # dg jump penalty
    levels:     4                                 # convergence ladder
    base_n:     4                                 # coarsest mesh cells
    output:     {dir: out, cadence: 0}            # 0 = about 10 dumps
    threads:    null                              # 1 pins BLAS pools

Exit codes: 0 ok, 2 configuration error, 3 solver failure, 4 convergence
gate failure.  With --threads 1 repeated runs of the same configuration
produce bitwise-identical CSV output.

The numerical modules are imported lazily so that --threads can pin the
BLAS thread pools before numpy is loaded.
"""

import argparse
import math
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_GATE = 4

_CONFIG_KEYS = ("mesh", "materials", "scheme", "order", "time", "case",
                "penalty", "levels", "base_n", "output", "threads")


class ConfigError(Exception):
    pass


def _as_dict(value, name):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError("'%s' must be a mapping" % name)
    return dict(value)


class RunConfig:
    """Validated run configuration with file values and flag overrides."""

    def __init__(self, data=None):
        data = _as_dict(data, "config")
        unknown = set(data) - set(_CONFIG_KEYS)
        if unknown:
            raise ConfigError("unknown config keys: %s"
                              % ", ".join(sorted(unknown)))
        self.mesh = _as_dict(data.get("mesh"), "mesh")
        self.materials = data.get("materials")
        self.scheme = data.get("scheme", "cg")
        self.order = data.get("order", 1)
        self.time = _as_dict(data.get("time"), "time")
        self.case = data.get("case", "manufactured")
        self.penalty = _as_dict(data.get("penalty"), "penalty")
        self.levels = data.get("levels", 4)
        self.base_n = data.get("base_n", 4)
        out = _as_dict(data.get("output"), "output")
        self.out_dir = out.get("dir", "out")
        self.cadence = out.get("cadence", 0)
        self.threads = data.get("threads")
        self.validate()

    @classmethod
    def from_file(cls, path):
        import yaml
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError("cannot read config file: %s" % exc)
        except yaml.YAMLError as exc:
            raise ConfigError("malformed YAML: %s" % exc)
        return cls(data)

    def validate(self):
        if self.scheme not in ("cg", "dg"):
            raise ConfigError("scheme must be 'cg' or 'dg'")
        if self.order not in (1, 2, 3):
            raise ConfigError("order must be 1, 2 or 3")
        if "path" in self.mesh and "n" in self.mesh:
            raise ConfigError("give either a mesh path or a generator size")
        n = self.mesh.get("n", 8)
        if not isinstance(n, int) or n < 1:
            raise ConfigError("mesh n must be a positive integer")
        T = self.time.get("T", 0.5)
        if not (isinstance(T, (int, float)) and T > 0):
            raise ConfigError("final time T must be positive")
        if "L" in self.time and "dt" in self.time:
            raise ConfigError("give either L or dt, not both")
        if "L" in self.time:
            L = self.time["L"]
            if not isinstance(L, int) or L < 2:
                raise ConfigError("L must be an integer >= 2")
        if "dt" in self.time and not self.time["dt"] > 0:
            raise ConfigError("dt must be positive")
        mode = self.penalty.get("mode", "auto")
        if mode not in ("auto", "user-fixed"):
            raise ConfigError("penalty mode must be 'auto' or 'user-fixed'")
        a = self.penalty.get("a")
        if a is not None and not a > 0:
            raise ConfigError("penalty a must be positive")
        if mode == "user-fixed" and a is None:
            raise ConfigError("user-fixed penalty mode needs a value")
        if not isinstance(self.levels, int) or self.levels < 1:
            raise ConfigError("levels must be a positive integer")
        if not isinstance(self.base_n, int) or self.base_n < 1:
            raise ConfigError("base_n must be a positive integer")
        if not isinstance(self.cadence, int) or self.cadence < 0:
            raise ConfigError("cadence must be a nonnegative integer")
        if self.threads is not None and (
                not isinstance(self.threads, int) or self.threads < 1):
            raise ConfigError("threads must be a positive integer")
        case = self.case
        if isinstance(case, dict):
            kind = case.get("type", "manufactured")
        else:
            kind = case
        if kind not in ("manufactured", "zero"):
            raise ConfigError("case must be 'manufactured' or 'zero'")

    def apply_overrides(self, args):
        if args.scheme is not None:
            self.scheme = args.scheme
        if args.order is not None:
            self.order = args.order
        if args.levels is not None:
            self.levels = args.levels
        if args.dt is not None:
            self.time.pop("L", None)
            self.time["dt"] = args.dt
        if args.penalty is not None:
            self.penalty["a"] = args.penalty
        if args.threads is not None:
            self.threads = args.threads
        if args.out is not None:
            self.out_dir = args.out
        self.validate()

    # ------------------------------------------------------------------
    # builders (lazy imports keep --threads effective)
    # ------------------------------------------------------------------
    def build_mesh(self):
        from .mesh import MeshError, load_mesh, unit_square_mesh
        try:
            if "path" in self.mesh:
                return load_mesh(self.mesh["path"])
            return unit_square_mesh(self.mesh.get("n", 8),
                                    interface_x=self.mesh.get(
                                        "interface_x", 0.5))
        except (MeshError, OSError) as exc:
            raise ConfigError("mesh: %s" % exc)

    def build_materials(self, mesh):
        from .materials import MaterialError, MaterialTable
        from .verification import default_materials
        if self.materials is None:
            table = default_materials()
        else:
            try:
                coerced = {int(tag): spec
                           for tag, spec in self.materials.items()}
                table = MaterialTable.from_dict(coerced)
            except (MaterialError, TypeError, ValueError) as exc:
                raise ConfigError("materials: %s" % exc)
        missing = [t for t in mesh.subdomain_tags() if t not in table.tags()]
        if missing:
            raise ConfigError("mesh references undefined subdomains: %s"
                              % missing)
        return table

    def build_case(self, mesh, materials):
        from .verification import make_case_separable
        spec = self.case
        if isinstance(spec, str):
            spec = {"type": spec}
        if spec.get("type") == "zero":
            return None
        w = None
        if "displacement" in spec:
            import sympy as sym
            from .verification import X, Y
            exprs = spec["displacement"]
            if not (isinstance(exprs, (list, tuple)) and len(exprs) == 2):
                raise ConfigError("displacement needs two expressions")
            try:
                w = sym.Matrix([sym.sympify(e, locals={"x": X, "y": Y})
                                for e in exprs])
            except (sym.SympifyError, TypeError) as exc:
                raise ConfigError("displacement: %s" % exc)
        interface = spec.get("interface_x",
                             self.mesh.get("interface_x", 0.5))
        try:
            return make_case_separable(w=w, materials=materials,
                                       interface_x=interface)
        except ValueError as exc:
            raise ConfigError("manufactured case: %s" % exc)

    def resolve_steps(self, disc, penalty=None):
        """(T, L) for a run; default steps follow the scheme's policy."""
        T = float(self.time.get("T", 0.5))
        if "L" in self.time:
            return T, int(self.time["L"])
        if "dt" in self.time:
            dt = float(self.time["dt"])
        elif self.scheme == "cg":
            from .verification import cg_step_policy
            dt = cg_step_policy(self.order)(disc.mesh.h)
        else:
            from .dg_solver import estimate_cfl
            dt = 0.5 * estimate_cfl(disc, penalty)
        return T, max(int(math.ceil(T / dt)), 2)

    def build_penalty(self, disc):
        from .dg_solver import choose_penalty
        return choose_penalty(disc.mesh, disc.materials, self.order,
                              mode=self.penalty.get("mode", "auto"),
                              a=self.penalty.get("a"), disc=disc)


# ----------------------------------------------------------------------
# output writers
# ----------------------------------------------------------------------
def write_vtk(path, mesh, cell_fields):
    """Legacy ASCII VTK unstructured grid with per-cell field arrays."""
    nv = mesh.num_vertices
    ne = mesh.num_elements
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("stress pair fields\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d float\n" % nv)
        for x, y in mesh.vertices:
            fh.write("%.8e %.8e 0.0\n" % (x, y))
        fh.write("CELLS %d %d\n" % (ne, 4 * ne))
        for tri in mesh.elements:
            fh.write("3 %d %d %d\n" % tuple(tri))
        fh.write("CELL_TYPES %d\n" % ne)
        fh.write("5\n" * ne)
        fh.write("CELL_DATA %d\n" % ne)
        fh.write("FIELD fields %d\n" % len(cell_fields))
        for name, values in cell_fields.items():
            ncomp = 1 if values.ndim == 1 else values.shape[1]
            fh.write("%s %d %d float\n" % (name, ncomp, ne))
            flat = values.reshape(ne, -1)
            for row in flat:
                fh.write(" ".join("%.8e" % v for v in row) + "\n")


def write_energy_csv(path, rows, with_jump):
    header = "step,time,energy" + (",jump" if with_jump else "")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            cells = ["%d" % row[0], "%.8e" % row[1], "%.8e" % row[2]]
            if with_jump:
                cells.append("%.8e" % row[3])
            fh.write(",".join(cells) + "\n")


def render_energy_plot(path, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    times = [r[1] for r in rows]
    energies = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(times, energies, "-")
    ax.set_xlabel("t")
    ax.set_ylabel("discrete energy")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_rates_plot(path, report, order):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    hs = [row["h"] for row in report.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("err_S", "stress pair"), ("err_vel", "velocity"),
                       ("err_rot", "rotation")):
        ax.loglog(hs, [row[key] for row in report.rows], "o-", label=label)
    ref = [report.rows[0]["err_S"] * (h / hs[0]) ** order for h in hs]
    ax.loglog(hs, ref, "k--", label="h^%d" % order)
    ax.set_xlabel("h")
    ax.set_ylabel("max-in-time error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def _cell_fields(disc, pvec, rvec, accel_moments):
    import numpy as np
    from .cg_hybrid_solver import acceleration
    gm, zm = disc.cell_means(pvec)
    om = disc.omega[:, None]
    gm = gm.reshape(-1, 4)
    ozm = om * zm.reshape(-1, 4)
    area = 0.5 * disc.detJ
    rot = disc.cell_integrals(disc.rotation_at_quad(rvec, error=False),
                              error=False) / area
    acc = acceleration(disc, pvec, accel_moments)
    av = disc.cell_integrals(disc.ufield_at_quad(acc, error=False),
                             error=False) / area[:, None]
    return {
        "gamma": gm,
        "omega_zeta": ozm,
        "sigma": gm + ozm,
        "rotation": rot,
        "acceleration": np.asarray(av),
    }


def cmd_run(config):
    import numpy as np
    from .assembly import (
        Discretization,
        combine_source,
        precompute_source_vectors,
    )
    from .cg_hybrid_solver import (
        TimeGrid,
        TransientLoad,
        build_condensed,
        energy,
        initialize,
        step,
    )
    from .dg_solver import (
        DgSystem,
        energy_and_jumps,
        estimate_cfl,
        initialize_dg,
        step_dg,
    )

    t_start = time.perf_counter()
    mesh = config.build_mesh()
    materials = config.build_materials(mesh)
    disc = Discretization(mesh, config.order, materials)
    case = config.build_case(mesh, materials)
    is_dg = config.scheme == "dg"

    penalty = config.build_penalty(disc) if is_dg else None
    T, L = config.resolve_steps(disc, penalty)
    grid = TimeGrid(T, L)
    if is_dg:
        dt_max = estimate_cfl(disc, penalty)
        if grid.dt > dt_max:
            print("warning: dt %.3e exceeds the stability estimate %.3e"
                  % (grid.dt, dt_max), file=sys.stderr)

    source = None if case is None else case.source
    baccel = None if case is None else case.boundary_accel
    load = TransientLoad(disc, source, baccel, with_facets=is_dg)
    accel_terms = None
    if source is not None:
        accel_terms = precompute_source_vectors(disc, source,
                                                disc.umoment_vector)

    os.makedirs(config.out_dir, exist_ok=True)
    cadence = config.cadence or max(1, L // 10)

    def moments(t):
        if accel_terms is None:
            return None
        return combine_source(accel_terms, t)

    def dump(k, t, p, r):
        path = os.path.join(config.out_dir, "fields_%06d.vtk" % k)
        write_vtk(path, mesh, _cell_fields(disc, p, r, moments(t)))
        return path

    energy_rows = []
    dumps = 0
    if is_dg:
        system = DgSystem(disc, grid, penalty)
        state = initialize_dg(disc, case, grid)
    else:
        system = build_condensed(disc, grid)
        state = initialize(disc, case, grid)
        M, K = system.M, system.K
    dump(0, 0.0, state.p_prev, state.r_prev)
    dumps += 1

    def record(kk):
        if is_dg:
            e, j = energy_and_jumps(state, system)
            energy_rows.append((kk, (kk - 0.5) * grid.dt, e, j))
        else:
            e = energy(M, K, grid.dt, state.p_prev, state.p_curr)
            energy_rows.append((kk, (kk - 0.5) * grid.dt, e))

    record(1)
    if 1 % cadence == 0:
        dump(1, grid.t(1), state.p_curr, state.r_curr)
        dumps += 1
    for _ in range(1, grid.L):
        if is_dg:
            step_dg(state, system, load)
        else:
            step(state, system, load)
        record(state.k)
        if state.k % cadence == 0 or state.k == grid.L:
            dump(state.k, grid.t(state.k), state.p_curr, state.r_curr)
            dumps += 1

    if case is None:
        energies = [row[2] for row in energy_rows]
        scale = max(max(energies), 0.0)
        bad = [k for k in range(1, len(energies))
               if energies[k] - energies[k - 1] > 1e-9 * scale]
        if bad:
            print("warning: discrete energy increased at steps %s "
                  "despite zero forcing" % bad[:5], file=sys.stderr)

    csv_path = os.path.join(config.out_dir, "energy.csv")
    write_energy_csv(csv_path, energy_rows, with_jump=is_dg)
    render_energy_plot(os.path.join(config.out_dir, "energy.png"),
                       energy_rows)
    wall = time.perf_counter() - t_start
    print("%s run: %d steps, %d field dumps in %s" %
          (config.scheme, grid.L, dumps, config.out_dir))
    print("final energy %.8e  wall time %.2f s" %
          (energy_rows[-1][2], wall))
    return EXIT_OK


def cmd_convergence(config):
    from .verification import convergence_study

    if config.levels < 3:
        raise ConfigError("convergence study needs at least 3 levels")
    mesh = config.build_mesh()
    materials = config.build_materials(mesh)
    case = config.build_case(mesh, materials)
    if case is None:
        raise ConfigError("convergence study needs the manufactured case")
    penalty = None
    if config.scheme == "dg" and _penalty_is_fixed(config):
        penalty = config.penalty["a"]
    T = float(config.time.get("T", 0.5))
    dt_policy = None
    if "dt" in config.time:
        dt_fixed = float(config.time["dt"])
        dt_policy = lambda h: dt_fixed

    def progress(level, report):
        line = report.to_csv_lines()[-1]
        print("level %d done: %s" % (level, line), file=sys.stderr)

    report = convergence_study(config.scheme, case, config.order,
                               config.levels, final_time=T,
                               base_n=config.base_n, dt_policy=dt_policy,
                               penalty=penalty, progress=progress)
    lines = report.to_csv_lines()
    for line in lines:
        print(line)
    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = os.path.join(config.out_dir, "rates.csv")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    render_rates_plot(os.path.join(config.out_dir, "rates.png"),
                      report, config.order)
    final_rate = report.rates()[-1]["rate_S"]
    if final_rate is None:
        print("stress-norm rate undefined (zero errors)", file=sys.stderr)
        return EXIT_GATE
    print("observed stress-norm rate %.4f (order %d)"
          % (final_rate, config.order))
    if final_rate < config.order - 0.3:
        print("rate below gate %.2f" % (config.order - 0.3),
              file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def _penalty_is_fixed(config):
    return config.penalty.get("mode") == "user-fixed" \
        and config.penalty.get("a") is not None


def cmd_inspect(config):
    from .assembly import Discretization
    from .dg_solver import estimate_cfl
    from .verification import inf_sup_estimate

    mesh = config.build_mesh()
    materials = config.build_materials(mesh)
    disc = Discretization(mesh, config.order, materials)
    ne = mesh.num_elements
    gamma_dofs = 4 * disc.nb * ne
    zeta_dofs = disc.ndof_p - gamma_dofs
    print("mesh: %d elements, %d vertices, h = %.4e, subdomains %s"
          % (ne, mesh.num_vertices, mesh.h, mesh.subdomain_tags()))
    print("order k = %d, scheme %s" % (config.order, config.scheme))
    print("stress-pair dofs: %d (gamma %d, zeta %d)"
          % (disc.ndof_p, gamma_dofs, zeta_dofs))
    print("rotation dofs: %d" % disc.ndof_r)
    print("velocity dofs: %d" % disc.ndof_u)
    print("facet multiplier dofs: %d" % disc.ndof_psi)
    if disc.ndof_p <= 4000:
        print("inf-sup estimate: %.6f" % inf_sup_estimate(disc))
    else:
        print("inf-sup estimate: skipped (dense computation; "
              "use a diagnostic-size mesh)")
    from .dg_solver import choose_penalty
    auto = choose_penalty(mesh, materials, config.order, mode="auto",
                          disc=disc)
    print("trace constant estimate: %.6f" % auto.c_tr)
    print("penalty floor a0: %.6f" % auto.a0)
    penalty = config.build_penalty(disc)
    print("penalty a: %.6f (%s)" % (penalty.a, penalty.mode))
    dt_max = estimate_cfl(disc, penalty)
    print("stable-step estimate dt_max: %.6e" % dt_max)
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------
def _add_common_flags(sub):
    sub.add_argument("--config", help="YAML configuration file")
    sub.add_argument("--scheme", choices=("cg", "dg"))
    sub.add_argument("--order", type=int)
    sub.add_argument("--levels", type=int)
    sub.add_argument("--dt", type=float)
    sub.add_argument("--penalty", type=float)
    sub.add_argument("--threads", type=int)
    sub.add_argument("--out", help="output directory")


def _pin_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="zenerwave",
        description="Mixed FEM simulation of waves in composite "
                    "elastic-viscoelastic media")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "convergence", "inspect"):
        _add_common_flags(subs.add_parser(name))
    args = parser.parse_args(argv)

    if args.threads is not None:
        if args.threads < 1:
            print("config error: threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        _pin_threads(args.threads)

    try:
        config = (RunConfig.from_file(args.config) if args.config
                  else RunConfig())
        config.apply_overrides(args)
        if config.threads is not None and args.threads is None:
            _pin_threads(config.threads)
        from .cg_hybrid_solver import SolverError
        try:
            if args.command == "run":
                return cmd_run(config)
            if args.command == "convergence":
                return cmd_convergence(config)
            return cmd_inspect(config)
        except SolverError as exc:
            print("solver error: %s" % exc, file=sys.stderr)
            return EXIT_SOLVER
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
