"""
Material data for composite elastic / viscoelastic bodies.

Each subdomain tag carries a density rho, a relaxation time omega, an
instantaneous stiffness C and (when omega > 0) a relaxed stiffness D.
Both stiffnesses are isotropic operators M -> lam tr(M) I + 2 mu M acting
on full 2x2 matrices.  The solver works with the compliance A = C^{-1}
and, on viscous subdomains, with V = (D - C)^{-1}, which requires D - C
to be positive definite.
"""

import numpy as np

TRACE_SLOTS = np.array([1.0, 0.0, 0.0, 1.0])


class MaterialError(Exception):
    pass


class IsotropicTensor:
    """Fourth-order isotropic operator with Lame-style parameters."""

    def __init__(self, lam, mu):
        self.lam = float(lam)
        self.mu = float(mu)

    def __repr__(self):
        return "IsotropicTensor(lam={:g}, mu={:g})".format(self.lam, self.mu)

    def apply(self, M):
        M = np.asarray(M, dtype=float)
        tr = M[..., 0, 0] + M[..., 1, 1]
        out = 2.0 * self.mu * M
        out[..., 0, 0] += self.lam * tr
        out[..., 1, 1] += self.lam * tr
        return out

    def eigenvalues(self):
        """(trace eigenvalue, deviatoric/skew eigenvalue)."""
        return 2.0 * (self.lam + self.mu), 2.0 * self.mu

    def is_positive(self):
        return self.mu > 0.0 and self.lam + self.mu > 0.0

    def inverse(self):
        """The inverse operator, again isotropic."""
        if not self.is_positive():
            raise MaterialError("operator {} is not invertible".format(self))
        mu_i = 1.0 / (4.0 * self.mu)
        lam_i = -self.lam / (4.0 * self.mu * (self.lam + self.mu))
        return IsotropicTensor(lam_i, mu_i)

    def slot_matrix(self):
        """4x4 matrix on flattened slots (00, 01, 10, 11)."""
        return (2.0 * self.mu * np.eye(4)
                + self.lam * np.outer(TRACE_SLOTS, TRACE_SLOTS))


class Material:
    """Data of one subdomain: rho, omega, C and (if omega > 0) D."""

    def __init__(self, C, rho=1.0, omega=0.0, D=None):
        self.C = C
        self.rho = float(rho)
        self.omega = float(omega)
        self.D = D

    @property
    def viscous(self):
        return self.omega > 0.0

    def relaxation(self):
        """The difference operator D - C (isotropic again)."""
        if self.D is None:
            raise MaterialError("no relaxed stiffness on an elastic subdomain")
        return IsotropicTensor(self.D.lam - self.C.lam, self.D.mu - self.C.mu)

    def problems(self):
        out = []
        if self.rho <= 0.0:
            out.append("density must be positive, got {:g}".format(self.rho))
        if self.omega < 0.0:
            out.append("relaxation time must be >= 0, got {:g}".format(self.omega))
        if not self.C.is_positive():
            out.append("stiffness {} is not positive definite".format(self.C))
        if self.viscous:
            if self.D is None:
                out.append("omega > 0 requires a relaxed stiffness D")
            elif not IsotropicTensor(self.D.lam - self.C.lam,
                                     self.D.mu - self.C.mu).is_positive():
                out.append("D - C must be positive definite "
                           "(D={}, C={})".format(self.D, self.C))
        return out


class MaterialTable:
    """Maps subdomain tags to materials and exposes the solver operators."""

    def __init__(self, materials):
        self.materials = dict(materials)
        msgs = self.validate()
        if msgs:
            raise MaterialError("; ".join(msgs))

    @classmethod
    def from_dict(cls, data):
        """
        Build from plain config data, e.g.
        {1: {"lam": 1.0, "mu": 1.0, "rho": 1.0, "omega": 0.0},
         2: {"lam": 1.0, "mu": 1.0, "lam_d": 1.0, "mu_d": 1.5,
             "omega": 0.5, "rho": 1.0}}
        """
        mats = {}
        for tag, entry in data.items():
            tag = int(tag)
            try:
                C = IsotropicTensor(entry["lam"], entry["mu"])
            except KeyError as exc:
                raise MaterialError(
                    "subdomain {}: missing stiffness key {}".format(tag, exc))
            omega = float(entry.get("omega", 0.0))
            D = None
            if "lam_d" in entry or "mu_d" in entry:
                D = IsotropicTensor(entry.get("lam_d", entry["lam"]),
                                    entry.get("mu_d", entry["mu"]))
            mats[tag] = Material(C, rho=entry.get("rho", 1.0),
                                 omega=omega, D=D)
        return cls(mats)

    def validate(self):
        msgs = []
        for tag, mat in sorted(self.materials.items()):
            for msg in mat.problems():
                msgs.append("subdomain {}: {}".format(tag, msg))
        return msgs

    def __getitem__(self, tag):
        try:
            return self.materials[int(tag)]
        except KeyError:
            raise MaterialError("no material for subdomain tag {}".format(tag))

    def tags(self):
        return sorted(self.materials)

    def is_viscous(self, tag):
        return self[tag].viscous

    def apply_C(self, tag, M):
        return self[tag].C.apply(M)

    def apply_D(self, tag, M):
        mat = self[tag]
        if mat.D is None:
            raise MaterialError("no relaxed stiffness on subdomain {}".format(tag))
        return mat.D.apply(M)

    def apply_A(self, tag, M):
        return self[tag].C.inverse().apply(M)

    def apply_V(self, tag, M):
        return self[tag].relaxation().inverse().apply(M)

    # 4x4 slot matrices consumed by the assembly routines
    def c4(self, tag):
        return self[tag].C.slot_matrix()

    def d4(self, tag):
        mat = self[tag]
        if mat.D is None:
            raise MaterialError("no relaxed stiffness on subdomain {}".format(tag))
        return mat.D.slot_matrix()

    def a4(self, tag):
        return self[tag].C.inverse().slot_matrix()

    def v4(self, tag):
        return self[tag].relaxation().inverse().slot_matrix()
