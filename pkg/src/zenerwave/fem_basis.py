"""
Reference-element machinery: quadrature, modal bases, BDM interpolation.

The scalar basis on the reference triangle T = {x, y >= 0, x + y <= 1} is
modal and L2-orthonormal.  It is built by a Cholesky factorization of the
exact monomial Gram matrix (integral of x^a y^b over T is a! b! / (a+b+2)!),
with monomials in graded order so the first dim P_{k-1} functions span
P_{k-1}.  On a physical triangle the mapped functions divided by
sqrt(|det J|) stay orthonormal, which keeps every mass matrix diagonal.
"""

import math

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import solve_triangular

MAX_QUAD_DEGREE = 10


def poly_dim(k):
    """Dimension of P_k on a triangle."""
    return (k + 1) * (k + 2) // 2


def monomial_exponents(k):
    """Graded list of (a, b) with a + b <= k."""
    return [(d - b, b) for d in range(k + 1) for b in range(d + 1)]


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


class QuadratureRule:
    """
    Volume quadrature on the reference triangle.

    Attributes
    ----------
    points : (nq, 3) array of barycentric coordinates
    weights : (nq,) array summing to the reference area 1/2
    degree : highest total polynomial degree integrated exactly
    """

    def __init__(self, points, weights, degree):
        self.points = points
        self.weights = weights
        self.degree = degree

    @property
    def xy(self):
        """Cartesian reference coordinates (x, y) = (lambda_1, lambda_2)."""
        return self.points[:, 1:]

    def __len__(self):
        return len(self.weights)


def make_quadrature(degree):
    """
    Gauss rule on the reference triangle, exact for polynomials of the
    given total degree.  Built by the collapsed-square (Duffy) map
    x = u (1 - v), y = v, whose Jacobian (1 - v) raises the v-degree by one.
    """
    if not 0 <= degree <= MAX_QUAD_DEGREE:
        raise ValueError(
            "quadrature degree {} unsupported (0..{})".format(degree, MAX_QUAD_DEGREE))
    nu = max(1, (degree + 2) // 2)
    nv = max(1, (degree + 3) // 2)
    gu, wu = np.polynomial.legendre.leggauss(nu)
    gv, wv = np.polynomial.legendre.leggauss(nv)
    # shift from [-1, 1] to [0, 1]
    gu, wu = 0.5 * (gu + 1.0), 0.5 * wu
    gv, wv = 0.5 * (gv + 1.0), 0.5 * wv
    U, V = np.meshgrid(gu, gv, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    x = (U * (1.0 - V)).ravel()
    y = V.ravel()
    w = (WU * WV * (1.0 - V)).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(bary, w, degree)


def facet_quadrature(degree):
    """Gauss points and weights on [0, 1], exact to the given degree."""
    n = max(1, (degree + 2) // 2)
    g, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (g + 1.0), 0.5 * w


class LocalBasis:
    """
    Orthonormal modal basis of P_k on the reference triangle.

    eval/grad take cartesian reference points of shape (m, 2) and return
    (m, nb) and (m, nb, 2) arrays.  The first poly_dim(k-1) functions are
    exactly the LocalBasis(k-1) functions.
    """

    def __init__(self, k):
        if k < 0:
            raise ValueError("polynomial order must be >= 0")
        self.k = k
        self.exponents = monomial_exponents(k)
        self.nb = len(self.exponents)
        gram = np.array([[monomial_integral(a1 + a2, b1 + b2)
                          for (a2, b2) in self.exponents]
                         for (a1, b1) in self.exponents])
        chol = np.linalg.cholesky(gram)
        # rows of coeff expand each basis function in monomials
        self.coeff = solve_triangular(chol, np.eye(self.nb), lower=True)

    def _vandermonde(self, pts, da=0, db=0):
        pts = np.asarray(pts, dtype=float)
        V = np.zeros((pts.shape[0], self.nb))
        for j, (a, b) in enumerate(self.exponents):
            if a < da or b < db:
                continue
            fac = 1.0
            for i in range(da):
                fac *= a - i
            for i in range(db):
                fac *= b - i
            V[:, j] = fac * pts[:, 0] ** (a - da) * pts[:, 1] ** (b - db)
        return V

    def eval(self, pts):
        return self._vandermonde(pts) @ self.coeff.T

    def grad(self, pts):
        gx = self._vandermonde(pts, da=1) @ self.coeff.T
        gy = self._vandermonde(pts, db=1) @ self.coeff.T
        return np.stack([gx, gy], axis=-1)


def legendre_values(k, s):
    """
    Shifted Legendre values, orthonormal on [0, 1]: rows are points,
    columns the k+1 mode values.
    """
    s = np.asarray(s, dtype=float)
    out = np.zeros((s.shape[0], k + 1))
    for m in range(k + 1):
        c = np.zeros(m + 1)
        c[m] = 1.0
        out[:, m] = math.sqrt(2 * m + 1) * npleg.legval(2.0 * s - 1.0, c)
    return out


def _triangle_geometry(K):
    K = np.asarray(K, dtype=float)
    J = np.column_stack([K[1] - K[0], K[2] - K[0]])
    detJ = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if detJ <= 0:
        raise ValueError("triangle must be counterclockwise")
    invJ = np.array([[J[1, 1], -J[0, 1]], [-J[1, 0], J[0, 0]]]) / detJ
    return K, J, detJ, invJ


# local edge loc connects vertices EDGE_TAIL[loc] -> EDGE_HEAD[loc]
EDGE_TAIL = (1, 2, 0)
EDGE_HEAD = (2, 0, 1)


class BdmLocalInterpolator:
    """
    Moment interpolation onto full [P_k]^2 vector fields on one triangle.

    Degrees of freedom are the classical H(div) set: normal moments against
    P_k on each edge, and for k >= 2 interior moments against gradients of
    P_{k-1} and against divergence-free edge-bubble fields (Piola images of
    curl(bubble * P_{k-2})).  This set commutes with the divergence through
    the L2 projection onto P_{k-1}.
    """

    def __init__(self, k, K):
        if k < 1:
            raise ValueError("order must be >= 1")
        self.k = k
        self.K, self.J, self.detJ, self.invJ = _triangle_geometry(K)
        self.basis = LocalBasis(k)
        self.nb = self.basis.nb
        self.ndof = 2 * self.nb
        self._build_functionals()
        matrix = np.array([self._apply_rows(self._basis_field(j))
                           for j in range(self.ndof)]).T
        self.row_scale = np.abs(matrix).max(axis=1)
        matrix /= self.row_scale[:, None]
        self.minv = np.linalg.inv(matrix)

    # -- geometry helpers ------------------------------------------------
    def to_reference(self, pts):
        return (np.asarray(pts, dtype=float) - self.K[0]) @ self.invJ.T

    def from_reference(self, ref):
        return self.K[0] + np.asarray(ref, dtype=float) @ self.J.T

    # -- functional construction -----------------------------------------
    def _build_functionals(self):
        k = self.k
        s, w = facet_quadrature(2 * k + 1)
        self.edge_pts = []
        self.edge_wn = []   # weight * length and outward normal per edge
        leg = legendre_values(k, s)
        self.edge_leg = leg
        for loc in range(3):
            p, q = self.K[EDGE_TAIL[loc]], self.K[EDGE_HEAD[loc]]
            d = q - p
            length = float(np.hypot(d[0], d[1]))
            n = np.array([d[1], -d[0]]) / length
            pts = p[None, :] * (1.0 - s[:, None]) + q[None, :] * s[:, None]
            self.edge_pts.append(pts)
            self.edge_wn.append((w * length, n))

        quad = make_quadrature(2 * k + 1)
        self.vol_ref = quad.xy
        self.vol_pts = self.from_reference(quad.xy)
        self.vol_w = quad.weights * self.detJ

        self.n_interior = 0
        if k >= 2:
            sub = LocalBasis(k - 1)
            grad_ref = sub.grad(self.vol_ref)[:, 1:, :]     # skip the constant
            self.grad_fields = np.einsum("ab,qja->qjb", self.invJ, grad_ref)
            bub = LocalBasis(k - 2)
            x, y = self.vol_ref[:, 0], self.vol_ref[:, 1]
            b = x * y * (1.0 - x - y)
            db = np.column_stack([y * (1.0 - 2.0 * x - y),
                                  x * (1.0 - x - 2.0 * y)])
            qv = bub.eval(self.vol_ref)
            qg = bub.grad(self.vol_ref)
            # reference curl of (bubble * q): (d/dy, -d/dx)
            gx = db[:, 0:1] * qv + b[:, None] * qg[:, :, 0]
            gy = db[:, 1:2] * qv + b[:, None] * qg[:, :, 1]
            curl_ref = np.stack([gy, -gx], axis=-1)
            # Piola push-forward J w / det J keeps them divergence free
            # with vanishing normal trace
            self.bubble_fields = np.einsum(
                "ab,qjb->qja", self.J, curl_ref) / self.detJ
            self.n_interior = self.grad_fields.shape[1] + self.bubble_fields.shape[1]

    def _apply_rows(self, values):
        """Apply every functional to a field given by its point values."""
        edge_vals, vol_vals = values
        rows = []
        for loc in range(3):
            wl, n = self.edge_wn[loc]
            vn = edge_vals[loc] @ n
            rows.extend(self.edge_leg.T @ (wl * vn))
        if self.k >= 2:
            rows.extend(np.einsum("q,qja,qa->j", self.vol_w,
                                  self.grad_fields, vol_vals))
            rows.extend(np.einsum("q,qja,qa->j", self.vol_w,
                                  self.bubble_fields, vol_vals))
        return np.array(rows)

    def _field_values(self, f):
        edge_vals = [np.asarray(f(pts), dtype=float) for pts in self.edge_pts]
        vol_vals = np.asarray(f(self.vol_pts), dtype=float)
        return edge_vals, vol_vals

    def _basis_field(self, j):
        comp, i = divmod(j, self.nb)
        edge_vals = []
        for pts in self.edge_pts:
            vals = np.zeros((pts.shape[0], 2))
            vals[:, comp] = self.basis.eval(self.to_reference(pts))[:, i]
            edge_vals.append(vals)
        vol_vals = np.zeros((self.vol_pts.shape[0], 2))
        vol_vals[:, comp] = self.basis.eval(self.vol_ref)[:, i]
        return edge_vals, vol_vals

    # -- public API -------------------------------------------------------
    def interpolate_vector(self, f):
        """Interpolate a vector field; returns coefficients (2, nb)."""
        moments = self._apply_rows(self._field_values(f)) / self.row_scale
        return (self.minv @ moments).reshape(2, self.nb)

    def eval_vector(self, coeffs, pts):
        vals = self.basis.eval(self.to_reference(pts))
        return np.einsum("ci,qi->qc", np.asarray(coeffs), vals)

    def eval_vector_div(self, coeffs, pts):
        grad = self.basis.grad(self.to_reference(pts))
        phys = np.einsum("ab,qia->qib", self.invJ, grad)
        return np.einsum("ci,qic->q", np.asarray(coeffs), phys)


def bdm_interpolate(k, K, f):
    """
    Row-wise BDM interpolation of a 2x2 tensor field on triangle K.

    Parameters
    ----------
    k : polynomial order (1..3 supported)
    K : (3, 2) vertex coordinates, counterclockwise
    f : callable, points (m, 2) -> tensors (m, 2, 2)

    Returns
    -------
    coeffs : (2, 2, nb) array; entry [r] expands row r of the interpolant
        in the modal reference basis per vector component.
    interp : the BdmLocalInterpolator used (for evaluation).
    """
    interp = BdmLocalInterpolator(k, K)
    coeffs = np.zeros((2, 2, interp.nb))
    for r in range(2):
        coeffs[r] = interp.interpolate_vector(
            lambda pts, r=r: np.asarray(f(pts))[:, r, :])
    return coeffs, interp


def eval_tensor(coeffs, interp, pts):
    """Evaluate a row-wise interpolant; returns (m, 2, 2)."""
    vals = interp.basis.eval(interp.to_reference(pts))
    return np.einsum("rci,qi->qrc", np.asarray(coeffs), vals)


def eval_tensor_div(coeffs, interp, pts):
    """Row-wise divergence of the interpolant; returns (m, 2)."""
    grad = interp.basis.grad(interp.to_reference(pts))
    phys = np.einsum("ab,qia->qib", interp.invJ, grad)
    return np.einsum("rci,qic->qr", np.asarray(coeffs), phys)


class _LocalProjector:
    def __init__(self, order, K, quad_degree=None):
        self.order = order
        self.K, self.J, self.detJ, self.invJ = _triangle_geometry(K)
        self.basis = LocalBasis(order)
        degree = quad_degree if quad_degree is not None else min(
            2 * order + 4, MAX_QUAD_DEGREE)
        quad = make_quadrature(degree)
        self.ref = quad.xy
        self.pts = self.K[0] + quad.xy @ self.J.T
        self.w = quad.weights * self.detJ
        # orthonormal on K after the 1/sqrt(detJ) scaling
        self.vals = self.basis.eval(self.ref) / math.sqrt(self.detJ)


def l2_project_vector(order, K, g, quad_degree=None):
    """
    L2 projection of a vector field onto [P_order]^2 on triangle K.

    Returns coefficients (2, nb) in the K-orthonormal modal basis together
    with an evaluator closure.
    """
    proj = _LocalProjector(order, K, quad_degree)
    gv = np.asarray(g(proj.pts), dtype=float)
    coeffs = np.einsum("q,qd,qi->di", proj.w, gv, proj.vals)

    def evaluate(pts):
        ref = (np.asarray(pts, dtype=float) - proj.K[0]) @ proj.invJ.T
        vals = proj.basis.eval(ref) / math.sqrt(proj.detJ)
        return np.einsum("di,qi->qd", coeffs, vals)

    return coeffs, evaluate


SKEW = np.array([[0.0, 1.0], [-1.0, 0.0]]) / math.sqrt(2.0)


def l2_project_skew(order, K, s, quad_degree=None):
    """
    L2 projection of a skew tensor field onto skew [P_order]^{2x2}.

    The input must be skew-symmetric (checked pointwise, tolerance 1e-10
    relative); coefficients refer to the unit-norm spin tensor SKEW.
    """
    proj = _LocalProjector(order, K, quad_degree)
    sv = np.asarray(s(proj.pts), dtype=float)
    scale = max(np.abs(sv).max(), 1.0)
    sym_resid = np.abs(sv + np.transpose(sv, (0, 2, 1))).max()
    if sym_resid > 1e-10 * scale:
        raise ValueError(
            "input tensor is not skew-symmetric (residual {:.2e})".format(sym_resid))
    # s : SKEW = sqrt(2) * s01 for skew s
    comp = np.einsum("qab,ab->q", sv, SKEW)
    coeffs = np.einsum("q,q,qi->i", proj.w, comp, proj.vals)

    def evaluate(pts):
        ref = (np.asarray(pts, dtype=float) - proj.K[0]) @ proj.invJ.T
        vals = proj.basis.eval(ref) / math.sqrt(proj.detJ)
        return np.einsum("i,qi->q", coeffs, vals)[:, None, None] * SKEW

    return coeffs, evaluate
