"""
Triangular meshes, subdomain tags and the facet skeleton.

Meshes are stored as flat numpy arrays: vertex coordinates, vertex triples
per element (counterclockwise), one integer subdomain tag per element and
an optional marker per boundary edge.  The native ASCII format is

    nv ne
    x y              (nv lines)
    v0 v1 v2 tag     (ne lines)
    v0 v1 marker     (optional trailing lines, boundary edges)

Marker 0 means Dirichlet; unmarked boundary edges default to 0.

Local edge convention: edge i of element (v0, v1, v2) is the edge opposite
vertex i, i.e. edge 0 = (v1, v2), edge 1 = (v2, v0), edge 2 = (v0, v1).
"""

import numpy as np


class MeshError(Exception):
    """Raised for malformed mesh files or broken mesh topology."""


# (local edge) -> (local tail vertex, local head vertex), triangle on the left
EDGE_VERTICES = ((1, 2), (2, 0), (0, 1))


class Mesh:
    """
    Conforming triangulation with per-element subdomain tags.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (ne, 3) int array
        Vertex indices, counterclockwise.
    subdomain : (ne,) int array
        Subdomain tag of each element (>= 1).
    boundary_markers : dict
        Maps a sorted boundary vertex pair (i, j) to an integer marker.
    """

    def __init__(self, vertices, elements, subdomain=None, boundary_markers=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be an (nv, 2) array")
        if self.elements.ndim != 2 or self.elements.shape[1] != 3:
            raise MeshError("elements must be an (ne, 3) array")
        if subdomain is None:
            subdomain = np.ones(len(self.elements), dtype=int)
        self.subdomain = np.asarray(subdomain, dtype=int)
        if self.subdomain.shape != (len(self.elements),):
            raise MeshError("one subdomain tag per element required")
        self.boundary_markers = dict(boundary_markers or {})
        self._validate()

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    def element_coords(self, idx=None):
        """Vertex coordinates per element, shape (ne, 3, 2)."""
        if idx is None:
            return self.vertices[self.elements]
        return self.vertices[self.elements[idx]]

    def signed_areas(self):
        xy = self.vertices[self.elements]
        d1 = xy[:, 1] - xy[:, 0]
        d2 = xy[:, 2] - xy[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    def element_diameters(self):
        """Longest edge per element."""
        xy = self.vertices[self.elements]
        e0 = np.linalg.norm(xy[:, 2] - xy[:, 1], axis=1)
        e1 = np.linalg.norm(xy[:, 0] - xy[:, 2], axis=1)
        e2 = np.linalg.norm(xy[:, 1] - xy[:, 0], axis=1)
        return np.maximum(e0, np.maximum(e1, e2))

    @property
    def h(self):
        """Mesh size: maximum element diameter."""
        return float(self.element_diameters().max())

    def subdomain_tags(self):
        return sorted(int(t) for t in np.unique(self.subdomain))

    def __str__(self):
        return "Mesh with {} vertices, {} elements, subdomains {}".format(
            self.num_vertices, self.num_elements, self.subdomain_tags())

    def _validate(self):
        ne = self.num_elements
        nv = self.num_vertices
        if ne == 0:
            raise MeshError("mesh has no elements")
        if self.elements.min() < 0 or self.elements.max() >= nv:
            raise MeshError("element vertex index out of range")
        if np.any(self.subdomain < 1):
            raise MeshError("subdomain tags must be >= 1")
        areas = self.signed_areas()
        scale = max(self.vertices.max() - self.vertices.min(), 1.0)
        if np.any(areas <= 1e-14 * scale ** 2):
            bad = int(np.argmin(areas))
            raise MeshError(
                "inverted or degenerate element {} (signed area {:.3e})".format(
                    bad, float(areas[bad])))
        edges = _edge_dict(self.elements)
        for key, owners in edges.items():
            if len(owners) > 2:
                raise MeshError("edge {} shared by more than two elements".format(key))
        _check_hanging_vertices(self.vertices, edges, scale)


def _edge_dict(elements):
    """Map sorted vertex pair -> list of (element, local edge)."""
    edges = {}
    for e, tri in enumerate(elements):
        for loc, (a, b) in enumerate(EDGE_VERTICES):
            va, vb = int(tri[a]), int(tri[b])
            key = (va, vb) if va < vb else (vb, va)
            edges.setdefault(key, []).append((e, loc))
    return edges


def _check_hanging_vertices(vertices, edges, scale):
    """
    Reject non-conforming meshes where a vertex sits strictly inside
    another element's edge (two elements sharing half an edge).
    """
    tol = 1e-10 * scale
    keys = np.array(list(edges.keys()), dtype=int)
    if len(keys) == 0:
        return
    a = vertices[keys[:, 0]]
    b = vertices[keys[:, 1]]
    ab = b - a
    lengths2 = np.einsum("ij,ij->i", ab, ab)
    for v in range(len(vertices)):
        p = vertices[v]
        # skip the edges that contain v as an endpoint
        mask = (keys[:, 0] != v) & (keys[:, 1] != v)
        if not mask.any():
            continue
        ap = p - a[mask]
        t = np.einsum("ij,ij->i", ap, ab[mask]) / lengths2[mask]
        inside = (t > tol) & (t < 1.0 - tol)
        if not inside.any():
            continue
        proj = a[mask][inside] + t[inside, None] * ab[mask][inside]
        dist = np.linalg.norm(p - proj, axis=1)
        if np.any(dist < tol):
            raise MeshError(
                "vertex {} lies inside another element's edge "
                "(non-conforming mesh)".format(v))


class FacetTopology:
    """
    The facet skeleton of a mesh.

    Interior facets carry both incident elements; the stored normal points
    out of ``elems[:, 0]`` and the neighbour sees its exact negative.
    Facet orientation (for trace parametrization) runs from the smaller to
    the larger global vertex index.

    Attributes
    ----------
    interior_elems : (nfi, 2) int
    interior_local : (nfi, 2) int
        Local edge number within each incident element.
    interior_flip : (nfi, 2) bool
        True where the element's local edge direction opposes the facet
        orientation.
    interior_normals : (nfi, 2) float
    interior_lengths : (nfi,) float
    boundary_* : same data for boundary facets (one side), plus markers.
    """

    def __init__(self, mesh):
        edges = _edge_dict(mesh.elements)
        int_rows = []
        bnd_rows = []
        for key in sorted(edges.keys()):
            owners = edges[key]
            if len(owners) == 2:
                int_rows.append((key, owners))
            else:
                bnd_rows.append((key, owners[0]))

        self.mesh = mesh
        nfi, nfb = len(int_rows), len(bnd_rows)
        self.interior_vertices = np.zeros((nfi, 2), dtype=int)
        self.interior_elems = np.zeros((nfi, 2), dtype=int)
        self.interior_local = np.zeros((nfi, 2), dtype=int)
        self.interior_flip = np.zeros((nfi, 2), dtype=bool)
        self.interior_normals = np.zeros((nfi, 2))
        self.interior_lengths = np.zeros(nfi)
        self.boundary_vertices = np.zeros((nfb, 2), dtype=int)
        self.boundary_elems = np.zeros(nfb, dtype=int)
        self.boundary_local = np.zeros(nfb, dtype=int)
        self.boundary_flip = np.zeros(nfb, dtype=bool)
        self.boundary_normals = np.zeros((nfb, 2))
        self.boundary_lengths = np.zeros(nfb)
        self.boundary_markers = np.zeros(nfb, dtype=int)

        verts = mesh.vertices
        for f, (key, owners) in enumerate(int_rows):
            self.interior_vertices[f] = key
            for side, (e, loc) in enumerate(owners):
                self.interior_elems[f, side] = e
                self.interior_local[f, side] = loc
                a, b = EDGE_VERTICES[loc]
                tail = mesh.elements[e, a]
                self.interior_flip[f, side] = tail != key[0]
            e0, loc0 = owners[0]
            n, length = _edge_normal(verts, mesh.elements[e0], loc0)
            self.interior_normals[f] = n
            self.interior_lengths[f] = length

        for f, (key, owner) in enumerate(bnd_rows):
            e, loc = owner
            self.boundary_vertices[f] = key
            self.boundary_elems[f] = e
            self.boundary_local[f] = loc
            a, b = EDGE_VERTICES[loc]
            self.boundary_flip[f] = mesh.elements[e, a] != key[0]
            n, length = _edge_normal(verts, mesh.elements[e], loc)
            self.boundary_normals[f] = n
            self.boundary_lengths[f] = length
            self.boundary_markers[f] = mesh.boundary_markers.get(tuple(key), 0)

    @property
    def num_interior(self):
        return self.interior_elems.shape[0]

    @property
    def num_boundary(self):
        return self.boundary_elems.shape[0]

    def facet_midpoints(self, boundary=False):
        verts = self.mesh.vertices
        pairs = self.boundary_vertices if boundary else self.interior_vertices
        return 0.5 * (verts[pairs[:, 0]] + verts[pairs[:, 1]])


def _edge_normal(verts, tri, loc):
    """Outward unit normal and length of local edge `loc` of a CCW triangle."""
    a, b = EDGE_VERTICES[loc]
    p, q = verts[tri[a]], verts[tri[b]]
    d = q - p
    length = float(np.hypot(d[0], d[1]))
    # CCW triangle lies to the left of the directed edge, so (dy, -dx) points out
    return np.array([d[1], -d[0]]) / length, length


def build_facets(mesh):
    """
    Build the facet skeleton.

    Returns
    -------
    FacetTopology
        Interior facet count satisfies nfi = (3 ne - nfb) / 2.
    """
    return FacetTopology(mesh)


def load_mesh(path):
    """
    Read a mesh from the native ASCII format (see module docstring).

    Raises
    ------
    MeshError
        On malformed headers, out-of-range indices, inverted elements or
        non-conforming topology.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    lines = [ln.split("#")[0].strip() for ln in tokens]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise MeshError("empty mesh file: {}".format(path))
    head = lines[0].split()
    if len(head) != 2:
        raise MeshError("header must be 'nv ne', got {!r}".format(lines[0]))
    try:
        nv, ne = int(head[0]), int(head[1])
    except ValueError:
        raise MeshError("non-integer header in {}".format(path))
    if len(lines) < 1 + nv + ne:
        raise MeshError("file truncated: expected {} vertex and {} element "
                        "lines".format(nv, ne))
    try:
        vertices = np.array([[float(t) for t in lines[1 + i].split()]
                             for i in range(nv)])
    except ValueError:
        raise MeshError("malformed vertex line")
    if vertices.shape != (nv, 2):
        raise MeshError("each vertex line must hold two coordinates")
    elements = np.zeros((ne, 3), dtype=int)
    subdomain = np.zeros(ne, dtype=int)
    for i in range(ne):
        parts = lines[1 + nv + i].split()
        if len(parts) != 4:
            raise MeshError("element line must be 'v0 v1 v2 tag', got {!r}"
                            .format(lines[1 + nv + i]))
        elements[i] = [int(parts[0]), int(parts[1]), int(parts[2])]
        subdomain[i] = int(parts[3])
    markers = {}
    for ln in lines[1 + nv + ne:]:
        parts = ln.split()
        if len(parts) != 3:
            raise MeshError("boundary marker line must be 'v0 v1 marker'")
        va, vb, mk = int(parts[0]), int(parts[1]), int(parts[2])
        markers[(min(va, vb), max(va, vb))] = mk
    return Mesh(vertices, elements, subdomain, markers)


def save_mesh(mesh, path):
    """Write a mesh in the native ASCII format (round-trips with load_mesh)."""
    with open(path, "w") as fh:
        fh.write("{} {}\n".format(mesh.num_vertices, mesh.num_elements))
        for x, y in mesh.vertices:
            fh.write("{:.17g} {:.17g}\n".format(x, y))
        for tri, tag in zip(mesh.elements, mesh.subdomain):
            fh.write("{} {} {} {}\n".format(tri[0], tri[1], tri[2], tag))
        for (va, vb), mk in sorted(mesh.boundary_markers.items()):
            fh.write("{} {} {}\n".format(va, vb, mk))


def refine_uniform(mesh):
    """
    Red refinement: each triangle splits into four via edge midpoints.

    Children inherit the parent subdomain tag, boundary markers transfer to
    the two half edges, and every child diameter is exactly half the
    parent's (each child edge is half of a parent edge or a midline).
    """
    verts = [tuple(v) for v in mesh.vertices]
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            midpoint[key] = len(verts)
            verts.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
        return midpoint[key]

    elements = []
    subdomain = []
    for tri, tag in zip(mesh.elements, mesh.subdomain):
        v0, v1, v2 = (int(v) for v in tri)
        m01, m12, m20 = mid(v0, v1), mid(v1, v2), mid(v2, v0)
        elements.extend([(v0, m01, m20), (m01, v1, m12),
                         (m20, m12, v2), (m01, m12, m20)])
        subdomain.extend([tag] * 4)

    markers = {}
    for (va, vb), mk in mesh.boundary_markers.items():
        key = (va, vb) if va < vb else (vb, va)
        if key in midpoint:
            m = midpoint[key]
            markers[(min(va, m), max(va, m))] = mk
            markers[(min(m, vb), max(m, vb))] = mk
    return Mesh(np.array(verts), np.array(elements, dtype=int),
                np.array(subdomain, dtype=int), markers)


def unit_square_mesh(n, interface_x=None):
    """
    Structured unit-square mesh, n x n cells split into two triangles each.

    Parameters
    ----------
    n : int
        Cells per side.
    interface_x : float, optional
        Vertical material interface. Elements left of it get subdomain 1,
        the rest subdomain 2. Must lie on a grid line so no element
        straddles the interface.
    """
    if n < 1:
        raise MeshError("need at least one cell per side")
    if interface_x is not None:
        if abs(interface_x * n - round(interface_x * n)) > 1e-9:
            raise MeshError(
                "interface_x={} does not lie on a grid line of n={}".format(
                    interface_x, n))
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    elements = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            elements.append((v00, v10, v11))
            elements.append((v00, v11, v01))
    elements = np.array(elements, dtype=int)

    if interface_x is None:
        subdomain = np.ones(len(elements), dtype=int)
    else:
        cx = vertices[elements].mean(axis=1)[:, 0]
        subdomain = np.where(cx < interface_x, 1, 2).astype(int)

    markers = {}
    for i in range(n):
        for (va, vb) in ((vid(i, 0), vid(i + 1, 0)),
                         (vid(i, n), vid(i + 1, n)),
                         (vid(0, i), vid(0, i + 1)),
                         (vid(n, i), vid(n, i + 1))):
            markers[(min(va, vb), max(va, vb))] = 0
    return Mesh(vertices, elements, subdomain, markers)
