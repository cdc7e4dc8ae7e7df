"""Periodic unit-cell meshes: generation, IO, validation, perturbation.

The cell Y = [0,1]^2 is triangulated and decomposed into a piezoelectric
matrix, a compliant elastic frame, embedded conductors (electrodes) and a
fluid channel.  Region and interface tags follow the JSON schema described
in the README.  Meshes are immutable by convention: every operation returns
a new instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChannelDegenerate,
    ElementInversion,
    PeriodicityError,
    RegionOverlap,
    ResolutionTooCoarse,
    SchemaError,
    TagError,
)

# region codes
MATRIX_PIEZO = 0
MATRIX_ELASTIC = 1
FLUID = 2
CONDUCTOR_BASE = 3  # conductor alpha (1-based) -> CONDUCTOR_BASE + alpha - 1

# facet tag codes
FACET_FLUID_SOLID = 0  # conductor-matrix facet of electrode alpha -> alpha

_REGION_NAMES = {MATRIX_PIEZO: "matrix_piezo", MATRIX_ELASTIC: "matrix_elastic", FLUID: "fluid"}


def region_name(code: int) -> str:
    if code in _REGION_NAMES:
        return _REGION_NAMES[code]
    if code >= CONDUCTOR_BASE:
        return "conductor:%d" % (code - CONDUCTOR_BASE + 1)
    raise TagError("unknown region code %r" % code)


def region_code(name: str) -> int:
    for code, nm in _REGION_NAMES.items():
        if nm == name:
            return code
    if name.startswith("conductor:"):
        try:
            alpha = int(name.split(":", 1)[1])
        except ValueError:
            raise TagError("bad conductor tag %r" % name) from None
        if alpha < 1:
            raise TagError("conductor index must be >= 1, got %r" % name)
        return CONDUCTOR_BASE + alpha - 1
    raise TagError("unknown region tag %r" % name)


def is_solid(codes: np.ndarray) -> np.ndarray:
    return codes != FLUID


def is_matrix(codes: np.ndarray) -> np.ndarray:
    return (codes == MATRIX_PIEZO) | (codes == MATRIX_ELASTIC)


def is_conductor(codes: np.ndarray) -> np.ndarray:
    return codes >= CONDUCTOR_BASE


@dataclass
class CellMesh:
    """Tagged periodic simplicial mesh of the unit cell Y.

    facet_elems[:, 0] is the element on the side the facet normal points
    away from, facet_elems[:, 1] the one it points into: for fluid-solid
    facets the normal goes from the fluid into the solid (n^[c]), for
    conductor-matrix facets from the conductor into the matrix.
    """

    dimension: int
    nodes: np.ndarray          # (n_nodes, dim)
    elements: np.ndarray       # (n_el, dim+1) vertex indices
    regions: np.ndarray        # (n_el,) region codes
    facet_verts: np.ndarray    # (n_f, dim) vertex indices
    facet_tags: np.ndarray     # (n_f,) 0 = fluid_solid, alpha >= 1 = conductor alpha
    facet_elems: np.ndarray    # (n_f, 2) adjacent elements [from, into]
    periodic_pairs: np.ndarray  # (n_pairs, 2) [master, slave]
    _node_root: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_conductors(self) -> int:
        cond = self.regions[self.regions >= CONDUCTOR_BASE]
        return 0 if cond.size == 0 else int(cond.max()) - CONDUCTOR_BASE + 1

    def node_root(self) -> np.ndarray:
        """Map every node to its periodic master (resolved transitively)."""
        if self._node_root is None:
            root = np.arange(self.n_nodes)
            for m, s in self.periodic_pairs:
                root[s] = m
            # resolve chains (slave whose master is itself a slave)
            for _ in range(8):
                nxt = root[root]
                if np.array_equal(nxt, root):
                    break
                root = nxt
            else:
                raise PeriodicityError("periodic pairing does not resolve (cycle?)")
            self._node_root = root
        return self._node_root

    def element_volumes(self) -> np.ndarray:
        return element_volumes(self.nodes, self.elements)

    def cell_measure(self) -> float:
        return float(self.element_volumes().sum())

    def region_measures(self) -> dict:
        vols = self.element_volumes()
        out = {}
        for code in np.unique(self.regions):
            out[region_name(int(code))] = float(vols[self.regions == code].sum())
        return out

    def copy(self) -> "CellMesh":
        return CellMesh(
            self.dimension, self.nodes.copy(), self.elements.copy(),
            self.regions.copy(), self.facet_verts.copy(), self.facet_tags.copy(),
            self.facet_elems.copy(), self.periodic_pairs.copy(),
        )


def element_volumes(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Signed volumes (areas in 2D); generation orients them positive."""
    p = nodes[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True)
class CanonicalGeometry:
    """Unit-square cell: horizontal fluid channel around y2 = 0.5 with an
    optional sinusoidal bulge, hugged by compliant elastic cushion layers;
    the surrounding piezoelectric matrix wraps through the y-periodic
    boundary (so it stays connected around the channel) and carries one
    conductor bar on each side of the channel.

    The piezo connectivity matters: with the matrix split by the channel,
    each electrode would merely saturate its own component at a constant
    potential and the electromechanical coupling would vanish.
    """

    channel_halfwidth: float = 0.125
    bulge: float = 0.0              # relative widening of the channel at y1 = 0.5
    cushion: float = 0.09375        # elastic layer thickness above/below the channel
    # (x0, x1, y0, y1) rectangles, strictly inside the solid
    electrode_shapes: tuple = (
        (0.25, 0.75, 0.15625, 0.21875),
        (0.25, 0.75, 0.78125, 0.84375),
    )

    def channel_halfwidth_at(self, y1) -> np.ndarray:
        h = self.channel_halfwidth
        return h * (1.0 + 0.5 * self.bulge * (1.0 - np.cos(2.0 * np.pi * np.asarray(y1))))


def generate_canonical_cell(resolution: int, geometry: CanonicalGeometry = None) -> CellMesh:
    """Structured triangulation of [0,1]^2 carved into regions by element
    centroid.  Deterministic: identical arguments give identical meshes."""
    geo = CanonicalGeometry() if geometry is None else geometry
    n = int(resolution)
    if n < 2:
        raise ResolutionTooCoarse("resolution must be >= 2, got %d" % n)
    _check_geometry(geo)

    # (n+1)^2 nodes, 2 n^2 triangles
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    elements = np.array(tris, dtype=np.int64)

    centroids = nodes[elements].mean(axis=1)
    regions = _carve_regions(centroids, geo)
    for code, nm in ((MATRIX_PIEZO, "matrix_piezo"), (MATRIX_ELASTIC, "matrix_elastic"),
                     (FLUID, "fluid")):
        if not np.any(regions == code):
            raise ResolutionTooCoarse("region %s received zero elements at resolution %d"
                                      % (nm, n))
    for alpha in range(1, len(geo.electrode_shapes) + 1):
        if not np.any(regions == CONDUCTOR_BASE + alpha - 1):
            raise ResolutionTooCoarse("conductor %d received zero elements at resolution %d"
                                      % (alpha, n))

    facet_verts, facet_tags, facet_elems = _extract_interface_facets(elements, regions)

    pairs = _structured_periodic_pairs(n, nid)

    mesh = CellMesh(2, nodes, elements, regions, facet_verts, facet_tags,
                    facet_elems, pairs)
    validate_mesh(mesh)
    return mesh


def _check_geometry(geo: CanonicalGeometry) -> None:
    h = geo.channel_halfwidth
    if h <= 0.0:
        raise ChannelDegenerate("channel_halfwidth must be positive, got %g" % h)
    if geo.cushion < 0.0:
        raise RegionOverlap("cushion thickness must be nonnegative")
    hmax = float(np.max(geo.channel_halfwidth_at(np.linspace(0, 1, 257))))
    if hmax >= 0.5:
        raise RegionOverlap("channel (halfwidth up to %g) reaches the cell boundary" % hmax)
    if hmax + geo.cushion >= 0.5:
        raise RegionOverlap("channel plus cushion reaches the cell boundary")
    shapes = [tuple(map(float, s)) for s in geo.electrode_shapes]
    for k, (x0, x1, y0, y1) in enumerate(shapes):
        if not (0.0 < x0 < x1 < 1.0 and 0.0 < y0 < y1 < 1.0):
            raise RegionOverlap("electrode %d is not strictly inside the cell" % (k + 1))
        # conductors must stay separated from the fluid
        xdense = np.linspace(x0, x1, 129)
        hh = geo.channel_halfwidth_at(xdense)
        if np.any((y0 < 0.5 + hh) & (y1 > 0.5 - hh)):
            raise RegionOverlap("electrode %d intersects the fluid channel" % (k + 1))
        for k2, (a0, a1, b0, b1) in enumerate(shapes[:k]):
            if x0 < a1 and x1 > a0 and y0 < b1 and y1 > b0:
                raise RegionOverlap("electrodes %d and %d overlap" % (k2 + 1, k + 1))


def _carve_regions(centroids: np.ndarray, geo: CanonicalGeometry) -> np.ndarray:
    cx, cy = centroids[:, 0], centroids[:, 1]
    regions = np.full(centroids.shape[0], MATRIX_PIEZO, dtype=np.int64)
    hh = geo.channel_halfwidth_at(cx)
    in_cushion = np.abs(cy - 0.5) < hh + geo.cushion
    regions[in_cushion] = MATRIX_ELASTIC
    in_channel = np.abs(cy - 0.5) < hh
    regions[in_channel] = FLUID
    for k, (x0, x1, y0, y1) in enumerate(geo.electrode_shapes):
        inside = (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1)
        regions[inside] = CONDUCTOR_BASE + k
    return regions


def _extract_interface_facets(elements: np.ndarray, regions: np.ndarray):
    """Tag facets between fluid/solid and conductor/matrix element pairs."""
    edge_map = {}
    for e, tri in enumerate(elements):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edge_map.setdefault(key, []).append(e)

    fverts, ftags, felems = [], [], []
    for (a, b), els in edge_map.items():
        if len(els) != 2:
            continue
        e0, e1 = els
        r0, r1 = regions[e0], regions[e1]
        if r0 == r1:
            continue
        if (r0 == FLUID) != (r1 == FLUID):
            fl, so = (e0, e1) if r0 == FLUID else (e1, e0)
            fverts.append((a, b))
            ftags.append(FACET_FLUID_SOLID)
            felems.append((fl, so))
        elif (r0 >= CONDUCTOR_BASE) != (r1 >= CONDUCTOR_BASE):
            co, ma = (e0, e1) if r0 >= CONDUCTOR_BASE else (e1, e0)
            alpha = int(regions[co]) - CONDUCTOR_BASE + 1
            fverts.append((a, b))
            ftags.append(alpha)
            felems.append((co, ma))
    if fverts:
        return (np.array(fverts, dtype=np.int64), np.array(ftags, dtype=np.int64),
                np.array(felems, dtype=np.int64))
    return (np.zeros((0, 2), dtype=np.int64), np.zeros((0,), dtype=np.int64),
            np.zeros((0, 2), dtype=np.int64))


def _structured_periodic_pairs(n: int, nid) -> np.ndarray:
    # every slave maps directly to its root master (i mod n, j mod n), so
    # no node is ever both master and slave
    pairs = []
    for j in range(n):              # x = 1 face
        pairs.append((nid(0, j), nid(n, j)))
    for i in range(n):              # y = 1 face
        pairs.append((nid(i, 0), nid(i, n)))
    pairs.append((nid(0, 0), nid(n, n)))
    return np.array(sorted(set(pairs)), dtype=np.int64)


def validate_mesh(mesh: CellMesh) -> None:
    """Check all CellMesh invariants; raise on violation."""
    if mesh.dimension != 2:
        raise SchemaError("only 2D cells are supported (got dimension %r)" % mesh.dimension)
    vols = mesh.element_volumes()
    if np.any(vols <= 0):
        raise ElementInversion("%d elements have non-positive volume"
                               % int(np.sum(vols <= 0)))
    total = vols.sum()
    by_region = sum(mesh.region_measures().values())
    if abs(by_region - total) > 1e-12 * total:
        raise SchemaError("region measures do not sum to the cell measure")

    _check_periodic_pairs(mesh)
    _check_interfaces(mesh)


def _check_periodic_pairs(mesh: CellMesh) -> None:
    pairs = mesh.periodic_pairs
    masters = set(int(m) for m in pairs[:, 0]) if pairs.size else set()
    slaves = [int(s) for s in pairs[:, 1]] if pairs.size else []
    if len(slaves) != len(set(slaves)):
        raise PeriodicityError("a node appears as slave in more than one pair")
    if masters & set(slaves):
        raise PeriodicityError("a node is both master and slave")

    x = mesh.nodes
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    tol = 1e-9 * max(float(span.max()), 1.0)
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    for d in range(mesh.dimension):
        on_boundary |= (np.abs(x[:, d] - lo[d]) < tol) | (np.abs(x[:, d] - hi[d]) < tol)
    paired = masters | set(slaves)
    missing = [int(i) for i in np.nonzero(on_boundary)[0] if int(i) not in paired]
    if missing:
        raise PeriodicityError("%d boundary nodes without a periodic pair (first: %d)"
                               % (len(missing), missing[0]))
    # slave must be the master translated by a lattice-like shift
    for m, s in pairs:
        shift = x[s] - x[m]
        if np.all(np.abs(shift) < tol):
            raise PeriodicityError("degenerate periodic pair (%d, %d)" % (m, s))


def _check_interfaces(mesh: CellMesh) -> None:
    regions = mesh.regions
    # conductors never touch the fluid
    edge_map = {}
    for e, tri in enumerate(mesh.elements):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_map.setdefault((min(a, b), max(a, b)), []).append(e)
    for els in edge_map.values():
        if len(els) == 2:
            r0, r1 = regions[els[0]], regions[els[1]]
            if {True, False} == {bool(r0 == FLUID), bool(r1 == FLUID)}:
                other = r1 if r0 == FLUID else r0
                if other >= CONDUCTOR_BASE:
                    raise SchemaError("conductor element shares a facet with fluid")
    for k in range(mesh.facet_verts.shape[0]):
        e_from, e_into = mesh.facet_elems[k]
        tag = mesh.facet_tags[k]
        if tag == FACET_FLUID_SOLID:
            if regions[e_from] != FLUID or regions[e_into] == FLUID:
                raise SchemaError("fluid-solid facet %d has wrong adjacency" % k)
        else:
            alpha = int(tag)
            if regions[e_from] != CONDUCTOR_BASE + alpha - 1 or not (
                    regions[e_into] in (MATRIX_PIEZO, MATRIX_ELASTIC)):
                raise SchemaError("conductor-matrix facet %d has wrong adjacency" % k)


def perturb_mesh(mesh: CellMesh, velocity: np.ndarray, tau: float) -> CellMesh:
    """Move nodes to y + tau*V(y); connectivity, tags and pairs unchanged."""
    V = np.asarray(velocity, dtype=float)
    if V.shape != mesh.nodes.shape:
        raise SchemaError("velocity field shape %r does not match nodes %r"
                          % (V.shape, mesh.nodes.shape))
    new_nodes = mesh.nodes + tau * V
    vols = element_volumes(new_nodes, mesh.elements)
    floor = 1e-14 * float(np.mean(np.abs(vols))) if vols.size else 0.0
    if np.any(vols <= floor):
        raise ElementInversion("perturbation tau=%g inverts %d elements"
                               % (tau, int(np.sum(vols <= floor))))
    out = mesh.copy()
    out.nodes[...] = new_nodes
    return out


# ---------------------------------------------------------------------------
# IO

_FACET_TAG_NAME = "fluid_solid"


def _facet_tag_to_str(tag: int) -> str:
    return _FACET_TAG_NAME if tag == FACET_FLUID_SOLID else "conductor_matrix:%d" % tag


def _facet_tag_from_str(s: str) -> int:
    if s == _FACET_TAG_NAME:
        return FACET_FLUID_SOLID
    if s.startswith("conductor_matrix:"):
        try:
            alpha = int(s.split(":", 1)[1])
        except ValueError:
            raise TagError("bad facet tag %r" % s) from None
        if alpha < 1:
            raise TagError("bad facet tag %r" % s)
        return alpha
    raise TagError("unknown facet tag %r" % s)


def save_mesh(mesh: CellMesh, path) -> None:
    regions = mesh.regions
    doc = {
        "dimension": mesh.dimension,
        "nodes": mesh.nodes.tolist(),
        "elements": [
            {"verts": [int(v) for v in verts], "region": region_name(int(r))}
            for verts, r in zip(mesh.elements, regions)
        ],
        "facets": [
            {
                "verts": [int(v) for v in mesh.facet_verts[k]],
                "tag": _facet_tag_to_str(int(mesh.facet_tags[k])),
                "inward_region": region_name(int(regions[mesh.facet_elems[k, 1]])),
            }
            for k in range(mesh.facet_verts.shape[0])
        ],
        "periodic_pairs": [[int(m), int(s)] for m, s in mesh.periodic_pairs],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_mesh(path) -> CellMesh:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError("cannot read mesh file %s: %s" % (path, exc)) from None

    for key in ("dimension", "nodes", "elements", "facets", "periodic_pairs"):
        if key not in doc:
            raise SchemaError("mesh file misses key %r" % key)
    if doc["dimension"] != 2:
        raise SchemaError("only 2D meshes are supported")
    nodes = np.asarray(doc["nodes"], dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise SchemaError("nodes must be an array of 2D coordinates")

    elements = np.array([e["verts"] for e in doc["elements"]], dtype=np.int64)
    regions = np.array([region_code(e["region"]) for e in doc["elements"]], dtype=np.int64)
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise SchemaError("elements must be triangles")
    if elements.size and (elements.min() < 0 or elements.max() >= nodes.shape[0]):
        raise SchemaError("element vertex index out of range")

    pairs = np.asarray(doc["periodic_pairs"], dtype=np.int64).reshape(-1, 2)

    fverts, ftags = [], []
    for fc in doc["facets"]:
        fverts.append(fc["verts"])
        ftags.append(_facet_tag_from_str(fc["tag"]))
    fverts = (np.asarray(fverts, dtype=np.int64).reshape(-1, 2)
              if fverts else np.zeros((0, 2), dtype=np.int64))
    ftags = np.asarray(ftags, dtype=np.int64)

    felems = _facet_adjacency(elements, regions, fverts, ftags)
    mesh = CellMesh(2, nodes, elements, regions, fverts, ftags, felems, pairs)
    validate_mesh(mesh)
    # re-validate facet orientation against the stored inward regions
    for k, fc in enumerate(doc["facets"]):
        stored = region_code(fc["inward_region"])
        actual = int(regions[felems[k, 1]])
        if stored != actual:
            raise SchemaError("facet %d inward_region %r does not match mesh (%r)"
                              % (k, fc["inward_region"], region_name(actual)))
    return mesh


def _facet_adjacency(elements, regions, fverts, ftags) -> np.ndarray:
    edge_map = {}
    for e, tri in enumerate(elements):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_map.setdefault((min(a, b), max(a, b)), []).append(e)
    felems = np.zeros((fverts.shape[0], 2), dtype=np.int64)
    for k in range(fverts.shape[0]):
        key = (int(min(fverts[k])), int(max(fverts[k])))
        els = edge_map.get(key, [])
        if len(els) != 2:
            raise SchemaError("facet %d is not shared by exactly two elements" % k)
        r0, r1 = regions[els[0]], regions[els[1]]
        if ftags[k] == FACET_FLUID_SOLID:
            if r0 == FLUID and r1 != FLUID:
                felems[k] = (els[0], els[1])
            elif r1 == FLUID and r0 != FLUID:
                felems[k] = (els[1], els[0])
            else:
                raise SchemaError("facet %d tagged fluid_solid but adjacency is %s|%s"
                                  % (k, region_name(int(r0)), region_name(int(r1))))
        else:
            alpha = int(ftags[k])
            want = CONDUCTOR_BASE + alpha - 1
            if r0 == want and r1 < CONDUCTOR_BASE and r1 != FLUID:
                felems[k] = (els[0], els[1])
            elif r1 == want and r0 < CONDUCTOR_BASE and r0 != FLUID:
                felems[k] = (els[1], els[0])
            else:
                raise SchemaError("facet %d tagged conductor_matrix:%d but adjacency is %s|%s"
                                  % (k, alpha, region_name(int(r0)), region_name(int(r1))))
    return felems


def build_cell_mesh(nodes, elements, regions, periodic_pairs) -> CellMesh:
    """Assemble a CellMesh from raw arrays, deriving interface facets.

    Convenience constructor for tests and simple programmatic cells.
    """
    nodes = np.asarray(nodes, dtype=float)
    elements = np.asarray(elements, dtype=np.int64)
    regions = np.asarray(regions, dtype=np.int64)
    pairs = np.asarray(periodic_pairs, dtype=np.int64).reshape(-1, 2)
    fverts, ftags, felems = _extract_interface_facets(elements, regions)
    mesh = CellMesh(2, nodes, elements, regions, fverts, ftags, felems, pairs)
    validate_mesh(mesh)
    return mesh


def structured_cell(resolution: int, region_of_centroid) -> CellMesh:
    """Structured unit-square cell with regions assigned by a callback
    mapping centroid coordinates (n_el, 2) to region codes."""
    n = int(resolution)
    if n < 2:
        raise ResolutionTooCoarse("resolution must be >= 2, got %d" % n)
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    elements = np.array(tris, dtype=np.int64)
    regions = np.asarray(region_of_centroid(nodes[elements].mean(axis=1)), dtype=np.int64)
    pairs = _structured_periodic_pairs(n, nid)
    fverts, ftags, felems = _extract_interface_facets(elements, regions)
    mesh = CellMesh(2, nodes, elements, regions, fverts, ftags, felems, pairs)
    validate_mesh(mesh)
    return mesh
