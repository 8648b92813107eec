"""Triangular disk meshes with boundary electrodes.

Meshes are built from concentric rings of nodes, which keeps the
construction deterministic and free of any external mesher.  The outer
ring is laid out so that every electrode arc starts and ends exactly on
a node.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, MeshParseError, ParameterError, ValidationError

DEFAULT_CONTACT_IMPEDANCE = 0.01
DEFAULT_ELECTRODE_COVERAGE = 0.5


@dataclass(frozen=True)
class ElementGeometry:
    """Per-element areas and constant hat-function gradients.

    ``grads[e, a]`` is the gradient of the hat function of local vertex
    ``a`` of element ``e``.
    """

    areas: np.ndarray
    grads: np.ndarray


@dataclass(frozen=True, eq=False)
class Mesh:
    """A 2D triangular mesh with boundary electrodes.

    Parameters
    ----------
    nodes : (n, 2) float array
    triangles : (m, 3) int array, counter-clockwise
    boundary_edges : (b, 2) int array, consecutive around the boundary
    electrodes : tuple of (k_i, 2) int arrays, boundary edges under electrode i
    contact_impedances : (N1,) float array
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    electrodes: tuple
    contact_impedances: np.ndarray
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(
            self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        )
        object.__setattr__(
            self,
            "electrodes",
            tuple(np.ascontiguousarray(e, dtype=np.int64).reshape(-1, 2) for e in self.electrodes),
        )
        object.__setattr__(
            self, "contact_impedances", np.ascontiguousarray(self.contact_impedances, dtype=float)
        )
        for name in ("nodes", "triangles", "boundary_edges", "contact_impedances"):
            getattr(self, name).setflags(write=False)
        for e in self.electrodes:
            e.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    @cached_property
    def geometry(self) -> ElementGeometry:
        return element_geometry(self)

    @cached_property
    def _centroid_tree(self):
        return cKDTree(self.nodes[self.triangles].mean(axis=1))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        if len(self.electrodes) != len(other.electrodes):
            return False
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and all(np.array_equal(a, b) for a, b in zip(self.electrodes, other.electrodes))
            and np.array_equal(self.contact_impedances, other.contact_impedances)
        )

    __hash__ = object.__hash__

    def scaled(self, factor: float) -> "Mesh":
        """Return a copy with all node coordinates multiplied by ``factor``."""
        return Mesh(
            self.nodes * factor, self.triangles, self.boundary_edges, self.electrodes, self.contact_impedances
        )

    def electrode_lengths(self) -> np.ndarray:
        out = np.empty(self.n_electrodes)
        for i, edges in enumerate(self.electrodes):
            d = self.nodes[edges[:, 1]] - self.nodes[edges[:, 0]]
            out[i] = np.hypot(d[:, 0], d[:, 1]).sum()
        return out

    def edge_length(self) -> float:
        """Mean length of the interior and boundary triangle edges."""
        t = self.triangles
        p = self.nodes
        lengths = [np.linalg.norm(p[t[:, a]] - p[t[:, b]], axis=1) for a, b in ((0, 1), (1, 2), (2, 0))]
        return float(np.mean(np.concatenate(lengths)))


def element_geometry(mesh: Mesh) -> ElementGeometry:
    """Areas and hat-function gradients of every element.

    Raises
    ------
    GeometryError
        If an element has zero (or negative) signed area.
    """
    p = mesh.nodes[mesh.triangles]  # (m, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    twice_area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    bad = np.flatnonzero(~(twice_area > 0))
    if bad.size:
        e = int(bad[0])
        raise GeometryError(f"element {e} is degenerate (signed area {twice_area[e] / 2:g})", element=e)
    grads = np.empty((len(p), 3, 2))
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        grads[:, a, 0] = p[:, b, 1] - p[:, c, 1]
        grads[:, a, 1] = p[:, c, 0] - p[:, b, 0]
    grads /= twice_area[:, None, None]
    return ElementGeometry(areas=0.5 * twice_area, grads=grads)


def boundary_edges_from_triangles(triangles: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, chained into a closed loop.

    Each edge keeps the orientation it has in its triangle, so for a
    counter-clockwise triangulation the loop runs counter-clockwise.
    """
    t = np.asarray(triangles)
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    boundary = edges[counts[inverse.ravel()] == 1]
    if len(boundary) == 0:
        return boundary.reshape(0, 2)
    nxt = {int(a): int(b) for a, b in boundary}
    start = int(boundary[:, 0].min())
    loop = [start]
    while True:
        b = nxt.get(loop[-1])
        if b is None or b == start or len(loop) > len(boundary):
            break
        loop.append(b)
    if len(loop) != len(boundary):
        # not a single loop; fall back to the raw edge list
        return boundary
    return np.column_stack([loop, np.roll(loop, -1)])


def validate_mesh(mesh: Mesh) -> None:
    """Check the mesh invariants, raising :class:`ValidationError` on failure."""
    n = mesh.n_nodes
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 2:
        raise ValidationError("nodes must be an (n, 2) array")
    if not np.all(np.isfinite(mesh.nodes)):
        raise ValidationError("non-finite node coordinates")
    if mesh.triangles.ndim != 2 or mesh.triangles.shape[1] != 3 or len(mesh.triangles) == 0:
        raise ValidationError("triangles must be a non-empty (m, 3) array")
    for name, arr in (("triangles", mesh.triangles), ("boundary_edges", mesh.boundary_edges)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValidationError(f"{name} reference a node index out of range")
    try:
        element_geometry(mesh)
    except GeometryError as exc:
        raise ValidationError(str(exc)) from exc

    bset = {tuple(sorted(e)) for e in mesh.boundary_edges.tolist()}
    if len(bset) != len(mesh.boundary_edges):
        raise ValidationError("duplicate boundary edges")
    seen = {}
    for i, edges in enumerate(mesh.electrodes):
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError(f"electrode {i} references a node index out of range")
        for e in edges.tolist():
            key = tuple(sorted(e))
            if key not in bset:
                raise ValidationError(f"electrode {i} edge {e} is not a boundary edge")
            if key in seen:
                raise ValidationError(f"electrodes {seen[key]} and {i} overlap on edge {e}")
            seen[key] = i
    if len(mesh.contact_impedances) != mesh.n_electrodes:
        raise ValidationError("need one contact impedance per electrode")
    if np.any(~(mesh.contact_impedances > 0)):
        raise ValidationError("contact impedances must be positive")

    # boundary forms one closed polygon: every vertex has degree two and the
    # edge graph is connected
    if len(mesh.boundary_edges):
        be = mesh.boundary_edges
        verts, deg = np.unique(be.ravel(), return_counts=True)
        if np.any(deg != 2):
            raise ValidationError("boundary edges do not form a simple closed polygon")
        adj = {}
        for a, b in be.tolist():
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        start = int(verts[0])
        stack, visited = [start], {start}
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in visited:
                    visited.add(w)
                    stack.append(w)
        if len(visited) != len(verts):
            raise ValidationError("boundary edges form more than one loop")


def _ring_counts(target_nodes: int, n_electrodes: int, electrode_coverage: float):
    n_rings = max(1, int(round(math.sqrt(target_nodes / math.pi))))
    raw_outer = 2.0 * (target_nodes - 1) / (n_rings + 1)
    period = max(2, int(round(raw_outer / n_electrodes)))
    n_outer = period * n_electrodes
    inner = np.arange(1, n_rings)
    if inner.size:
        budget = target_nodes - 1 - n_outer
        scale = budget / (n_outer / n_rings * inner.sum())
        scale = max(scale, 0.0)
        counts = np.maximum(3, np.rint(n_outer * inner / n_rings * scale)).astype(int)
        # keep rings monotone so the zipper never has to fold back
        counts = np.minimum(counts, n_outer)
        counts = np.maximum.accumulate(counts)
    else:
        counts = np.zeros(0, dtype=int)
    return [int(c) for c in counts] + [n_outer], period


def _outer_ring_angles(n_electrodes: int, period: int, coverage: float):
    width = 2.0 * math.pi * coverage / n_electrodes
    pitch = 2.0 * math.pi / n_electrodes
    m_el = min(max(int(round(coverage * period)), 1), period - 1)
    angles = []
    for p in range(n_electrodes):
        start = p * pitch - width / 2.0
        angles.extend(start + width * s / m_el for s in range(m_el))
        gap = pitch - width
        angles.extend(start + width + gap * s / (period - m_el) for s in range(period - m_el))
    return np.array(angles), m_el


def _zip_rings(inner_idx, inner_ang, outer_idx, outer_ang, tris):
    na, nb = len(inner_idx), len(outer_idx)
    a_ext = np.append(inner_ang, inner_ang[0] + 2 * math.pi)
    b_ext = np.append(outer_ang, outer_ang[0] + 2 * math.pi)
    i = j = 0
    while i < na or j < nb:
        advance_inner = j >= nb or (i < na and a_ext[i + 1] < b_ext[j + 1])
        if advance_inner:
            tris.append((inner_idx[i % na], outer_idx[j % nb], inner_idx[(i + 1) % na]))
            i += 1
        else:
            tris.append((inner_idx[i % na], outer_idx[j % nb], outer_idx[(j + 1) % nb]))
            j += 1


def build_disk_mesh(
    radius: float = 1.0,
    target_nodes: int = 800,
    n_electrodes: int = 16,
    electrode_coverage: float = DEFAULT_ELECTRODE_COVERAGE,
    contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE,
) -> Mesh:
    """Build a concentric-ring triangulation of a disk.

    The node count lands within 10% of ``target_nodes``.  Electrode ``i``
    is centred at angle ``2*pi*i/n_electrodes`` and covers
    ``electrode_coverage / n_electrodes`` of the circumference.
    """
    if not (0.0 < electrode_coverage < 1.0):
        raise ParameterError(f"electrode_coverage must lie in (0, 1), got {electrode_coverage}")
    if n_electrodes < 1:
        raise ParameterError("need at least one electrode")
    if target_nodes < 3 * n_electrodes:
        raise ParameterError(
            f"target_nodes={target_nodes} is too small for {n_electrodes} electrodes (need >= {3 * n_electrodes})"
        )
    if not radius > 0:
        raise ParameterError("radius must be positive")

    counts, period = _ring_counts(target_nodes, n_electrodes, electrode_coverage)
    n_rings = len(counts)
    nodes = [(0.0, 0.0)]
    ring_idx, ring_ang = [], []
    for level, count in enumerate(counts, start=1):
        r = radius * level / n_rings
        if level == n_rings:
            ang, _ = _outer_ring_angles(n_electrodes, period, electrode_coverage)
        else:
            ang = 2.0 * math.pi * np.arange(count) / count
        # sort by angle in [-pi, pi) so that every ring starts near the seam
        wrapped = (ang + math.pi) % (2 * math.pi) - math.pi
        order = np.argsort(wrapped, kind="stable")
        ang = wrapped[order]
        first = len(nodes)
        nodes.extend((r * math.cos(t), r * math.sin(t)) for t in ang)
        ring_idx.append(np.arange(first, first + count))
        ring_ang.append(ang)

    tris = []
    c0 = ring_idx[0]
    for j in range(len(c0)):
        tris.append((0, c0[j], c0[(j + 1) % len(c0)]))
    for lvl in range(n_rings - 1):
        _zip_rings(ring_idx[lvl], ring_ang[lvl], ring_idx[lvl + 1], ring_ang[lvl + 1], tris)

    nodes = np.array(nodes)
    tris = np.array(tris, dtype=np.int64)
    p = nodes[tris]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]

    outer = ring_idx[-1]
    outer_ang = ring_ang[-1]
    boundary = np.column_stack([outer, np.roll(outer, -1)])

    # recover electrode membership from the un-wrapped outer ring layout
    raw, m_el = _outer_ring_angles(n_electrodes, period, electrode_coverage)
    raw_wrapped = (raw + math.pi) % (2 * math.pi) - math.pi
    pos = {round(float(a), 12): k for k, a in enumerate(raw_wrapped)}
    raw_to_sorted = np.empty(len(raw), dtype=np.int64)
    for s, a in enumerate(outer_ang):
        raw_to_sorted[pos[round(float(a), 12)]] = s
    electrodes = []
    n_outer = len(outer)
    for e in range(n_electrodes):
        edges = []
        for s in range(m_el):
            k0 = e * period + s
            a = outer[raw_to_sorted[k0]]
            b = outer[raw_to_sorted[(k0 + 1) % n_outer]]
            edges.append((a, b))
        electrodes.append(np.array(edges, dtype=np.int64))

    mesh = Mesh(
        nodes=nodes,
        triangles=tris,
        boundary_edges=boundary,
        electrodes=tuple(electrodes),
        contact_impedances=np.full(n_electrodes, float(contact_impedance)),
    )
    validate_mesh(mesh)
    return mesh


def locate_points(mesh: Mesh, points, k_candidates: int = 12, tol: float = 1e-12):
    """Vectorised point location.

    Returns
    -------
    elements : (p,) int array, ``-1`` for points outside the mesh
    weights : (p, 3) barycentric weights (undefined rows for outside points)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    verts = mesh.nodes[tri]
    k = min(k_candidates, len(tri))
    _, cand = mesh._centroid_tree.query(pts, k=k)
    cand = np.asarray(cand).reshape(len(pts), k)

    def barycentric(elems, p):
        v = verts[elems]  # (..., 3, 2)
        d1 = v[..., 1, :] - v[..., 0, :]
        d2 = v[..., 2, :] - v[..., 0, :]
        det = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        r = p - v[..., 0, :]
        l1 = (r[..., 0] * d2[..., 1] - r[..., 1] * d2[..., 0]) / det
        l2 = (d1[..., 0] * r[..., 1] - d1[..., 1] * r[..., 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)

    w = barycentric(cand, pts[:, None, :])  # (p, k, 3)
    inside = np.all(w >= -tol, axis=-1)
    # lowest element index among the containing candidates
    masked = np.where(inside, cand, np.iinfo(np.int64).max)
    best = masked.argmin(axis=1)
    found = inside[np.arange(len(pts)), best]
    elements = np.where(found, cand[np.arange(len(pts)), best], -1)
    weights = w[np.arange(len(pts)), best]

    for p in np.flatnonzero(~found):
        wall = barycentric(np.arange(len(tri)), pts[p][None, :])
        ok = np.flatnonzero(np.all(wall >= -tol, axis=-1))
        if ok.size:
            elements[p] = ok[0]
            weights[p] = wall[ok[0]]
    weights = np.clip(weights, 0.0, None)
    s = weights.sum(axis=1, keepdims=True)
    weights = np.divide(weights, s, out=weights, where=s > 0)
    return elements, weights


def locate_point(mesh: Mesh, point):
    """Locate a single point.

    Returns ``(element, weights)`` or ``None`` if the point lies outside.
    """
    elems, w = locate_points(mesh, np.asarray(point, dtype=float)[None, :])
    if elems[0] < 0:
        return None
    return int(elems[0]), w[0]


def interpolate(mesh: Mesh, values, points, fallback=None):
    """Evaluate a nodal P1 field at arbitrary points.

    Points outside the mesh take ``fallback[p]`` (or NaN when no fallback
    is given).
    """
    values = np.asarray(values)
    elems, w = locate_points(mesh, points)
    inside = elems >= 0
    out = np.full(len(elems), np.nan) if fallback is None else np.array(fallback, dtype=float, copy=True)
    tri = mesh.triangles[elems[inside]]
    out[inside] = np.einsum("pa,pa->p", w[inside], values[tri])
    return out


# --------------------------------------------------------------------------
# text file format


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``mesh`` in the sectioned text format (atomic replace)."""
    lines = ["# dyneit mesh", f"nodes {mesh.n_nodes}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append(f"triangles {mesh.n_elements}")
    lines += [f"{i} {a} {b} {c}" for i, (a, b, c) in enumerate(mesh.triangles.tolist())]
    n_edges = sum(len(e) for e in mesh.electrodes)
    lines.append(f"electrodes {n_edges}")
    for i, edges in enumerate(mesh.electrodes):
        lines += [f"{i} {a} {b}" for a, b in edges.tolist()]
    lines.append(f"zeta {mesh.n_electrodes}")
    lines += [f"{i} {z!r}" for i, z in enumerate(mesh.contact_impedances.tolist())]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


_SECTIONS = ("nodes", "triangles", "electrodes", "zeta")


def load_mesh(path) -> Mesh:
    """Read a mesh written by :func:`save_mesh`.

    Raises
    ------
    MeshParseError
        On malformed content, with the offending line number.
    ValidationError
        If the parsed mesh violates an invariant (e.g. overlapping electrodes).
    """
    with open(path, encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    rows = []
    for lineno, line in enumerate(raw_lines, start=1):
        text = line.split("#", 1)[0].strip()
        if text:
            rows.append((lineno, text.split()))

    data = {}
    pos = 0
    last_lineno = len(raw_lines)
    while pos < len(rows):
        lineno, tok = rows[pos]
        if tok[0] not in _SECTIONS or len(tok) != 2:
            raise MeshParseError(f"expected a section header, got {' '.join(tok)!r}", lineno)
        name = tok[0]
        if name in data:
            raise MeshParseError(f"duplicate section {name!r}", lineno)
        try:
            count = int(tok[1])
        except ValueError:
            raise MeshParseError(f"bad count {tok[1]!r}", lineno) from None
        width = {"nodes": 3, "triangles": 4, "electrodes": 3, "zeta": 2}[name]
        body = []
        for r in range(count):
            if pos + 1 + r >= len(rows):
                raise MeshParseError(f"section {name!r} truncated: expected {count} rows, got {r}", last_lineno)
            ln, t = rows[pos + 1 + r]
            if len(t) != width:
                raise MeshParseError(f"expected {width} fields in section {name!r}, got {len(t)}", ln)
            try:
                if name in ("nodes", "zeta"):
                    body.append((int(t[0]),) + tuple(float(v) for v in t[1:]))
                else:
                    body.append(tuple(int(v) for v in t))
            except ValueError:
                raise MeshParseError(f"cannot parse row {' '.join(t)!r}", ln) from None
            if name in ("nodes", "triangles", "zeta") and body[-1][0] != r:
                raise MeshParseError(f"row index {body[-1][0]} out of sequence (expected {r})", ln)
        data[name] = body
        pos += 1 + count

    for name in _SECTIONS:
        if name not in data:
            raise MeshParseError(f"missing section {name!r}", last_lineno)

    nodes = np.array([r[1:] for r in data["nodes"]], dtype=float).reshape(-1, 2)
    tris = np.array([r[1:] for r in data["triangles"]], dtype=np.int64).reshape(-1, 3)
    zeta = np.array([r[1] for r in data["zeta"]], dtype=float)
    electrodes = [[] for _ in range(len(zeta))]
    for r in data["electrodes"]:
        if not 0 <= r[0] < len(zeta):
            raise ValidationError(f"electrode index {r[0]} has no contact impedance")
        electrodes[r[0]].append(r[1:])
    if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
        raise ValidationError("triangles reference a node index out of range")
    mesh = Mesh(
        nodes=nodes,
        triangles=tris,
        boundary_edges=boundary_edges_from_triangles(tris),
        electrodes=tuple(np.array(e, dtype=np.int64).reshape(-1, 2) for e in electrodes),
        contact_impedances=zeta,
    )
    validate_mesh(mesh)
    return mesh
