"""Hex8 meshes: container type, JSON IO, structured generators.

All geometry is total-Lagrangian reference geometry in mm. Two study
geometries are generated here: a quarter plate with a central hole
(transfinite single block between the hole arc and the outer edges) and an
asymmetrically notched strip (sheared structured grid whose left/right
boundaries trace the semicircular notches). Both carry the named node/side
sets the boundary-condition and monitoring layers look up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics

__all__ = [
    "Mesh",
    "MeshError",
    "gen_asym_notched",
    "gen_block",
    "gen_plate_with_hole",
    "load_mesh",
    "node_to_elements",
    "save_mesh",
    "validate_mesh",
]

MESH_FORMAT = "hex8-mesh-v1"


class MeshError(ValueError):
    """Invalid mesh topology or geometry (index bounds, degenerate Jacobian)."""


@dataclass
class Mesh:
    """Reference-configuration hex8 mesh.

    nodes: (n_nodes, 3) float64 coordinates
    elements: (n_elems, 8) int64 connectivity, right-handed local ordering
    node_sets: name -> sorted node-id array
    side_sets: name -> (n_faces, 2) array of (element id, local face id)
    """

    nodes: np.ndarray
    elements: np.ndarray
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)
    side_sets: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elements.shape[0]

    def content_hash(self) -> str:
        parts: list = [self.nodes, self.elements.astype(np.int64)]
        for name in sorted(self.node_sets):
            parts += [name, self.node_sets[name].astype(np.int64)]
        for name in sorted(self.side_sets):
            parts += [name, self.side_sets[name].astype(np.int64)]
        return numerics.content_hash(*parts)


def validate_mesh(mesh: Mesh, geometric: bool = True) -> None:
    """Raise MeshError on malformed topology or nonpositive Jacobians."""
    nodes, elems = np.asarray(mesh.nodes), np.asarray(mesh.elements)
    if nodes.ndim != 2 or nodes.shape[1] != 3:
        raise MeshError(f"nodes must be (n, 3), got {nodes.shape}")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("node coordinates contain non-finite values")
    if elems.ndim != 2 or elems.shape[1] != 8:
        raise MeshError(f"elements must be (m, 8), got {elems.shape}")
    if elems.size and (elems.min() < 0 or elems.max() >= len(nodes)):
        raise MeshError("element connectivity references nodes out of range")
    for e, conn in enumerate(elems):
        if len(set(int(c) for c in conn)) != 8:
            raise MeshError(f"element {e} repeats a node")
    for name, ids in mesh.node_sets.items():
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(nodes)):
            raise MeshError(f"node set '{name}' out of range")
    for name, faces in mesh.side_sets.items():
        faces = np.asarray(faces)
        if faces.size == 0:
            continue
        if faces.ndim != 2 or faces.shape[1] != 2:
            raise MeshError(f"side set '{name}' must be (k, 2)")
        if faces[:, 0].min() < 0 or faces[:, 0].max() >= len(elems):
            raise MeshError(f"side set '{name}' references elements out of range")
        if faces[:, 1].min() < 0 or faces[:, 1].max() > 5:
            raise MeshError(f"side set '{name}' has local face ids outside 0..5")
    if geometric and elems.size:
        from . import fem  # deferred: fem owns the reference element

        bad = fem.nonpositive_jacobians(mesh)
        if bad:
            e, gp, val = bad[0]
            raise MeshError(
                f"nonpositive Jacobian at element {e}, gauss point {gp} (detJ={val:.3e}); "
                f"{len(bad)} offending points total"
            )


# --- JSON IO -----------------------------------------------------------------


def save_mesh(mesh: Mesh, path: str | Path, provenance: dict | None = None) -> None:
    doc = {
        "format": MESH_FORMAT,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.astype(int).tolist(),
        "node_sets": {k: np.asarray(v).astype(int).tolist() for k, v in mesh.node_sets.items()},
        "side_sets": {k: np.asarray(v).astype(int).tolist() for k, v in mesh.side_sets.items()},
    }
    if provenance:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc))


def load_mesh(path: str | Path) -> Mesh:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MESH_FORMAT:
        raise MeshError(f"unrecognized mesh format marker in {path}: {doc.get('format')!r}")
    mesh = Mesh(
        nodes=np.asarray(doc["nodes"], dtype=np.float64),
        elements=np.asarray(doc["elements"], dtype=np.int64),
        node_sets={k: np.asarray(v, dtype=np.int64) for k, v in doc.get("node_sets", {}).items()},
        side_sets={
            k: np.asarray(v, dtype=np.int64).reshape(-1, 2)
            for k, v in doc.get("side_sets", {}).items()
        },
    )
    validate_mesh(mesh)
    return mesh


def node_to_elements(mesh: Mesh) -> list[np.ndarray]:
    """Adjacency: for each node, sorted ids of elements containing it."""
    buckets: list[list[int]] = [[] for _ in range(mesh.n_nodes)]
    for e, conn in enumerate(mesh.elements):
        for c in conn:
            buckets[int(c)].append(e)
    return [np.array(sorted(set(b)), dtype=np.int64) for b in buckets]


# --- structured generators -----------------------------------------------------


def _grid_hexes(nx: int, ny: int, nz: int, node_id) -> np.ndarray:
    elems = np.empty((nx * ny * nz, 8), dtype=np.int64)
    e = 0
    for j in range(ny):
        for i in range(nx):
            for k in range(nz):
                elems[e] = [
                    node_id(i, j, k),
                    node_id(i + 1, j, k),
                    node_id(i + 1, j + 1, k),
                    node_id(i, j + 1, k),
                    node_id(i, j, k + 1),
                    node_id(i + 1, j, k + 1),
                    node_id(i + 1, j + 1, k + 1),
                    node_id(i, j + 1, k + 1),
                ]
                e += 1
    return elems


def gen_block(
    lx: float, ly: float, lz: float, nx: int, ny: int, nz: int
) -> Mesh:
    """Plain cuboid, mostly for tests: sets x0/x1/y0/y1/z0/z1 on each face."""
    if min(nx, ny, nz) < 1 or min(lx, ly, lz) <= 0:
        raise MeshError("block dimensions and subdivisions must be positive")

    def node_id(i, j, k):
        return (j * (nx + 1) + i) * (nz + 1) + k

    nodes = np.empty(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for j in range(ny + 1):
        for i in range(nx + 1):
            for k in range(nz + 1):
                nodes[node_id(i, j, k)] = [lx * i / nx, ly * j / ny, lz * k / nz]
    elems = _grid_hexes(nx, ny, nz, node_id)

    def plane(pred):
        return np.array(
            sorted(
                node_id(i, j, k)
                for j in range(ny + 1)
                for i in range(nx + 1)
                for k in range(nz + 1)
                if pred(i, j, k)
            ),
            dtype=np.int64,
        )

    node_sets = {
        "x0": plane(lambda i, j, k: i == 0),
        "x1": plane(lambda i, j, k: i == nx),
        "y0": plane(lambda i, j, k: j == 0),
        "y1": plane(lambda i, j, k: j == ny),
        "z0": plane(lambda i, j, k: k == 0),
        "z1": plane(lambda i, j, k: k == nz),
    }

    def cell_id(i, j, k):
        return (j * nx + i) * nz + k

    side_sets = {
        "x0": np.array([[cell_id(0, j, k), 0] for j in range(ny) for k in range(nz)], dtype=np.int64),
        "x1": np.array([[cell_id(nx - 1, j, k), 1] for j in range(ny) for k in range(nz)], dtype=np.int64),
        "y0": np.array([[cell_id(i, 0, k), 2] for i in range(nx) for k in range(nz)], dtype=np.int64),
        "y1": np.array([[cell_id(i, ny - 1, k), 3] for i in range(nx) for k in range(nz)], dtype=np.int64),
        "z0": np.array([[cell_id(i, j, 0), 4] for i in range(nx) for j in range(ny)], dtype=np.int64),
        "z1": np.array([[cell_id(i, j, nz - 1), 5] for i in range(nx) for j in range(ny)], dtype=np.int64),
    }
    mesh = Mesh(nodes, elems, node_sets, side_sets)
    validate_mesh(mesh)
    return mesh


def gen_plate_with_hole(
    width: float = 50.0,
    height: float = 100.0,
    radius: float = 25.0,
    thickness: float = 1.0,
    nx: int = 8,
    ny: int = 19,
    nz: int = 1,
) -> Mesh:
    """Quarter model of a plate with a central hole, loaded on the far edge.

    The quarter occupies [0, width] x [0, height] with the hole arc of the
    given radius centered at the origin. A single transfinite block maps
    nx radial by ny tangential by nz thickness cells between arc and outer
    boundary; rays run radially so the corner (width, height) is always a
    node. Sets: sym_x (x=0), sym_y (y=0), back_z (z=0), load_edge (y=height),
    point_A (single node at (0, height, 0)).
    """
    if radius <= 0 or radius >= min(width, height):
        raise MeshError("hole radius must satisfy 0 < radius < min(width, height)")
    if min(nx, ny, nz) < 1:
        raise MeshError("subdivisions must be positive")
    if ny < 2:
        raise MeshError("need at least 2 tangential cells to carry the outer corner")

    # split tangential cells between right edge and top edge; corner is a node
    ny1 = int(np.clip(round(ny * height / (width + height)), 1, ny - 1))

    outer = np.empty((ny + 1, 2))
    for j in range(ny + 1):
        if j <= ny1:
            outer[j] = [width, height * j / ny1]
        else:
            outer[j] = [width * (ny - j) / (ny - ny1), height]
    phi = np.arctan2(outer[:, 1], outer[:, 0])
    inner = radius * np.column_stack([np.cos(phi), np.sin(phi)])

    def node_id(i, j, k):
        return (j * (nx + 1) + i) * (nz + 1) + k

    nodes = np.empty(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for j in range(ny + 1):
        for i in range(nx + 1):
            xy = inner[j] + (outer[j] - inner[j]) * (i / nx)
            for k in range(nz + 1):
                nodes[node_id(i, j, k)] = [xy[0], xy[1], thickness * k / nz]
    elems = _grid_hexes(nx, ny, nz, node_id)

    node_sets = {
        "sym_y": np.array(
            sorted(node_id(i, 0, k) for i in range(nx + 1) for k in range(nz + 1)), dtype=np.int64
        ),
        "sym_x": np.array(
            sorted(node_id(i, ny, k) for i in range(nx + 1) for k in range(nz + 1)), dtype=np.int64
        ),
        "back_z": np.array(
            sorted(node_id(i, j, 0) for i in range(nx + 1) for j in range(ny + 1)), dtype=np.int64
        ),
        "load_edge": np.array(
            sorted(node_id(nx, j, k) for j in range(ny1, ny + 1) for k in range(nz + 1)),
            dtype=np.int64,
        ),
        "point_A": np.array([node_id(nx, ny, 0)], dtype=np.int64),
        "hole_arc": np.array(
            sorted(node_id(0, j, k) for j in range(ny + 1) for k in range(nz + 1)), dtype=np.int64
        ),
    }

    def cell_id(i, j, k):
        return (j * nx + i) * nz + k

    side_sets = {
        "load_edge": np.array(
            [[cell_id(nx - 1, j, k), 1] for j in range(ny1, ny) for k in range(nz)],
            dtype=np.int64,
        ),
    }
    mesh = Mesh(nodes, elems, node_sets, side_sets)
    validate_mesh(mesh)
    return mesh


def gen_asym_notched(
    height: float = 100.0,
    width: float = 40.0,
    thickness: float = 1.0,
    notch_radius: float = 10.0,
    notch_offset: float = 10.0,
    nx: int = 10,
    ny: int = 36,
    nz: int = 1,
    band_fraction: float = 0.5,
) -> Mesh:
    """Strip with two offset semicircular side notches, refined between them.

    The left notch is centered on the edge x=0 at height/2 + notch_offset,
    the right notch on x=width at height/2 - notch_offset. Rows of nodes are
    sheared in x so the lateral boundaries trace the notch arcs; the row
    spacing is graded so about ``band_fraction`` of the ny cells land in the
    band spanned by the notches. Sets: bottom (y=0), top_load (y=height),
    point_A (single node at (width, height, 0)).
    """
    y_left = height / 2.0 + notch_offset
    y_right = height / 2.0 - notch_offset
    if notch_radius <= 0:
        raise MeshError("notch radius must be positive")
    if 2.0 * notch_radius >= width:
        raise MeshError("notches overlap: 2*notch_radius must stay below width")
    if y_left + notch_radius >= height or y_right - notch_radius <= 0:
        raise MeshError("notches must not reach the loaded/support edges")
    if min(nx, nz) < 1 or ny < 6:
        raise MeshError("need nx, nz >= 1 and ny >= 6")

    # three y zones: below band, notch band, above band
    pad = 1.5 * notch_radius
    band_lo = max(0.0, y_right - pad)
    band_hi = min(height, y_left + pad)
    n_band = max(2, int(round(ny * band_fraction)))
    n_rest = ny - n_band
    lo_len, hi_len = band_lo, height - band_hi
    n_lo = max(1, int(round(n_rest * lo_len / max(lo_len + hi_len, 1e-12))))
    n_hi = max(1, n_rest - n_lo)
    n_band = ny - n_lo - n_hi
    if n_band < 2:
        raise MeshError("ny too small for the requested band fraction")
    ys = np.concatenate(
        [
            np.linspace(0.0, band_lo, n_lo + 1)[:-1],
            np.linspace(band_lo, band_hi, n_band + 1)[:-1],
            np.linspace(band_hi, height, n_hi + 1),
        ]
    )
    assert len(ys) == ny + 1

    def depth(y, yc):
        d2 = notch_radius**2 - (y - yc) ** 2
        return np.sqrt(d2) if d2 > 0.0 else 0.0

    x_lo = np.array([depth(y, y_left) for y in ys])
    x_hi = np.array([width - depth(y, y_right) for y in ys])
    if np.any(x_hi - x_lo <= 0):
        raise MeshError("notches overlap at some height")

    def node_id(i, j, k):
        return (j * (nx + 1) + i) * (nz + 1) + k

    nodes = np.empty(((nx + 1) * (ny + 1) * (nz + 1), 3))
    for j in range(ny + 1):
        for i in range(nx + 1):
            x = x_lo[j] + (x_hi[j] - x_lo[j]) * (i / nx)
            for k in range(nz + 1):
                nodes[node_id(i, j, k)] = [x, ys[j], thickness * k / nz]
    elems = _grid_hexes(nx, ny, nz, node_id)

    node_sets = {
        "bottom": np.array(
            sorted(node_id(i, 0, k) for i in range(nx + 1) for k in range(nz + 1)), dtype=np.int64
        ),
        "top_load": np.array(
            sorted(node_id(i, ny, k) for i in range(nx + 1) for k in range(nz + 1)), dtype=np.int64
        ),
        "back_z": np.array(
            sorted(node_id(i, j, 0) for i in range(nx + 1) for j in range(ny + 1)), dtype=np.int64
        ),
        "point_A": np.array([node_id(nx, ny, 0)], dtype=np.int64),
    }

    def cell_id(i, j, k):
        return (j * nx + i) * nz + k

    side_sets = {
        "top_load": np.array(
            [[cell_id(i, ny - 1, k), 3] for i in range(nx) for k in range(nz)], dtype=np.int64
        ),
        "bottom": np.array(
            [[cell_id(i, 0, k), 2] for i in range(nx) for k in range(nz)], dtype=np.int64
        ),
    }
    mesh = Mesh(nodes, elems, node_sets, side_sets)
    validate_mesh(mesh)
    return mesh
