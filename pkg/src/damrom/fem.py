"""Trilinear hexahedral elements for the coupled damage-plasticity problem.

Total Lagrangian kinematics on 8-node bricks with 2x2x2 Gauss quadrature.
Every node carries 4 interleaved degrees of freedom: the displacement
components and the micromorphic damage value Dbar, so dof = 4 * node + comp
with comp 3 the micromorphic one.

The module provides the reference element (shape functions, quadrature,
face tables), precomputed element geometry, the dof map with homogeneous
Dirichlet reduction, dead surface loads, and :class:`FemProvider`, which
assembles the internal force vector and consistent tangent on the free
dofs. Assembly can be restricted to an element subset with the same kernel;
rows supported entirely by the subset are then exact, the rest partial.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

from . import material
from .material import GpState, MaterialParams, MaterialUpdateError

if TYPE_CHECKING:
    from .meshing import Mesh

__all__ = [
    "AsmResult",
    "DofMap",
    "ElementGeometry",
    "FACE_NODES",
    "FemProvider",
    "FullyDamagedError",
    "GAUSS_PTS",
    "GAUSS_WTS",
    "N_COMP",
    "TractionLoad",
    "element_geometry",
    "face_load_vector",
    "hex8_dshape",
    "hex8_shape",
    "nonpositive_jacobians",
]

N_COMP = 4  # ux, uy, uz, Dbar

# reference hex: nodes at the corners of [-1, 1]^3
XI_NODES = np.array(
    [
        [-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0],
    ]
)

_G = 1.0 / np.sqrt(3.0)
GAUSS_PTS = np.array([[sx, sy, sz] for sx in (-_G, _G) for sy in (-_G, _G) for sz in (-_G, _G)])
GAUSS_WTS = np.ones(8)
N_GP = 8

# local node ids of the six faces, ordered so the right-hand rule gives the
# outward normal: -x, +x, -y, +y, -z, +z
FACE_NODES = np.array(
    [
        [0, 4, 7, 3],
        [1, 2, 6, 5],
        [0, 1, 5, 4],
        [3, 7, 6, 2],
        [0, 3, 2, 1],
        [4, 5, 6, 7],
    ]
)

_QUAD_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
FACE_QP = np.array([[sa, sb] for sa in (-_G, _G) for sb in (-_G, _G)])


class FullyDamagedError(RuntimeError):
    """An element lost all its material points to the damage cap."""


def hex8_shape(xi: np.ndarray) -> np.ndarray:
    """Shape functions at reference coordinates xi (..., 3) -> (..., 8)."""
    xi = np.asarray(xi, dtype=np.float64)
    return np.prod(1.0 + xi[..., None, :] * XI_NODES, axis=-1) / 8.0


def hex8_dshape(xi: np.ndarray) -> np.ndarray:
    """Reference gradients dN/dxi at xi (..., 3) -> (..., 8, 3)."""
    xi = np.asarray(xi, dtype=np.float64)
    t = 1.0 + xi[..., None, :] * XI_NODES  # (..., 8, 3)
    out = np.empty(xi.shape[:-1] + (8, 3))
    for d in range(3):
        o1, o2 = [dd for dd in range(3) if dd != d]
        out[..., d] = XI_NODES[:, d] * t[..., o1] * t[..., o2] / 8.0
    return out


# tables at the quadrature points, used everywhere below
SHP = hex8_shape(GAUSS_PTS)      # (8 gp, 8 node)
DSHP = hex8_dshape(GAUSS_PTS)    # (8 gp, 8 node, 3)


def quad4_shape(ab: np.ndarray) -> np.ndarray:
    ab = np.asarray(ab, dtype=np.float64)
    return np.prod(1.0 + ab[..., None, :] * _QUAD_CORNERS, axis=-1) / 4.0


def quad4_dshape(ab: np.ndarray) -> np.ndarray:
    ab = np.asarray(ab, dtype=np.float64)
    t = 1.0 + ab[..., None, :] * _QUAD_CORNERS
    out = np.empty(ab.shape[:-1] + (4, 2))
    out[..., 0] = _QUAD_CORNERS[:, 0] * t[..., 1] / 4.0
    out[..., 1] = _QUAD_CORNERS[:, 1] * t[..., 0] / 4.0
    return out


def _jacobians(mesh: "Mesh") -> np.ndarray:
    """detJ at all quadrature points, (m, 8)."""
    X = mesh.nodes[mesh.elements]  # (m, 8, 3)
    J = np.einsum("gaL,maI->mgLI", DSHP, X)
    return np.linalg.det(J)


def nonpositive_jacobians(mesh: "Mesh") -> list[tuple[int, int, float]]:
    """(element, gp, detJ) for every quadrature point with detJ <= 0."""
    detJ = _jacobians(mesh)
    bad = np.argwhere(detJ <= 0.0)
    return [(int(e), int(g), float(detJ[e, g])) for e, g in bad]


@dataclass
class ElementGeometry:
    """Reference-configuration quantities precomputed once per mesh."""

    dNdX: np.ndarray   # (m, 8 gp, 8 node, 3)
    wdetJ: np.ndarray  # (m, 8 gp)
    u_dofs: np.ndarray  # (m, 24) node-major [ux0 uy0 uz0 ux1 ...]
    d_dofs: np.ndarray  # (m, 8)
    edofs: np.ndarray   # (m, 32) u dofs then d dofs

    @property
    def n_elems(self) -> int:
        return self.dNdX.shape[0]

    @property
    def volume(self) -> float:
        return float(self.wdetJ.sum())


def element_geometry(mesh: "Mesh") -> ElementGeometry:
    X = mesh.nodes[mesh.elements]
    J = np.einsum("gaL,maI->mgLI", DSHP, X)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0.0):
        e, g = np.argwhere(detJ <= 0.0)[0]
        raise ValueError(f"nonpositive Jacobian {detJ[e, g]:.3e} in element {e}, gp {g}")
    Jinv = np.linalg.inv(J)
    dNdX = np.einsum("gaL,mgIL->mgaI", DSHP, Jinv)
    wdetJ = detJ * GAUSS_WTS
    conn = mesh.elements
    u_dofs = (4 * conn[:, :, None] + np.arange(3)).reshape(-1, 24)
    d_dofs = 4 * conn + 3
    edofs = np.concatenate([u_dofs, d_dofs], axis=1)
    return ElementGeometry(dNdX, wdetJ, u_dofs.astype(np.int64), d_dofs.astype(np.int64),
                           edofs.astype(np.int64))


# --- dof bookkeeping -----------------------------------------------------------


def u_dof(node: int, comp: int) -> int:
    return 4 * node + comp


def d_dof(node: int) -> int:
    return 4 * node + 3


@dataclass(frozen=True)
class DofMap:
    """Full/free dof numbering with homogeneous Dirichlet elimination."""

    n_nodes: int
    free: np.ndarray
    fixed: np.ndarray

    @property
    def ndof(self) -> int:
        return 4 * self.n_nodes

    @property
    def ndof_free(self) -> int:
        return self.free.size

    @classmethod
    def build(cls, mesh: "Mesh", fixed_sets: dict[str, tuple[int, ...]]) -> "DofMap":
        """Prescribe (to zero) the given displacement components on node sets.

        ``fixed_sets`` maps a node-set name to displacement components, for
        example ``{"sym_y": (1,), "back_z": (2,)}``. The micromorphic dof
        carries a natural boundary condition and cannot be prescribed.
        """
        mask = np.zeros(4 * mesh.n_nodes, dtype=bool)
        for name, comps in fixed_sets.items():
            if name not in mesh.node_sets:
                raise ValueError(
                    f"unknown node set {name!r}; available: {sorted(mesh.node_sets)}"
                )
            nodes = mesh.node_sets[name]
            for c in comps:
                if c not in (0, 1, 2):
                    raise ValueError("only displacement components 0..2 can be prescribed")
                mask[4 * nodes + c] = True
        fixed = np.flatnonzero(mask)
        free = np.flatnonzero(~mask)
        return cls(mesh.n_nodes, free, fixed)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        full = np.zeros(self.ndof)
        full[self.free] = u_free
        return full

    def restrict(self, v_full: np.ndarray) -> np.ndarray:
        return v_full[self.free]


# --- surface loads ----------------------------------------------------------------


@dataclass(frozen=True)
class TractionLoad:
    """Dead traction (reference configuration) on a side set."""

    side_set: str
    traction: tuple[float, float, float]


@dataclass(frozen=True)
class DisplacementDrive:
    """Prescribed displacement pattern scaled by the load factor.

    The nodes of ``node_set`` move by ``lambda * value`` along component
    ``comp``; those dofs must also appear in the fixed sets of the dof map
    (the drive replaces their zero constraint with a scaled one).
    """

    node_set: str
    comp: int
    value: float = 1.0

    def __post_init__(self):
        if self.comp not in (0, 1, 2):
            raise ValueError("a drive prescribes displacement components only")


def face_load_vector(mesh: "Mesh", side_set: str, traction) -> np.ndarray:
    """Consistent nodal load for a constant dead traction; full-length vector."""
    if side_set not in mesh.side_sets:
        raise ValueError(f"unknown side set {side_set!r}; available: {sorted(mesh.side_sets)}")
    pairs = mesh.side_sets[side_set]
    t = np.asarray(traction, dtype=np.float64)
    p0 = np.zeros(4 * mesh.n_nodes)
    Nf = quad4_shape(FACE_QP)      # (4 qp, 4 node)
    dNf = quad4_dshape(FACE_QP)    # (4 qp, 4 node, 2)
    for face_id in np.unique(pairs[:, 1]):
        sub = pairs[pairs[:, 1] == face_id]
        fnodes = mesh.elements[sub[:, 0]][:, FACE_NODES[face_id]]  # (k, 4)
        Xf = mesh.nodes[fnodes]                                    # (k, 4, 3)
        tang = np.einsum("qnd,knI->kqdI", dNf, Xf)                 # (k, 4 qp, 2, 3)
        dA = np.linalg.norm(np.cross(tang[:, :, 0], tang[:, :, 1]), axis=-1)  # (k, 4 qp)
        fe = np.einsum("qn,kq,I->knI", Nf, dA, t)                  # (k, 4 node, 3)
        dofs = (4 * fnodes[:, :, None] + np.arange(3)).ravel()
        np.add.at(p0, dofs, fe.ravel())
    return p0


# --- nonlinear B-operator ------------------------------------------------------------


def _b_matrix(F: np.ndarray, dNdX: np.ndarray) -> np.ndarray:
    """Strain-displacement operator at current F.

    F (m, g, 3, 3), dNdX (m, g, 8, 3) -> B (m, g, 6, 24) mapping nodal
    displacement increments to engineering Green-Lagrange strain increments
    (Voigt xx, yy, zz, xy, yz, xz).
    """
    m, g = F.shape[:2]
    B = np.empty((m, g, 6, 8, 3))
    # diagonal rows: dE_II = F_iI dN_aI du_ai
    for row, I in ((0, 0), (1, 1), (2, 2)):
        B[:, :, row] = np.einsum("mga,mgi->mgai", dNdX[..., I], F[..., I])
    # shear rows (engineering): dE_IJ*2 = (F_iI dN_aJ + F_iJ dN_aI) du_ai
    for row, (I, J) in ((3, (0, 1)), (4, (1, 2)), (5, (0, 2))):
        B[:, :, row] = np.einsum("mga,mgi->mgai", dNdX[..., J], F[..., I]) + np.einsum(
            "mga,mgi->mgai", dNdX[..., I], F[..., J]
        )
    return B.reshape(m, g, 6, 24)


# --- provider ---------------------------------------------------------------------


@dataclass
class AsmResult:
    r: np.ndarray                    # internal force on free dofs
    K: sp.csr_matrix | None          # consistent tangent on free dofs
    n_elements: int                  # elements evaluated in this call
    max_D: float
    sat_points: int
    local_iters: int


class FemProvider:
    """Owns mesh, quadrature states and assembly for one boundary value problem.

    States are double-buffered: ``assemble`` writes trial states for the
    evaluated material points, ``commit`` moves them into the committed
    buffer once a step is accepted. The reference load vector is assembled
    once from the dead surface tractions; the load level is a scalar factor
    applied by the solver.
    """

    def __init__(
        self,
        mesh: "Mesh",
        params: MaterialParams,
        dofmap: DofMap,
        loads: list[TractionLoad],
        monitor_set: str = "point_A",
        monitor_comp: int | None = None,
        drive: DisplacementDrive | None = None,
    ):
        self.mesh = mesh
        self.params = params
        self.dofmap = dofmap
        self.geom = element_geometry(mesh)
        m = mesh.n_elems
        self.committed = GpState.virgin(m * N_GP)
        self.trial = self.committed.copy()
        self._dirty: np.ndarray | None = None

        p0 = np.zeros(4 * mesh.n_nodes)
        for load in loads:
            p0 += face_load_vector(mesh, load.side_set, load.traction)
        self.p0_full = p0
        self.p0_free = dofmap.restrict(p0)
        # resultant of the reference load, one entry per direction
        self.ref_force = np.array([p0[c::4].sum() for c in range(3)])

        self.drive = drive
        self._drive_scale = 0.0
        self.last_reaction = 0.0
        if drive is not None:
            if drive.node_set not in mesh.node_sets:
                raise ValueError(f"unknown node set {drive.node_set!r} for the drive")
            nodes = mesh.node_sets[drive.node_set]
            self._drive_dofs = np.array([u_dof(int(n), drive.comp) for n in nodes])
            free_set = set(dofmap.free.tolist())
            loose = [d for d in self._drive_dofs.tolist() if d in free_set]
            if loose:
                raise ValueError(
                    "driven dofs must be fixed in the dof map; "
                    f"node set {drive.node_set!r} component {drive.comp} is free"
                )
            self.u_hat_full = np.zeros(4 * mesh.n_nodes)
            self.u_hat_full[self._drive_dofs] = drive.value
        else:
            self._drive_dofs = np.zeros(0, dtype=int)
            self.u_hat_full = None

        if monitor_comp is None:
            if loads:
                monitor_comp = int(np.argmax(np.abs(self.ref_force)))
            elif drive is not None:
                monitor_comp = drive.comp
            else:
                monitor_comp = 1
        self.monitor_comp = monitor_comp
        if monitor_set in mesh.node_sets:
            self.monitor_node = int(mesh.node_sets[monitor_set][0])
        elif drive is not None and not loads:
            self.monitor_node = int(mesh.node_sets[drive.node_set][0])
        else:
            # no named monitor point: fall back to the most loaded node
            self.monitor_node = int(np.argmax(np.abs(p0[monitor_comp::4])))
        self.monitor_dof = u_dof(self.monitor_node, monitor_comp)

        # convergence scales: applied load for the u rows, penalty times the
        # tributary volume for the micromorphic rows
        scale_u = float(np.max(np.abs(self.p0_free))) if self.p0_free.size else 0.0
        if scale_u <= 0.0:
            scale_u = 1.0
        scale_d = params.pen_h * self.geom.volume / mesh.n_nodes
        scale_full = np.empty(4 * mesh.n_nodes)
        scale_full[:] = scale_u
        scale_full[3::4] = scale_d
        self.res_scale_free = dofmap.restrict(scale_full)

        self._k_lin: sp.csr_matrix | None = None
        self.counters = {
            "assemble_calls": 0,
            "tangent_calls": 0,
            "elements_evaluated": 0,
            "material_points": 0,
        }

    # -- state management ---------------------------------------------------------

    @property
    def n_elems(self) -> int:
        return self.mesh.n_elems

    @property
    def ndof_free(self) -> int:
        return self.dofmap.ndof_free

    def reset(self) -> None:
        n = self.mesh.n_elems * N_GP
        self.committed = GpState.virgin(n)
        self.trial = self.committed.copy()
        self._dirty = None
        self._drive_scale = 0.0
        self.last_reaction = 0.0

    @property
    def has_displacement_drive(self) -> bool:
        return self.drive is not None

    def set_load_factor(self, lam: float) -> None:
        """Scale the prescribed-displacement pattern; no-op without a drive."""
        self._drive_scale = float(lam)

    def commit(self) -> None:
        """Accept the trial states written by the last assemble call."""
        if self._dirty is None:
            return
        self.committed.scatter_from(self.trial.gather(self._dirty), self._dirty)
        self._dirty = None

    # -- assembly ----------------------------------------------------------------

    def assemble(
        self,
        u_free: np.ndarray,
        tangent: bool = True,
        elements: np.ndarray | None = None,
    ) -> AsmResult:
        p = self.params
        geom = self.geom
        if elements is None:
            sel = np.arange(self.mesh.n_elems)
        else:
            sel = np.asarray(elements, dtype=np.int64)
        dNdX = geom.dNdX[sel]
        w = geom.wdetJ[sel]
        edofs = geom.edofs[sel]

        U = self.expand_with_drive(u_free)
        ue = U[geom.u_dofs[sel]].reshape(-1, 8, 3)
        de = U[geom.d_dofs[sel]]

        F = np.einsum("mai,mgaJ->mgiJ", ue, dNdX, optimize=True)
        F += np.eye(3)
        C = np.einsum("mgkI,mgkJ->mgIJ", F, F, optimize=True)
        Dbar = np.einsum("ga,ma->mg", SHP, de)
        gradD = np.einsum("mgaJ,ma->mgJ", dNdX, de, optimize=True)

        flat = (sel[:, None] * N_GP + np.arange(N_GP)).ravel()
        st_old = self.committed.gather(flat)
        nb = flat.size
        C_b = C.reshape(nb, 3, 3)
        Dbar_b = Dbar.ravel()
        try:
            upd = material.gp_update(st_old, C_b, Dbar_b, p)
            tan = material.gp_tangents(st_old, C_b, Dbar_b, p, base=upd) if tangent else None
        except MaterialUpdateError as err:
            where = ""
            if err.indices is not None and err.indices.size:
                i = int(err.indices[0])
                where = f" (element {int(sel[i // N_GP])}, gp {i % N_GP}, and possibly others)"
            raise MaterialUpdateError(f"material update failed{where}: {err}") from err

        sat = upd.saturated.reshape(-1, N_GP)
        dead = np.flatnonzero(sat.all(axis=1))
        if dead.size:
            raise FullyDamagedError(
                f"fully damaged: element {int(sel[dead[0]])} has every quadrature "
                f"point at the damage cap"
            )
        self.trial.scatter_from(upd.state, flat)
        self._dirty = flat

        ms = sel.size
        S = upd.S.reshape(ms, N_GP, 6)
        Dloc = upd.D.reshape(ms, N_GP)
        B = _b_matrix(F, dNdX)

        r_u = np.einsum("mgkq,mgk,mg->mq", B, S, w, optimize=True)
        r_d = p.pen_h * np.einsum("ga,mg,mg->ma", SHP, Dloc - Dbar, w, optimize=True)
        r_d -= p.grad_a * np.einsum("mgaJ,mgJ,mg->ma", dNdX, gradD, w, optimize=True)
        re = np.concatenate([r_u, r_d], axis=1)

        r_full = np.zeros(self.dofmap.ndof)
        np.add.at(r_full, edofs.ravel(), re.ravel())
        r_free = self.dofmap.restrict(r_full)
        if self.drive is not None and elements is None:
            self.last_reaction = float(np.sum(r_full[self._drive_dofs]))

        K_free = None
        if tangent:
            dSdE = tan.dS_dE.reshape(ms, N_GP, 6, 6)
            dSdDb = tan.dS_dDbar.reshape(ms, N_GP, 6)
            dDdE = tan.dD_dE.reshape(ms, N_GP, 6)
            dDdDb = tan.dD_dDbar.reshape(ms, N_GP)

            k_uu = np.einsum("mgkq,mgkl,mglp,mg->mqp", B, dSdE, B, w, optimize=True)
            Smat = material.voigt_to_sym(S)
            sab = np.einsum("mgaI,mgIJ,mgbJ,mg->mab", dNdX, Smat, dNdX, w, optimize=True)
            k_uu += np.einsum("mab,ij->maibj", sab, np.eye(3)).reshape(ms, 24, 24)

            k_ud = np.einsum("mgkq,mgk,gb,mg->mqb", B, dSdDb, SHP, w, optimize=True)
            k_du = p.pen_h * np.einsum("ga,mgk,mgkq,mg->maq", SHP, dDdE, B, w, optimize=True)
            k_dd = p.pen_h * np.einsum("ga,gb,mg,mg->mab", SHP, SHP, dDdDb - 1.0, w, optimize=True)
            k_dd -= p.grad_a * np.einsum("mgaJ,mgbJ,mg->mab", dNdX, dNdX, w, optimize=True)

            Ke = np.empty((ms, 32, 32))
            Ke[:, :24, :24] = k_uu
            Ke[:, :24, 24:] = k_ud
            Ke[:, 24:, :24] = k_du
            Ke[:, 24:, 24:] = k_dd
            rows = np.broadcast_to(edofs[:, :, None], (ms, 32, 32))
            cols = np.broadcast_to(edofs[:, None, :], (ms, 32, 32))
            n = self.dofmap.ndof
            K = sp.coo_matrix(
                (Ke.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)
            ).tocsr()
            K_free = K[self.dofmap.free][:, self.dofmap.free]
            self.counters["tangent_calls"] += 1

        self.counters["assemble_calls"] += 1
        self.counters["elements_evaluated"] += ms
        self.counters["material_points"] += nb
        return AsmResult(
            r=r_free,
            K=K_free,
            n_elements=ms,
            max_D=float(Dloc.max()) if Dloc.size else 0.0,
            sat_points=int(upd.saturated.sum()),
            local_iters=upd.iters,
        )

    def k_lin(self) -> sp.csr_matrix:
        """Tangent at zero displacement and virgin state; assembled once."""
        if self._k_lin is None:
            stash_c, stash_t, stash_d = self.committed, self.trial, self._dirty
            stash_s, stash_r = self._drive_scale, self.last_reaction
            try:
                self.committed = GpState.virgin(self.mesh.n_elems * N_GP)
                self.trial = self.committed.copy()
                self._drive_scale = 0.0
                out = self.assemble(np.zeros(self.dofmap.ndof_free), tangent=True)
                self._k_lin = out.K
            finally:
                self.committed, self.trial, self._dirty = stash_c, stash_t, stash_d
                self._drive_scale, self.last_reaction = stash_s, stash_r
        return self._k_lin

    # -- monitors -----------------------------------------------------------------

    def expand_with_drive(self, u_free: np.ndarray) -> np.ndarray:
        """Full dof vector, including the scaled prescribed-displacement pattern."""
        U = self.dofmap.expand(np.asarray(u_free, dtype=np.float64))
        if self.drive is not None:
            U[self._drive_dofs] += self._drive_scale * self.drive.value
        return U

    def u_monitor(self, u_free: np.ndarray) -> float:
        """Displacement component at the monitor node."""
        return float(self.expand_with_drive(u_free)[self.monitor_dof])

    def dbar_max(self, u_free: np.ndarray) -> float:
        """Maximum micromorphic damage value over all nodes."""
        return float(self.dofmap.expand(u_free)[3::4].max())

    def dbar_field(self, u_free: np.ndarray) -> np.ndarray:
        return self.dofmap.expand(u_free)[3::4].copy()
