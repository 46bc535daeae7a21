"""Projection-based model order reduction with hyperreduction.

Offline stage: a truncated singular value decomposition of converged
solution snapshots yields an orthonormal displacement basis (POD), and a
greedy row-selection on singular modes of the nonlinear internal-force
snapshots yields interpolation indices (DEIM) plus the small precomputed
operators of the reduced equations.

Online stage: :class:`RomSystem` wraps a full-order finite element
provider and exposes the system-provider protocol in the reduced
coordinates, so the same Newton and arc-length drivers run unchanged.
Element evaluations touch only the elements adjacent to the selected
dofs, which is where the speedup comes from.

The nonlinear force component is always measured against the virgin-state
linear stiffness: ``R_nl(U) = R(U) - K_lin U``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import meshing, numerics
from .fem import N_COMP

__all__ = [
    "PodBasis",
    "DeimOperators",
    "DeimError",
    "pod_build",
    "deim_indices",
    "deim_build",
    "RomSystem",
    "save_rom_artifacts",
    "load_rom_artifacts",
    "ARTIFACT_FORMAT",
]

ARTIFACT_FORMAT = "rom-artifacts-v1"

# singular values at or below this fraction of the largest count as zero
RANK_RTOL = 1e-12


class DeimError(RuntimeError):
    """Index selection failed: rank deficiency or a degenerate pick."""


@dataclass
class PodBasis:
    """Orthonormal snapshot basis with the full singular value ladder.

    ``row_weights`` records an optional diagonal row scaling applied to the
    snapshots before the decomposition (mixed displacement/micromorphic
    vectors have inhomogeneous units); the basis is then orthonormal in the
    scaled coordinates and the online reduced equations do not apply.
    """

    phi: np.ndarray
    sigma: np.ndarray
    m: int
    row_weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def truncation_energy(self, m: int | None = None) -> float:
        """Discarded snapshot energy ``sum_{i>m} sigma_i^2``."""
        m = self.m if m is None else m
        return float(np.sum(self.sigma[m:] ** 2))

    def project(self, u: np.ndarray) -> np.ndarray:
        return self.phi.T @ u

    def reconstruct(self, u_red: np.ndarray) -> np.ndarray:
        return self.phi @ u_red

    def orthonormality_defect(self) -> float:
        g = self.phi.T @ self.phi
        return float(np.max(np.abs(g - np.eye(self.m))))


def pod_build(snapshots: np.ndarray, m: int, row_weights: np.ndarray | None = None) -> PodBasis:
    """First ``m`` left singular vectors of the raw snapshot matrix.

    Snapshots enter uncentered, one converged solution per column.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2:
        raise ValueError(f"snapshot matrix must be 2-D, got shape {S.shape}")
    n, l = S.shape
    if not 1 <= m <= min(n, l):
        raise ValueError(f"mode count m={m} outside 1..min(n,l)={min(n, l)}")
    if row_weights is not None:
        row_weights = np.asarray(row_weights, dtype=float)
        if row_weights.shape != (n,) or np.any(row_weights <= 0.0):
            raise ValueError("row_weights must be positive with one entry per dof")
        S = S * row_weights[:, None]
    U, sig, _ = numerics.thin_svd(S)
    return PodBasis(phi=U[:, :m].copy(), sigma=sig, m=m, row_weights=row_weights)


def deim_indices(modes: np.ndarray) -> np.ndarray:
    """Greedy interpolation-index selection on force modes.

    Walks the modes in order: the first index is the argmax of the first
    mode's magnitudes; each further mode is interpolated on the indices
    found so far and the largest residual row is appended.  Ties resolve
    to the lowest index.  Raises :class:`DeimError` when a duplicate row
    is selected or the interpolation system degenerates, both of which
    signal rank-deficient input.
    """
    modes = np.asarray(modes, dtype=float)
    if modes.ndim != 2 or modes.shape[1] < 1:
        raise ValueError(f"modes must be n x k with k >= 1, got shape {modes.shape}")
    n, k = modes.shape
    idx = np.empty(k, dtype=np.int64)
    idx[0] = int(np.argmax(np.abs(modes[:, 0])))
    for i in range(1, k):
        sel = idx[:i]
        try:
            c = np.linalg.solve(modes[sel][:, :i], modes[sel, i])
        except np.linalg.LinAlgError as err:
            raise DeimError(
                f"DEIM selection degenerate: interpolation system singular at mode {i + 1}"
            ) from err
        r = modes[:, i] - modes[:, :i] @ c
        pick = int(np.argmax(np.abs(r)))
        if pick in idx[:i]:
            raise DeimError(
                f"DEIM selection degenerate: duplicate index {pick} at mode {i + 1}"
            )
        idx[i] = pick
    return idx


@dataclass
class DeimOperators:
    """Precomputed online operators for one (basis, k) pair.

    ``m_deim`` is the oblique projection factor ``Phi^T Omega (Z^T Omega)^-1``;
    ``k_lin_red`` the reduced virgin-state stiffness; ``elem_subset`` exactly
    the elements adjacent to the nodes of the selected dofs.
    """

    omega: np.ndarray
    z_idx: np.ndarray
    m_deim: np.ndarray
    k_lin_red: np.ndarray
    elem_subset: np.ndarray
    cond_zt_omega: float
    sigma_r: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return int(self.z_idx.size)


def numerical_rank(sigma: np.ndarray) -> int:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 0 or sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > RANK_RTOL * sigma[0]))


def nonlinear_force_snapshots(u_snapshots: np.ndarray, r_snapshots: np.ndarray, k_lin) -> np.ndarray:
    """Nonlinear internal-force component ``R - K_lin U`` per snapshot column."""
    return np.asarray(r_snapshots, dtype=float) - k_lin @ np.asarray(u_snapshots, dtype=float)


def deim_build(force_snapshots: np.ndarray, k: int, basis: PodBasis, provider) -> DeimOperators:
    """Select ``k`` interpolation dofs and precompute the reduced operators.

    ``force_snapshots`` holds the nonlinear internal-force component at the
    converged training states, one column per step.  ``provider`` supplies
    the virgin-state stiffness, the dof map and the mesh adjacency for the
    element subset.
    """
    if basis.row_weights is not None:
        raise ValueError("online reduced operators require an unweighted basis")
    D = np.asarray(force_snapshots, dtype=float)
    if D.ndim != 2:
        raise ValueError(f"force snapshot matrix must be 2-D, got shape {D.shape}")
    if D.shape[0] != basis.n:
        raise ValueError("force snapshots and basis disagree on dof count")
    if k < 1:
        raise ValueError("k must be positive")
    omega_all, sigma_r, _ = numerics.thin_svd(D)
    rank = numerical_rank(sigma_r)
    if k > rank:
        raise DeimError(
            f"insufficient nonlinear rank: requested k={k}, achievable k={rank}"
        )
    omega = omega_all[:, :k].copy()
    z_idx = deim_indices(omega)
    zt_omega = omega[z_idx]
    cond = float(np.linalg.cond(zt_omega))
    # M = (Phi^T Omega) (Z^T Omega)^-1, solved transposed to avoid the inverse
    m_deim = np.linalg.solve(zt_omega.T, (basis.phi.T @ omega).T).T

    k_lin = provider.k_lin()
    k_lin_red = basis.phi.T @ (k_lin @ basis.phi)

    nodes = np.unique(provider.dofmap.free[z_idx] // N_COMP)
    n2e = meshing.node_to_elements(provider.mesh)
    subset = np.unique(np.concatenate([n2e[int(n)] for n in nodes]))
    return DeimOperators(
        omega=omega,
        z_idx=z_idx,
        m_deim=m_deim,
        k_lin_red=k_lin_red,
        elem_subset=subset,
        cond_zt_omega=cond,
        sigma_r=sigma_r,
    )


@dataclass
class _RomAsm:
    r: np.ndarray
    K: np.ndarray | None
    sat_points: int = 0
    max_D: float = 0.0


class RomSystem:
    """Reduced system provider: hyperreduced residual and tangent.

    The reduced residual is ``K_lin_red u_red + M_DEIM Z^T R_nl(Phi u_red)``
    and the reduced tangent ``K_lin_red + M_DEIM Z^T (K_T - K_lin) Phi``,
    both evaluated from a subset-only assembly of the wrapped full-order
    provider.  Internal variables evolve only at the subset elements, which
    is the intended hyperreduction semantics.
    """

    def __init__(self, provider, basis: PodBasis, ops: DeimOperators):
        if basis.row_weights is not None:
            raise ValueError("online reduced system requires an unweighted basis")
        if getattr(provider, "has_displacement_drive", False):
            # the reduced residual parameterizes the load through lam * p0;
            # a prescribed-displacement pattern has no such vector
            raise ValueError("the reduced system requires a load-parameterized provider")
        if basis.n != provider.ndof_free:
            raise ValueError("basis dof count does not match the provider")
        if ops.m_deim.shape[0] != basis.m:
            raise ValueError("operators were built for a different mode count")
        self.provider = provider
        self.basis = basis
        self.ops = ops
        k_lin = provider.k_lin()
        self._k_lin_z = k_lin[ops.z_idx]
        self._k_lin_z_phi = self._k_lin_z @ basis.phi
        self.p0_free = basis.phi.T @ provider.p0_free
        scale = float(np.max(np.abs(self.p0_free)))
        self.res_scale_free = np.full(basis.m, scale if scale > 0.0 else 1.0)
        self.counters = provider.counters

    @property
    def ndof_free(self) -> int:
        return self.basis.m

    def reconstruct(self, u_red: np.ndarray) -> np.ndarray:
        return self.basis.reconstruct(u_red)

    def assemble(self, u_red: np.ndarray, tangent: bool = True, elements=None) -> _RomAsm:
        if elements is not None:
            raise ValueError("the reduced system owns its element subset")
        ubar = self.basis.reconstruct(u_red)
        out = self.provider.assemble(ubar, tangent=tangent, elements=self.ops.elem_subset)
        r_nl_z = out.r[self.ops.z_idx] - self._k_lin_z @ ubar
        r_red = self.ops.k_lin_red @ u_red + self.ops.m_deim @ r_nl_z
        K_red = None
        if tangent:
            kt_z_phi = out.K[self.ops.z_idx] @ self.basis.phi
            K_red = self.ops.k_lin_red + self.ops.m_deim @ (kt_z_phi - self._k_lin_z_phi)
        return _RomAsm(r=r_red, K=K_red, sat_points=out.sat_points, max_D=out.max_D)

    def commit(self) -> None:
        self.provider.commit()

    def reset(self) -> None:
        self.provider.reset()

    def u_monitor(self, u_red: np.ndarray) -> float:
        return self.provider.u_monitor(self.basis.reconstruct(u_red))

    def dbar_max(self, u_red: np.ndarray) -> float:
        return self.provider.dbar_max(self.basis.reconstruct(u_red))

    def dbar_field(self, u_red: np.ndarray) -> np.ndarray:
        return self.provider.dbar_field(self.basis.reconstruct(u_red))


# --- artifact files -----------------------------------------------------------
# One directory per offline build: manifest.json plus SNP1 matrix blocks;
# every block is hashed into the manifest for provenance checks at load.

_MATRIX_FILES = {
    "phi": lambda b, o: b.phi,
    "sigma": lambda b, o: b.sigma.reshape(-1, 1),
    "omega": lambda b, o: o.omega,
    "m_deim": lambda b, o: o.m_deim,
    "k_lin_red": lambda b, o: o.k_lin_red,
    "sigma_r": lambda b, o: o.sigma_r.reshape(-1, 1),
}


def save_rom_artifacts(
    out_dir: str | Path,
    basis: PodBasis,
    ops: DeimOperators,
    provenance: dict | None = None,
) -> Path:
    """Write basis + operators + provenance to ``out_dir``; returns the path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, get in _MATRIX_FILES.items():
        M = np.asarray(get(basis, ops), dtype=float)
        fname = f"{name}.snp1"
        numerics.write_snp1(out / fname, M)
        files[name] = {"file": fname, "sha256": numerics.content_hash(M)}
    manifest = {
        "format": ARTIFACT_FORMAT,
        "m": basis.m,
        "k": ops.k,
        "z_idx": [int(i) for i in ops.z_idx],
        "elem_subset": [int(e) for e in ops.elem_subset],
        "cond_zt_omega": ops.cond_zt_omega,
        "matrices": files,
        "provenance": provenance or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_rom_artifacts(in_dir: str | Path) -> tuple[PodBasis, DeimOperators, dict]:
    """Read an artifact directory back, verifying format and content hashes."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format") != ARTIFACT_FORMAT:
        raise ValueError(f"not a reduced-order artifact directory: {src}")
    mats = {}
    for name, entry in manifest["matrices"].items():
        M = numerics.read_snp1(src / entry["file"])
        if numerics.content_hash(M) != entry["sha256"]:
            raise ValueError(f"artifact block {name!r} failed its content hash")
        mats[name] = M
    basis = PodBasis(phi=mats["phi"], sigma=mats["sigma"].ravel(), m=int(manifest["m"]))
    ops = DeimOperators(
        omega=mats["omega"],
        z_idx=np.asarray(manifest["z_idx"], dtype=np.int64),
        m_deim=mats["m_deim"],
        k_lin_red=mats["k_lin_red"],
        elem_subset=np.asarray(manifest["elem_subset"], dtype=np.int64),
        cond_zt_omega=float(manifest["cond_zt_omega"]),
        sigma_r=mats["sigma_r"].ravel(),
    )
    return basis, ops, manifest
