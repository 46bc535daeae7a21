"""Two-surface finite-strain damage-plasticity point model.

The local response at a quadrature point: compressible Neo-Hookean
elasticity on the elastic stretch, a Mandel-stress driven yield surface with
saturating isotropic and Armstrong-Frederick style kinematic hardening
(multiplicative split of the plastic deformation into energetic and
dissipative parts), and a separate damage surface with exponentially
saturating damage hardening. Local damage D is coupled to a micromorphic
field value Dbar through a quadratic penalty; the gradient part of the
micromorphic energy lives at the element level where the field gradient is
known.

All state updates are rate-independent backward-Euler return maps with an
active-set treatment of the two surfaces, vectorized over a batch of Gauss
points. Tensors are stored as (N, 3, 3) arrays; Voigt 6-vectors use the
order xx, yy, zz, xy, yz, xz with factor-2 shear for strain-like quantities
and factor-1 for stress-like quantities (repo-wide convention).

Units: stresses and energy densities in MPa, lengths in mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GpState",
    "MaterialParams",
    "MaterialUpdateError",
    "PARAMS_NOTCHED",
    "PARAMS_PLATE",
    "Tangents",
    "UpdateResult",
    "conjugate_forces",
    "f_dam",
    "f_dam_prime",
    "free_energy",
    "gp_tangents",
    "gp_update",
    "yield_functions",
]

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))

LOCAL_TOL = 1e-10       # scaled residual target of the local Newton
LOCAL_TOL_ACCEPT = 1e-8  # stall acceptance bound (matches the KKT contract)
LOCAL_MAX_ITER = 50
MAX_SWEEPS = 3
_SQ32 = np.sqrt(1.5)


class MaterialUpdateError(RuntimeError):
    """Local return mapping failed to converge or settle its active set."""

    def __init__(self, message: str, indices: np.ndarray | None = None):
        self.indices = np.asarray(indices, dtype=np.int64) if indices is not None else None
        super().__init__(message)


@dataclass(frozen=True)
class MaterialParams:
    """Constitutive parameters.

    lam, mu      : Lame constants of the Neo-Hookean elastic law [MPa]
    sigma0       : initial yield stress [MPa]
    a, b         : kinematic hardening modulus [MPa] / saturation rate [-]
    e, f         : isotropic hardening modulus [MPa] / saturation rate [-]
    y0           : damage threshold [MPa]
    r, s         : damage hardening modulus [MPa] / saturation rate [-]
    grad_a       : micromorphic gradient parameter [MPa mm^2]
    pen_h        : micromorphic penalty modulus [MPa]
    k_dam        : exponent of the degradation function (1 - D)^k_dam
    d_cap        : saturation cap on local damage
    """

    lam: float
    mu: float
    sigma0: float
    a: float
    b: float
    e: float
    f: float
    y0: float
    r: float
    s: float
    grad_a: float
    pen_h: float
    k_dam: float = 2.0
    d_cap: float = 1.0 - 1e-6

    def __post_init__(self):
        for name in ("lam", "mu", "sigma0", "a", "e", "y0", "r", "grad_a", "pen_h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"material parameter {name} must be positive")
        for name in ("b", "f", "s"):
            if getattr(self, name) < 0:
                raise ValueError(f"material parameter {name} must be nonnegative")
        if self.k_dam < 1.0:
            raise ValueError("degradation exponent k_dam must be >= 1")
        if not 0.0 < self.d_cap < 1.0:
            raise ValueError("d_cap must lie in (0, 1)")

    @property
    def internal_length(self) -> float:
        """sqrt(grad_a / pen_h), the regularization length [mm]."""
        return float(np.sqrt(self.grad_a / self.pen_h))


# study parameter sets (plate with hole / asymmetrically notched specimen)
PARAMS_PLATE = MaterialParams(
    lam=75000.0, mu=140000.0, sigma0=325.0, a=2600.0, b=12.5, e=500.0, f=8.0,
    y0=10.0, r=0.5, s=1.0, grad_a=50.0, pen_h=1e5,
)
PARAMS_NOTCHED = MaterialParams(
    lam=25000.0, mu=55000.0, sigma0=100.0, a=62.5, b=2.5, e=125.0, f=5.0,
    y0=2.5, r=5.0, s=100.0, grad_a=75.0, pen_h=1e5,
)


def f_dam(D: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Degradation function (1 - D)^k_dam."""
    return (1.0 - D) ** params.k_dam


def f_dam_prime(D: np.ndarray, params: MaterialParams) -> np.ndarray:
    return -params.k_dam * (1.0 - D) ** (params.k_dam - 1.0)


# --- small batched tensor helpers ---------------------------------------------

_I3 = np.eye(3)


def _det3(T: np.ndarray) -> np.ndarray:
    return (
        T[..., 0, 0] * (T[..., 1, 1] * T[..., 2, 2] - T[..., 1, 2] * T[..., 2, 1])
        - T[..., 0, 1] * (T[..., 1, 0] * T[..., 2, 2] - T[..., 1, 2] * T[..., 2, 0])
        + T[..., 0, 2] * (T[..., 1, 0] * T[..., 2, 1] - T[..., 1, 1] * T[..., 2, 0])
    )


def _inv3(T: np.ndarray) -> np.ndarray:
    det = _det3(T)
    out = np.empty_like(T)
    out[..., 0, 0] = T[..., 1, 1] * T[..., 2, 2] - T[..., 1, 2] * T[..., 2, 1]
    out[..., 0, 1] = T[..., 0, 2] * T[..., 2, 1] - T[..., 0, 1] * T[..., 2, 2]
    out[..., 0, 2] = T[..., 0, 1] * T[..., 1, 2] - T[..., 0, 2] * T[..., 1, 1]
    out[..., 1, 0] = T[..., 1, 2] * T[..., 2, 0] - T[..., 1, 0] * T[..., 2, 2]
    out[..., 1, 1] = T[..., 0, 0] * T[..., 2, 2] - T[..., 0, 2] * T[..., 2, 0]
    out[..., 1, 2] = T[..., 0, 2] * T[..., 1, 0] - T[..., 0, 0] * T[..., 1, 2]
    out[..., 2, 0] = T[..., 1, 0] * T[..., 2, 1] - T[..., 1, 1] * T[..., 2, 0]
    out[..., 2, 1] = T[..., 0, 1] * T[..., 2, 0] - T[..., 0, 0] * T[..., 2, 1]
    out[..., 2, 2] = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
    return out / det[..., None, None]


def _dev(T: np.ndarray) -> np.ndarray:
    tr = np.trace(T, axis1=-2, axis2=-1) / 3.0
    out = T.copy()
    out[..., 0, 0] -= tr
    out[..., 1, 1] -= tr
    out[..., 2, 2] -= tr
    return out


def sym_to_voigt(T: np.ndarray, engineering: bool = False) -> np.ndarray:
    """Symmetric (N,3,3) -> (N,6); factor-2 shear if strain-like."""
    fac = 2.0 if engineering else 1.0
    return np.stack(
        [
            T[..., 0, 0], T[..., 1, 1], T[..., 2, 2],
            fac * T[..., 0, 1], fac * T[..., 1, 2], fac * T[..., 0, 2],
        ],
        axis=-1,
    )


def voigt_to_sym(v: np.ndarray, engineering: bool = False) -> np.ndarray:
    fac = 0.5 if engineering else 1.0
    out = np.empty(v.shape[:-1] + (3, 3))
    out[..., 0, 0], out[..., 1, 1], out[..., 2, 2] = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = out[..., 1, 0] = fac * v[..., 3]
    out[..., 1, 2] = out[..., 2, 1] = fac * v[..., 4]
    out[..., 0, 2] = out[..., 2, 0] = fac * v[..., 5]
    return out


# --- state containers ------------------------------------------------------------


@dataclass
class GpState:
    """Internal state of a batch of Gauss points.

    Cp, Cpi are the plastic and the dissipative-plastic right Cauchy-Green
    tensors (SPD), xi_p/xi_d the accumulated plastic/damage hardening
    variables, D the local damage in [0, 1).
    """

    Cp: np.ndarray
    Cpi: np.ndarray
    xi_p: np.ndarray
    xi_d: np.ndarray
    D: np.ndarray

    @classmethod
    def virgin(cls, n: int) -> "GpState":
        eye = np.broadcast_to(_I3, (n, 3, 3)).copy()
        return cls(eye, eye.copy(), np.zeros(n), np.zeros(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.Cp.shape[0]

    def copy(self) -> "GpState":
        return GpState(
            self.Cp.copy(), self.Cpi.copy(), self.xi_p.copy(), self.xi_d.copy(), self.D.copy()
        )

    def gather(self, idx: np.ndarray) -> "GpState":
        """Sub-batch at the given flat indices (views are copied)."""
        return GpState(
            self.Cp[idx].copy(), self.Cpi[idx].copy(),
            self.xi_p[idx].copy(), self.xi_d[idx].copy(), self.D[idx].copy(),
        )

    def scatter_from(self, src: "GpState", idx: np.ndarray) -> None:
        """Write the sub-batch ``src`` into this state at the flat indices."""
        self.Cp[idx] = src.Cp
        self.Cpi[idx] = src.Cpi
        self.xi_p[idx] = src.xi_p
        self.xi_d[idx] = src.xi_d
        self.D[idx] = src.D

    def validate(self) -> None:
        """Invariant check (SPD states, bounded damage); test/diagnostic use."""
        for name, T in (("Cp", self.Cp), ("Cpi", self.Cpi)):
            if not np.allclose(T, np.swapaxes(T, -1, -2), atol=1e-10):
                raise ValueError(f"{name} lost symmetry")
            np.linalg.cholesky(T)  # raises if not positive definite
        if np.any(self.xi_p < -1e-12) or np.any(self.xi_d < -1e-12):
            raise ValueError("hardening variables must be nonnegative")
        if np.any(self.D < -1e-12) or np.any(self.D >= 1.0):
            raise ValueError("damage must lie in [0, 1)")


@dataclass
class UpdateResult:
    state: GpState
    S: np.ndarray        # (N, 6) second Piola-Kirchhoff stress, Voigt factor-1
    D: np.ndarray        # (N,) local damage after the update
    active_p: np.ndarray
    active_d: np.ndarray
    dlam_p: np.ndarray
    dlam_d: np.ndarray
    phi_p: np.ndarray
    phi_d: np.ndarray
    saturated: np.ndarray
    iters: int


@dataclass
class Tangents:
    """Central-difference algorithmic tangents of the converged update map."""

    dS_dE: np.ndarray      # (N, 6, 6), engineering-Voigt strain
    dS_dDbar: np.ndarray   # (N, 6)
    dD_dE: np.ndarray      # (N, 6)
    dD_dDbar: np.ndarray   # (N,)


# --- energies and forces ---------------------------------------------------------


def _psi_elastic(C, Cp, params, iCp=None):
    iCp = _inv3(Cp) if iCp is None else iCp
    tr_ce = np.einsum("...ij,...ji->...", C, iCp)
    det_ce = _det3(C) / _det3(Cp)
    log_det = np.log(det_ce)
    return (
        0.5 * params.mu * (tr_ce - 3.0 - log_det)
        + 0.25 * params.lam * (det_ce - 1.0 - log_det)
    )


def _psi_plastic(Cp, Cpi, xi_p, params, iCpi=None):
    iCpi = _inv3(Cpi) if iCpi is None else iCpi
    tr_cpe = np.einsum("...ij,...ji->...", Cp, iCpi)
    det_cpe = _det3(Cp) / _det3(Cpi)
    tensor = 0.5 * params.a * (tr_cpe - 3.0 - np.log(det_cpe))
    iso = params.e * (xi_p + (np.exp(-params.f * xi_p) - 1.0) / params.f)
    return tensor + iso


@dataclass
class EnergyParts:
    elastic: np.ndarray
    plastic: np.ndarray
    damage_hardening: np.ndarray
    penalty: np.ndarray
    gradient: np.ndarray
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total = (
            self.elastic + self.plastic + self.damage_hardening + self.penalty + self.gradient
        )


def free_energy(
    state: GpState,
    C: np.ndarray,
    Dbar: np.ndarray,
    params: MaterialParams,
    grad_dbar: np.ndarray | None = None,
) -> EnergyParts:
    """Helmholtz energy parts; elastic/plastic parts are returned degraded.

    ``grad_dbar`` is the (N, 3) micromorphic field gradient if available
    (the element level owns it); its part is zero when omitted.
    """
    C, Dbar, state = _lift(C, Dbar, state)
    fd = f_dam(state.D, params)
    psi_e = fd * _psi_elastic(C, state.Cp, params)
    psi_p = fd * _psi_plastic(state.Cp, state.Cpi, state.xi_p, params)
    psi_d = params.r * (state.xi_d + (np.exp(-params.s * state.xi_d) - 1.0) / params.s)
    pen = 0.5 * params.pen_h * (state.D - Dbar) ** 2
    if grad_dbar is None:
        grad = np.zeros_like(pen)
    else:
        grad = 0.5 * params.grad_a * np.einsum("...i,...i->...", grad_dbar, grad_dbar)
    return EnergyParts(psi_e, psi_p, psi_d, pen, grad)


def _second_pk(C, Cp, D, params, iCp=None, iC=None):
    """Degraded second Piola-Kirchhoff stress as (N, 3, 3)."""
    iCp = _inv3(Cp) if iCp is None else iCp
    iC = _inv3(C) if iC is None else iC
    jr = _det3(C) / _det3(Cp)
    fd = f_dam(D, params)[..., None, None]
    return fd * (params.mu * (iCp - iC) + 0.5 * params.lam * (jr[..., None, None] - 1.0) * iC)


def _mandel_eff(C, Cp, Cpi, params, iCp=None, iCpi=None):
    """Effective Mandel-type driving stress (degradation cancels)."""
    iCp = _inv3(Cp) if iCp is None else iCp
    iCpi = _inv3(Cpi) if iCpi is None else iCpi
    jr = _det3(C) / _det3(Cp)
    Y = params.mu * (C @ iCp - _I3) - params.a * (Cp @ iCpi - _I3)
    diag = 0.5 * params.lam * (jr - 1.0)
    Y[..., 0, 0] += diag
    Y[..., 1, 1] += diag
    Y[..., 2, 2] += diag
    return Y


def _eq_stress(Ydev):
    """sqrt(3/2 * tr(Ydev @ Ydev)); nonnegative because Ydev Cp is symmetric."""
    sq = np.einsum("...ij,...ji->...", Ydev, Ydev)
    return _SQ32 * np.sqrt(np.maximum(sq, 0.0))


@dataclass
class ConjugateForces:
    S: np.ndarray          # (N, 6) Voigt stress
    X: np.ndarray          # (N, 3, 3) kinematic back-stress tensor
    q_p: np.ndarray        # isotropic plastic hardening stress (degraded)
    q_d: np.ndarray        # damage hardening stress
    Y_drive: np.ndarray    # energetic driving force of the damage surface
    mandel_eff: np.ndarray  # (N, 3, 3) effective Mandel-type stress


def conjugate_forces(
    state: GpState, C: np.ndarray, Dbar: np.ndarray, params: MaterialParams
) -> ConjugateForces:
    C, Dbar, state = _lift(C, Dbar, state)
    iCp, iCpi = _inv3(state.Cp), _inv3(state.Cpi)
    fd = f_dam(state.D, params)
    S = sym_to_voigt(_second_pk(C, state.Cp, state.D, params, iCp=iCp))
    X = fd[..., None, None] * params.a * (iCpi - iCp)
    q_p = fd * params.e * (1.0 - np.exp(-params.f * state.xi_p))
    q_d = params.r * (1.0 - np.exp(-params.s * state.xi_d))
    psi = _psi_elastic(C, state.Cp, params, iCp=iCp) + _psi_plastic(
        state.Cp, state.Cpi, state.xi_p, params, iCpi=iCpi
    )
    Y_drive = -f_dam_prime(state.D, params) * psi - params.pen_h * (state.D - Dbar)
    Ytil = _mandel_eff(C, state.Cp, state.Cpi, params, iCp=iCp, iCpi=iCpi)
    return ConjugateForces(S, X, q_p, q_d, Y_drive, Ytil)


def yield_functions(
    state: GpState, C: np.ndarray, Dbar: np.ndarray, params: MaterialParams
) -> tuple[np.ndarray, np.ndarray]:
    """Both surface values evaluated directly at the given state."""
    C, Dbar, state = _lift(C, Dbar, state)
    Ytil = _mandel_eff(C, state.Cp, state.Cpi, params)
    phi_p = _eq_stress(_dev(Ytil)) - (
        params.sigma0 + params.e * (1.0 - np.exp(-params.f * state.xi_p))
    )
    psi = _psi_elastic(C, state.Cp, params) + _psi_plastic(
        state.Cp, state.Cpi, state.xi_p, params
    )
    Y_drive = -f_dam_prime(state.D, params) * psi - params.pen_h * (state.D - Dbar)
    phi_d = Y_drive - (params.y0 + params.r * (1.0 - np.exp(-params.s * state.xi_d)))
    return phi_p, phi_d


# --- local return mapping ---------------------------------------------------------


def _lift(C, Dbar, state: GpState | None = None):
    C = np.asarray(C, dtype=np.float64)
    scalar = C.ndim == 2
    if scalar:
        C = C[None]
    Dbar = np.atleast_1d(np.asarray(Dbar, dtype=np.float64))
    if Dbar.shape[0] == 1 and C.shape[0] > 1:
        Dbar = np.broadcast_to(Dbar, (C.shape[0],)).copy()
    if state is not None and state.Cp.ndim == 2:
        state = GpState(
            state.Cp[None], state.Cpi[None],
            np.atleast_1d(state.xi_p), np.atleast_1d(state.xi_d), np.atleast_1d(state.D),
        )
    if state is None:
        return C, Dbar
    return C, Dbar, state


def _sym6(T):
    return np.stack(
        [T[..., 0, 0], T[..., 1, 1], T[..., 2, 2], T[..., 0, 1], T[..., 1, 2], T[..., 0, 2]],
        axis=-1,
    )


def _unsym6(v):
    return voigt_to_sym(v, engineering=False)


class _LocalProblem:
    """Residuals of the coupled backward-Euler system on one active-set group.

    Unknown layout: [Cp(6), Cpi(6), dlam_p] when plasticity is active,
    appended [dlam_d] when damage is active; just [dlam_d] for damage-only.
    All arrays are restricted to the group's Gauss points.
    """

    def __init__(self, C, Cp_n, Cpi_n, xi_p_n, xi_d_n, D_n, Dbar, params, has_p, has_d):
        self.C, self.Cp_n, self.Cpi_n = C, Cp_n, Cpi_n
        self.xi_p_n, self.xi_d_n, self.D_n = xi_p_n, xi_d_n, D_n
        self.Dbar, self.p = Dbar, params
        self.has_p, self.has_d = has_p, has_d
        self.nu = (13 if has_p else 0) + (1 if has_d else 0)
        self.scale_p = max(params.sigma0, 1.0)
        self.scale_d = max(params.y0, 1.0)

    def x0(self):
        parts = []
        if self.has_p:
            parts += [_sym6(self.Cp_n), _sym6(self.Cpi_n), np.zeros((self.C.shape[0], 1))]
        if self.has_d:
            parts += [np.zeros((self.C.shape[0], 1))]
        return np.concatenate(parts, axis=1)

    def unpack(self, x, sel):
        if self.has_p:
            Cp = _unsym6(x[:, 0:6])
            Cpi = _unsym6(x[:, 6:12])
            dlp = x[:, 12]
            dld = x[:, 13] if self.has_d else np.zeros(len(x))
        else:
            Cp, Cpi = self.Cp_n[sel], self.Cpi_n[sel]
            dlp = np.zeros(len(x))
            dld = x[:, 0]
        return Cp, Cpi, dlp, dld

    def residual(self, x, sel):
        p = self.p
        C = self.C[sel]
        Cp, Cpi, dlp, dld = self.unpack(x, sel)
        D = np.minimum(self.D_n[sel] + dld, 1.0 - 1e-9)
        fd = (1.0 - D) ** p.k_dam
        xi_p = self.xi_p_n[sel] + dlp / fd
        xi_d = self.xi_d_n[sel] + dld
        cols = []
        if self.has_p:
            iCp, iCpi = _inv3(Cp), _inv3(Cpi)
            Ytil = _mandel_eff(C, Cp, Cpi, p, iCp=iCp, iCpi=iCpi)
            Ydev = _dev(Ytil)
            nrm = np.sqrt(np.maximum(np.einsum("nij,nji->n", Ydev, Ydev), 1e-30))
            Np = Ydev @ Cp / nrm[:, None, None]
            r_cp = Cp - self.Cp_n[sel] - (2.0 * _SQ32 * dlp / fd)[:, None, None] * Np
            flow_i = _dev(Cp @ iCpi) @ Cpi
            r_cpi = Cpi - self.Cpi_n[sel] - (2.0 * p.b * dlp)[:, None, None] * flow_i
            phi_p = _SQ32 * nrm - (p.sigma0 + p.e * (1.0 - np.exp(-p.f * xi_p)))
            cols += [_sym6(r_cp), _sym6(r_cpi), (phi_p / self.scale_p)[:, None]]
        if self.has_d:
            psi = _psi_elastic(C, Cp, p) + _psi_plastic(Cp, Cpi, xi_p, p)
            y_drive = (
                p.k_dam * (1.0 - D) ** (p.k_dam - 1.0) * psi
                - p.pen_h * (D - self.Dbar[sel])
            )
            phi_d = y_drive - (p.y0 + p.r * (1.0 - np.exp(-p.s * xi_d)))
            cols += [(phi_d / self.scale_d)[:, None]]
        return np.concatenate(cols, axis=1)


def _newton_group(prob: _LocalProblem, x0, sel_all, tol=LOCAL_TOL, max_iter=LOCAL_MAX_ITER):
    """Damped Newton with a forward-difference Jacobian; returns (x, ok, iters)."""
    x = x0.copy()
    n, nu = x.shape
    ok = np.zeros(n, dtype=bool)
    live = np.arange(n)
    iters = 0
    R = prob.residual(x, sel_all)
    while live.size and iters < max_iter:
        sel = sel_all[live]
        xl, Rl = x[live], R[live]
        J = np.empty((live.size, nu, nu))
        for j in range(nu):
            h = 1.5e-8 * np.maximum(np.abs(xl[:, j]), 1.0)
            xp = xl.copy()
            xp[:, j] += h
            J[:, :, j] = (prob.residual(xp, sel) - Rl) / h[:, None]
        try:
            dx = -np.linalg.solve(J, Rl[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dx = np.empty_like(Rl)
            for i in range(live.size):
                try:
                    dx[i] = -np.linalg.solve(J[i], Rl[i])
                except np.linalg.LinAlgError:
                    dx[i] = -np.linalg.lstsq(J[i], Rl[i], rcond=None)[0]
        # damped accept: halve steps whose residual blows up or goes non-finite
        step = np.ones(live.size)
        base = np.abs(Rl).max(axis=1)
        for _ in range(4):
            xn = xl + step[:, None] * dx
            Rn = prob.residual(xn, sel)
            bad = ~np.all(np.isfinite(Rn), axis=1) | (
                (np.abs(Rn).max(axis=1) > np.maximum(1e3 * base, 1e3)) & (step > 0.26)
            )
            if not bad.any():
                break
            step[bad] *= 0.5
        else:
            xn = xl + step[:, None] * dx
            Rn = prob.residual(xn, sel)
        x[live], R[live] = xn, Rn
        done = np.abs(Rn).max(axis=1) <= tol
        ok[live[done]] = True
        live = live[~done]
        iters += 1
    if live.size:
        # accept stalled points that still satisfy the outer KKT bound
        resid = np.abs(R[live]).max(axis=1)
        accept = resid <= LOCAL_TOL_ACCEPT
        ok[live[accept]] = True
        live = live[~accept]
    return x, ok, iters, live


def gp_update(
    state_old: GpState,
    C_new: np.ndarray,
    Dbar_new: np.ndarray,
    params: MaterialParams,
    warm: UpdateResult | None = None,
) -> UpdateResult:
    """Backward-Euler update of a batch of Gauss points.

    Elastic trial, activation of violated surfaces, coupled local Newton on
    the active set, then multiplier/readmission sweeps (at most 3). Raises
    :class:`MaterialUpdateError` with the offending batch indices when the
    local Newton or the active-set loop fails.
    """
    C, Dbar, st = _lift(C_new, Dbar_new, state_old)
    n = C.shape[0]
    if st.n != n:
        raise ValueError(f"state batch size {st.n} does not match input batch {n}")
    detC = _det3(C)
    if not np.all(np.isfinite(C)) or np.any(detC <= 0.0):
        bad = np.flatnonzero(~np.isfinite(detC) | (detC <= 0.0))
        raise MaterialUpdateError(
            f"material update failed: nonpositive or non-finite det(C) at "
            f"{bad.size} points", indices=bad,
        )

    Cp = st.Cp.copy()
    Cpi = st.Cpi.copy()
    dlp = np.zeros(n)
    dld = np.zeros(n)
    saturated = np.zeros(n, dtype=bool)

    phi_p_t, phi_d_t = yield_functions(st, C, Dbar, params)
    act_p = phi_p_t > 0.0
    act_d = phi_d_t > 0.0
    dirty = act_p | act_d
    total_iters = 0

    re_tol_p = 1e-9 * max(params.sigma0, 1.0)
    re_tol_d = 1e-9 * max(params.y0, 1.0)

    for sweep in range(MAX_SWEEPS + 1):
        for has_p, has_d in ((True, False), (False, True), (True, True)):
            sel = np.flatnonzero(dirty & (act_p == has_p) & (act_d == has_d))
            if sel.size == 0 or not (has_p or has_d):
                continue
            prob = _LocalProblem(
                C[sel], st.Cp[sel], st.Cpi[sel], st.xi_p[sel], st.xi_d[sel], st.D[sel],
                Dbar[sel], params, has_p, has_d,
            )
            x0 = prob.x0()
            if warm is not None:
                match = (
                    (warm.active_p[sel] == has_p) & (warm.active_d[sel] == has_d)
                )
                if match.any():
                    xw = _warm_x(warm, sel[match], has_p, has_d)
                    x0[match] = xw
            x, ok, iters, failed = _newton_group(prob, x0, np.arange(sel.size))
            total_iters = max(total_iters, iters)
            if failed.size:
                raise MaterialUpdateError(
                    f"local return mapping failed at {failed.size} of {sel.size} points "
                    f"(group plastic={has_p}, damage={has_d})",
                    indices=sel[failed],
                )
            Cp_g, Cpi_g, dlp_g, dld_g = prob.unpack(x, np.arange(sel.size))
            Cp[sel], Cpi[sel], dlp[sel], dld[sel] = Cp_g, Cpi_g, dlp_g, dld_g

        # damage cap: clamp and mark, keep the multiplier bound active
        D_new = st.D + dld
        over = act_d & (D_new > params.d_cap)
        if over.any():
            dld[over] = params.d_cap - st.D[over]
            saturated |= over

        # evaluate both surfaces at the current values
        cand = _make_state(st, Cp, Cpi, dlp, dld, params)
        phi_p_c, phi_d_c = yield_functions(cand, C, Dbar, params)

        neg_p = act_p & (dlp < 0.0)
        neg_d = act_d & (dld < 0.0) & ~saturated
        re_p = ~act_p & (phi_p_c > re_tol_p)
        re_d = ~act_d & (phi_d_c > re_tol_d) & ~saturated

        changed = neg_p | neg_d | re_p | re_d
        if not changed.any():
            break
        if sweep == MAX_SWEEPS:
            raise MaterialUpdateError(
                f"active set failed to settle after {MAX_SWEEPS} sweeps "
                f"({int(changed.sum())} points)",
                indices=np.flatnonzero(changed),
            )
        # reset dropped surfaces, then re-solve everything that changed
        drop_p = neg_p
        drop_d = neg_d
        Cp[drop_p], Cpi[drop_p], dlp[drop_p] = st.Cp[drop_p], st.Cpi[drop_p], 0.0
        dld[drop_d] = 0.0
        act_p = (act_p & ~neg_p) | re_p
        act_d = (act_d & ~neg_d) | re_d
        dirty = changed

    state_new = _make_state(st, Cp, Cpi, dlp, dld, params)
    iC = _inv3(C)
    S = sym_to_voigt(_second_pk(C, state_new.Cp, state_new.D, params, iC=iC))
    phi_p_f, phi_d_f = yield_functions(state_new, C, Dbar, params)
    return UpdateResult(
        state=state_new,
        S=S,
        D=state_new.D.copy(),
        active_p=act_p,
        active_d=act_d,
        dlam_p=dlp,
        dlam_d=dld,
        phi_p=phi_p_f,
        phi_d=phi_d_f,
        saturated=saturated,
        iters=total_iters,
    )


def _make_state(st_old: GpState, Cp, Cpi, dlp, dld, params) -> GpState:
    D = st_old.D + dld
    fd = (1.0 - np.minimum(D, 1.0 - 1e-9)) ** params.k_dam
    return GpState(
        Cp=Cp.copy(),
        Cpi=Cpi.copy(),
        xi_p=st_old.xi_p + dlp / fd,
        xi_d=st_old.xi_d + dld,
        D=D,
    )


def _warm_x(warm: UpdateResult, idx, has_p, has_d):
    parts = []
    if has_p:
        parts += [
            _sym6(warm.state.Cp[idx]),
            _sym6(warm.state.Cpi[idx]),
            warm.dlam_p[idx][:, None],
        ]
    if has_d:
        parts += [warm.dlam_d[idx][:, None]]
    return np.concatenate(parts, axis=1)


def gp_tangents(
    state_old: GpState,
    C_new: np.ndarray,
    Dbar_new: np.ndarray,
    params: MaterialParams,
    base: UpdateResult | None = None,
    rel_c: float = 1e-6,
    abs_dbar: float = 1e-6,
) -> Tangents:
    """Algorithmic tangents by central differences on the converged update.

    Perturbs the six independent components of C (relative step ``rel_c``)
    and the micromorphic value (absolute step ``abs_dbar``), re-running the
    update from the old state each time; warm-started from the base solve.
    """
    C, Dbar, st = _lift(C_new, Dbar_new, state_old)
    if base is None:
        base = gp_update(st, C, Dbar, params)
    n = C.shape[0]
    dS_dE = np.empty((n, 6, 6))
    dD_dE = np.empty((n, 6))
    for beta, (i, j) in enumerate(VOIGT_PAIRS):
        h = rel_c * np.maximum(np.abs(C[:, i, j]), 1.0)
        Cp_ = C.copy()
        Cm_ = C.copy()
        if i == j:
            Cp_[:, i, i] += h
            Cm_[:, i, i] -= h
            span = h  # engineering strain span between the two evaluations
        else:
            Cp_[:, i, j] += h
            Cp_[:, j, i] += h
            Cm_[:, i, j] -= h
            Cm_[:, j, i] -= h
            span = 2.0 * h
        rp = gp_update(st, Cp_, Dbar, params, warm=base)
        rm = gp_update(st, Cm_, Dbar, params, warm=base)
        dS_dE[:, :, beta] = (rp.S - rm.S) / span[:, None]
        dD_dE[:, beta] = (rp.D - rm.D) / span
    rp = gp_update(st, C, Dbar + abs_dbar, params, warm=base)
    rm = gp_update(st, C, Dbar - abs_dbar, params, warm=base)
    dS_dDbar = (rp.S - rm.S) / (2.0 * abs_dbar)
    dD_dDbar = (rp.D - rm.D) / (2.0 * abs_dbar)
    return Tangents(dS_dE, dS_dDbar, dD_dE, dD_dDbar)
