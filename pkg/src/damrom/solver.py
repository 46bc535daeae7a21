"""Incremental solvers for proportional loading: Newton load control and
Ramm arc-length continuation.

Both solvers operate on a *system provider*, a duck-typed object exposing

* ``ndof_free`` (int), ``p0_free`` (reference load, free dofs),
* ``res_scale_free`` (per-row residual scales for the force test),
* ``assemble(u, tangent=...)`` returning an object with ``.r`` (internal
  force) and ``.K`` (tangent, sparse or dense),
* ``commit()`` to accept the trial internal state of the last assemble,
* ``u_monitor(u)`` and ``dbar_max(u)`` scalars for path reporting.

The full-order finite element provider and the reduced-order system both
satisfy this protocol, so the continuation logic is written once.

Equilibrium is phrased as ``G(u, lam) = R_int(u) - lam * P0 = 0`` with a
scalar load factor ``lam``.  The arc-length corrector keeps every Newton
update orthogonal to the predictor increment (normal-plane constraint with
a fixed plane), which yields one extra triangular solve per iteration on a
shared factorization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .fem import FullyDamagedError
from .material import MaterialUpdateError

__all__ = [
    "NewtonSettings",
    "ArcSettings",
    "NewtonInfo",
    "PathPoint",
    "RunResult",
    "SolveError",
    "newton_solve",
    "run_load_sequence",
    "run_arc_length",
    "predictor_sign_switch",
    "TwoBarTruss",
]

_TINY = 1e-300


class SolveError(RuntimeError):
    """A load or continuation step failed beyond the retry budget.

    ``partial`` carries the path accepted before the failure so callers can
    flush intermediate results.
    """

    def __init__(self, message: str, partial: "RunResult | None" = None):
        super().__init__(message)
        self.partial = partial


# Failures worth retrying with a smaller increment; anything else is a bug
# or a hard structural failure and propagates.
_RETRYABLE = (MaterialUpdateError, FullyDamagedError, numerics.SingularSystemError, FloatingPointError)


@dataclass(frozen=True)
class NewtonSettings:
    """Convergence controls for one equilibrium solve.

    Convergence requires both tests at once: the incremental energy
    ``|G . du|`` must fall below ``tol_energy`` times its first-iteration
    value, and the residual must satisfy ``max|G_i / scale_i| <= tol_force``.
    A residual four orders below ``tol_force`` accepts on its own; on an
    exactly linear step the energy reference never contracts (the first
    update is also the last), so the force test must be able to finish
    alone.
    """

    tol_energy: float = 1e-10
    tol_force: float = 1e-8
    max_iter: int = 25

    @property
    def tol_force_alone(self) -> float:
        return 1e-4 * self.tol_force


@dataclass(frozen=True)
class ArcSettings:
    """Controls for an arc-length continuation run.

    ``dlam0`` is the load increment used to build the first predictor; the
    arc radius ``ds0`` defaults to the norm of that first predictor so the
    opening step reproduces a plain load increment of ``dlam0``.
    """

    dlam0: float = 0.05
    ds0: float | None = None
    n_steps: int = 50
    max_retries: int = 4
    lam_max: float | None = None
    lam_abs_max: float | None = None
    newton: NewtonSettings = field(default_factory=NewtonSettings)

    def __post_init__(self):
        if self.dlam0 == 0.0:
            raise ValueError("dlam0 must be nonzero")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if self.ds0 is not None and self.ds0 <= 0.0:
            raise ValueError("ds0 must be positive")


@dataclass
class NewtonInfo:
    """Outcome of one Newton solve."""

    converged: bool
    n_iter: int
    energy: float
    energy_ref: float
    gnorm: float
    wall: float
    wall_lin: float


@dataclass
class PathPoint:
    """One accepted point of an equilibrium path."""

    step: int
    lam: float
    u: np.ndarray
    r_int: np.ndarray
    u_monitor: float
    dbar_max: float
    n_iter: int
    wall: float
    wall_lin: float
    reaction: float = 0.0
    ds: float = 0.0
    predictor_norm: float = 0.0
    orth_max: float = 0.0
    stiffness_ratio: float = 1.0
    predictor_sign: float = 1.0
    retries: int = 0
    sat_points: int = 0


@dataclass
class RunResult:
    """Accepted path points plus snapshot matrices of the converged states."""

    points: list[PathPoint]
    meta: dict = field(default_factory=dict)

    @property
    def lam(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def u_monitor(self) -> np.ndarray:
        return np.array([p.u_monitor for p in self.points])

    @property
    def dbar_max(self) -> np.ndarray:
        return np.array([p.dbar_max for p in self.points])

    def snapshots(self) -> np.ndarray:
        """Converged free-dof solutions, one column per accepted step."""
        return np.column_stack([p.u for p in self.points])

    def force_snapshots(self) -> np.ndarray:
        """Internal force vectors at the converged states, one per column."""
        return np.column_stack([p.r_int for p in self.points])

    def iteration_stats(self) -> tuple[int, float, float]:
        """Total corrector iterations and summed wall / linear-algebra time."""
        it = sum(p.n_iter for p in self.points)
        return it, sum(p.wall for p in self.points), sum(p.wall_lin for p in self.points)


def _scaled_norm(g: np.ndarray, scale: np.ndarray) -> float:
    return float(np.max(np.abs(g) / scale)) if g.size else 0.0


def newton_solve(provider, u0: np.ndarray, lam: float, settings: NewtonSettings):
    """Equilibrium solve at fixed load factor ``lam`` starting from ``u0``.

    Returns ``(u, out, info)`` where ``out`` is the assemble result at the
    final iterate (its trial state matches ``u``, so a subsequent
    ``provider.commit()`` accepts this solution).  Never raises on
    nonconvergence; inspect ``info.converged``.

    Under displacement control ``lam`` scales the prescribed-displacement
    pattern of the provider instead of a load vector; the provider opts in
    through a ``set_load_factor`` hook.
    """
    hook = getattr(provider, "set_load_factor", None)
    if hook is not None:
        hook(lam)
    p0 = provider.p0_free
    scale = provider.res_scale_free
    u = np.array(u0, dtype=float, copy=True)
    energy = np.inf
    energy_ref = 0.0
    wall_lin = 0.0
    t0 = time.perf_counter()
    out = provider.assemble(u, tangent=True)
    n_iter = 0
    converged = False
    gnorm = np.inf
    for _ in range(settings.max_iter):
        g = out.r - lam * p0
        gnorm = _scaled_norm(g, scale)
        energy_ok = energy <= settings.tol_energy * max(energy_ref, _TINY) or energy_ref == 0.0
        if gnorm <= settings.tol_force and (energy_ok or gnorm <= settings.tol_force_alone):
            converged = True
            break
        t1 = time.perf_counter()
        fac = numerics.factorize_any(out.K)
        du = fac.solve(-g)
        wall_lin += time.perf_counter() - t1
        energy = abs(float(g @ du))
        if n_iter == 0:
            energy_ref = energy
        u += du
        n_iter += 1
        out = provider.assemble(u, tangent=True)
        if not np.all(np.isfinite(out.r)):
            break  # diverged iterate; report nonconvergence
    wall = time.perf_counter() - t0
    info = NewtonInfo(converged, n_iter, energy, energy_ref, gnorm, wall, wall_lin)
    return u, out, info


class _StepDiverged(Exception):
    """Internal: one load target failed even at the smallest subdivision."""

    def __init__(self, info: NewtonInfo):
        super().__init__("diverged")
        self.info = info


def _advance_load(provider, u, lam_from, lam_to, settings, halvings_left, stats):
    """Newton toward ``lam_to``; on failure, bisect the load interval.

    Intermediate targets serve only as warm-start waypoints: nothing is
    committed here, so the converged state at ``lam_to`` is identical to a
    direct solve (assembly always restarts from the committed state).
    """
    u_new, out, info = newton_solve(provider, u, lam_to, settings)
    stats["n_iter"] += info.n_iter
    stats["wall"] += info.wall
    stats["wall_lin"] += info.wall_lin
    if info.converged:
        return u_new, out
    if halvings_left <= 0:
        raise _StepDiverged(info)
    mid = 0.5 * (lam_from + lam_to)
    u_mid, _ = _advance_load(provider, u, lam_from, mid, settings, halvings_left - 1, stats)
    return _advance_load(provider, u_mid, mid, lam_to, settings, halvings_left - 1, stats)


def run_load_sequence(
    provider,
    lam_values,
    settings: NewtonSettings | None = None,
    max_halvings: int = 4,
) -> RunResult:
    """Track a prescribed load-factor sequence under pure load control.

    A failed target is retried through bisected warm-start waypoints, up to
    ``max_halvings`` deep (``max_halvings=0`` gives the plain textbook
    scheme, which provably cannot pass a limit point).  States commit only
    at the requested load values.  This is the replay driver for
    reduced-order verification.
    """
    settings = settings or NewtonSettings()
    u = np.zeros(provider.ndof_free)
    lam_prev = 0.0
    points: list[PathPoint] = []
    for step, lam in enumerate(np.atleast_1d(np.asarray(lam_values, dtype=float)), start=1):
        stats = {"n_iter": 0, "wall": 0.0, "wall_lin": 0.0}
        try:
            u, out = _advance_load(
                provider, u, lam_prev, float(lam), settings, max_halvings, stats
            )
        except _StepDiverged as err:
            raise SolveError(
                f"load step {step} at lam={lam:.6g} did not converge "
                f"(scaled residual {err.info.gnorm:.3e} after {max_halvings} "
                f"subdivisions)",
                partial=RunResult(points, meta={"mode": "load-control"}),
            ) from err
        except _RETRYABLE as err:
            raise SolveError(
                f"load step {step} at lam={lam:.6g} failed: {err}",
                partial=RunResult(points, meta={"mode": "load-control"}),
            ) from err
        provider.commit()
        lam_prev = float(lam)
        points.append(
            PathPoint(
                step=step,
                lam=float(lam),
                u=u.copy(),
                r_int=np.array(out.r, dtype=float, copy=True),
                u_monitor=float(provider.u_monitor(u)),
                dbar_max=float(provider.dbar_max(u)),
                n_iter=stats["n_iter"],
                wall=stats["wall"],
                wall_lin=stats["wall_lin"],
                reaction=float(getattr(provider, "last_reaction", 0.0)),
                sat_points=int(getattr(out, "sat_points", 0)),
            )
        )
    return RunResult(points, meta={"mode": "load-control"})


def predictor_sign_switch(rc: float, rc_prev: float, rc_prev2: float) -> bool:
    """Sign-flip heuristic on the stiffness-ratio history of the predictor.

    ``rc`` is the current ratio of the first-step load-direction stiffness
    to the current one; a sign change paired with a monotone approach in
    the two preceding ratios marks the traversal of a limit point, where
    the load direction of the predictor must reverse.
    """
    if rc_prev > 0.0 and rc < 0.0 and rc_prev < rc_prev2:
        return True
    if rc_prev < 0.0 and rc > 0.0 and rc_prev > rc_prev2:
        return True
    return False


class _StepRetry(Exception):
    """Internal: the current arc step should be retried with a smaller radius."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class _ArcMemory:
    """Continuation state carried across accepted steps."""

    sign: float = 1.0
    rc_prev: float = 1.0
    rc_prev2: float = 1.0
    c0: float | None = None
    ds0: float | None = None


def _arc_step(provider, u, lam, mem: _ArcMemory, ds_scale: float, settings: ArcSettings):
    """One predictor/corrector arc-length step.  Raises ``_StepRetry``."""
    p0 = provider.p0_free
    scale = provider.res_scale_free
    nws = settings.newton
    wall_lin = 0.0
    t0 = time.perf_counter()

    # Predictor: tangent solve against the residual of a trial load bump.
    try:
        out = provider.assemble(u, tangent=True)
        g_bump = out.r - (lam + settings.dlam0) * p0
        fac = numerics.factorize_any(out.K)
        t1 = time.perf_counter()
        du1 = fac.solve(-g_bump)
        wall_lin += time.perf_counter() - t1
    except (numerics.SingularSystemError, FloatingPointError) as err:
        raise _StepRetry(f"predictor: {err}") from err
    ds_trial = float(np.linalg.norm(du1))
    if not np.isfinite(ds_trial) or ds_trial <= 0.0:
        raise _StepRetry("predictor produced a degenerate tangent direction")
    if mem.ds0 is None:
        mem.ds0 = settings.ds0 if settings.ds0 is not None else ds_trial
    ds = mem.ds0 * ds_scale

    c = float(du1 @ p0)
    if mem.c0 is None:
        mem.c0 = c if c != 0.0 else 1.0
    rc = mem.c0 / c if c != 0.0 else np.inf
    sign = -mem.sign if predictor_sign_switch(rc, mem.rc_prev, mem.rc_prev2) else mem.sign

    alpha = sign * ds / ds_trial
    du_pred = alpha * du1
    u_new = u + du_pred
    lam_new = lam + alpha * settings.dlam0
    pred_norm = float(np.linalg.norm(du_pred))

    # Corrector: Newton in the plane orthogonal to the predictor increment.
    energy = np.inf
    energy_ref = 0.0
    orth_max = 0.0
    n_iter = 0
    converged = False
    out = None
    for _ in range(nws.max_iter):
        try:
            out = provider.assemble(u_new, tangent=True)
        except _RETRYABLE as err:
            raise _StepRetry(f"corrector assemble: {err}") from err
        if not np.all(np.isfinite(out.r)):
            raise _StepRetry("corrector produced a non-finite residual")
        g = out.r - lam_new * p0
        gnorm = _scaled_norm(g, scale)
        energy_ok = energy <= nws.tol_energy * max(energy_ref, _TINY) or energy_ref == 0.0
        if gnorm <= nws.tol_force and (energy_ok or gnorm <= nws.tol_force_alone):
            converged = True
            break
        try:
            fac = numerics.factorize_any(out.K)
            t1 = time.perf_counter()
            du_g = fac.solve(-g)
            du_p = fac.solve(p0)
            wall_lin += time.perf_counter() - t1
        except numerics.SingularSystemError as err:
            raise _StepRetry(f"corrector: {err}") from err
        denom = float(du_pred @ du_p)
        if denom == 0.0 or not np.isfinite(denom):
            raise _StepRetry("corrector constraint became degenerate")
        dlam = -float(du_pred @ du_g) / denom
        du = du_g + dlam * du_p
        # One reorthogonalization pass keeps the normal-plane identity at
        # roundoff level even when the two solves nearly cancel.
        du -= (float(du_pred @ du) / float(du_pred @ du_pred)) * du_pred
        energy = abs(float(g @ du))
        if n_iter == 0:
            energy_ref = energy
        nrm_du = float(np.linalg.norm(du))
        if nrm_du > 1e-12 * pred_norm:
            # Below that size the update is pure roundoff and the identity
            # holds trivially; the cosine ratio is meaningless there.
            orth_max = max(
                orth_max, abs(float(du_pred @ du)) / (pred_norm * nrm_du)
            )
        u_new = u_new + du
        lam_new += dlam
        n_iter += 1
        if not np.isfinite(lam_new) or not np.all(np.isfinite(u_new)):
            raise _StepRetry("corrector iterate diverged")
    if not converged:
        raise _StepRetry(f"corrector did not converge in {nws.max_iter} iterations")

    wall = time.perf_counter() - t0
    return {
        "u": u_new,
        "lam": lam_new,
        "out": out,
        "n_iter": n_iter,
        "wall": wall,
        "wall_lin": wall_lin,
        "ds": ds,
        "predictor_norm": pred_norm,
        "orth_max": orth_max,
        "rc": rc,
        "sign": sign,
    }


def run_arc_length(provider, settings: ArcSettings) -> RunResult:
    """Trace an equilibrium path with Ramm arc-length continuation.

    Starts from the unloaded committed state of ``provider``.  Failed steps
    are retried with a halved radius up to ``max_retries`` times; every step
    starts fresh at the base radius regardless of how much the previous one
    had to back off.  The fresh start matters near sharp limit points: the
    healthy corrector there needs a radius comparable to the base one, while
    a radius inherited from retries just before the fold is too small to
    step across it and the run stalls on the ascending branch.  Raises
    :class:`SolveError` when the retry budget is exhausted, and propagates
    structural failures (for example fully damaged elements) unchanged.
    """
    if getattr(provider, "has_displacement_drive", False):
        raise ValueError(
            "arc-length continuation requires a load-parameterized system; "
            "use run_load_sequence for a prescribed-displacement drive"
        )
    u = np.zeros(provider.ndof_free)
    lam = 0.0
    mem = _ArcMemory()
    points: list[PathPoint] = []
    for step in range(1, settings.n_steps + 1):
        res = None
        reasons = []
        ds_scale = 1.0
        for attempt in range(settings.max_retries + 1):
            try:
                res = _arc_step(provider, u, lam, mem, ds_scale, settings)
                break
            except _StepRetry as err:
                reasons.append(err.reason)
                ds_scale *= 0.5
        if res is None:
            raise SolveError(
                f"arc step {step} failed after {settings.max_retries} radius "
                f"halvings (last: {reasons[-1]})",
                partial=RunResult(points, meta={"mode": "arc-length", "ds0": mem.ds0}),
            )
        u = res["u"]
        lam = res["lam"]
        provider.commit()
        mem.rc_prev2 = mem.rc_prev
        mem.rc_prev = res["rc"]
        mem.sign = res["sign"]
        points.append(
            PathPoint(
                step=step,
                lam=lam,
                u=u.copy(),
                r_int=np.array(res["out"].r, dtype=float, copy=True),
                u_monitor=float(provider.u_monitor(u)),
                dbar_max=float(provider.dbar_max(u)),
                n_iter=res["n_iter"],
                wall=res["wall"],
                wall_lin=res["wall_lin"],
                ds=res["ds"],
                predictor_norm=res["predictor_norm"],
                orth_max=res["orth_max"],
                stiffness_ratio=res["rc"],
                predictor_sign=res["sign"],
                retries=len(reasons),
                sat_points=int(getattr(res["out"], "sat_points", 0)),
            )
        )
        if settings.lam_max is not None and lam >= settings.lam_max:
            break
        if settings.lam_abs_max is not None and abs(lam) >= settings.lam_abs_max:
            break
    return RunResult(points, meta={"mode": "arc-length", "ds0": mem.ds0})


@dataclass
class _ScalarAsm:
    r: np.ndarray
    K: np.ndarray
    sat_points: int = 0
    max_D: float = 0.0


class TwoBarTruss:
    """Shallow two-bar (von Mises) truss, apex dofs ``(ux, uy)``, ``y`` up.

    Green-strain bars of stiffness ``E A`` run from supports at
    ``(-w1, 0)`` and ``(w2, 0)`` to the apex at ``(ux, h0 + uy)``; the
    reference load is a unit downward force at the apex.  In the symmetric
    configuration the downward deflection ``d = -uy`` follows the
    closed-form snap-through curve

        ``lam(d) = E A h (h0^2 - h^2) / L0^3``,   ``h = h0 - d``,

    with limit points at ``h = h0/sqrt(3)``.  An asymmetric span makes the
    apex path genuinely two-dimensional, which exercises the corrector
    constraint away from the collinear special case.  Implements the
    system provider protocol.
    """

    def __init__(self, ea=1.0, h0: float = 1.0, w=2.0):
        ea1, ea2 = (ea, ea) if np.isscalar(ea) else ea
        w1, w2 = (w, w) if np.isscalar(w) else w
        if min(ea1, ea2, w1, w2, h0) <= 0.0:
            raise ValueError("truss parameters must be positive")
        self.ea = (float(ea1), float(ea2))
        self.h0 = float(h0)
        self.supports = np.array([[-float(w1), 0.0], [float(w2), 0.0]])
        self.l0 = np.hypot([w1, w2], h0)
        self.p0_free = np.array([0.0, -1.0])
        self.res_scale_free = np.array([1.0, 1.0])
        self.counters = {"assemble_calls": 0}

    @property
    def ndof_free(self) -> int:
        return 2

    @property
    def symmetric(self) -> bool:
        return self.ea[0] == self.ea[1] and self.supports[0, 0] == -self.supports[1, 0]

    def analytic_lambda(self, defl: float) -> float:
        """Closed-form load factor at downward deflection ``defl`` (symmetric)."""
        if not self.symmetric:
            raise ValueError("closed-form curve requires the symmetric truss")
        h = self.h0 - defl
        l0 = float(self.l0[0])
        return self.ea[0] * h * (self.h0**2 - h**2) / l0**3

    def limit_points(self) -> tuple[float, float]:
        """Deflection and load factor of the first (maximum) limit point."""
        d = self.h0 * (1.0 - 1.0 / np.sqrt(3.0))
        return d, self.analytic_lambda(d)

    def assemble(self, u_free: np.ndarray, tangent: bool = True, elements=None) -> _ScalarAsm:
        self.counters["assemble_calls"] += 1
        apex = np.array([u_free[0], self.h0 + u_free[1]])
        r = np.zeros(2)
        k = np.zeros((2, 2))
        for ea, l0, sup in zip(self.ea, self.l0, self.supports):
            d = apex - sup
            strain = (d @ d - l0**2) / (2.0 * l0**2)
            r += ea * strain * d / l0
            k += ea * (np.outer(d, d) / l0**3 + strain / l0 * np.eye(2))
        return _ScalarAsm(r=r, K=k)

    def k_lin(self) -> np.ndarray:
        """Tangent at the undeformed state (reference for the nonlinear split)."""
        return self.assemble(np.zeros(2)).K

    def commit(self) -> None:
        pass

    def reset(self) -> None:
        pass

    def u_monitor(self, u_free: np.ndarray) -> float:
        """Downward apex deflection."""
        return -float(u_free[1])

    def dbar_max(self, u_free: np.ndarray) -> float:
        return 0.0
