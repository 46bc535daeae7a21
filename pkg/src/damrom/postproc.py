"""Error metrics, speedup accounting and CSV export for completed runs.

All metric functions are pure: they consume compact per-run records
(arrays of accepted-step quantities) and return nonnegative scalars.
Reduced and full runs are compared through the same record type, so a
metric can never mix up which side was reduced.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PathRecord",
    "NoLimitLoad",
    "limit_load",
    "eps_ua",
    "eps_pmax",
    "eps_dbar_b",
    "speedup",
    "artificial_unloading",
    "write_path_csv",
    "write_sweep_csv",
    "write_node_field_csv",
    "write_gp_state_csv",
]

# a load maximum must stand out by this fraction of the running peak,
# so corrector wiggle does not masquerade as a limit point
LIMIT_PROMINENCE = 1e-3


class NoLimitLoad(ValueError):
    """The load history is monotone: no limit load to compare."""


@dataclass
class PathRecord:
    """Accepted-path quantities of one run, FOM or ROM alike.

    ``p`` is the physical load measure: ``lambda * p_ref`` with ``p_ref``
    the resultant of the reference load vector under load control, or the
    reaction force under displacement control.
    """

    lam: np.ndarray
    u_monitor: np.ndarray
    p: np.ndarray
    n_iter: np.ndarray
    wall: np.ndarray
    dbar_max: np.ndarray | None = None
    u_norm: np.ndarray | None = None

    @classmethod
    def from_run(cls, result, p_ref: float = 1.0, use_reaction: bool = False) -> "PathRecord":
        """Build a record from a solver ``RunResult``.

        ``use_reaction=True`` takes the recorded reaction force as the load
        measure, which is the physical load on displacement-controlled paths
        where ``lambda`` scales a prescribed displacement.
        """
        pts = result.points
        if not pts:
            raise ValueError("run has no accepted points")
        return cls(
            lam=np.array([pt.lam for pt in pts]),
            u_monitor=np.array([pt.u_monitor for pt in pts]),
            p=np.array(
                [pt.reaction if use_reaction else pt.lam * p_ref for pt in pts]
            ),
            n_iter=np.array([pt.n_iter for pt in pts], dtype=int),
            wall=np.array([pt.wall for pt in pts]),
            dbar_max=np.array([pt.dbar_max for pt in pts]),
            u_norm=np.array([np.linalg.norm(pt.u) for pt in pts]),
        )

    @property
    def n_steps(self) -> int:
        return int(self.lam.size)


def limit_load(p: np.ndarray) -> tuple[int, float]:
    """First local maximum of the load with prominence above 0.1%.

    Returns ``(step index, load value)``.  Raises :class:`NoLimitLoad`
    when the history is monotone up to corrector wiggle.
    """
    p = np.asarray(p, dtype=float)
    running = 0.0
    for i in range(p.size - 1):
        running = max(running, p[i])
        if p[i] < running:
            continue
        # candidate peak: find the dip before the load recovers
        j = i + 1
        dip = p[i]
        while j < p.size and p[j] <= p[i]:
            dip = min(dip, p[j])
            j += 1
        if p[i] - dip > LIMIT_PROMINENCE * running:
            return i, float(p[i])
    raise NoLimitLoad("no limit load: the load history is monotone")


def eps_ua(fom: PathRecord, rom: PathRecord) -> float:
    """Relative monitor-displacement error at the final accepted step."""
    ref = float(fom.u_monitor[-1])
    if ref == 0.0:
        raise ValueError("reference monitor displacement is zero")
    return abs(float(rom.u_monitor[-1]) - ref) / abs(ref)


def eps_pmax(fom: PathRecord, rom: PathRecord) -> float:
    """Relative limit-load error; both paths must exhibit a load maximum."""
    limit_load(fom.p)
    limit_load(rom.p)
    ref = float(np.max(fom.p))
    return abs(float(np.max(rom.p)) - ref) / ref


def eps_dbar_b(fom_field: np.ndarray, rom_field: np.ndarray) -> float:
    """Relative error of the maximum micromorphic damage, final fields."""
    ref = float(np.max(fom_field))
    if ref <= 0.0:
        raise ValueError("reference damage field is zero: error undefined")
    return abs(float(np.max(rom_field)) - ref) / ref


def speedup(fom: PathRecord, rom: PathRecord) -> float:
    """Ratio of mean per-Newton-iteration wall times, full over reduced."""
    it_f = int(np.sum(fom.n_iter))
    it_r = int(np.sum(rom.n_iter))
    if it_f == 0 or it_r == 0:
        raise ValueError("speedup undefined: a run recorded no Newton iterations")
    t_f = float(np.sum(fom.wall)) / it_f
    t_r = float(np.sum(rom.wall)) / it_r
    if t_r <= 0.0:
        raise ValueError("speedup undefined: reduced run recorded no wall time")
    return t_f / t_r


def artificial_unloading(rec: PathRecord, reference: PathRecord | None = None) -> bool:
    """Flag runs that turn back along the path for 3 consecutive steps.

    Both the load factor and the solution norm must decrease together; when
    a full-order reference is given, it must be loading at the same steps,
    otherwise the decrease is genuine structural unloading.
    """
    if rec.u_norm is None:
        raise ValueError("record lacks solution norms")
    lam, un = rec.lam, rec.u_norm
    for t in range(3, rec.n_steps):
        window = range(t - 2, t + 1)
        down = all(lam[j] < lam[j - 1] and un[j] < un[j - 1] for j in window)
        if not down:
            continue
        if reference is None:
            return True
        m = reference.n_steps - 1
        if all(reference.lam[min(j, m)] > reference.lam[min(j - 1, m)] for j in window):
            return True
    return False


# --- file export ----------------------------------------------------------------


def write_path_csv(path: str | Path, rec: PathRecord, config_hash: str = "") -> Path:
    """Per-step path table: t, lambda, u_A, p, p_over_pmax, n_iters, wall_ms."""
    out = Path(path)
    pmax = float(np.max(rec.p)) if rec.p.size else 1.0
    denom = pmax if pmax != 0.0 else 1.0
    with out.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["t", "lambda", "u_A", "p", "p_over_pmax", "n_iters", "wall_ms"])
        for t in range(rec.n_steps):
            w.writerow(
                [
                    t + 1,
                    f"{rec.lam[t]:.12g}",
                    f"{rec.u_monitor[t]:.12g}",
                    f"{rec.p[t]:.12g}",
                    f"{rec.p[t] / denom:.12g}",
                    int(rec.n_iter[t]),
                    f"{rec.wall[t] * 1e3:.6g}",
                ]
            )
    return out


SWEEP_COLUMNS = [
    "m",
    "k",
    "eps_uA",
    "eps_pmax",
    "eps_DbarB",
    "speedup",
    "stable",
    "artificial_unloading",
]


def write_sweep_csv(path: str | Path, rows: list[dict], config_hash: str = "") -> Path:
    """Sweep metric table, one row per (m, k) cell.

    Metric keys missing from a row (undefined for that study) are written
    as ``nan``; ``stable`` and ``artificial_unloading`` as 0/1.
    """
    out = Path(path)
    with out.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            rec = []
            for col in SWEEP_COLUMNS:
                val = row.get(col)
                if col in ("m", "k"):
                    rec.append(int(val))
                elif col in ("stable", "artificial_unloading"):
                    rec.append(int(bool(val)))
                elif val is None:
                    rec.append("nan")
                else:
                    rec.append(f"{float(val):.12g}")
            w.writerow(rec)
    return out


def write_node_field_csv(
    path: str | Path, provider, u_free: np.ndarray, config_hash: str = ""
) -> Path:
    """Nodal solution table: node id, coordinates, displacements, damage."""
    out = Path(path)
    expand = getattr(provider, "expand_with_drive", provider.dofmap.expand)
    full = expand(u_free)
    X = provider.mesh.nodes
    with out.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "z", "u_x", "u_y", "u_z", "dbar"])
        for n in range(X.shape[0]):
            w.writerow(
                [n]
                + [f"{X[n, c]:.12g}" for c in range(3)]
                + [f"{full[4 * n + c]:.12g}" for c in range(3)]
                + [f"{full[4 * n + 3]:.12g}"]
            )
    return out


def write_gp_state_csv(path: str | Path, provider, config_hash: str = "") -> Path:
    """Committed internal variables per Gauss point: xi_p, xi_d, D."""
    out = Path(path)
    st = provider.committed
    n_gp = st.n // provider.n_elems
    with out.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["element", "gp", "xi_p", "xi_d", "D"])
        for i in range(st.n):
            w.writerow(
                [
                    i // n_gp,
                    i % n_gp,
                    f"{st.xi_p[i]:.12g}",
                    f"{st.xi_d[i]:.12g}",
                    f"{st.D[i]:.12g}",
                ]
            )
    return out
