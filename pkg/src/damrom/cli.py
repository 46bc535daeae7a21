"""Command-line pipeline: mesh generation, full-order runs with snapshot
capture, reduced-basis builds, hyperreduced sweeps, metric tables, and an
invariant verifier.

Configs are JSON files; units are fixed (lengths in mm, stresses in MPa,
forces in N) to match the regression parameter tables.  Schema:

    {
      "mesh":     {"generator": "plate_with_hole", "args": {"nx": 8}}
                  or {"file": "mesh.json"},
      "material": {"preset": "plate", "overrides": {"y0": 1e12}}
                  or a full field dict (lam, mu, sigma0, a, b, e, f,
                  y0, r, s, grad_a, pen_h, and optionally k_dam),
      "bcs":      {"fixed_sets": {"sym_x": [0], "sym_y": [1], "back_z": [2]},
                   "loads": [{"side_set": "load_edge",
                              "traction": [0.0, 1.0, 0.0]}],
                   "drive": {"node_set": "top", "comp": 1, "value": 1.0},
                   "monitor_set": "point_A", "monitor_comp": null},
      "control":  {"control": "load" | "displacement" | "arclength",
                   "steps": 50, "dlambda0": 3.1, "ds0": "auto",
                   "tol_energy": 1e-10, "tol_residual": 1e-8,
                   "max_iter": 25, "retry_halvings": 4,
                   "lambda_max": null, "lambda_abs_max": null},
      "snapshots": {"displacements": true, "forces": true},
      "mor":      {"m": [20], "k": [4, 5, 6]},
      "output_dir": "out"
    }

Under load and displacement control the run visits the load factors
``dlambda0 * (1 .. steps)``; under arc-length control ``dlambda0`` sizes
the first predictor and ``ds0 = "auto"`` takes the radius from its norm.

Every output file carries the sha256 of the resolved config, either as a
leading ``# config <hash>`` comment (CSV) or a ``"config"`` field (JSON);
binary snapshot blocks are bound to it through the content hashes recorded
in ``run.json``.  Rerunning a command with the same config on one thread
reproduces every output byte-for-byte, except wall-clock measurements,
which live only in ``timing.json`` / ``sweep_timing.json`` and in the
``wall_ms`` and ``speedup`` columns.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import fem, material, meshing, mor, numerics, postproc, solver
from .material import MaterialParams, PARAMS_NOTCHED, PARAMS_PLATE

__all__ = ["main", "RunConfig", "load_config", "config_sha"]

RUN_FORMAT = "run-v1"
CELL_FORMAT = "cell-v1"
GENERATORS = {
    "block": meshing.gen_block,
    "plate_with_hole": meshing.gen_plate_with_hole,
    "asym_notched": meshing.gen_asym_notched,
}
MATERIAL_PRESETS = {"plate": PARAMS_PLATE, "notched": PARAMS_NOTCHED}
UNITS = {"length": "mm", "stress": "MPa", "force": "N"}

_CONTROL_DEFAULTS = {
    "ds0": "auto",
    "tol_energy": 1e-10,
    "tol_residual": 1e-8,
    "max_iter": 25,
    "retry_halvings": 4,
    "lambda_max": None,
    "lambda_abs_max": None,
}


class ConfigError(ValueError):
    """The run configuration is malformed or inconsistent."""


# --- config resolution ------------------------------------------------------------


def _check_keys(section: str, d: dict, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    missing = [k for k in required if k not in d]
    unknown = [k for k in d if k not in required + optional]
    if missing:
        raise ConfigError(f"config section {section!r} is missing keys: {missing}")
    if unknown:
        raise ConfigError(f"config section {section!r} has unknown keys: {unknown}")


def _resolve_material(doc) -> dict:
    names = [f.name for f in dataclasses.fields(MaterialParams)]
    if "preset" in doc:
        _check_keys("material", doc, ("preset",), ("overrides",))
        if doc["preset"] not in MATERIAL_PRESETS:
            raise ConfigError(
                f"unknown material preset {doc['preset']!r}; "
                f"available: {sorted(MATERIAL_PRESETS)}"
            )
        vals = dataclasses.asdict(MATERIAL_PRESETS[doc["preset"]])
        over = doc.get("overrides", {})
        _check_keys("material.overrides", over, (), tuple(names))
        vals.update(over)
    else:
        _check_keys("material", doc, tuple(n for n in names if n != "k_dam"), ("k_dam",))
        vals = dict(doc)
        vals.setdefault("k_dam", 2.0)
    return {n: float(vals[n]) for n in names}


def _resolve_config(doc: dict) -> dict:
    """Validate a raw config document and return its canonical form.

    The canonical dict has every default filled in, so semantically equal
    configs hash identically.  Unknown keys are rejected to catch typos.
    """
    _check_keys(
        "config", doc, ("mesh", "material", "bcs", "control"),
        ("snapshots", "mor", "output_dir", "units"),
    )
    units = doc.get("units", UNITS)
    if units != UNITS:
        raise ConfigError(f"units are fixed: {UNITS}")

    mesh = doc["mesh"]
    if "generator" in mesh:
        _check_keys("mesh", mesh, ("generator",), ("args",))
        if mesh["generator"] not in GENERATORS:
            raise ConfigError(
                f"unknown mesh generator {mesh['generator']!r}; "
                f"available: {sorted(GENERATORS)}"
            )
        mesh = {"generator": mesh["generator"], "args": dict(mesh.get("args", {}))}
    elif "file" in mesh:
        _check_keys("mesh", mesh, ("file",))
        mesh = {"file": str(mesh["file"])}
    else:
        raise ConfigError("config section 'mesh' needs a 'generator' or a 'file'")

    bcs_doc = doc["bcs"]
    _check_keys(
        "bcs", bcs_doc, ("fixed_sets",),
        ("loads", "drive", "monitor_set", "monitor_comp"),
    )
    drive = bcs_doc.get("drive")
    if drive is not None:
        _check_keys("bcs.drive", drive, ("node_set", "comp"), ("value",))
        drive = {
            "node_set": str(drive["node_set"]),
            "comp": int(drive["comp"]),
            "value": float(drive.get("value", 1.0)),
        }
    loads = []
    for ld in bcs_doc.get("loads", []):
        _check_keys("bcs.loads[]", ld, ("side_set", "traction"))
        if len(ld["traction"]) != 3:
            raise ConfigError("a traction needs exactly three components")
        loads.append(
            {"side_set": str(ld["side_set"]), "traction": [float(c) for c in ld["traction"]]}
        )
    bcs = {
        "fixed_sets": {
            str(k): sorted(int(c) for c in v) for k, v in bcs_doc["fixed_sets"].items()
        },
        "loads": loads,
        "drive": drive,
        "monitor_set": str(bcs_doc.get("monitor_set", "point_A")),
        "monitor_comp": (
            None if bcs_doc.get("monitor_comp") is None else int(bcs_doc["monitor_comp"])
        ),
    }

    ctl_doc = doc["control"]
    _check_keys(
        "control", ctl_doc, ("control", "steps", "dlambda0"), tuple(_CONTROL_DEFAULTS)
    )
    ctl = dict(_CONTROL_DEFAULTS)
    ctl.update(ctl_doc)
    mode = ctl["control"]
    if mode not in ("load", "displacement", "arclength"):
        raise ConfigError(f"control must be load, displacement or arclength, got {mode!r}")
    ctl["steps"] = int(ctl["steps"])
    ctl["dlambda0"] = float(ctl["dlambda0"])
    if ctl["steps"] < 1:
        raise ConfigError("control.steps must be positive")
    if ctl["dlambda0"] == 0.0:
        raise ConfigError("control.dlambda0 must be nonzero")
    if ctl["ds0"] != "auto":
        ctl["ds0"] = float(ctl["ds0"])
        if ctl["ds0"] <= 0.0:
            raise ConfigError("control.ds0 must be positive or \"auto\"")
    ctl["tol_energy"] = float(ctl["tol_energy"])
    ctl["tol_residual"] = float(ctl["tol_residual"])
    ctl["max_iter"] = int(ctl["max_iter"])
    ctl["retry_halvings"] = int(ctl["retry_halvings"])
    for key in ("lambda_max", "lambda_abs_max"):
        if ctl[key] is not None:
            ctl[key] = float(ctl[key])

    # cross-section consistency: a drive serves displacement control only,
    # load-parameterized modes need a reference load
    if mode == "displacement":
        if bcs["drive"] is None:
            raise ConfigError("displacement control needs bcs.drive")
    else:
        if not bcs["loads"]:
            raise ConfigError(f"{mode} control needs at least one traction load")
        if bcs["drive"] is not None:
            raise ConfigError(f"{mode} control cannot combine with a displacement drive")

    snaps = dict({"displacements": True, "forces": True})
    snaps_doc = doc.get("snapshots", {})
    _check_keys("snapshots", snaps_doc, (), ("displacements", "forces"))
    snaps.update({k: bool(v) for k, v in snaps_doc.items()})

    mor_doc = doc.get("mor", {})
    _check_keys("mor", mor_doc, (), ("m", "k"))
    mor_spec = {
        "m": sorted(int(m) for m in mor_doc.get("m", [])),
        "k": sorted(int(k) for k in mor_doc.get("k", [])),
    }
    if any(m < 1 for m in mor_spec["m"]) or any(k < 1 for k in mor_spec["k"]):
        raise ConfigError("mor.m and mor.k entries must be positive")

    return {
        "units": UNITS,
        "mesh": mesh,
        "material": _resolve_material(doc["material"]),
        "bcs": bcs,
        "control": ctl,
        "snapshots": snaps,
        "mor": mor_spec,
        "output_dir": str(doc.get("output_dir", "out")),
    }


def config_sha(resolved: dict) -> str:
    """Content hash of a resolved config; the provenance key of every output."""
    return numerics.content_hash(json.dumps(resolved, sort_keys=True, separators=(",", ":")))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A resolved run configuration plus the directory it was loaded from.

    ``base_dir`` anchors relative paths (mesh file, output directory), so
    the canonical dict, and with it the config hash, stays location
    independent.
    """

    resolved: dict
    base_dir: Path

    @property
    def sha(self) -> str:
        return config_sha(self.resolved)

    @property
    def control(self) -> dict:
        return self.resolved["control"]

    @property
    def mor_spec(self) -> dict:
        return self.resolved["mor"]

    def path(self, rel: str | Path) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.path(self.resolved["output_dir"])


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {p} is not valid JSON: {err}") from err
    return RunConfig(resolved=_resolve_config(doc), base_dir=p.resolve().parent)


# --- builders ---------------------------------------------------------------------


def build_mesh(cfg: RunConfig) -> meshing.Mesh:
    spec = cfg.resolved["mesh"]
    if "file" in spec:
        path = cfg.path(spec["file"])
        if not path.exists():
            raise ConfigError(f"mesh file does not exist: {path}")
        return meshing.load_mesh(path)
    gen = GENERATORS[spec["generator"]]
    try:
        return gen(**spec["args"])
    except TypeError as err:
        raise ConfigError(f"bad arguments for mesh generator {spec['generator']!r}: {err}")


def build_provider(cfg: RunConfig, mesh: meshing.Mesh) -> fem.FemProvider:
    bcs = cfg.resolved["bcs"]
    params = MaterialParams(**cfg.resolved["material"])
    dofmap = fem.DofMap.build(mesh, {k: tuple(v) for k, v in bcs["fixed_sets"].items()})
    loads = [fem.TractionLoad(ld["side_set"], tuple(ld["traction"])) for ld in bcs["loads"]]
    drive = None
    if bcs["drive"] is not None:
        d = bcs["drive"]
        drive = fem.DisplacementDrive(d["node_set"], d["comp"], d["value"])
    return fem.FemProvider(
        mesh, params, dofmap, loads,
        monitor_set=bcs["monitor_set"], monitor_comp=bcs["monitor_comp"], drive=drive,
    )


def _newton_settings(ctl: dict) -> solver.NewtonSettings:
    return solver.NewtonSettings(
        tol_energy=ctl["tol_energy"], tol_force=ctl["tol_residual"], max_iter=ctl["max_iter"]
    )


def _arc_settings(ctl: dict) -> solver.ArcSettings:
    return solver.ArcSettings(
        dlam0=ctl["dlambda0"],
        ds0=None if ctl["ds0"] == "auto" else ctl["ds0"],
        n_steps=ctl["steps"],
        max_retries=ctl["retry_halvings"],
        lam_max=ctl["lambda_max"],
        lam_abs_max=ctl["lambda_abs_max"],
        newton=_newton_settings(ctl),
    )


def _lam_grid(ctl: dict) -> np.ndarray:
    return ctl["dlambda0"] * np.arange(1, ctl["steps"] + 1)


def _run_control(provider, ctl: dict) -> solver.RunResult:
    if ctl["control"] == "arclength":
        return solver.run_arc_length(provider, _arc_settings(ctl))
    return solver.run_load_sequence(
        provider, _lam_grid(ctl), _newton_settings(ctl), max_halvings=ctl["retry_halvings"]
    )


def _p_ref(provider) -> float:
    return float(np.linalg.norm(provider.ref_force))


def _mesh_sha(mesh: meshing.Mesh) -> str:
    sets = json.dumps(
        {
            "node_sets": {k: np.asarray(v).tolist() for k, v in sorted(mesh.node_sets.items())},
            "side_sets": {k: np.asarray(v).tolist() for k, v in sorted(mesh.side_sets.items())},
        },
        sort_keys=True,
    )
    return numerics.content_hash(mesh.nodes, mesh.elements.astype(np.int64), sets)


def _params_sha(resolved: dict) -> str:
    return numerics.content_hash(json.dumps(resolved["material"], sort_keys=True))


# --- run records ------------------------------------------------------------------


def _record_payload(rec: postproc.PathRecord, dbar_final: np.ndarray) -> dict:
    """Deterministic per-step record; wall times live in timing.json."""
    return {
        "lam": rec.lam.tolist(),
        "u_monitor": rec.u_monitor.tolist(),
        "p": rec.p.tolist(),
        "n_iter": [int(n) for n in rec.n_iter],
        "u_norm": rec.u_norm.tolist(),
        "dbar_max": rec.dbar_max.tolist(),
        "dbar_final": np.asarray(dbar_final, dtype=float).tolist(),
    }


def _record_from_payload(payload: dict, wall) -> postproc.PathRecord:
    return postproc.PathRecord(
        lam=np.asarray(payload["lam"], dtype=float),
        u_monitor=np.asarray(payload["u_monitor"], dtype=float),
        p=np.asarray(payload["p"], dtype=float),
        n_iter=np.asarray(payload["n_iter"], dtype=int),
        wall=np.asarray(wall, dtype=float),
        dbar_max=np.asarray(payload["dbar_max"], dtype=float),
        u_norm=np.asarray(payload["u_norm"], dtype=float),
    )


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _load_run(fom_dir: Path, sha: str) -> tuple[postproc.PathRecord, dict]:
    """Read a solve-full output directory back; rejects config mismatches."""
    run_path = fom_dir / "run.json"
    if not run_path.exists():
        raise click.UsageError(f"no run.json in {fom_dir}; run solve-full first")
    run = json.loads(run_path.read_text())
    if run.get("config") != sha:
        raise click.UsageError(
            f"run in {fom_dir} was produced by config {run.get('config', '?')[:12]}, "
            f"not the given one ({sha[:12]})"
        )
    if run.get("error"):
        raise click.UsageError(f"run in {fom_dir} is a failed partial: {run['error']}")
    timing = json.loads((fom_dir / "timing.json").read_text())
    rec = _record_from_payload(run["record"], timing["wall"])
    return rec, run


def _write_run_outputs(
    out_dir: Path, cfg: RunConfig, provider, result: solver.RunResult, error: str | None = None
) -> postproc.PathRecord | None:
    """Flush path table, snapshots, state dumps and the run manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    sha = cfg.sha
    if not result.points:
        _write_json(out_dir / "run.json", {
            "format": RUN_FORMAT, "config": sha, "error": error, "record": None,
        })
        return None
    rec = postproc.PathRecord.from_run(
        result, p_ref=_p_ref(provider), use_reaction=provider.has_displacement_drive
    )
    u_end = result.points[-1].u
    postproc.write_path_csv(out_dir / "path.csv", rec, config_hash=sha)
    postproc.write_node_field_csv(out_dir / "node_field.csv", provider, u_end, config_hash=sha)
    postproc.write_gp_state_csv(out_dir / "gp_state.csv", provider, config_hash=sha)
    files = {}
    snaps = cfg.resolved["snapshots"]
    if snaps["displacements"]:
        U = result.snapshots()
        numerics.write_snp1(out_dir / "U.snp1", U)
        files["U.snp1"] = numerics.content_hash(U)
    if snaps["forces"]:
        R = result.force_snapshots()
        numerics.write_snp1(out_dir / "R.snp1", R)
        files["R.snp1"] = numerics.content_hash(R)
    meta = {k: v for k, v in result.meta.items() if isinstance(v, (str, int, float, bool))}
    _write_json(out_dir / "run.json", {
        "format": RUN_FORMAT,
        "config": sha,
        "mode": cfg.control["control"],
        "record": _record_payload(rec, provider.dbar_field(u_end)),
        "files": files,
        "counters": dict(provider.counters),
        "meta": meta,
        "error": error,
    })
    _write_json(out_dir / "timing.json", {
        "config": sha,
        "wall": [p.wall for p in result.points],
        "wall_lin": [p.wall_lin for p in result.points],
    })
    return rec


# --- command-line interface ---------------------------------------------------------


def _config_opt(f):
    return click.option(
        "--config", "config_path", required=True,
        type=click.Path(exists=True, dir_okay=False), help="Run configuration (JSON).",
    )(f)


def _out_opt(f):
    return click.option(
        "--out", "out_path", default=None, type=click.Path(file_okay=False),
        help="Output directory (default: the config's output_dir).",
    )(f)


def _threads_opt(f):
    return click.option(
        "--threads", default=1, show_default=True,
        help="BLAS/LAPACK thread cap; one thread gives bit-reproducible runs.",
    )(f)


def _load_config_cmd(config_path: str) -> RunConfig:
    try:
        return load_config(config_path)
    except ConfigError as err:
        raise click.UsageError(str(err))


def _out_dir(cfg: RunConfig, out_path: str | None) -> Path:
    out = Path(out_path) if out_path else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


@click.group()
def main():
    """Offline/online pipeline for the reduced damage-plasticity solver."""


@main.command("mesh-gen")
@_config_opt
@_out_opt
def cmd_mesh_gen(config_path, out_path):
    """Generate the configured mesh and write it as JSON."""
    cfg = _load_config_cmd(config_path)
    if "generator" not in cfg.resolved["mesh"]:
        raise click.UsageError("mesh-gen needs a generator spec, not a mesh file")
    try:
        mesh = build_mesh(cfg)
        meshing.validate_mesh(mesh)
    except (ConfigError, meshing.MeshError) as err:
        raise click.UsageError(str(err))
    out = _out_dir(cfg, out_path) / "mesh.json"
    meshing.save_mesh(mesh, out, provenance={"config": cfg.sha})
    vol = fem.element_geometry(mesh).volume
    click.echo(f"mesh: {mesh.n_nodes} nodes, {mesh.n_elems} elements, volume {vol:.6g} mm^3")
    click.echo(f"node sets: {', '.join(sorted(mesh.node_sets))}")
    click.echo(f"wrote {out}")


@main.command("solve-full")
@_config_opt
@_out_opt
@_threads_opt
def cmd_solve_full(config_path, out_path, threads):
    """Run the full-order model and capture path, snapshots and state."""
    cfg = _load_config_cmd(config_path)
    out = _out_dir(cfg, out_path)
    t0 = time.perf_counter()
    with threadpool_limits(limits=threads):
        try:
            mesh = build_mesh(cfg)
            provider = build_provider(cfg, mesh)
        except (ConfigError, meshing.MeshError, ValueError) as err:
            raise click.UsageError(str(err))
        try:
            result = _run_control(provider, cfg.control)
        except solver.SolveError as err:
            partial = err.partial or solver.RunResult(points=[], meta={})
            _write_run_outputs(out, cfg, provider, partial, error=str(err))
            _write_json(out / "diagnostics.json", {
                "config": cfg.sha,
                "error": str(err),
                "accepted_steps": len(partial.points),
            })
            raise click.ClickException(f"{err} (partial outputs in {out})")
        except (fem.FullyDamagedError, material.MaterialUpdateError) as err:
            _write_json(out / "diagnostics.json", {"config": cfg.sha, "error": str(err)})
            raise click.ClickException(str(err))
    rec = _write_run_outputs(out, cfg, provider, result)
    wall = time.perf_counter() - t0
    click.echo(
        f"{cfg.control['control']} run: {rec.n_steps} steps, "
        f"lambda_end={rec.lam[-1]:.6g}, u_end={rec.u_monitor[-1]:.6g} mm, "
        f"{int(np.sum(rec.n_iter))} Newton iterations, {wall:.1f} s"
    )
    click.echo(f"wrote {out}/path.csv (config {cfg.sha[:12]})")


@main.command("pod-build")
@_config_opt
@_out_opt
@click.option("--fom", "fom_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the solve-full outputs (default: --out).")
@_threads_opt
def cmd_pod_build(config_path, out_path, fom_path, threads):
    """Build the POD basis from captured displacement snapshots."""
    cfg = _load_config_cmd(config_path)
    out = _out_dir(cfg, out_path)
    fom_dir = Path(fom_path) if fom_path else out
    _, run = _load_run(fom_dir, cfg.sha)
    u_file = fom_dir / "U.snp1"
    if not u_file.exists():
        raise click.UsageError(f"no displacement snapshots in {fom_dir} (U.snp1 missing)")
    with threadpool_limits(limits=threads):
        U = numerics.read_snp1(u_file)
        m_store = min(U.shape)
        m_list = cfg.mor_spec["m"]
        if m_list and max(m_list) > m_store:
            raise click.UsageError(
                f"mor.m requests {max(m_list)} modes but only {m_store} are available"
            )
        basis = mor.pod_build(U, m=m_store)
    pod_dir = out / "pod"
    pod_dir.mkdir(parents=True, exist_ok=True)
    numerics.write_snp1(pod_dir / "phi.snp1", basis.phi)
    numerics.write_snp1(pod_dir / "sigma.snp1", basis.sigma.reshape(-1, 1))
    _write_json(pod_dir / "pod.json", {
        "format": "pod-v1",
        "config": cfg.sha,
        "n": int(basis.n),
        "l": int(U.shape[1]),
        "m_store": int(m_store),
        "snapshots_sha": numerics.content_hash(U),
        "truncation_energy": {str(m): basis.truncation_energy(m) for m in m_list},
    })
    click.echo(
        f"pod basis: {m_store} modes over {U.shape[1]} snapshots, "
        f"sigma_1={basis.sigma[0]:.6g}, wrote {pod_dir}"
    )


@main.command("deim-build")
@_config_opt
@_out_opt
@click.option("--fom", "fom_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the solve-full outputs (default: --out).")
@click.option("--pod", "pod_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the POD build (default: <out>/pod).")
@_threads_opt
def cmd_deim_build(config_path, out_path, fom_path, pod_path, threads):
    """Select interpolation dofs and write per-(m, k) reduced artifacts."""
    cfg = _load_config_cmd(config_path)
    out = _out_dir(cfg, out_path)
    fom_dir = Path(fom_path) if fom_path else out
    pod_dir = Path(pod_path) if pod_path else out / "pod"
    m_list, k_list = cfg.mor_spec["m"], cfg.mor_spec["k"]
    if not m_list or not k_list:
        raise click.UsageError("deim-build needs nonempty mor.m and mor.k lists")
    _, run = _load_run(fom_dir, cfg.sha)
    pod_meta = json.loads((pod_dir / "pod.json").read_text())
    if pod_meta.get("config") != cfg.sha:
        raise click.UsageError(f"pod build in {pod_dir} does not match this config")
    for name in ("U.snp1", "R.snp1"):
        if not (fom_dir / name).exists():
            raise click.UsageError(f"deim-build needs {name} in {fom_dir}")
    with threadpool_limits(limits=threads):
        U = numerics.read_snp1(fom_dir / "U.snp1")
        R = numerics.read_snp1(fom_dir / "R.snp1")
        phi = numerics.read_snp1(pod_dir / "phi.snp1")
        sigma = numerics.read_snp1(pod_dir / "sigma.snp1").ravel()
        mesh = build_mesh(cfg)
        provider = build_provider(cfg, mesh)
        d_r = mor.nonlinear_force_snapshots(U, R, provider.k_lin())
        rom_dir = out / "rom"
        rom_dir.mkdir(parents=True, exist_ok=True)
        provenance = {
            "config": cfg.sha,
            "mesh_sha": _mesh_sha(mesh),
            "params_sha": _params_sha(cfg.resolved),
            "snapshots_sha": numerics.content_hash(U),
        }
        cells = {}
        for m in m_list:
            basis_m = mor.PodBasis(phi=phi[:, :m].copy(), sigma=sigma, m=m)
            for k in k_list:
                name = f"m{m}_k{k}"
                try:
                    ops = mor.deim_build(d_r, k, basis_m, provider)
                except mor.DeimError as err:
                    cells[name] = f"failed: {err}"
                    continue
                mor.save_rom_artifacts(
                    rom_dir / name, basis_m, ops, provenance={**provenance, "m": m, "k": k}
                )
                cells[name] = "ok"
    _write_json(rom_dir / "deim.json", {
        "format": "deim-v1",
        "config": cfg.sha,
        "mesh_sha": provenance["mesh_sha"],
        "params_sha": provenance["params_sha"],
        "cells": cells,
    })
    n_ok = sum(1 for v in cells.values() if v == "ok")
    click.echo(f"deim artifacts: {n_ok}/{len(cells)} cells built in {rom_dir}")
    for name, status in cells.items():
        if status != "ok":
            click.echo(f"  {name}: {status}")


_CELL_ERRORS = (
    solver.SolveError,
    fem.FullyDamagedError,
    material.MaterialUpdateError,
    mor.DeimError,
    numerics.SingularSystemError,
    ValueError,
    FileNotFoundError,
)


def _sweep_cell(payload: dict) -> dict:
    """Run one (m, k) cell of the online sweep; returns a result envelope.

    Executed in a worker process: everything in and out is plain data.
    """
    cfg = RunConfig(resolved=payload["resolved"], base_dir=Path(payload["base_dir"]))
    m, k = payload["m"], payload["k"]
    cell_dir = Path(payload["artifacts"]) / f"m{m}_k{k}"
    try:
        with threadpool_limits(limits=payload["threads"]):
            if not cell_dir.exists():
                raise FileNotFoundError(f"no artifact cell {cell_dir.name} (deim-build skipped it)")
            basis, ops, _ = mor.load_rom_artifacts(cell_dir)
            mesh = build_mesh(cfg)
            provider = build_provider(cfg, mesh)
            rom = mor.RomSystem(provider, basis, ops)
            result = _run_control(rom, cfg.control)
            rec = postproc.PathRecord.from_run(result, p_ref=_p_ref(provider))
            # record full-space norms so path comparisons are basis independent
            rec.u_norm = np.array(
                [np.linalg.norm(rom.reconstruct(p.u)) for p in result.points]
            )
            return {
                "m": m, "k": k, "ok": True, "error": None,
                "record": _record_payload(rec, rom.dbar_field(result.points[-1].u)),
                "wall": [p.wall for p in result.points],
                "wall_lin": [p.wall_lin for p in result.points],
            }
    except _CELL_ERRORS as err:
        return {"m": m, "k": k, "ok": False, "error": str(err),
                "record": None, "wall": [], "wall_lin": []}


def _metric_row(fom_rec, fom_dbar, cell: dict) -> dict:
    """Sweep table row from one cell envelope; nan-by-omission for undefined."""
    row = {"m": cell["m"], "k": cell["k"], "stable": cell["ok"]}
    if not cell["ok"] or cell["record"] is None:
        row["artificial_unloading"] = False
        return row
    rec = _record_from_payload(cell["record"], cell["wall"] or np.zeros(len(cell["record"]["lam"])))
    row["eps_uA"] = postproc.eps_ua(fom_rec, rec)
    try:
        row["eps_pmax"] = postproc.eps_pmax(fom_rec, rec)
    except postproc.NoLimitLoad:
        pass
    try:
        row["eps_DbarB"] = postproc.eps_dbar_b(fom_dbar, np.asarray(cell["record"]["dbar_final"]))
    except ValueError:
        pass
    if len(cell["wall"]):
        try:
            row["speedup"] = postproc.speedup(fom_rec, rec)
        except ValueError:
            pass
    row["artificial_unloading"] = postproc.artificial_unloading(rec, reference=fom_rec)
    return row


@main.command("rom-sweep")
@_config_opt
@_out_opt
@click.option("--fom", "fom_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the solve-full outputs (default: --out).")
@click.option("--artifacts", "artifacts_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the deim-build artifacts (default: <out>/rom).")
@click.option("--workers", default=1, show_default=True,
              help="Worker processes for independent sweep cells.")
@_threads_opt
def cmd_rom_sweep(config_path, out_path, fom_path, artifacts_path, workers, threads):
    """Run the online reduced model over the (m, k) grid and tabulate errors."""
    cfg = _load_config_cmd(config_path)
    out = _out_dir(cfg, out_path)
    fom_dir = Path(fom_path) if fom_path else out
    artifacts = Path(artifacts_path) if artifacts_path else out / "rom"
    m_list, k_list = cfg.mor_spec["m"], cfg.mor_spec["k"]
    if not m_list or not k_list:
        raise click.UsageError("rom-sweep needs nonempty mor.m and mor.k lists")
    if cfg.control["control"] == "displacement":
        raise click.UsageError("reduced sweeps need a load-parameterized control")

    # reject stale or foreign artifacts before any cell runs
    fom_rec, run = _load_run(fom_dir, cfg.sha)
    fom_dbar = np.asarray(run["record"]["dbar_final"], dtype=float)
    deim_path = artifacts / "deim.json"
    if not deim_path.exists():
        raise click.UsageError(f"no deim.json in {artifacts}; run deim-build first")
    deim_meta = json.loads(deim_path.read_text())
    if deim_meta.get("config") != cfg.sha:
        raise click.UsageError(f"artifacts in {artifacts} do not match this config")
    mesh = build_mesh(cfg)
    if deim_meta.get("mesh_sha") != _mesh_sha(mesh):
        raise click.UsageError("artifact mesh hash does not match the configured mesh")
    if deim_meta.get("params_sha") != _params_sha(cfg.resolved):
        raise click.UsageError("artifact parameter hash does not match the config")

    payloads = [
        {"resolved": cfg.resolved, "base_dir": str(cfg.base_dir),
         "artifacts": str(artifacts), "m": m, "k": k, "threads": threads}
        for m in m_list for k in k_list
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, payloads))
    else:
        cells = [_sweep_cell(p) for p in payloads]

    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    timing = {}
    for cell in cells:
        name = f"m{cell['m']}_k{cell['k']}"
        _write_json(cells_dir / f"{name}.json", {
            "format": CELL_FORMAT, "config": cfg.sha, "m": cell["m"], "k": cell["k"],
            "ok": cell["ok"], "error": cell["error"], "record": cell["record"],
        })
        timing[name] = {"wall": cell["wall"], "wall_lin": cell["wall_lin"]}
        row = _metric_row(fom_rec, fom_dbar, cell)
        rows.append(row)
        if cell["ok"]:
            click.echo(
                f"  {name}: eps_uA={row.get('eps_uA', float('nan')):.3e} "
                f"speedup={row.get('speedup', float('nan')):.2f}"
            )
        else:
            click.echo(f"  {name}: unstable ({cell['error']})")
    postproc.write_sweep_csv(out / "sweep.csv", rows, config_hash=cfg.sha)
    _write_json(out / "sweep_timing.json", {"config": cfg.sha, "cells": timing})
    n_ok = sum(1 for c in cells if c["ok"])
    click.echo(f"sweep: {n_ok}/{len(cells)} cells stable, wrote {out}/sweep.csv")


@main.command("metrics")
@_config_opt
@_out_opt
@click.option("--fom", "fom_path", default=None, type=click.Path(file_okay=False),
              help="Directory with the solve-full outputs (default: --out).")
@click.option("--cells", "cells_path", default=None, type=click.Path(file_okay=False),
              help="Per-cell records from rom-sweep (default: <out>/cells).")
def cmd_metrics(config_path, out_path, fom_path, cells_path):
    """Rebuild metric tables from stored run records, without resolving."""
    cfg = _load_config_cmd(config_path)
    out = _out_dir(cfg, out_path)
    fom_dir = Path(fom_path) if fom_path else out
    fom_rec, run = _load_run(fom_dir, cfg.sha)
    fom_dbar = np.asarray(run["record"]["dbar_final"], dtype=float)

    report = {
        "config": cfg.sha,
        "steps": fom_rec.n_steps,
        "lambda_end": float(fom_rec.lam[-1]),
        "u_end": float(fom_rec.u_monitor[-1]),
        "artificial_unloading": postproc.artificial_unloading(fom_rec),
    }
    try:
        idx, pmax = postproc.limit_load(fom_rec.p)
        report["limit_load"] = {"step": int(idx), "p": float(pmax)}
    except postproc.NoLimitLoad:
        report["limit_load"] = None

    cells_dir = Path(cells_path) if cells_path else out / "cells"
    if cells_dir.exists():
        timing_path = out / "sweep_timing.json"
        timing = (
            json.loads(timing_path.read_text())["cells"] if timing_path.exists() else {}
        )
        cells = []
        for path in sorted(cells_dir.glob("m*_k*.json")):
            doc = json.loads(path.read_text())
            if doc.get("config") != cfg.sha:
                raise click.UsageError(f"cell record {path} does not match this config")
            t = timing.get(f"m{doc['m']}_k{doc['k']}", {})
            cells.append({**doc, "wall": t.get("wall", []), "wall_lin": t.get("wall_lin", [])})
        cells.sort(key=lambda c: (c["m"], c["k"]))
        rows = [_metric_row(fom_rec, fom_dbar, cell) for cell in cells]
        postproc.write_sweep_csv(out / "metrics.csv", rows, config_hash=cfg.sha)
        report["cells"] = len(rows)
        click.echo(f"metrics: {len(rows)} cells, wrote {out}/metrics.csv")
    _write_json(out / "metrics.json", report)
    lim = report["limit_load"]
    click.echo(
        f"fom: lambda_end={report['lambda_end']:.6g}, u_end={report['u_end']:.6g} mm, "
        + (f"limit load {lim['p']:.6g} N at step {lim['step']}" if lim else "monotone load")
    )


# --- invariant verifier -------------------------------------------------------------


def _vf_partition_of_unity(rng: np.random.Generator) -> tuple[bool, dict]:
    xi = rng.uniform(-1.0, 1.0, (200, 3))
    shape_defect = float(np.abs(fem.hex8_shape(xi).sum(axis=-1) - 1.0).max())
    grad_defect = float(np.abs(fem.hex8_dshape(xi).sum(axis=-2)).max())
    ok = shape_defect <= 1e-14 and grad_defect <= 1e-14
    return ok, {"shape_defect": shape_defect, "gradient_defect": grad_defect}


def _vf_quadrature_volume(rng: np.random.Generator) -> tuple[bool, dict]:
    A = np.eye(3) + rng.normal(0.0, 0.2, (3, 3))
    block = meshing.gen_block(1.0, 1.0, 1.0, 2, 2, 2)
    block.nodes = block.nodes @ A.T
    block_err = abs(
        fem.element_geometry(block).volume - abs(np.linalg.det(A))
    ) / abs(np.linalg.det(A))
    plate = meshing.gen_plate_with_hole()
    plate_exact = (50.0 * 100.0 - np.pi * 25.0**2 / 4.0) * 1.0
    plate_err = abs(fem.element_geometry(plate).volume - plate_exact) / plate_exact
    notched = meshing.gen_asym_notched()
    notched_exact = (40.0 * 100.0 - np.pi * 10.0**2) * 1.0
    notched_err = abs(fem.element_geometry(notched).volume - notched_exact) / notched_exact
    ok = block_err <= 1e-12 and plate_err <= 5e-3 and notched_err <= 5e-3
    return ok, {"block_rel": block_err, "plate_rel": plate_err, "notched_rel": notched_err}


def _vf_patch_test(rng: np.random.Generator) -> tuple[bool, dict]:
    # affinely deformed single element: internal forces must equal the exact
    # boundary flux of the uniform stress state
    mesh = meshing.gen_block(1.0, 1.0, 1.0, 1, 1, 1)
    dm = fem.DofMap.build(mesh, {})
    provider = fem.FemProvider(mesh, PARAMS_PLATE, dm, [])
    A = np.array([[4e-4, 1e-4, 0.0], [1e-4, -2e-4, 5e-5], [0.0, 5e-5, 1e-4]])
    U = np.zeros(dm.ndof)
    for n in range(mesh.n_nodes):
        U[4 * n:4 * n + 3] = A @ mesh.nodes[n]
    r = dm.expand(provider.assemble(dm.restrict(U), tangent=False).r)
    F = np.eye(3) + A
    upd = material.gp_update(
        material.GpState.virgin(1), (F.T @ F)[None], np.zeros(1), PARAMS_PLATE
    )
    P = F @ material.voigt_to_sym(upd.S)[0]
    normals = {"x0": [-1, 0, 0], "x1": [1, 0, 0], "y0": [0, -1, 0],
               "y1": [0, 1, 0], "z0": [0, 0, -1], "z1": [0, 0, 1]}
    flux = np.zeros(dm.ndof)
    for name, n in normals.items():
        flux += fem.face_load_vector(mesh, name, P @ np.asarray(n, dtype=float))
    scale = float(np.abs(flux).max())
    u_rows = np.concatenate([r[0::4], r[1::4], r[2::4]])
    f_rows = np.concatenate([flux[0::4], flux[1::4], flux[2::4]])
    defect = float(np.abs(u_rows - f_rows).max()) / scale
    micro = float(np.abs(r[3::4]).max()) / scale
    ok = defect <= 1e-10 and micro <= 1e-12
    return ok, {"flux_defect_rel": defect, "micromorphic_rel": micro}


def _vf_tangent_fd(rng: np.random.Generator) -> tuple[bool, dict]:
    mesh = meshing.gen_block(1.0, 1.0, 0.4, 3, 3, 1)
    dm = fem.DofMap.build(mesh, {"x0": (0,), "y0": (1,), "z0": (2,)})
    provider = fem.FemProvider(
        mesh, PARAMS_PLATE, dm, [fem.TractionLoad("y1", (0.0, 300.0, 0.0))]
    )
    eps = 1e-6
    worst = 0.0
    for _ in range(5):
        u = rng.normal(0.0, 4e-3, dm.ndof_free)
        v = rng.normal(0.0, 1.0, dm.ndof_free)
        v /= np.linalg.norm(v)
        out = provider.assemble(u, tangent=True)
        r1 = provider.assemble(u + eps * v, tangent=False).r
        err = np.linalg.norm(r1 - out.r - eps * (out.K @ v)) / (eps * np.linalg.norm(v))
        rel = float(err / max(np.linalg.norm(out.K @ v), 1.0))
        worst = max(worst, rel)
    return worst <= 1e-3, {"worst_rel": worst, "states": 5, "eps": eps}


def _vf_constitutive_kkt(rng: np.random.Generator) -> tuple[bool, dict]:
    details = {}
    ok = True
    for name, params in (("plate", PARAMS_PLATE), ("notched", PARAMS_NOTCHED)):
        n = 60
        st = material.GpState.virgin(n)
        A = np.zeros((n, 3, 3))
        worst_p = worst_d = worst_comp = 0.0
        neg = 0
        for _ in range(3):
            A += rng.normal(0.0, 4e-3, (n, 3, 3))
            F = np.eye(3) + A
            C = np.einsum("nki,nkj->nij", F, F)
            dbar = rng.uniform(0.0, 0.2, n)
            upd = material.gp_update(st, C, dbar, params)
            live = ~upd.saturated
            neg += int(np.sum(upd.dlam_p < -1e-12) + np.sum(upd.dlam_d < -1e-12))
            worst_p = max(worst_p, float(upd.phi_p.max() / params.sigma0))
            if live.any():
                worst_d = max(
                    worst_d, float(upd.phi_d[live].max() / max(params.y0, 1.0))
                )
                worst_comp = max(
                    worst_comp,
                    float(np.abs(upd.dlam_d[live] * upd.phi_d[live]).max())
                    / max(params.y0, 1.0),
                )
            worst_comp = max(
                worst_comp, float(np.abs(upd.dlam_p * upd.phi_p).max() / params.sigma0)
            )
            st = upd.state
        family_ok = neg == 0 and worst_p <= 1e-8 and worst_d <= 1e-8 and worst_comp <= 1e-8
        ok = ok and family_ok
        details[name] = {
            "phi_p_rel": worst_p, "phi_d_rel": worst_d,
            "complementarity_rel": worst_comp, "negative_multipliers": neg,
        }
    return ok, details


def _vf_deim_interpolation(rng: np.random.Generator) -> tuple[bool, dict]:
    A = rng.normal(size=(40, 12))
    omega = numerics.thin_svd(A)[0][:, :6]
    z = mor.deim_indices(omega)
    # greedy property: each point maximizes its own step's residual
    greedy_ok = True
    for j in range(omega.shape[1]):
        if j == 0:
            r = omega[:, 0]
        else:
            c = np.linalg.solve(omega[z[:j], :j], omega[z[:j], j])
            r = omega[:, j] - omega[:, :j] @ c
        greedy_ok = greedy_ok and int(np.argmax(np.abs(r))) == int(z[j])
    # interpolation exactness at the selected dofs, arbitrary vectors
    worst = 0.0
    zt = omega[z]
    for _ in range(100):
        g = rng.normal(size=40)
        approx = omega @ np.linalg.solve(zt, g[z])
        worst = max(worst, float(np.abs(approx[z] - g[z]).max()))
    ok = greedy_ok and worst <= 1e-10
    return ok, {"greedy_match": greedy_ok, "selected_dof_defect": worst}


def _vf_truss_snap_through(rng: np.random.Generator) -> tuple[bool, dict]:
    truss = solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0)
    res = solver.run_arc_length(truss, solver.ArcSettings(dlam0=0.01, n_steps=60))
    curve = max(abs(p.lam - truss.analytic_lambda(p.u_monitor)) for p in res.points)
    pred = max(abs(p.predictor_norm - p.ds) / p.ds for p in res.points)
    # unequal spans make the apex path 2d; the corrector orthogonality
    # measure is degenerate on the symmetric truss
    asym = solver.TwoBarTruss(ea=1.0, h0=1.0, w=(2.0, 1.2))
    res_a = solver.run_arc_length(asym, solver.ArcSettings(dlam0=0.01, n_steps=50))
    orth = max(p.orth_max for p in res_a.points)
    _, lam_lim = truss.limit_points()
    # no equilibrium exists just past the limit load on the primary branch,
    # so plain load stepping without bisection rescue must fail there
    ramp = np.linspace(lam_lim / 20, 1.05 * lam_lim, 20)
    try:
        solver.run_load_sequence(
            solver.TwoBarTruss(ea=1.0, h0=1.0, w=2.0), ramp,
            solver.NewtonSettings(max_iter=25), max_halvings=0,
        )
        load_control_fails = False
    except solver.SolveError as err:
        partial = err.partial
        load_control_fails = (
            partial is not None
            and 0 < len(partial.points) < len(ramp)
            and float(partial.lam.max()) < lam_lim
        )
    ok = (
        curve <= 1e-8 and orth <= 1e-12 and pred <= 1e-12
        and bool(res.lam.min() < 0.0) and load_control_fails
    )
    return ok, {
        "curve_defect": curve, "orthogonality": orth, "predictor_defect": pred,
        "descending_branch": bool(res.lam.min() < 0.0),
        "load_control_fails_past_limit": load_control_fails,
    }


VERIFY_FAMILIES = [
    ("partition_of_unity", _vf_partition_of_unity),
    ("quadrature_volume", _vf_quadrature_volume),
    ("patch_test", _vf_patch_test),
    ("tangent_fd", _vf_tangent_fd),
    ("constitutive_kkt", _vf_constitutive_kkt),
    ("deim_interpolation", _vf_deim_interpolation),
    ("truss_snap_through", _vf_truss_snap_through),
]


@main.command("verify")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Optional config; recorded in the report for provenance.")
@click.option("--out", "out_path", default=".", type=click.Path(file_okay=False),
              show_default=True, help="Directory for verify.json.")
@click.option("--seed", default=0, show_default=True,
              help="Seed for the randomized checks; the physics is deterministic.")
@_threads_opt
def cmd_verify(config_path, out_path, seed, threads):
    """Run the invariant families and write a machine-readable report."""
    sha = _load_config_cmd(config_path).sha if config_path else None
    report = {"format": "verify-v1", "config": sha, "seed": seed, "families": {}}
    all_ok = True
    with threadpool_limits(limits=threads):
        for name, family in VERIFY_FAMILIES:
            rng = np.random.default_rng(seed)
            t0 = time.perf_counter()
            try:
                ok, details = family(rng)
            except Exception as err:  # a crash is a failure, not an abort
                ok, details = False, {"exception": f"{type(err).__name__}: {err}"}
            dt = time.perf_counter() - t0
            report["families"][name] = {"passed": bool(ok), **details}
            all_ok = all_ok and ok
            click.echo(f"{'PASS' if ok else 'FAIL'}  {name} ({dt:.2f} s)")
    report["passed"] = all_ok
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "verify.json", report)
    click.echo(f"{'all invariant families hold' if all_ok else 'INVARIANT FAILURES'}; "
               f"wrote {out}/verify.json")
    if not all_ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
