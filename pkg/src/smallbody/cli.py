"""Command-line harness: scene JSON in, deterministic CSV/JSON artifacts out.

Subcommands: solve | limit | design | study | validate.  One scene file, one
subcommand, one output directory.  CSV columns are documented in FORMATS.md;
complex values are serialized as {re, im} pairs in JSON and paired columns in
CSV.  Exit codes: 0 success, 2 scene/schema error, 3 physics invariant
violation, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import convergence, designer, foldy_impedance, foldy_neumann, runtime
from .directions import DirectionGrid
from .errors import InfeasibleDesign, InvariantViolation, SingularEvaluationError, SolverFailure
from .limit_solver import (
    LimitProblem,
    hard_limit_field_at,
    impedance_limit_field_at,
    limiting_amplitude,
    solve_hard_limit,
    solve_impedance_limit,
)
from .medium import BackgroundMedium, Grid, far_probe_points
from .particles import ParticleCloud, build_cloud_hard, build_cloud_impedance, validate_cloud

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_PHYSICS = 3
EXIT_SOLVER = 4


class SceneError(Exception):
    """Malformed or incomplete scene file."""


# ---------------------------------------------------------------------------
# scene parsing
# ---------------------------------------------------------------------------

def _fnum(x) -> float:
    if not isinstance(x, (int, float)) or isinstance(x, bool):
        raise SceneError(f"expected a number, got {x!r}")
    return float(x)


def _complex_of(x) -> complex:
    if isinstance(x, dict):
        return complex(_fnum(x.get("re", 0.0)), _fnum(x.get("im", 0.0)))
    return complex(_fnum(x))


def _vec3(x) -> np.ndarray:
    if not isinstance(x, (list, tuple)) or len(x) != 3:
        raise SceneError(f"expected a 3-vector, got {x!r}")
    return np.array([_fnum(v) for v in x])


def parse_field_spec(spec, grid: Grid, dtype=complex) -> np.ndarray:
    """Scalar field over grid nodes from a scene value.

    Accepts a bare number, {re, im}, or a typed object:
      constant | subbox | radial | bump | table.
    """
    nodes = grid.nodes
    if isinstance(spec, (int, float)) or (isinstance(spec, dict) and "type" not in spec):
        return np.full(grid.size, _complex_of(spec)).astype(dtype)
    if not isinstance(spec, dict):
        raise SceneError(f"bad field spec {spec!r}")
    kind = spec.get("type")
    if kind == "constant":
        return np.full(grid.size, _complex_of(spec.get("value", 0.0))).astype(dtype)
    if kind == "subbox":
        lo = _vec3(spec["lo"])
        hi = _vec3(spec["hi"])
        inside = _complex_of(spec.get("inside", 1.0))
        outside = _complex_of(spec.get("outside", 0.0))
        mask = np.all((nodes > lo) & (nodes < hi), axis=1)
        return np.where(mask, inside, outside).astype(dtype)
    if kind == "radial":
        center = _vec3(spec["center"])
        radius = _fnum(spec["radius"])
        inside = _complex_of(spec.get("inside", 1.0))
        outside = _complex_of(spec.get("outside", 0.0))
        mask = np.linalg.norm(nodes - center, axis=1) < radius
        return np.where(mask, inside, outside).astype(dtype)
    if kind == "bump":
        center = _vec3(spec.get("center", [0.5, 0.5, 0.5]))
        width = _fnum(spec.get("width", 0.3))
        amp = _complex_of(spec.get("amplitude", 1.0))
        t = (nodes - center) / width
        prof = np.where(np.abs(t) < 1, (1 - t ** 2) ** 2, 0.0)
        return (amp * prof[:, 0] * prof[:, 1] * prof[:, 2]).astype(dtype)
    if kind == "table":
        re = np.asarray(spec["re"], dtype=float).reshape(-1)
        im = np.asarray(spec.get("im", np.zeros_like(re)), dtype=float).reshape(-1)
        if re.size != grid.size or im.size != grid.size:
            raise SceneError("table field size does not match the grid")
        return (re + 1j * im).astype(dtype)
    raise SceneError(f"unknown field spec type {kind!r}")


def parse_medium(scene: dict) -> BackgroundMedium:
    try:
        mspec = scene["medium"]
        box = mspec["box"]
        lo, hi = _vec3(box["lo"]), _vec3(box["hi"])
        res = mspec.get("resolution", 8)
        shape = (int(res),) * 3 if isinstance(res, int) else tuple(int(v) for v in res)
        k = _fnum(mspec["k"])
        grid = Grid(tuple(lo), tuple(hi), shape)
        n0 = parse_field_spec(mspec.get("n0", 1.0), grid)
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"bad medium spec: {exc}") from exc
    return BackgroundMedium(k, grid, n0)


def parse_beta(spec) -> np.ndarray:
    if isinstance(spec, (int, float)):
        return float(spec) * np.eye(3)
    arr = np.asarray(spec, dtype=float)
    if arr.shape != (3, 3):
        raise SceneError("beta must be a scalar (diagonal) or a 3x3 matrix")
    return arr


def parse_cloud(scene: dict, medium: BackgroundMedium) -> ParticleCloud:
    try:
        cspec = scene["cloud"]
        kind = cspec["kind"]
        a = _fnum(cspec["a"])
    except KeyError as exc:
        raise SceneError(f"cloud spec missing {exc}") from exc
    cell = cspec.get("cell_size")
    cell = _fnum(cell) if cell is not None else None
    if "centers" in cspec:
        centers = np.asarray(cspec["centers"], dtype=float).reshape(-1, 3)
        if kind == "impedance":
            zeta = np.array([_complex_of(z) for z in cspec["zeta"]])
            if len(zeta) == 1 and len(centers) > 1:
                zeta = np.repeat(zeta, len(centers))
            cloud = ParticleCloud(centers=centers, a=a, d=_min_dist(centers),
                                  kind="impedance", zeta=zeta)
        elif kind == "hard":
            cloud = ParticleCloud(centers=centers, a=a, d=_min_dist(centers),
                                  kind="hard", beta=parse_beta(cspec.get("beta", -1.5)))
        else:
            raise SceneError(f"unknown cloud kind {kind!r}")
        return cloud
    if kind == "impedance":
        h = parse_field_spec(cspec.get("h", 0.0), medium.grid)
        dens = parse_field_spec(cspec.get("N", 0.0), medium.grid, dtype=complex).real
        return build_cloud_impedance(medium, a, h, dens, cell_size=cell)
    if kind == "hard":
        nu = parse_field_spec(cspec.get("nu", 0.0), medium.grid, dtype=complex).real
        return build_cloud_hard(medium, a, nu, parse_beta(cspec.get("beta", -1.5)),
                                cell_size=cell)
    raise SceneError(f"unknown cloud kind {kind!r}")


def _min_dist(centers):
    if len(centers) < 2:
        return np.inf
    from scipy.spatial import cKDTree
    dist, _ = cKDTree(centers).query(centers, k=2)
    return float(dist[:, 1].min())


def parse_points(scene: dict, medium: BackgroundMedium) -> np.ndarray:
    spec = scene.get("points", {"far_probes": 5.0})
    if isinstance(spec, dict) and "far_probes" in spec:
        return far_probe_points(medium.grid, _fnum(spec["far_probes"]))
    pts = np.asarray(spec, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SceneError("points must be a list of 3-vectors or {far_probes: factor}")
    return pts


def parse_directions(scene: dict) -> DirectionGrid:
    d = scene.get("directions", {})
    return DirectionGrid(int(d.get("n_theta", 32)), int(d.get("n_phi", 64)))


def parse_alpha(scene: dict) -> np.ndarray:
    alpha = _vec3(scene.get("alpha", [0.0, 0.0, 1.0]))
    nrm = np.linalg.norm(alpha)
    if nrm == 0:
        raise SceneError("alpha must be nonzero")
    return alpha / nrm


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list, columns: list):
    rows = zip(*columns)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_field_csv(path: Path, points, values):
    write_csv(path, ["x", "y", "z", "re", "im"],
              [points[:, 0], points[:, 1], points[:, 2], values.real, values.imag])


def write_farfield_csv(path: Path, farfield):
    t, p, re, im = farfield.rows()
    write_csv(path, ["theta", "phi", "re_A", "im_A"], [t, p, re, im])


def write_centers_csv(path: Path, cloud: ParticleCloud):
    c = cloud.centers
    write_csv(path, ["x", "y", "z"], [c[:, 0], c[:, 1], c[:, 2]])


def write_json(path: Path, data: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _complex_list(values):
    return [{"re": float(v.real), "im": float(v.imag)} for v in np.asarray(values)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(scene: dict, out: Path, args) -> dict:
    medium = parse_medium(scene)
    cloud = parse_cloud(scene, medium)
    report = validate_cloud(cloud, medium)
    if not report.ok:
        raise InvariantViolation("; ".join(report.flags))
    alpha = parse_alpha(scene)
    points = parse_points(scene, medium)
    grid = parse_directions(scene)
    t0 = time.perf_counter()
    if cloud.kind == "impedance":
        result = foldy_impedance.assemble_and_solve(medium, cloud, alpha)
        fld = foldy_impedance.evaluate_field(result, medium, cloud, points)
        ff = foldy_impedance.far_field(result, medium, cloud, grid)
        iterations = result.iterations
    else:
        result = foldy_neumann.assemble_and_solve_hard(medium, cloud, alpha)
        fld = foldy_neumann.evaluate_field_hard(result, medium, cloud, points)
        ff = foldy_neumann.far_field_hard(result, medium, cloud, grid)
        iterations = 0
    wall = time.perf_counter() - t0
    write_field_csv(out / "field.csv", fld.points, fld.values)
    write_farfield_csv(out / "farfield.csv", ff)
    write_centers_csv(out / "centers.csv", cloud)
    solution = {
        "format_version": FORMAT_VERSION,
        "kind": cloud.kind,
        "effective_values": _complex_list(result.effective_values),
        "charges": _complex_list(result.charges),
    }
    if cloud.kind == "impedance":
        solution["coupling"] = _complex_list(result.coupling)
    else:
        solution["effective_gradients"] = [_complex_list(row)
                                           for row in result.effective_gradients]
        solution["dipole_moments"] = [_complex_list(row)
                                      for row in result.dipole_moments]
    write_json(out / "solution.json", solution)
    return {
        "format_version": FORMAT_VERSION,
        "command": "solve",
        "kind": cloud.kind,
        "M": len(cloud),
        "ka": medium.k * cloud.a,
        "residual": result.residual,
        "iterations": iterations,
        "wall_time_s": wall,
    }


def cmd_limit(scene: dict, out: Path, args) -> dict:
    medium = parse_medium(scene)
    lspec = scene.get("limit")
    if not isinstance(lspec, dict):
        raise SceneError("limit scene requires a 'limit' object")
    alpha = parse_alpha(scene)
    points = parse_points(scene, medium)
    t0 = time.perf_counter()
    if "p" in lspec:
        problem = LimitProblem(medium=medium, p=parse_field_spec(lspec["p"], medium.grid))
        fld = solve_impedance_limit(problem, alpha)
        at_points = impedance_limit_field_at(problem, fld, points)
        ff = limiting_amplitude(problem, fld, parse_directions(scene))
        write_farfield_csv(out / "farfield.csv", ff)
        mode = "impedance"
    elif "nu" in lspec:
        problem = LimitProblem(
            medium=medium,
            nu=parse_field_spec(lspec["nu"], medium.grid, dtype=complex).real,
            beta_field=parse_beta(lspec.get("beta", -1.5)))
        tol = args.tol if args.tol is not None else 1e-12
        fld = solve_hard_limit(problem, alpha, max_iter=int(lspec.get("max_iter", 80)),
                               tol=tol)
        at_points = hard_limit_field_at(problem, fld, points)
        mode = "hard"
    else:
        raise SceneError("limit object needs 'p' (impedance) or 'nu' (hard)")
    wall = time.perf_counter() - t0
    write_field_csv(out / "grid_field.csv", fld.points, fld.values)
    write_field_csv(out / "field.csv", at_points.points, at_points.values)
    return {
        "format_version": FORMAT_VERSION,
        "command": "limit",
        "mode": mode,
        "grid_nodes": medium.grid.size,
        "wall_time_s": wall,
    }


def cmd_design(scene: dict, out: Path, args) -> dict:
    medium = parse_medium(scene)
    dspec = scene.get("design")
    if not isinstance(dspec, dict):
        raise SceneError("design scene requires a 'design' object")
    try:
        a = _fnum(dspec["a"])
    except KeyError as exc:
        raise SceneError("design needs a particle radius 'a'") from exc
    target = parse_field_spec(dspec.get("target_n", 1.0), medium.grid)
    cell = dspec.get("cell_size")
    cell = _fnum(cell) if cell is not None else None
    spec = designer.DesignSpec(medium=medium, target_n=target, a=a)
    t0 = time.perf_counter()
    p = designer.target_to_potential(spec)
    h, dens = designer.choose_h_N(p)
    result = designer.realize(spec, h, dens, cell_size=cell)

    verification = None
    vspec = dspec.get("verify")
    if isinstance(vspec, dict) and vspec.get("a_sequence"):
        alpha = parse_alpha(scene)
        rep = designer.verify_design(result, spec, alpha,
                                     [_fnum(x) for x in vspec["a_sequence"]],
                                     cell_size=cell)
        write_csv(out / "verification.csv",
                  ["a", "M", "d", "e_max", "e_rms"],
                  [np.array(rep.a_values), np.array(rep.m_values, dtype=float),
                   np.array(rep.d_values), np.array(rep.errors_max),
                   np.array(rep.errors_rms)])
        verification = {
            "passed": bool(rep.passed),
            "decreasing": bool(rep.decreasing),
            "final_error": rep.final_error,
            "table": [
                {"a": a, "M": m, "d": d, "e_max": em, "e_rms": er}
                for a, m, d, em, er in rep.rows()
            ],
        }
    wall = time.perf_counter() - t0
    write_centers_csv(out / "centers.csv", result.cloud)

    write_json(out / "design.json", {
        "format_version": FORMAT_VERSION,
        "p": _complex_list(result.p),
        "h": _complex_list(result.h),
        "N": [float(v) for v in np.broadcast_to(result.N, (medium.grid.size,))],
        "cloud": result.cloud.to_json_dict(),
        "feasibility": {
            "ka": result.feasibility.ka,
            "d_over_a": result.feasibility.d_over_a if np.isfinite(result.feasibility.d_over_a) else None,
            "M": result.feasibility.m,
            "volume_fraction": result.feasibility.volume_fraction,
        },
    })
    meta = {
        "format_version": FORMAT_VERSION,
        "command": "design",
        "M": result.feasibility.m,
        "wall_time_s": wall,
    }
    if verification is not None:
        meta["verification"] = verification
    return meta


def cmd_study(scene: dict, out: Path, args) -> dict:
    medium = parse_medium(scene)
    sspec = scene.get("study")
    if not isinstance(sspec, dict):
        raise SceneError("study scene requires a 'study' object")
    mode = sspec.get("mode")
    try:
        a_sequence = [_fnum(x) for x in sspec["a_sequence"]]
    except KeyError as exc:
        raise SceneError("study needs an 'a_sequence'") from exc
    alpha = parse_alpha(scene)
    cell = sspec.get("cell_size")
    cell = _fnum(cell) if cell is not None else None
    t0 = time.perf_counter()
    if mode == "impedance":
        study = convergence.run_impedance_study(
            medium,
            parse_field_spec(sspec.get("h", 0.0), medium.grid),
            parse_field_spec(sspec.get("N", 0.0), medium.grid, dtype=complex).real,
            a_sequence, alpha, cell_size=cell)
    elif mode == "hard":
        study = convergence.run_hard_study(
            medium,
            parse_field_spec(sspec.get("nu", 0.0), medium.grid, dtype=complex).real,
            parse_beta(sspec.get("beta", -1.5)),
            a_sequence, alpha, cell_size=cell)
    else:
        raise SceneError("study mode must be 'impedance' or 'hard'")
    wall = time.perf_counter() - t0
    cols = list(zip(*study.csv_rows())) or [[]] * 8
    write_csv(out / "study.csv",
              ["a", "M", "d", "e_max", "e_rms", "max_Q", "count_weighted", "count_integral"],
              [np.asarray(c, dtype=float) for c in cols])
    write_json(out / "study.json", study.to_json_dict())
    return {
        "format_version": FORMAT_VERSION,
        "command": "study",
        "mode": mode,
        "scales": len(study.records),
        "complete": study.complete,
        "wall_time_s": wall,
    }


def cmd_validate(scene: dict, out: Path, args) -> dict:
    medium = parse_medium(scene)
    meta = {
        "format_version": FORMAT_VERSION,
        "command": "validate",
        "grid_nodes": medium.grid.size,
        "k": medium.k,
        "passive": bool(np.all(medium.q0.imag <= 1e-14)),
    }
    if "cloud" in scene:
        cloud = parse_cloud(scene, medium)
        report = validate_cloud(cloud, medium)
        meta["cloud"] = {
            "M": report.m,
            "ka": report.ka,
            "min_spacing": report.min_spacing if np.isfinite(report.min_spacing) else None,
            "spacing_over_a": report.spacing_over_a if np.isfinite(report.spacing_over_a) else None,
            "max_zeta_times_a": report.max_zeta_times_a,
            "volume_fraction": report.volume_fraction,
            "flags": report.flags,
        }
        write_json(out / "report.json", meta)
        if not report.ok:
            raise InvariantViolation("; ".join(report.flags))
    else:
        write_json(out / "report.json", meta)
    return meta


COMMANDS = {
    "solve": cmd_solve,
    "limit": cmd_limit,
    "design": cmd_design,
    "study": cmd_study,
    "validate": cmd_validate,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smallbody",
        description="Many-body small-scatterer solver: discrete clouds, "
                    "continuum limits, and refraction-coefficient design.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--scene", required=True, help="scene JSON file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for kernel assembly (default: all cores)")
    parser.add_argument("--tol", type=float, default=None,
                        help="tolerance override for iterative solves")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SMALLBODY_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runtime.set_thread_count(args.threads)

    def fail(exc, code):
        payload = {
            "format_version": FORMAT_VERSION,
            "error_type": type(exc).__name__,
            "message": str(exc),
            "exit_code": code,
        }
        write_json(out / "error.json", payload)
        print(f"error: {exc}", file=sys.stderr)
        return code

    try:
        with open(args.scene, "r", encoding="utf-8") as fh:
            scene = json.load(fh)
        if not isinstance(scene, dict):
            raise SceneError("scene must be a JSON object")
        meta = COMMANDS[args.command](scene, out, args)
    except (json.JSONDecodeError, SceneError, FileNotFoundError) as exc:
        return fail(exc, EXIT_SCHEMA)
    except (InvariantViolation, InfeasibleDesign, SingularEvaluationError) as exc:
        return fail(exc, EXIT_PHYSICS)
    except SolverFailure as exc:
        return fail(exc, EXIT_SOLVER)
    write_json(out / "metadata.json", meta)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
