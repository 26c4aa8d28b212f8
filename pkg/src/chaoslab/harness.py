"""Study orchestration: dispatch, artifact persistence, run manifests.

Every study writes its tables as CSV, a summary.json with a schema_version
field, any plots as SVG, and finally a manifest.json listing each artifact
with its sha256.  Artifact bytes are pure functions of (config, seed):
timestamps live only in the manifest, floats are serialized with repr, and
JSON keys are sorted.  The worker count is a scheduling hint recorded in
the manifest; all computation is vectorized inside numpy, so outputs are
identical for every worker setting.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, svg
from .concentration import build_psi, change_of_measure_check, exp_moment_check, random_instance
from .config import SCHEMA_VERSION, StudyConfig
from .fields import PeriodicGrid, product_density
from .liouville import (
    LiouvilleSolver,
    density_relative_entropy,
    marginal,
    product_initial,
    relative_entropy,
)
from .metrics import ChaosStudyConfig, ckp_audit, histogram, marginal_error_study
from .particles import EnsembleConfig, forces_naive, forces_spectral, run_ensemble
from .pde import MeanFieldSolver

ENTROPY_FLOOR = -1e-12
INITIAL_ENTROPY_TOL = 1e-10


@dataclass
class RunManifest:
    """What a run produced and whether its asserted invariants held."""

    study: str
    config_digest: str
    code_version: str
    started: str
    finished: str
    workers: int
    status: str  # "pass" or "fail"
    failure: str
    artifacts: dict

    def exit_code(self) -> int:
        return 0 if self.status == "pass" else 1


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_csv(path: Path, header: list[str], rows) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [repr(float(v)) if isinstance(v, float) else v for v in row]
        )
    path.write_text(buffer.getvalue(), encoding="utf-8")


def _write_summary(out: Path, cfg: StudyConfig, payload: dict) -> None:
    body = {
        "schema_version": SCHEMA_VERSION,
        "study": cfg.kind,
        "config_digest": cfg.digest,
        "seed": cfg.seed,
    }
    body.update(payload)
    out.joinpath("summary.json").write_text(
        json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _snapshot_times(raw, t_final: float) -> tuple:
    if raw is None:
        return (0.0, t_final)
    return tuple(float(t) for t in raw)


def _run_pde(cfg: StudyConfig, out: Path) -> str:
    p = cfg.params["pde"]
    grid = PeriodicGrid(cfg.kernel.dimension, p["grid_n"])
    f0 = product_density(grid, cfg.profiles)
    solver = MeanFieldSolver(cfg.kernel, grid, p["dt"])
    times = _snapshot_times(p["snapshot_times"], p["t_final"])
    solution = solver.solve(f0, p["t_final"], snapshot_times=times)
    _write_csv(
        out / "pde_snapshots.csv",
        ["time", "mass", "min_value", "max_value"],
        [
            (t, snap.mass(), float(snap.values.min()), float(snap.values.max()))
            for t, snap in ((float(times[i]), solution.snapshot(i)) for i in range(len(times)))
        ],
    )
    _write_csv(
        out / "pde_profile.csv",
        ["time", "node", "value"],
        (
            (float(times[i]), node, float(v))
            for i in range(len(times))
            for node, v in enumerate(solution.states[i].reshape(-1))
        ),
    )
    _write_summary(
        out,
        cfg,
        {
            "grid_n": p["grid_n"],
            "dt": p["dt"],
            "t_final": p["t_final"],
            "mass_drift": solution.mass_drift,
            "min_value": solution.min_value,
        },
    )
    if solution.mass_drift > 1e-8:
        return f"mass drift {solution.mass_drift:.3e} exceeds 1e-8"
    return ""


def _run_particles(cfg: StudyConfig, out: Path) -> str:
    p = cfg.params["particles"]
    times = _snapshot_times(p["snapshot_times"], p["t_final"])
    ensemble = EnsembleConfig(
        kernel=cfg.kernel,
        n_particles=p["n_particles"],
        n_replicas=p["n_replicas"],
        dt=p["dt"],
        t_final=p["t_final"],
        initial=cfg.profiles,
        master_seed=cfg.seed,
        snapshot_times=times,
        drift_coefficient=p["drift_coefficient"],
        force_mode=p["force_mode"],
    )
    result = run_ensemble(ensemble)
    d = cfg.kernel.dimension
    moment_rows = []
    hist_rows = []
    worst_mass_gap = 0.0
    for s, t in enumerate(times):
        pooled = result.pooled(s)
        for axis in range(d):
            angles = 2.0 * np.pi * pooled[:, axis]
            moment_rows.append(
                (
                    float(t),
                    axis,
                    float(np.cos(angles).mean()),
                    float(np.sin(angles).mean()),
                    pooled.shape[0],
                )
            )
        hist = histogram(pooled if d > 1 else pooled[:, 0], p["bins"])
        worst_mass_gap = max(worst_mass_gap, abs(float(hist.masses.sum()) - 1.0))
        for flat_idx, mass in enumerate(hist.masses.reshape(-1)):
            hist_rows.append((float(t), flat_idx, float(mass)))
    _write_csv(
        out / "particle_moments.csv",
        ["time", "axis", "cos_mean", "sin_mean", "sample_count"],
        moment_rows,
    )
    _write_csv(out / "particle_hist.csv", ["time", "bin", "mass"], hist_rows)
    _write_summary(
        out,
        cfg,
        {
            "n_particles": p["n_particles"],
            "n_replicas": p["n_replicas"],
            "bins": p["bins"],
            "snapshot_times": list(times),
        },
    )
    if worst_mass_gap > 1e-12:
        return f"pooled histogram mass gap {worst_mass_gap:.3e}"
    return ""


def _run_liouville(cfg: StudyConfig, out: Path) -> str:
    p = cfg.params["liouville"]
    times = _snapshot_times(p["snapshot_times"], p["t_final"])
    grid = PeriodicGrid(cfg.kernel.dimension, p["grid_n"])
    f0 = product_density(grid, cfg.profiles)
    solver = LiouvilleSolver(cfg.kernel, p["n_particles"], p["grid_n"], p["dt"])
    trajectory = solver.solve(product_initial(f0, p["n_particles"]), p["t_final"], times)
    pde_dt = p["pde_dt"] if p["pde_dt"] > 0 else p["dt"]
    reference = MeanFieldSolver(cfg.kernel, grid, pde_dt).solve(
        f0, p["t_final"], snapshot_times=times
    )
    rows = []
    joint_entropies = []
    failure = ""
    for i, t in enumerate(times):
        joint = trajectory.snapshot(i)
        ref = reference.snapshot(i)
        first_marginal = marginal(joint, 1)
        h_joint = relative_entropy(joint, ref)
        h_marginal = density_relative_entropy(first_marginal, ref)
        audit = ckp_audit(first_marginal, ref, h_marginal)
        joint_entropies.append(h_joint)
        rows.append(
            (
                float(t),
                h_joint,
                h_marginal,
                p["n_particles"] * h_joint,
                audit.l1_value,
                audit.bound,
                audit.holds,
            )
        )
        if h_joint < ENTROPY_FLOOR or h_marginal < ENTROPY_FLOOR:
            failure = failure or f"negative relative entropy at t={t:g}"
        if not audit.holds:
            failure = failure or f"entropy-distance bound violated at t={t:g}"
        if h_marginal > h_joint + 1e-12:
            failure = failure or f"marginal entropy exceeds joint at t={t:g}"
    if times[0] == 0.0 and joint_entropies[0] > INITIAL_ENTROPY_TOL:
        failure = failure or (
            f"product initialization has entropy {joint_entropies[0]:.3e} > {INITIAL_ENTROPY_TOL:g}"
        )
    _write_csv(
        out / "entropy_series.csv",
        [
            "time",
            "joint_relative_entropy",
            "marginal_relative_entropy",
            "scaled_joint_entropy",
            "marginal_l1",
            "entropy_distance_bound",
            "bound_holds",
        ],
        rows,
    )
    svg.series_plot(
        list(times),
        {
            "N x joint entropy": [r[3] for r in rows],
            "marginal entropy": [r[2] for r in rows],
        },
        str(out / "entropy_curves.svg"),
        title=f"Relative entropy, {p['n_particles']} particles",
        ylabel="relative entropy",
    )
    _write_summary(
        out,
        cfg,
        {
            "n_particles": p["n_particles"],
            "grid_n": p["grid_n"],
            "max_scaled_entropy": max(r[3] for r in rows),
            "final_marginal_l1": rows[-1][4],
            "snapshot_times": list(times),
        },
    )
    return failure


def _run_chaos(cfg: StudyConfig, out: Path) -> str:
    c = cfg.params["chaos"]
    study = ChaosStudyConfig(
        kernel=cfg.kernel,
        initial=cfg.profiles,
        ladder=tuple(c["ladder"]),
        n_replicas=c["n_replicas"],
        t_final=c["t_final"],
        dt=c["dt"],
        eval_time=c["eval_time"],
        master_seed=cfg.seed,
        pde_grid_n=c["pde_grid_n"],
        pde_dt=c["pde_dt"],
        bins=c["bins"] if c["bins"] else None,
        snapshot_times=tuple(c["snapshot_times"]),
        drift_coefficient=c["drift_coefficient"],
    )
    report = marginal_error_study(study)
    _write_csv(
        out / "chaos_rows.csv",
        [
            "n_particles",
            "n_replicas",
            "horizon",
            "eval_time",
            "l1_error",
            "std_error",
            "included",
            "reason",
            "seed",
            "replica_offset",
            "config_hash",
        ],
        [
            (
                r.n_particles,
                r.n_replicas,
                r.horizon,
                r.eval_time,
                r.l1_error,
                r.std_error,
                r.included,
                r.reason,
                r.seed,
                r.replica_offset,
                r.config_hash,
            )
            for r in report.rows
        ],
    )
    svg.scaling_plot(report.rows, report.slope, report.intercept, str(out / "chaos_loglog.svg"))
    _write_summary(
        out,
        cfg,
        {
            "bins": report.bins,
            "study_hash": report.config_hash,
            "slope": report.slope,
            "intercept": report.intercept,
            "slope_std_error": report.slope_se,
            "flags": report.flags,
            "included_rows": sum(1 for r in report.rows if r.included),
            "excluded_rows": [
                {"n_particles": r.n_particles, "reason": r.reason}
                for r in report.rows
                if not r.included
            ],
        },
    )
    return ""


def _run_verify(cfg: StudyConfig, out: Path) -> str:
    q = cfg.params["inequalities"]
    rng = np.random.default_rng(cfg.seed)
    instances = []
    n_failures = 0
    for i in range(q["instances"]):
        space, eta = random_instance(rng, max_size=q["max_size"], max_copies=q["max_copies"],
                                     product_joint=(i % 5 == 0))
        audit = change_of_measure_check(space, eta)
        if not audit.holds:
            n_failures += 1
        instances.append(
            {
                "index": i,
                "size": space.size,
                "copies": space.copies,
                "eta": audit.eta,
                "holds": audit.holds,
                "slack": audit.slack,
            }
        )

    failure = ""
    if n_failures:
        failure = f"{n_failures} change-of-measure violations"

    grid = PeriodicGrid(cfg.kernel.dimension, q["exp_grid_n"])
    f = product_density(grid, cfg.profiles)
    entry = tuple(q["entry"]) if len(q["entry"]) == 2 else q["entry"][0]
    psi = build_psi(cfg.kernel, f, entry, eta_max=q["eta_max"])
    psi_block = {
        "entry": list(psi.entry),
        "eta": psi.eta,
        "sup_norm": psi.sup_norm,
        "sup_limit": 1.0 / (2.0 * np.e),
        "centering_residual": psi.centering_residual,
        "hypothesis_met": psi.hypothesis_met,
    }
    if psi.centering_residual > 1e-10:
        failure = failure or f"centering residual {psi.centering_residual:.3e} > 1e-10"
    if not psi.hypothesis_met:
        failure = failure or "psi sup-norm reached the 1/(2e) limit"

    moment_block = None
    if cfg.kernel.dimension == 1:
        report = exp_moment_check(
            psi, f, tuple(q["exp_ladder"]), q["exp_samples"], master_seed=cfg.seed
        )
        moment_block = {
            "rows": [asdict(r) for r in report.rows],
            "no_growth_trend": report.no_growth_trend,
            "trend_slack": report.trend_slack,
            "all_at_least_one": report.all_at_least_one,
        }
        if not report.no_growth_trend:
            failure = failure or "exponential moments grew along the ladder"
        if not report.all_at_least_one:
            failure = failure or "an exponential moment fell below 1"

    report_body = {
        "schema_version": SCHEMA_VERSION,
        "change_of_measure": {
            "n_instances": q["instances"],
            "n_failures": n_failures,
            "instances": instances,
        },
        "psi": psi_block,
        "exp_moment": moment_block,
    }
    out.joinpath("inequality_report.json").write_text(
        json.dumps(report_body, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    _write_summary(
        out,
        cfg,
        {
            "n_instances": q["instances"],
            "n_failures": n_failures,
            "psi": psi_block,
            "exp_moment_trend_ok": None if moment_block is None else moment_block["no_growth_trend"],
        },
    )
    return failure


def _run_bench(cfg: StudyConfig, out: Path) -> str:
    b = cfg.params["bench"]
    rng = np.random.default_rng(cfg.seed)
    positions = rng.random((b["n_particles"], cfg.kernel.dimension))
    timings = {}
    for name, evaluate in (("naive", forces_naive), ("spectral", forces_spectral)):
        best = np.inf
        for _ in range(b["repeats"]):
            start = time.perf_counter()
            evaluate(positions, cfg.kernel)
            best = min(best, time.perf_counter() - start)
        timings[name] = best
    ratio = timings["naive"] / timings["spectral"]
    _write_csv(
        out / "bench_forces.csv",
        ["mode", "n_particles", "repeats", "best_seconds"],
        [
            (name, b["n_particles"], b["repeats"], float(seconds))
            for name, seconds in sorted(timings.items())
        ],
    )
    _write_summary(
        out,
        cfg,
        {
            "n_particles": b["n_particles"],
            "repeats": b["repeats"],
            "speedup_ratio": float(ratio),
        },
    )
    return ""


_RUNNERS = {
    "pde-solve": _run_pde,
    "particles-run": _run_particles,
    "liouville-run": _run_liouville,
    "chaos-study": _run_chaos,
    "verify-inequalities": _run_verify,
    "bench-forces": _run_bench,
}


def run_study(cfg: StudyConfig, out_dir: str | None = None) -> RunManifest:
    """Run one study, persist artifacts, and return the manifest.

    Partial artifacts survive a failing run; the manifest records the
    failure point.  Every file under the output directory except the
    manifest itself is listed with its sha256.
    """
    out = Path(out_dir or cfg.out_dir or Path("runs") / cfg.kind)
    out.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    try:
        failure = _RUNNERS[cfg.kind](cfg, out)
        status = "fail" if failure else "pass"
    except Exception as exc:  # fail-closed: any module error fails the run
        status = "fail"
        failure = f"{type(exc).__name__}: {exc}"
    artifacts = {
        str(path.relative_to(out)): _sha256(path)
        for path in sorted(out.rglob("*"))
        if path.is_file() and path.name != "manifest.json"
    }
    manifest = RunManifest(
        study=cfg.kind,
        config_digest=cfg.digest,
        code_version=__version__,
        started=started,
        finished=_utc_now(),
        workers=cfg.workers,
        status=status,
        failure=failure,
        artifacts=artifacts,
    )
    out.joinpath("manifest.json").write_text(
        json.dumps(asdict(manifest), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest
