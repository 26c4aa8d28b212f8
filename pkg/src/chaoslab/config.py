"""Study configuration: TOML ingestion, schema validation, typo diagnostics.

A config names one study kind and fills the sections that kind reads.  The
loader walks the file against a declared schema so that the first error a
user sees is precise: unknown keys are rejected with a nearest-key
suggestion, missing required keys are listed exhaustively in one message,
and module preconditions that are checkable before launch (ellipticity
certificate, solver stability bound, profile positivity) are checked here
rather than minutes into a run.
"""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fields import CosineProfile, PeriodicGrid
from .kernels import KernelField, KernelMode, KernelSpec, build_kernel
from .pde import stable_dt

STUDY_KINDS = (
    "pde-solve",
    "particles-run",
    "liouville-run",
    "chaos-study",
    "verify-inequalities",
    "bench-forces",
)

SCHEMA_VERSION = "1"


class ConfigError(Exception):
    """Any reason a config cannot be turned into a runnable study."""


@dataclass(frozen=True)
class Key:
    """One schema entry: expected type, requiredness, default, check."""

    kind: type | tuple
    required: bool = False
    default: object = None
    check: object = None  # callable value -> error string or None


def _positive(v):
    return None if v > 0 else f"must be positive, got {v}"


def _at_least(n):
    def check(v):
        return None if v >= n else f"must be >= {n}, got {v}"

    return check


def _number_list(v):
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return "must be a list of numbers"
    return None


def _int_list(v):
    if not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        return "must be a list of integers"
    return None


_KERNEL_SECTION = {
    "dimension": Key(int, required=True, check=lambda v: None if v in (1, 2, 3) else "must be 1, 2 or 3"),
    "base_level": Key(float, required=True, check=_positive),
    "modes": Key(list, default=[]),
}

_RUN_SECTION = {
    "seed": Key(int, default=0, check=lambda v: None if 0 <= v < 2**64 else "must fit in u64"),
    "out_dir": Key(str, default=""),
    "workers": Key(int, default=1, check=_at_least(1)),
}

_INITIAL_SECTION = {
    "profiles": Key(list, required=True),
}

_SCHEMAS = {
    "pde-solve": {
        "kernel": _KERNEL_SECTION,
        "initial": _INITIAL_SECTION,
        "run": _RUN_SECTION,
        "pde": {
            "grid_n": Key(int, required=True, check=_at_least(4)),
            "dt": Key(float, required=True, check=_positive),
            "t_final": Key(float, required=True, check=_positive),
            "snapshot_times": Key(list, default=None, check=_number_list),
        },
    },
    "particles-run": {
        "kernel": _KERNEL_SECTION,
        "initial": _INITIAL_SECTION,
        "run": _RUN_SECTION,
        "particles": {
            "n_particles": Key(int, required=True, check=_at_least(2)),
            "n_replicas": Key(int, required=True, check=_at_least(1)),
            "dt": Key(float, required=True, check=_positive),
            "t_final": Key(float, required=True, check=_positive),
            "snapshot_times": Key(list, default=None, check=_number_list),
            "drift_coefficient": Key(float, default=2.0),
            "force_mode": Key(str, default="spectral",
                              check=lambda v: None if v in ("naive", "spectral") else "must be naive or spectral"),
            "bins": Key(int, default=8, check=_at_least(2)),
        },
    },
    "liouville-run": {
        "kernel": _KERNEL_SECTION,
        "initial": _INITIAL_SECTION,
        "run": _RUN_SECTION,
        "liouville": {
            "grid_n": Key(int, required=True, check=_at_least(4)),
            "n_particles": Key(int, required=True,
                               check=lambda v: None if v in (2, 3) else "exact joint solves support 2 or 3 particles"),
            "dt": Key(float, required=True, check=_positive),
            "t_final": Key(float, required=True, check=_positive),
            "snapshot_times": Key(list, default=None, check=_number_list),
            "pde_dt": Key(float, default=0.0),
        },
    },
    "chaos-study": {
        "kernel": _KERNEL_SECTION,
        "initial": _INITIAL_SECTION,
        "run": _RUN_SECTION,
        "chaos": {
            "ladder": Key(list, required=True, check=_int_list),
            "n_replicas": Key(int, required=True, check=_at_least(1)),
            "dt": Key(float, required=True, check=_positive),
            "t_final": Key(float, required=True, check=_positive),
            "eval_time": Key(float, required=True, check=_positive),
            "bins": Key(int, default=0, check=_at_least(0)),
            "pde_grid_n": Key(int, default=128, check=_at_least(4)),
            "pde_dt": Key(float, required=True, check=_positive),
            "snapshot_times": Key(list, default=[], check=_number_list),
            "drift_coefficient": Key(float, default=2.0),
        },
    },
    "verify-inequalities": {
        "kernel": _KERNEL_SECTION,
        "initial": {"profiles": Key(list, default=None)},
        "run": _RUN_SECTION,
        "inequalities": {
            "instances": Key(int, default=1000, check=_at_least(1)),
            "max_size": Key(int, default=5, check=_at_least(2)),
            "max_copies": Key(int, default=4, check=_at_least(1)),
            "entry": Key(list, default=[0, 0], check=_int_list),
            "eta_max": Key(float, default=1.0, check=_positive),
            "exp_ladder": Key(list, default=[10, 100, 1000], check=_int_list),
            "exp_samples": Key(int, default=20000, check=_at_least(2)),
            "exp_grid_n": Key(int, default=128, check=_at_least(4)),
        },
    },
    "bench-forces": {
        "kernel": _KERNEL_SECTION,
        "run": _RUN_SECTION,
        "bench": {
            "n_particles": Key(int, default=10000, check=_at_least(2)),
            "repeats": Key(int, default=5, check=_at_least(1)),
        },
    },
}


@dataclass
class StudyConfig:
    """A validated, launch-ready study description."""

    kind: str
    seed: int
    out_dir: str
    workers: int
    kernel: KernelField
    profiles: tuple | None
    params: dict
    digest: str


def _suggest(name: str, valid) -> str:
    close = difflib.get_close_matches(name, list(valid), n=1, cutoff=0.4)
    if close:
        return f"; did you mean {close[0]!r}?"
    return f"; valid keys: {', '.join(sorted(valid))}"


def _coerce(section: str, key: str, spec: Key, value):
    expected = spec.kind
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"[{section}] {key} must be an integer, got a boolean")
    if not isinstance(value, expected):
        name = expected.__name__ if isinstance(expected, type) else str(expected)
        raise ConfigError(
            f"[{section}] {key} must be of type {name}, got {type(value).__name__}"
        )
    if spec.check is not None:
        problem = spec.check(value)
        if problem:
            raise ConfigError(f"[{section}] {key} {problem}")
    return value


def _walk_sections(data: dict, schema: dict, kind: str) -> dict:
    out: dict = {}
    if "study" in data:
        declared = data["study"]
        if declared != kind:
            raise ConfigError(
                f"config declares study {declared!r} but was loaded for {kind!r}"
            )
    known_sections = set(schema) | {"study"}
    for section in data:
        if section not in known_sections:
            raise ConfigError(
                f"unknown section [{section}] for study {kind!r}"
                + _suggest(section, schema.keys())
            )
    missing: list[str] = []
    for section, keys in schema.items():
        present = data.get(section, {})
        if not isinstance(present, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in present:
            if key not in keys:
                raise ConfigError(
                    f"[{section}] unknown key {key!r}" + _suggest(key, keys.keys())
                )
        values = {}
        for key, spec in keys.items():
            if key in present:
                values[key] = _coerce(section, key, spec, present[key])
            elif spec.required:
                missing.append(f"{section}.{key}")
            else:
                values[key] = spec.default
        out[section] = values
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(sorted(missing)))
    return out


def _build_kernel(section: dict) -> KernelField:
    modes = []
    for i, entry in enumerate(section["modes"]):
        if not isinstance(entry, dict):
            raise ConfigError(f"[kernel] modes[{i}] must be a table")
        extra = set(entry) - {"wavevec", "amplitude"}
        if extra:
            raise ConfigError(
                f"[kernel] modes[{i}] unknown key {sorted(extra)[0]!r}"
                + _suggest(sorted(extra)[0], ("wavevec", "amplitude"))
            )
        if "wavevec" not in entry or "amplitude" not in entry:
            raise ConfigError(f"[kernel] modes[{i}] needs wavevec and amplitude")
        modes.append(KernelMode(tuple(entry["wavevec"]), np.array(entry["amplitude"], dtype=float)))
    try:
        return build_kernel(
            KernelSpec(
                dimension=section["dimension"],
                base_level=section["base_level"],
                modes=tuple(modes),
            )
        )
    except ValueError as exc:
        raise ConfigError(f"[kernel] {exc}") from exc


def _build_profiles(raw, dimension: int) -> tuple:
    if not isinstance(raw, list) or len(raw) != dimension:
        raise ConfigError(
            f"[initial] profiles must list {dimension} per-axis mode tables, "
            f"each a list of [wavenumber, amplitude] pairs"
        )
    profiles = []
    for axis, modes in enumerate(raw):
        if not isinstance(modes, list):
            raise ConfigError(f"[initial] profiles[{axis}] must be a list of pairs")
        pairs = []
        for pair in modes:
            if not (isinstance(pair, list) and len(pair) == 2):
                raise ConfigError(
                    f"[initial] profiles[{axis}] entries must be [wavenumber, amplitude] pairs"
                )
            pairs.append((pair[0], pair[1]))
        try:
            profiles.append(CosineProfile(modes=tuple(pairs)))
        except ValueError as exc:
            raise ConfigError(f"[initial] profiles[{axis}]: {exc}") from exc
    return tuple(profiles)


def _check_preconditions(kind: str, kernel: KernelField, params: dict):
    """Module preconditions that are cheap to evaluate before launch."""
    if kind == "pde-solve":
        p = params["pde"]
        grid = PeriodicGrid(kernel.dimension, p["grid_n"])
        bound = stable_dt(kernel, grid)
        if p["dt"] > bound * (1 + 1e-12):
            raise ConfigError(
                f"[pde] dt={p['dt']:g} exceeds the stability bound {bound:g} "
                f"at grid_n={p['grid_n']}"
            )
    if kind == "chaos-study":
        c = params["chaos"]
        if not c["eval_time"] <= c["t_final"]:
            raise ConfigError("[chaos] eval_time must not exceed t_final")
        if sorted(set(c["ladder"])) != list(c["ladder"]) or min(c["ladder"], default=0) < 2:
            raise ConfigError("[chaos] ladder must be strictly increasing counts >= 2")
        grid = PeriodicGrid(kernel.dimension, c["pde_grid_n"])
        bound = stable_dt(kernel, grid)
        if c["pde_dt"] > bound * (1 + 1e-12):
            raise ConfigError(
                f"[chaos] pde_dt={c['pde_dt']:g} exceeds the stability bound {bound:g}"
            )
    if kind == "verify-inequalities":
        entry = params["inequalities"]["entry"]
        if len(entry) not in (1, 2):
            raise ConfigError(
                "[inequalities] entry must be [alpha] for a drift component "
                "or [alpha, beta] for a matrix entry"
            )


def _digest(kind: str, seed: int, data: dict) -> str:
    canonical = json.dumps({"study": kind, "seed": seed, "params": data}, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: str, kind: str, overrides: dict | None = None) -> StudyConfig:
    """Parse, validate and freeze one study config.

    overrides maps {'seed', 'out_dir', 'workers'} to values that take
    precedence over the file (flag > file > default).
    """
    if kind not in STUDY_KINDS:
        raise ConfigError(f"unknown study kind {kind!r}; expected one of {', '.join(STUDY_KINDS)}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    values = _walk_sections(data, _SCHEMAS[kind], kind)
    run = values.pop("run")
    overrides = overrides or {}
    seed = overrides.get("seed") if overrides.get("seed") is not None else run["seed"]
    out_dir = overrides.get("out_dir") or run["out_dir"]
    workers = overrides.get("workers") if overrides.get("workers") is not None else run["workers"]
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    kernel = _build_kernel(values.pop("kernel"))
    profiles = None
    if "initial" in values:
        raw = values.pop("initial")["profiles"]
        if raw is None:
            profiles = tuple(CosineProfile(modes=()) for _ in range(kernel.dimension))
        else:
            profiles = _build_profiles(raw, kernel.dimension)
    _check_preconditions(kind, kernel, values)

    serializable = {
        "kernel": {
            "dimension": kernel.dimension,
            "base_level": kernel.spec.base_level,
            "modes": [
                {"wavevec": list(m.wavevec), "amplitude": np.asarray(m.amplitude).tolist()}
                for m in kernel.spec.modes
            ],
        },
        "profiles": None if profiles is None else [[list(m) for m in p.modes] for p in profiles],
        "sections": values,
    }
    return StudyConfig(
        kind=kind,
        seed=int(seed),
        out_dir=out_dir,
        workers=int(workers),
        kernel=kernel,
        profiles=profiles,
        params=values,
        digest=_digest(kind, int(seed), serializable),
    )
