"""Small shared helpers."""

from __future__ import annotations


def steps_for(t: float, dt: float) -> int:
    """Number of steps of size dt to reach t; t must sit on the step grid."""
    n = int(round(t / dt))
    if abs(n * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not an integer multiple of dt={dt}")
    return n


def snapshot_lookup(snapshot_times, dt: float, n_steps: int) -> dict[int, list[int]]:
    """Map step index -> positions in the snapshot list, validating bounds."""
    lookup: dict[int, list[int]] = {}
    for i, t in enumerate(snapshot_times):
        idx = steps_for(t, dt)
        if not 0 <= idx <= n_steps:
            raise ValueError(f"snapshot time {t} outside [0, {n_steps * dt}]")
        lookup.setdefault(idx, []).append(i)
    return lookup
