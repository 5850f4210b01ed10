"""Deterministic artifact writers.

Every artifact embeds the config hash and master seed; identical
(config, seed) pairs reproduce identical bytes. Floats are serialized with
their shortest round-trip representation.
"""

import json
import os

from .augmented import Trajectory

TRAJECTORY_SCHEMA = 1


def _fmt(v) -> str:
    return repr(float(v))


def write_json(path, payload: dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def envelope(config_hash: str, seed: int, command: str, data: dict) -> dict:
    return {"schema_version": TRAJECTORY_SCHEMA, "config_hash": config_hash,
            "seed": int(seed), "command": command, **data}


def trajectory_columns(n: int, p: int) -> list:
    return (["t_hours"] + [f"x{i + 1}" for i in range(n)]
            + [f"theta_hat_{i + 1}" for i in range(p)]
            + ["u", "y1", "y2", "stage_cost"])


def write_trajectory_csv(path, traj: Trajectory, config_hash: str):
    """Fixed-column CSV; measurement columns blank off the calendar, the
    terminal row carries the terminal cost and no control."""
    n = traj.x.shape[1]
    p = traj.theta_hat.shape[1]
    cols = trajectory_columns(n, p)
    lines = [f"# config_hash={config_hash} seed={traj.seed}", ",".join(cols)]
    n_steps = traj.ts.n_steps
    for t in range(n_steps + 1):
        row = [str(t)]
        row += [_fmt(v) for v in traj.x[t]]
        row += [_fmt(v) for v in traj.theta_hat[t]]
        row.append(_fmt(traj.u[t]) if t < n_steps else "")
        if t in traj.y:
            row += [_fmt(traj.y[t][0]), _fmt(traj.y[t][1])]
        else:
            row += ["", ""]
        row.append(_fmt(traj.stage_costs[t]) if t < n_steps else _fmt(traj.terminal_cost))
        lines.append(",".join(row))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def trajectory_json(traj: Trajectory) -> dict:
    data = {
        "t_hours": list(range(traj.ts.n_steps + 1)),
        "x": [[float(v) for v in row] for row in traj.x],
        "theta_hat": [[float(v) for v in row] for row in traj.theta_hat],
        "u": [float(v) for v in traj.u],
        "y": {str(t): [float(v) for v in y] for t, y in sorted(traj.y.items())},
        "stage_costs": [float(v) for v in traj.stage_costs],
        "terminal_cost": float(traj.terminal_cost),
        "total_cost": traj.total_cost,
        "clamp_warnings": int(traj.clamp_warnings),
    }
    if traj.theta_true is not None:
        data["theta_true"] = [float(v) for v in traj.theta_true]
    if traj.plant_x is not None:
        data["plant_x"] = [[float(v) for v in row] for row in traj.plant_x]
    return data
