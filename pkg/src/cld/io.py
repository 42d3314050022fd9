"""On-disk formats: scenario JSONL, latent cache, run logs, flat config files.

All JSON is written with sorted keys and Python's round-trip float repr so
equal inputs give byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import AgentState, ContextBatch, Scenario, SemanticMap
from .diffusion import LatentDataset
from .errors import SchemaError
from .scenarios import Demonstration, ScriptedNeighbor
from .simulation import ClosedLoopRun, ReplanRecord
from .core import Trajectory

SCENARIO_SCHEMA = "cld-scenario-v1"
LATENTS_SCHEMA = "cld-latents-v1"
RUN_SCHEMA = "cld-run-v1"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _check_schema(obj: dict, expected: str, where: str):
    got = obj.get("schema")
    if got != expected:
        raise SchemaError(f"{where}: field 'schema' is {got!r}, expected {expected!r}")


# ---- run-length encoding of boolean rasters ------------------------------------

def rle_encode(grid: np.ndarray) -> dict:
    """Row-major runs, alternating starting with False."""
    flat = np.asarray(grid, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"shape": list(grid.shape), "runs": runs}


def rle_decode(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    runs = np.asarray(d["runs"], dtype=np.int64)
    if runs.sum() != int(np.prod(shape)):
        raise SchemaError("map.runs do not add up to the raster size")
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs).reshape(shape)


# ---- scenarios -------------------------------------------------------------------

def scenario_to_dict(scn: Scenario, demo: Demonstration | None = None) -> dict:
    m = scn.map
    d = {
        "schema": SCENARIO_SCHEMA,
        "name": scn.name,
        "duration": scn.duration,
        "map": {"origin_x": m.origin_x, "origin_y": m.origin_y, "resolution": m.resolution,
                "grid": rle_encode(m.grid)},
        "agents": [a.as_array().tolist() for a in scn.agents],
        "neighbors": [{"path": p.path.tolist(), "speed_knots": p.speed_knots.tolist(), "start_s": p.start_s,
                       "kind": getattr(p, "kind", "other")} for p in scn.neighbor_policies],
        "ego_route": scn.ego_route.tolist(),
        "ego_target_speed": scn.ego_target_speed,
        "ego_lateral_offset": scn.ego_lateral_offset,
    }
    if demo is not None:
        d["demonstration"] = {"states": demo.states.tolist(), "actions": demo.actions.tolist()}
    return d


def scenario_from_dict(d: dict, where: str = "scenario"):
    _check_schema(d, SCENARIO_SCHEMA, where)
    mp = _require(d, "map", where)
    grid = rle_decode(_require(mp, "grid", where + ".map"))
    smap = SemanticMap(grid, float(mp["origin_x"]), float(mp["origin_y"]), float(mp["resolution"]))
    agents = [AgentState.from_array(a) for a in _require(d, "agents", where)]
    nbs = [ScriptedNeighbor(np.array(n["path"]), np.array(n["speed_knots"]), float(n["start_s"]),
                            kind=n.get("kind", "other")) for n in _require(d, "neighbors", where)]
    scn = Scenario(smap, agents, nbs, float(_require(d, "duration", where)), np.array(_require(d, "ego_route", where)),
                   float(_require(d, "ego_target_speed", where)), float(d.get("ego_lateral_offset", 0.0)),
                   d.get("name", ""))
    demo = None
    if "demonstration" in d:
        demo = Demonstration(np.array(d["demonstration"]["states"], dtype=np.float64),
                             np.array(d["demonstration"]["actions"], dtype=np.float64))
    return scn, demo


def save_scenarios(path, scenarios, demos=None) -> None:
    demos = demos if demos is not None else [None] * len(scenarios)
    with open(path, "w") as fh:
        for s, d in zip(scenarios, demos):
            fh.write(_dumps(scenario_to_dict(s, d)) + "\n")


def load_scenarios(path):
    scenarios, demos = [], []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{i + 1}: not valid JSON ({exc})") from None
            s, d = scenario_from_dict(obj, f"{path}:{i + 1}")
            scenarios.append(s)
            demos.append(d)
    return scenarios, demos


# ---- binary array bundles (latents) -------------------------------------------

def _write_bundle(path, schema: str, arrays: dict, meta: dict):
    names = list(arrays)
    header = {"schema": schema, "entries": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
              "meta": meta}
    with open(path, "wb") as fh:
        fh.write(_dumps(header).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def _read_bundle(path, schema: str):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl]) if nl >= 0 else None
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict):
        raise SchemaError(f"{path}: missing or unreadable header")
    _check_schema(header, schema, str(path))
    out, off = {}, nl + 1
    for e in _require(header, "entries", str(path)):
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = raw[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise SchemaError(f"{path}: payload truncated at entry {e['name']!r}")
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
        off += 8 * n
    if off != len(raw):
        raise SchemaError(f"{path}: trailing payload bytes")
    return out, header.get("meta", {})


def save_latents(path, data: LatentDataset, meta: dict | None = None):
    c = data.contexts
    _write_bundle(path, LATENTS_SCHEMA, {
        "latents": data.latents, "map_crop": c.map_crop, "history": c.history,
        "mask": c.mask.astype(np.float64), "ego_now": c.ego_now,
        "scenario_ids": data.scenario_ids.astype(np.float64)}, meta or {})


def load_latents(path) -> tuple[LatentDataset, dict]:
    a, meta = _read_bundle(path, LATENTS_SCHEMA)
    for k in ("latents", "map_crop", "history", "mask", "ego_now", "scenario_ids"):
        if k not in a:
            raise SchemaError(f"{path}: missing entry {k!r}")
    ctx = ContextBatch(a["map_crop"], a["history"], a["mask"] > 0.5, a["ego_now"])
    return LatentDataset(a["latents"], ctx, a["scenario_ids"].astype(int)), meta


# ---- run logs -------------------------------------------------------------------

def run_to_dict(run: ClosedLoopRun) -> dict:
    return {
        "scenario_index": run.scenario_index,
        "scenario_name": run.scenario_name,
        "start_step": run.start_step,
        "dt": run.trajectory.dt,
        "states": run.trajectory.states.tolist(),
        "actions": run.trajectory.actions.tolist(),
        "warmup_states": run.warmup_states.tolist(),
        "neighbor_tracks": run.neighbor_tracks.tolist(),
        "replans": [{"step": r.step, "plan": r.plan.tolist(),
                     "z0": None if r.z0 is None else r.z0.tolist()} for r in run.replans],
        "collided": run.collided,
        "went_offroad": run.went_offroad,
    }


def run_from_dict(d: dict, where: str = "run") -> ClosedLoopRun:
    for k in ("states", "actions", "dt", "collided", "went_offroad", "replans"):
        _require(d, k, where)
    traj = Trajectory(np.array(d["states"], dtype=np.float64), np.array(d["actions"], dtype=np.float64),
                      float(d["dt"]))
    l = None
    reps = []
    for r in d["replans"]:
        plan = np.array(r["plan"], dtype=np.float64)
        reps.append(ReplanRecord(int(r["step"]), plan, plan[:0], None if r.get("z0") is None else np.array(r["z0"])))
    n_ctl = traj.actions.shape[0]
    if reps:
        l = n_ctl // len(reps)
        for r in reps:
            r.executed = r.plan[:l]
    tracks = np.array(d.get("neighbor_tracks", []), dtype=np.float64).reshape(-1, traj.states.shape[0], 4)
    return ClosedLoopRun(int(d.get("scenario_index", 0)), d.get("scenario_name", ""), int(d.get("start_step", 0)),
                         traj, np.array(d.get("warmup_states", []), dtype=np.float64).reshape(-1, 4), tracks, reps,
                         None, bool(d["collided"]), bool(d["went_offroad"]))


def save_runs(path, runs, meta: dict | None = None):
    with open(path, "w") as fh:
        fh.write(_dumps({"schema": RUN_SCHEMA, "meta": meta or {}}) + "\n")
        for r in runs:
            fh.write(_dumps(run_to_dict(r)) + "\n")


def load_runs(path):
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty run log")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError:
        raise SchemaError(f"{path}: unreadable run-log header") from None
    _check_schema(head, RUN_SCHEMA, str(path))
    return [run_from_dict(json.loads(ln), f"{path}:{i + 2}") for i, ln in enumerate(lines[1:])], head.get("meta", {})


# ---- flat key=value config ----------------------------------------------------------

def parse_config(text: str, known: dict, where: str = "config") -> dict:
    """Parse ``key = value`` lines (``#`` comments) against ``known`` {key: type}.

    Unknown keys and unparsable values raise SchemaError naming the key.
    """
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{where}:{no}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise SchemaError(f"{where}:{no}: unknown field {key!r}")
        typ = known[key]
        try:
            if typ is bool:
                if val.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(val)
                out[key] = val.lower() in ("true", "1")
            else:
                out[key] = typ(val)
        except ValueError:
            raise SchemaError(f"{where}:{no}: field {key!r} cannot be read as {typ.__name__}: {val!r}") from None
    return out


def read_config(path, known: dict) -> dict:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(), known, str(path))
