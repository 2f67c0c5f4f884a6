"""Persistence for trajectory sets: compressed npz or CSV with a metadata header."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dynamics import Role, SystemSpec, TrajectorySet

_HEADER_PREFIX = "# "


def _meta(ts: TrajectorySet) -> dict:
    n, t_len, c = ts.data.shape
    return {"system": ts.spec.name, "sigma": ts.spec.noise_scale, "seed": ts.seed,
            "N": n, "T": t_len, "C": c, "role": ts.role.value, "spec": ts.spec.to_dict()}


def save_trajectories(ts: TrajectorySet, path) -> Path:
    """Write ``ts`` to ``path``; the suffix (``.npz`` or ``.csv``) picks the format."""
    path = Path(path)
    if path.suffix == ".npz":
        arrays = {"data": ts.data, "initial_states": ts.initial_states, "traj_ids": ts.traj_ids}
        if ts.clean is not None:
            arrays["clean"] = ts.clean
        np.savez_compressed(path, meta=np.array(json.dumps(_meta(ts))), **arrays)
    elif path.suffix == ".csv":
        n, t_len, c = ts.data.shape
        with open(path, "w", newline="") as fh:
            fh.write(_HEADER_PREFIX + json.dumps(_meta(ts), sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["traj_id", "t"] + [f"c_{k}" for k in range(c)])
            for i in range(n):
                for t in range(t_len):
                    w.writerow([int(ts.traj_ids[i]), t] + [repr(float(v)) for v in ts.data[i, t]])
    else:
        raise ValueError(f"unsupported trajectory file suffix {path.suffix!r}")
    return path


def load_trajectories(path) -> TrajectorySet:
    """Inverse of :func:`save_trajectories`. CSV files carry no clean copy and
    take initial states from the first row of each trajectory."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            clean = z["clean"] if "clean" in z.files else None
            data, init, ids = z["data"], z["initial_states"], z["traj_ids"]
    elif path.suffix == ".csv":
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith(_HEADER_PREFIX):
                raise ValueError(f"{path}: missing metadata header line")
            meta = json.loads(first[len(_HEADER_PREFIX):])
            rows = list(csv.reader(fh))[1:]
        n, t_len, c = meta["N"], meta["T"], meta["C"]
        if len(rows) != n * t_len:
            raise ValueError(f"{path}: expected {n * t_len} rows, found {len(rows)}")
        body = np.array([[float(v) for v in r] for r in rows]).reshape(n, t_len, c + 2)
        ids = body[:, 0, 0].astype(np.int64)
        data = body[:, :, 2:]
        init, clean = data[:, 0].copy(), None
    else:
        raise ValueError(f"unsupported trajectory file suffix {path.suffix!r}")
    spec = SystemSpec.from_dict(meta["spec"])
    if data.shape != (meta["N"], meta["T"], meta["C"]):
        raise ValueError(f"{path}: data shape {data.shape} disagrees with header")
    return TrajectorySet(Role(meta["role"]), data, init, spec, meta["seed"], ids, clean)
