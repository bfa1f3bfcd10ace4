"""Binary artifact formats: checkpoints and demonstration datasets.

Both formats open with an 8-byte magic string and a little-endian u32
version. Checkpoints carry a length-prefixed JSON manifest (tensor names,
shapes, plus arbitrary structural metadata such as ranks, expert counts and
freeze flags) followed by raw float32 blobs in manifest order, so round
trips are bit-exact. Demo files store flat float32 observation/action
arrays behind per-trajectory headers.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import ContractViolation
from .world import Trajectory

CKPT_MAGIC = b"PEELCKPT"
DEMO_MAGIC = b"PEELDEMO"
VERSION = 1


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise ContractViolation(
            f"truncated file while reading {what}: wanted {n} bytes at offset "
            f"{f.tell() - len(data)}, got {len(data)}")
    return data


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors, meta=None):
    """Write named float32 arrays plus a JSON metadata dict.

    `tensors` is an ordered mapping name -> ndarray; blob order follows it.
    """
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back; returns (tensors dict, meta dict)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != CKPT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic {magic!r} at offset 0")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise ContractViolation(f"unsupported checkpoint version {version} at offset 8")
        (mlen,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
        manifest = json.loads(_read_exact(f, mlen, "manifest"))
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = _read_exact(f, 4 * count, f"tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return tensors, manifest.get("meta", {})


# -------------------------------------------------------------------- demos


def save_demos(path, trajectories):
    """Write a demonstration dataset.

    Layout after the magic/version header: u32 trajectory count, u32
    observation width, u32 action width, then per trajectory a header
    (u32 steps, u32 success, u64 reset seed) followed by (steps+1, obs)
    observations and (steps, act) actions as little-endian float32.
    """
    if not trajectories:
        raise ContractViolation("refusing to write an empty demo file")
    obs_dim = trajectories[0].observations.shape[1]
    act_dim = trajectories[0].actions.shape[1]
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write(struct.pack("<III", VERSION, len(trajectories), obs_dim))
        f.write(struct.pack("<I", act_dim))
        for traj in trajectories:
            obs = np.ascontiguousarray(traj.observations, dtype="<f4")
            act = np.ascontiguousarray(traj.actions, dtype="<f4")
            if obs.shape != (traj.steps + 1, obs_dim) or act.shape != (traj.steps, act_dim):
                raise ContractViolation(
                    f"inconsistent trajectory shapes obs {obs.shape} act {act.shape}")
            f.write(struct.pack("<IIQ", traj.steps, int(traj.success), traj.seed))
            f.write(obs.tobytes())
            f.write(act.tobytes())


def load_demos(path):
    """Read a demonstration dataset back into Trajectory objects."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != DEMO_MAGIC:
            raise ContractViolation(f"bad demo magic {magic!r} at offset 0")
        version, count, obs_dim, act_dim = struct.unpack(
            "<IIII", _read_exact(f, 16, "header"))
        if version != VERSION:
            raise ContractViolation(f"unsupported demo version {version} at offset 8")
        out = []
        for i in range(count):
            steps, success, seed = struct.unpack(
                "<IIQ", _read_exact(f, 16, f"trajectory {i} header"))
            obs = np.frombuffer(
                _read_exact(f, 4 * (steps + 1) * obs_dim, f"trajectory {i} observations"),
                dtype="<f4").reshape(steps + 1, obs_dim).copy()
            act = np.frombuffer(
                _read_exact(f, 4 * steps * act_dim, f"trajectory {i} actions"),
                dtype="<f4").reshape(steps, act_dim).copy()
            out.append(Trajectory(obs, act, bool(success), seed))
    return out
